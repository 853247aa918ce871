//! Training runs: warm-up and BP batches train the model and the predictor on
//! true gradients, GP batches update the model from predicted gradients during
//! the forward sweep without any backward pass.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{zoo, GradientKind, GradientSet, Model, ModelSpec};
use crate::optim::{LrScheduler, LrSchedulerConfig, Optimizer, OptimizerConfig};
use crate::predictor::{reorganize, PredictionMask, PredictorConfig, PredictorNet};
use crate::rng::{self, streams};
use crate::scheduler::{phase_fractions, unroll, Phase, PhaseCounts, PhaseFractions, PhaseState, ScheduleParams};
use crate::tensor::{cosine_similarity, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Zoo model name.
    pub model: String,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub schedule: ScheduleParams,
    pub model_optimizer: OptimizerConfig,
    pub predictor_optimizer: OptimizerConfig,
    /// Learning-rate policy for the model, stepped on the epoch's mean training loss.
    pub lr_scheduler: LrSchedulerConfig,
    pub predictor: PredictorConfig,
    /// Plain backpropagation on every batch; no predictor is built.
    pub baseline: bool,
    /// Record per-epoch wall-clock time. Off by default so outputs are reproducible.
    pub record_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "mini_cnn".into(),
            dataset: DatasetSpec::stripes_default(),
            seed: 0,
            epochs: 20,
            batch_size: 32,
            schedule: ScheduleParams::default(),
            model_optimizer: OptimizerConfig::model_default(),
            predictor_optimizer: OptimizerConfig::predictor_default(),
            lr_scheduler: LrSchedulerConfig::plateau_default(),
            predictor: PredictorConfig::default(),
            baseline: false,
            record_wall_clock: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !zoo::NAMES.contains(&self.model.as_str()) {
            return Err(Error::Config(format!(
                "unknown model {:?}; expected one of {:?}",
                self.model,
                zoo::NAMES
            )));
        }
        self.dataset.validate()?;
        self.schedule.validate()?;
        self.model_optimizer.validate()?;
        self.predictor_optimizer.validate()?;
        self.lr_scheduler.validate()?;
        self.predictor.validate()
    }
}

/// What one warm-up or BP batch produced.
#[derive(Clone, Debug, PartialEq)]
pub struct BpOutcome {
    pub loss: f64,
    /// Mean predictor loss over layers; `None` without a predictor.
    pub predictor_loss: Option<f64>,
    /// Mean cosine similarity between the (unapplied) predictions and the true gradients.
    pub cosine: Option<f64>,
}

/// The model, its optimizer and (unless running the baseline) the one shared predictor.
#[derive(Debug)]
pub struct Trainer {
    model: Model,
    model_opt: Optimizer,
    predictor: Option<PredictorNet>,
    predictor_opt: Optimizer,
    masks: Vec<PredictionMask>,
}

impl Trainer {
    pub fn new(
        spec: ModelSpec,
        seed: u64,
        model_opt: OptimizerConfig,
        predictor: Option<(PredictorConfig, OptimizerConfig)>,
    ) -> Result<Self> {
        let model = Model::build(spec, seed)?;
        let (net, popt, masks) = match predictor {
            Some((cfg, popt)) => {
                let kinds = model.trainable_kinds();
                let mut r = rng::stream(seed, streams::PREDICTOR_INIT);
                let net = PredictorNet::for_layers(&kinds, cfg, &mut r)?;
                let masks = kinds
                    .iter()
                    .map(|k| PredictionMask::for_layer(k, cfg.predict_bias))
                    .collect::<Result<_>>()?;
                (Some(net), popt, masks)
            }
            None => (None, OptimizerConfig::predictor_default(), Vec::new()),
        };
        Ok(Self {
            model,
            model_opt: Optimizer::new(model_opt),
            predictor: net,
            predictor_opt: Optimizer::new(popt),
            masks,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn predictor(&self) -> Option<&PredictorNet> {
        self.predictor.as_ref()
    }

    pub fn predictor_mut(&mut self) -> Option<&mut PredictorNet> {
        self.predictor.as_mut()
    }

    /// Number of predictor parameter stores owned by this run (0 or 1).
    pub fn predictor_stores(&self) -> usize {
        usize::from(self.predictor.is_some())
    }

    pub fn model_optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.model_opt
    }

    /// Warm-up and BP batches: the model takes one step on its true gradients and
    /// the predictor trains on every layer, last layer first. Predictions are
    /// made along the way but never applied.
    pub fn train_batch_bp(&mut self, batch: &Tensor, labels: &[usize]) -> Result<BpOutcome> {
        let (loss, trace) = self.model.forward_collect(batch, labels)?;
        let grads = self.model.backward_collect()?;
        let (mut ploss, mut cos) = (None, None);
        if let Some(net) = self.predictor.as_mut() {
            let kinds = self.model.trainable_kinds();
            let (mut lsum, mut csum) = (0.0, 0.0);
            for t in (0..kinds.len()).rev() {
                let reorg = reorganize(&trace.activations[t], &kinds[t], t)?;
                let (l, pred) = net.train_step(&reorg, &grads.entries[t], &self.masks[t], &mut self.predictor_opt)?;
                lsum += l;
                csum += cosine_similarity(&pred.flatten(), &grads.entries[t].flatten());
            }
            let n = kinds.len() as f64;
            ploss = Some(lsum / n);
            cos = Some(csum / n);
        }
        self.model.apply_gradients(&grads, &mut self.model_opt)?;
        Ok(BpOutcome { loss, predictor_loss: ploss, cosine: cos })
    }

    /// GP batches: each trainable layer is updated from the predictor's output
    /// as soon as the layer's activations exist. The predictor is not trained
    /// and labels only feed the reported loss.
    pub fn train_batch_gp(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let net = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::State("a GP batch needs a predictor".into()))?;
        let masks = &self.masks;
        self.model.forward_with_updates(batch, labels, &mut self.model_opt, |t, kind, y| {
            let reorg = reorganize(y, kind, t)?;
            net.predict(&reorg, &masks[t])
        })
    }

    /// Predicted gradients for every layer at the current parameters, without updating anything.
    pub fn predicted_gradients(&mut self, batch: &Tensor, labels: &[usize]) -> Result<GradientSet> {
        let net = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::State("no predictor in a baseline run".into()))?;
        let (_, trace) = self.model.forward_collect(batch, labels)?;
        let kinds = self.model.trainable_kinds();
        let entries = (0..kinds.len())
            .map(|t| net.predict(&reorganize(&trace.activations[t], &kinds[t], t)?, &self.masks[t]))
            .collect::<Result<_>>()?;
        Ok(GradientSet { kind: GradientKind::Predicted, entries })
    }
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let logits = model.logits(&data.inputs.slice_outer(start, end))?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One row per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub phases: PhaseCounts,
    /// `m` in force during the epoch.
    pub m: u32,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub predictor_loss: Option<f64>,
    pub cosine: Option<f64>,
    /// Cumulative `backward_collect` calls at the end of the epoch.
    pub backward_calls: u64,
    pub wall_clock_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str = "format_version,epoch,warmup_batches,bp_batches,gp_batches,m,learning_rate,\
train_loss,eval_accuracy,predictor_loss,cosine,backward_calls,wall_clock_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn totals(&self) -> PhaseCounts {
        let mut c = PhaseCounts::default();
        self.records.iter().for_each(|r| c.add(&r.phases));
        c
    }

    pub fn fractions(&self) -> Result<PhaseFractions> {
        phase_fractions(&self.totals())
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_accuracy)
    }

    /// Empty fields mark metrics that do not apply (no predictor, or no BP batch).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{FORMAT_VERSION},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.phases.warmup,
                r.phases.bp,
                r.phases.gp,
                r.m,
                r.learning_rate,
                r.train_loss,
                r.eval_accuracy,
                opt(r.predictor_loss),
                opt(r.cosine),
                r.backward_calls,
                r.wall_clock_ms
            )
            .unwrap();
        }
        s
    }
}

/// A finished run.
#[derive(Debug)]
pub struct RunOutcome {
    pub log: MetricsLog,
    pub trainer: Trainer,
    /// Phase tag of every batch, in order.
    pub tags: Vec<Phase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub baseline: bool,
    pub epochs: u32,
    pub final_eval_accuracy: f64,
    pub phase_counts: PhaseCounts,
    pub phase_fractions: PhaseFractions,
    pub backward_calls: u64,
    pub model_parameters: usize,
    pub predictor_parameters: usize,
    pub predictor_stores: usize,
    pub phase_tags: String,
}

impl RunOutcome {
    pub fn summary(&self, config: &RunConfig) -> Result<RunSummary> {
        Ok(RunSummary {
            format_version: FORMAT_VERSION,
            model: config.model.clone(),
            dataset: config.dataset.name().into(),
            seed: config.seed,
            baseline: config.baseline,
            epochs: config.epochs,
            final_eval_accuracy: self.log.final_accuracy().unwrap_or(0.0),
            phase_counts: self.log.totals(),
            phase_fractions: self.log.fractions()?,
            backward_calls: self.trainer.model().backward_calls(),
            model_parameters: self.trainer.model().parameter_count(),
            predictor_parameters: self.trainer.predictor().map_or(0, PredictorNet::parameter_count),
            predictor_stores: self.trainer.predictor_stores(),
            phase_tags: self.tags.iter().map(|p| p.letter()).collect(),
        })
    }
}

/// Builds the zoo model named in `config` for the dataset's sample shape.
pub fn model_spec_for(config: &RunConfig, data: &Dataset) -> Result<ModelSpec> {
    zoo::by_name(&config.model, data.sample_shape(), data.classes)
}

/// Batch counts per phase that `run_experiment` will produce for a training
/// set of `train_len` samples.
pub fn planned_phases(config: &RunConfig, train_len: usize) -> Result<PhaseCounts> {
    config.validate()?;
    let per_epoch = train_len.div_ceil(config.batch_size);
    let mut counts = PhaseCounts::default();
    if config.baseline {
        counts.bp = u64::from(config.epochs) * per_epoch as u64;
    } else {
        unroll(config.schedule, config.epochs, per_epoch)?.iter().flatten().for_each(|&p| counts.record(p));
    }
    Ok(counts)
}

/// Runs a full experiment on already loaded data.
pub fn run_experiment(config: &RunConfig, train: &Dataset, eval: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    if train.sample_shape() != eval.sample_shape() || train.classes != eval.classes {
        return Err(Error::Data("training and evaluation sets disagree on sample shape or classes".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let spec = model_spec_for(config, train)?;
    let predictor = (!config.baseline).then_some((config.predictor, config.predictor_optimizer));
    let mut trainer = Trainer::new(spec, config.seed, config.model_optimizer, predictor)?;
    let mut lr_sched = LrScheduler::new(config.lr_scheduler.clone(), config.model_optimizer.learning_rate);
    let mut phases = PhaseState::new(config.schedule)?;
    let mut shuffle = rng::stream(config.seed, streams::SHUFFLE);
    let mut log = MetricsLog::default();
    let mut tags = Vec::new();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut counts = PhaseCounts::default();
        let m = phases.m();
        let (mut loss_sum, mut ploss, mut cos) = (0.0, Vec::new(), Vec::new());
        let batches = epoch_batches(train.len(), config.batch_size, &mut shuffle);
        for idx in &batches {
            let (x, y) = train.subset(idx);
            let phase = if config.baseline { Phase::Bp } else { phases.next_batch_phase() };
            counts.record(phase);
            tags.push(phase);
            if phase.uses_backprop() {
                let out = trainer.train_batch_bp(&x, &y)?;
                loss_sum += out.loss;
                ploss.extend(out.predictor_loss);
                cos.extend(out.cosine);
            } else {
                loss_sum += trainer.train_batch_gp(&x, &y)?;
            }
        }
        if !config.baseline {
            phases.end_of_epoch();
        }
        let train_loss = loss_sum / batches.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite { context: format!("training loss in epoch {epoch}") });
        }
        let learning_rate = trainer.model_opt.learning_rate();
        trainer.model_opt.set_learning_rate(lr_sched.step(train_loss));
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        log.records.push(EpochRecord {
            epoch,
            phases: counts,
            m,
            learning_rate,
            train_loss,
            eval_accuracy: evaluate(trainer.model(), eval)?,
            predictor_loss: mean(&ploss),
            cosine: mean(&cos),
            backward_calls: trainer.model().backward_calls(),
            wall_clock_ms: if config.record_wall_clock { started.elapsed().as_millis() as u64 } else { 0 },
        });
    }
    Ok(RunOutcome { log, trainer, tags })
}

/// Checkpoint record: model spec, flat parameters and the predictor, as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub params: Vec<crate::layers::Params>,
    pub predictor: Option<PredictorNet>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            spec: trainer.model().spec().clone(),
            params: trainer.model().trainable_params().into_iter().cloned().collect(),
            predictor: trainer.predictor().cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                c.format_version
            )));
        }
        Ok(c)
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(self.spec, self.params)
    }
}
