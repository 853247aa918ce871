//! Analytic single-chip timeline.
//!
//! Time is measured in steps, one step being the forward pass of one layer.
//! A baseline batch costs `N (1 + bw)`. Training the predictor alongside
//! (warm-up and BP batches) scales every layer's forward and backward work by
//! `1 + alpha`; a GP batch runs only the forward sweep plus predictions,
//! `N (1 + alpha)`. The per-layer composition generalizes this to uneven layer
//! costs and to the three hardware variants.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::model::ModelSpec;
use crate::predictor::{predictor_macs, PredictorConfig, PredictorNet};
use crate::scheduler::PhaseFractions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataflow {
    Ws,
    Os,
    Is,
    Rs,
}

impl Dataflow {
    pub const ALL: [Dataflow; 4] = [Dataflow::Ws, Dataflow::Os, Dataflow::Is, Dataflow::Rs];

    /// Multiplier on the ideal `ceil(MACs / PEs)` cycle count for array fill and
    /// drain. Weight stationary is the reference; the others pay for moving
    /// partial sums (OS), re-broadcasting weights (IS) or row setup (RS).
    pub fn overhead_factor(self) -> f64 {
        match self {
            Dataflow::Ws => 1.0,
            Dataflow::Os => 1.0625,
            Dataflow::Is => 1.125,
            Dataflow::Rs => 1.03125,
        }
    }
}

impl fmt::Display for Dataflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataflow::Ws => "ws",
            Dataflow::Os => "os",
            Dataflow::Is => "is",
            Dataflow::Rs => "rs",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No predictor at all.
    Baseline,
    /// Predictor runs on its own hardware in parallel with the layer.
    Max,
    /// Predictor shares the array; costs add.
    Efficient,
    /// Shared array plus loading predictor weights and storing its results.
    Low,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Max => "max",
            Variant::Efficient => "efficient",
            Variant::Low => "low",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepPhase {
    Baseline,
    Bp,
    Gp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Layer count `N` for the uniform model.
    pub layers: usize,
    /// Predictor forward cost as a fraction of one (mean) layer forward.
    pub alpha: f64,
    /// Backward cost over forward cost.
    pub bw_ratio: f64,
    pub pe_count: u64,
    pub dataflow: Dataflow,
    pub variant: Variant,
    /// LOW variant: predictor weight load plus result store per predictor
    /// invocation, as a fraction of the mean layer forward.
    pub load_store: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            layers: 4,
            alpha: 0.02,
            bw_ratio: 2.0,
            pe_count: 180,
            dataflow: Dataflow::Ws,
            variant: Variant::Efficient,
            load_store: 0.01,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.bw_ratio > 0.0 && self.bw_ratio.is_finite()) {
            return Err(Error::Config(format!("bw_ratio must be positive, got {}", self.bw_ratio)));
        }
        if self.pe_count < 1 {
            return Err(Error::Config("pe_count must be at least 1".into()));
        }
        if self.layers < 1 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if !(self.load_store >= 0.0) {
            return Err(Error::Config("load_store must be non-negative".into()));
        }
        Ok(())
    }
}

/// Closed-form steps of one batch on a model of `N` equal layers.
pub fn single_chip_steps(p: &CostParams, phase: StepPhase) -> f64 {
    let n = p.layers as f64;
    match phase {
        StepPhase::Baseline => n * (1.0 + p.bw_ratio),
        StepPhase::Bp => n * (1.0 + p.bw_ratio) * (1.0 + p.alpha),
        StepPhase::Gp => n * (1.0 + p.alpha),
    }
}

/// One BP batch followed by one GP batch.
pub fn two_batch_steps(p: &CostParams) -> f64 {
    single_chip_steps(p, StepPhase::Bp) + single_chip_steps(p, StepPhase::Gp)
}

/// Accelerator cycles of one layer's forward pass over `batch` samples of
/// per-sample shape `input`: `ceil(ceil(MACs / PEs) * f_dataflow)`.
pub fn layer_cycles(layer: &LayerKind, input: &[usize], batch: usize, dataflow: Dataflow, pe_count: u64) -> Result<u64> {
    let macs = layer.macs(input, batch)?;
    let ideal = macs.div_ceil(pe_count.max(1));
    Ok((ideal as f64 * dataflow.overhead_factor()).ceil() as u64)
}

/// Cost of a layer and its predictor work under a hardware variant.
pub fn variant_layer_cost(layer_cost: f64, predictor_cost: f64, variant: Variant, load_store: f64) -> f64 {
    match variant {
        Variant::Baseline => layer_cost,
        Variant::Max => layer_cost.max(predictor_cost),
        Variant::Efficient => layer_cost + predictor_cost,
        Variant::Low => layer_cost + predictor_cost + load_store,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub forward: f64,
    pub backward: f64,
    pub predictor: f64,
    /// Layer plus predictor work in a BP batch (forward and backward sweeps).
    pub bp: f64,
    /// Layer plus prediction in a GP batch.
    pub gp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineResult {
    pub baseline: f64,
    pub bp: f64,
    pub gp: f64,
    pub two_batch: f64,
    pub layers: Vec<LayerCost>,
}

/// Per-layer composition over forward costs `fw` (any unit). The predictor
/// costs `alpha` times the mean layer forward per invocation; in a BP batch it
/// is invoked in the forward sweep and trained in the backward sweep (costing
/// `bw_ratio` times its forward).
pub fn compose(fw: &[f64], p: &CostParams) -> Result<TimelineResult> {
    p.validate()?;
    if fw.is_empty() || fw.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::Config("layer costs must be a non-empty list of non-negative values".into()));
    }
    let mean = fw.iter().sum::<f64>() / fw.len() as f64;
    let pred = p.alpha * mean;
    let ls = p.load_store * mean;
    let v = p.variant;
    let layers: Vec<LayerCost> = fw
        .iter()
        .map(|&c| {
            let bw = c * p.bw_ratio;
            let gp = variant_layer_cost(c, pred, v, ls);
            let bp = gp + variant_layer_cost(bw, pred * p.bw_ratio, v, ls);
            LayerCost { forward: c, backward: bw, predictor: pred, bp, gp }
        })
        .collect();
    let baseline: f64 = layers.iter().map(|l| l.forward + l.backward).sum();
    let (bp, gp) = if v == Variant::Baseline {
        (baseline, baseline)
    } else {
        (layers.iter().map(|l| l.bp).sum(), layers.iter().map(|l| l.gp).sum())
    };
    Ok(TimelineResult { baseline, bp, gp, two_batch: bp + gp, layers })
}

/// The uniform model: `N` layers of one step each.
pub fn uniform_timeline(p: &CostParams) -> Result<TimelineResult> {
    compose(&vec![1.0; p.layers], p)
}

/// Forward cycles of every trainable layer of `spec` at batch size `batch`.
pub fn model_layer_cycles(spec: &ModelSpec, batch: usize, p: &CostParams) -> Result<Vec<f64>> {
    let shapes = spec.shapes()?;
    spec.layers
        .iter()
        .zip(&shapes)
        .filter(|(l, _)| l.is_trainable())
        .map(|(l, s)| layer_cycles(l, s, batch, p.dataflow, p.pe_count).map(|c| c as f64))
        .collect()
}

/// Speedup over the baseline for a given mix of warm-up, BP and GP batches.
/// Warm-up batches cost the same as BP batches.
pub fn model_speedup(t: &TimelineResult, f: &PhaseFractions) -> Result<f64> {
    if (f.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("phase fractions must sum to 1".into()));
    }
    Ok(t.baseline / (f.backprop() * t.bp + f.gp * t.gp))
}

/// Predictor multiply-accumulates per layer invocation over the mean layer
/// forward MACs at batch size `batch`.
pub fn measured_alpha(spec: &ModelSpec, predictor: &PredictorConfig, batch: usize) -> Result<f64> {
    let shapes = spec.shapes()?;
    let kinds = spec.trainable_layers();
    let f_max = PredictorNet::required_width(&kinds, predictor);
    let (mut layer, mut pred) = (0u64, 0u64);
    for (l, s) in spec.layers.iter().zip(&shapes).filter(|(l, _)| l.is_trainable()) {
        layer += l.macs(s, batch)?;
        let out = l.output_shape(s)?;
        let (rows, h, w) = match out[..] {
            [c, h, w] => (c, h, w),
            [d] => (d, 1, 1),
            _ => unreachable!("trainable layers emit rank 1 or 3"),
        };
        pred += predictor_macs(predictor, f_max, rows, h, w);
    }
    Ok(pred as f64 / layer as f64)
}
