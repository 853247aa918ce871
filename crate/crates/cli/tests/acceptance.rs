//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use adagp_core::costmodel::{compose, model_layer_cycles, model_speedup, single_chip_steps, two_batch_steps, uniform_timeline, CostParams, StepPhase};
use adagp_core::energy::{compare_schedules, EnergyParams};
use adagp_core::gradcheck::{finite_diff_report, finite_diff_strided, CheckReport, Fragment, Probe};
use adagp_core::layers::{LayerKind, Params};
use adagp_core::model::{zoo, Model, ModelSpec};
use adagp_core::optim::OptimizerConfig;
use adagp_core::pipesim::{build_schedule, check_legality, makespan, two_batch_transition_steps, Mode, PipelineConfig, Strategy};
use adagp_core::predictor::{masked_mse, reorganize, PredictionMask, PredictorConfig, PredictorNet};
use adagp_core::rng::seeded;
use adagp_core::scheduler::{unroll, PhaseFractions, PhaseState, ScheduleParams};
use adagp_core::trainer::{run_experiment, RunConfig, Trainer};
use adagp_core::Tensor;
use rand::Rng;

type Check = Result<String, String>;
type Case = Box<dyn Fn(u64) -> Result<CheckReport, String>>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn timeline_fixtures() -> Check {
    for alpha in [0.0, 0.05, 0.25] {
        let p = CostParams { layers: 4, bw_ratio: 2.0, alpha, ..Default::default() };
        let base = single_chip_steps(&p, StepPhase::Baseline);
        let bp = single_chip_steps(&p, StepPhase::Bp);
        let gp = single_chip_steps(&p, StepPhase::Gp);
        let two = two_batch_steps(&p);
        ensure!(close(base, 12.0), "alpha {alpha}: baseline {base}");
        ensure!(close(bp, 12.0 + 12.0 * alpha), "alpha {alpha}: bp {bp}");
        ensure!(close(gp, 4.0 + 4.0 * alpha), "alpha {alpha}: gp {gp}");
        ensure!(close(2.0 * base, 24.0), "alpha {alpha}: two baseline batches {}", 2.0 * base);
        ensure!(close(two, 16.0 + 16.0 * alpha), "alpha {alpha}: two-batch {two}");
        let t = uniform_timeline(&p).map_err(|e| e.to_string())?;
        ensure!(close(t.baseline, base) && close(t.bp, bp) && close(t.gp, gp), "alpha {alpha}: composition {t:?}");
    }
    Ok("baseline 12, BP 12+12a, GP 4+4a, two batches 24 -> 16+16a".into())
}

fn pipeline_fixtures() -> Check {
    let expected = [
        (Strategy::Gpipe, Mode::Baseline, 21.0),
        (Strategy::Dapple, Mode::Baseline, 21.0),
        (Strategy::Chimera, Mode::Baseline, 16.0),
        (Strategy::Gpipe, Mode::Transition, 25.0),
        (Strategy::Chimera, Mode::Transition, 20.0),
    ];
    for (strategy, mode, want) in expected {
        let cfg = PipelineConfig { devices: 4, micro_batches: 4, strategy, mode, ..Default::default() };
        let trace = build_schedule(&cfg).map_err(|e| e.to_string())?;
        check_legality(&trace, &cfg).map_err(|e| format!("{strategy} {mode}: {e}"))?;
        let got = makespan(&trace).map_err(|e| e.to_string())?;
        ensure!(got == want, "{strategy} {mode}: makespan {got}, want {want}");
        if mode == Mode::Transition {
            let steps = two_batch_transition_steps(&cfg).map_err(|e| e.to_string())?;
            ensure!(steps == want, "{strategy}: transition steps {steps}");
        }
    }
    let mut traces = 0;
    for strategy in Strategy::ALL {
        for mode in [Mode::Baseline, Mode::Gp, Mode::Transition] {
            for (d, m) in [(1, 2), (2, 4), (3, 6), (4, 4), (4, 8), (5, 2)] {
                for predictor_alpha in [None, Some(0.25)] {
                    let cfg = PipelineConfig { devices: d, micro_batches: m, strategy, mode, predictor_alpha, ..Default::default() };
                    let trace = build_schedule(&cfg).map_err(|e| e.to_string())?;
                    check_legality(&trace, &cfg).map_err(|e| format!("{cfg:?}: {e}"))?;
                    traces += 1;
                }
            }
        }
    }
    Ok(format!("21 / 21 / 16, transition 25 / 20; {traces} traces legal"))
}

fn speedup_band() -> Check {
    let half = PhaseFractions::new(0.0, 0.5, 0.5).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    for alpha in [0.0, 0.01, 0.02, 0.03, 0.04, 0.05] {
        let p = CostParams { alpha, ..Default::default() };
        let s = model_speedup(&uniform_timeline(&p).map_err(|e| e.to_string())?, &half).map_err(|e| e.to_string())?;
        ensure!((1.40..=1.50).contains(&s), "uniform alpha {alpha}: speedup {s}");
        seen.push(s);
    }
    let p = CostParams::default();
    for spec in zoo::all(10) {
        let fw = model_layer_cycles(&spec, 32, &p).map_err(|e| e.to_string())?;
        let s = model_speedup(&compose(&fw, &p).map_err(|e| e.to_string())?, &half).map_err(|e| e.to_string())?;
        ensure!((1.40..=1.50).contains(&s), "{} at default alpha: speedup {s}", spec.name);
        seen.push(s);
    }
    let lo = seen.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = seen.iter().cloned().fold(0.0, f64::max);
    Ok(format!("speedups in [{lo:.4}, {hi:.4}] (default alpha 0.02 gives {:.4})", seen[2]))
}

fn energy_identity() -> Check {
    let pred = PredictorConfig::default();
    let mut worst: f64 = 0.0;
    for spec in zoo::all(10) {
        for params in [
            EnergyParams::default(),
            EnergyParams { buffer_capacity: Some(2048), ..Default::default() },
            EnergyParams { read_energy: 3.0, write_energy: 7.0, ..Default::default() },
        ] {
            let at = |g: f64| {
                let f = PhaseFractions::new(0.0, 1.0 - g, g).map_err(|e| e.to_string())?;
                compare_schedules(&spec, &f, 16, &params, &pred).map_err(|e| e.to_string())
            };
            let r = at(0.5)?;
            worst = worst.max((r.reduction - r.f_bw / 2.0).abs());
            ensure!((r.reduction - r.f_bw / 2.0).abs() <= 1e-12, "{}: reduction {} vs f_bw/2 {}", spec.name, r.reduction, r.f_bw / 2.0);
            let sweep: Vec<f64> = (0..10).map(|i| at(f64::from(i) / 9.0).map(|r| r.reduction)).collect::<Result<_, _>>()?;
            ensure!(sweep.windows(2).all(|w| w[1] > w[0]), "{}: sweep not increasing {sweep:?}", spec.name);
        }
    }
    Ok(format!("50/50 reduction = f_bw/2 (worst gap {worst:.1e}); 10-point sweeps strictly increasing"))
}

const SEEDS: u64 = 100;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn layer_report(layer: LayerKind, input: &[usize], seed: u64) -> Result<CheckReport, String> {
    let mut rng = seeded(seed);
    let frag = Fragment::new(vec![layer], vec![Params::init(&layer, &mut rng)]);
    let x = random(input, &mut rng);
    let mut out = vec![input[0]];
    out.extend(layer.output_shape(&input[1..]).map_err(|e| e.to_string())?);
    let probe = Probe::Project(random(&out, &mut rng));
    finite_diff_report(&frag, &x, &probe, 1e-5).map_err(|e| e.to_string())
}

fn model_report(spec: &ModelSpec, batch: usize, stride: usize, seed: u64) -> Result<CheckReport, String> {
    let mut rng = seeded(seed);
    let params = spec.layers.iter().map(|l| Params::init(l, &mut rng)).collect();
    let labels = (0..batch).map(|_| rng.gen_range(0..spec.classes)).collect();
    let frag = Fragment::new(spec.layers.clone(), params).with_labels(labels);
    let mut shape = vec![batch];
    shape.extend(&spec.input_shape);
    let x = random(&shape, &mut rng);
    finite_diff_strided(&frag, &x, &Probe::Project(Tensor::scalar(1.0)), 1e-5, stride, seed as usize).map_err(|e| e.to_string())
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut cases: Vec<(String, Case)> = vec![
        ("dense".into(), Box::new(|s| layer_report(LayerKind::dense(5, 3), &[4, 5], s))),
        ("conv".into(), Box::new(|s| layer_report(LayerKind::conv(2, 3, 3, 2, 1), &[2, 2, 6, 6], s))),
        ("relu".into(), Box::new(|s| layer_report(LayerKind::Relu, &[3, 2, 3, 3], s))),
        ("maxpool".into(), Box::new(|s| layer_report(LayerKind::MaxPool2d { k: 2, s: 2 }, &[2, 2, 4, 4], s))),
        ("avgpool".into(), Box::new(|s| layer_report(LayerKind::AvgPool2d { k: 3, s: 2 }, &[2, 1, 7, 7], s))),
        ("flatten".into(), Box::new(|s| layer_report(LayerKind::Flatten, &[2, 2, 3, 3], s))),
        (
            "softmax cross-entropy".into(),
            Box::new(|seed| {
                let mut rng = seeded(seed);
                let logits = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-3.0..3.0));
                let labels = (0..4).map(|_| rng.gen_range(0..5)).collect();
                let frag = Fragment::new(vec![LayerKind::SoftmaxCrossEntropy], vec![None]).with_labels(labels);
                finite_diff_report(&frag, &logits, &Probe::Project(Tensor::scalar(1.7)), 1e-5).map_err(|e| e.to_string())
            }),
        ),
    ];
    for (spec, batch, stride) in [(zoo::mini_mlp(&[6], 4), 3, 1), (zoo::mini_cnn(1, 4), 1, 2), (zoo::mini_vgg(1, 4), 1, 6)] {
        cases.push((spec.name.clone(), Box::new(move |s| model_report(&spec, batch, stride, s))));
    }
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for (name, case) in &cases {
        for seed in 0..SEEDS {
            let r = case(seed)?;
            ensure!(r.max_rel_error < 1e-4, "{name} seed {seed}: {r:?}");
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
    }
    ensure!(skipped * 100 <= checked, "{skipped} of {checked} coordinates sat on kinks");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!("{} cases x {SEEDS} seeds, worst {worst:.2e} over {checked} coordinates", cases.len()))
}

fn algorithmic_fidelity() -> Check {
    let base_cfg = RunConfig { model_optimizer: OptimizerConfig::sgd(0.01, 0.9), ..Default::default() };
    let last_warmup = base_cfg.schedule.warmup_epochs as usize - 1;
    let (mut ada, mut base, mut cosines) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let cfg = RunConfig { seed, ..base_cfg.clone() };
        let (train, eval) = cfg.dataset.load(seed).map_err(|e| e.to_string())?;
        let a = run_experiment(&cfg, &train, &eval).map_err(|e| e.to_string())?;
        let b = run_experiment(&RunConfig { baseline: true, ..cfg.clone() }, &train, &eval).map_err(|e| e.to_string())?;
        let c = a.log.totals();
        ensure!(c.gp > 0, "seed {seed}: no GP batches");
        ensure!(a.trainer.model().backward_calls() == c.warmup + c.bp, "seed {seed}: {} backward passes for {c:?}", a.trainer.model().backward_calls());
        ensure!(b.trainer.model().backward_calls() == b.log.totals().bp, "seed {seed}: baseline backward count");
        ada.push(a.log.final_accuracy().unwrap_or(0.0));
        base.push(b.log.final_accuracy().unwrap_or(0.0));
        cosines.push(a.log.records[last_warmup].cosine.ok_or("no cosine in the last warm-up epoch")?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb, mc) = (mean(&ada), mean(&base), mean(&cosines));
    ensure!(ma >= mb - 0.02, "ADA-GP mean accuracy {ma:.4} vs baseline {mb:.4}");
    ensure!(mc > 0.0, "mean warm-up cosine {mc:.4}");
    Ok(format!("accuracy {ma:.4} vs baseline {mb:.4}; backward passes = warm-up + BP; last warm-up cosine {mc:.4}"))
}

fn predictor_structure() -> Check {
    // one store regardless of depth
    for depth in [1, 2, 4, 8] {
        let mut layers = Vec::new();
        for i in 0..depth {
            layers.push(LayerKind::dense(6 + i, 6 + i + 1));
            layers.push(LayerKind::Relu);
        }
        layers.push(LayerKind::dense(6 + depth, 3));
        layers.push(LayerKind::SoftmaxCrossEntropy);
        let spec = ModelSpec { name: format!("deep{depth}"), input_shape: vec![6], classes: 3, layers };
        let t = Trainer::new(spec.clone(), 0, OptimizerConfig::model_default(), Some((PredictorConfig::default(), OptimizerConfig::predictor_default())))
            .map_err(|e| e.to_string())?;
        ensure!(t.predictor_stores() == 1, "depth {depth}: {} stores", t.predictor_stores());
        let b = Trainer::new(spec, 0, OptimizerConfig::model_default(), None).map_err(|e| e.to_string())?;
        ensure!(b.predictor_stores() == 0, "baseline owns a predictor");
    }

    let mut layers_checked = 0;
    for spec in zoo::all(10) {
        for predict_bias in [true, false] {
            let cfg = PredictorConfig { predict_bias, ..Default::default() };
            let kinds = spec.trainable_layers();
            let mut rng = seeded(5);
            let mut net = PredictorNet::for_layers(&kinds, cfg, &mut rng).map_err(|e| e.to_string())?;
            // nonzero output layer so predictions carry signal
            for p in net.params_mut() {
                p.weight = random(p.weight.shape(), &mut rng);
                p.bias = random(p.bias.shape(), &mut rng);
            }
            let mut model = Model::build(spec.clone(), 1).map_err(|e| e.to_string())?;
            let mut shape = vec![3];
            shape.extend(&spec.input_shape);
            let x = random(&shape, &mut rng);
            let (_, trace) = model.forward_collect(&x, &[0, 1, 2]).map_err(|e| e.to_string())?;
            for (i, (kind, act)) in kinds.iter().zip(&trace.activations).enumerate() {
                let (ws, bs) = kind.param_shapes().unwrap();
                let reorg = reorganize(act, kind, i).map_err(|e| e.to_string())?;
                let mask = PredictionMask::for_layer(kind, predict_bias).map_err(|e| e.to_string())?;
                let g = net.predict(&reorg, &mask).map_err(|e| e.to_string())?;
                ensure!(g.weight.shape() == ws.as_slice(), "{} layer {i}: weight {:?} vs {ws:?}", spec.name, g.weight.shape());
                ensure!(g.bias.shape() == bs.as_slice(), "{} layer {i}: bias {:?} vs {bs:?}", spec.name, g.bias.shape());

                // perturb only the output columns this layer does not own
                let mut perturbed = net.clone();
                let width = mask.width();
                let fc = &mut perturbed.params_mut()[1];
                let cols = fc.weight.shape()[1];
                for (j, b) in fc.bias.data_mut().iter_mut().enumerate().skip(width) {
                    *b += 50.0 + j as f64;
                    for w in &mut fc.weight.data_mut()[j * cols..(j + 1) * cols] {
                        *w -= 3.0;
                    }
                }
                let g2 = perturbed.predict(&reorg, &mask).map_err(|e| e.to_string())?;
                ensure!(g2 == g, "{} layer {i}: masked columns leaked into the prediction", spec.name);
                let raw = net.raw_output(&reorg).map_err(|e| e.to_string())?;
                let raw2 = perturbed.raw_output(&reorg).map_err(|e| e.to_string())?;
                let target = random(&[mask.rows, width], &mut rng);
                let (l1, d1) = masked_mse(&raw, &target, &mask);
                let (l2, d2) = masked_mse(&raw2, &target, &mask);
                ensure!(l1 == l2 && d1 == d2, "{} layer {i}: masked columns changed the loss", spec.name);
                layers_checked += 1;
            }
        }
    }
    Ok(format!("one store at every depth; {layers_checked} layer predictions match weight shapes and ignore masked columns"))
}

const GOLDEN: [&str; 10] = [
    "WWWWWWWW", "WWWWWWWW", "WWWWWWWW", "GGGGBGGG", "GBGGGGBB", "GGGGBBBG", "GGGBBBGG", "GGBBBBGG", "GGBBBBGG", "GGBBBBGG",
];

fn scheduler_trajectory() -> Check {
    let p = ScheduleParams { warmup_epochs: 3, m_initial: 1, k: 4, growth: 1 };
    let got: Vec<String> = unroll(p, 10, 8)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|e| e.iter().map(|t| t.letter()).collect())
        .collect();
    ensure!(got == GOLDEN, "tags {got:?}");

    let mut s = PhaseState::new(p).map_err(|e| e.to_string())?;
    let mut clamped_at = None;
    for epoch in 0..40 {
        for _ in 0..8 {
            s.next_batch_phase();
        }
        s.end_of_epoch();
        ensure!(s.m() <= s.k(), "epoch {epoch}: m {} above k", s.m());
        match clamped_at {
            None if s.m() == s.k() => clamped_at = Some(epoch),
            Some(_) => ensure!(s.m() == s.k(), "epoch {epoch}: m left k"),
            None => {}
        }
    }
    ensure!(clamped_at.is_some(), "m never reached k");
    Ok(format!("10-epoch tags match the golden sequence; m reaches k after epoch {} and stays", clamped_at.unwrap()))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, common::SMALL_TRAIN).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    common::run_all_subcommands(&cfg, &a);
    common::run_all_subcommands(&cfg, &b);
    let (sa, sb) = (common::snapshot(&a), common::snapshot(&b));
    ensure!(sa.keys().eq(sb.keys()), "different file sets");
    for (path, bytes) in &sa {
        ensure!(bytes == &sb[path], "{} differs", path.display());
    }
    let kinds = ["csv", "json", "svg"].map(|ext| sa.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count());
    Ok(format!("{} files byte-identical across two runs ({} csv, {} json, {} svg)", sa.len(), kinds[0], kinds[1], kinds[2]))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("timeline fixtures", timeline_fixtures),
        ("pipeline fixtures", pipeline_fixtures),
        ("speedup band", speedup_band),
        ("energy identity", energy_identity),
        ("gradient correctness", gradient_correctness),
        ("algorithmic fidelity", algorithmic_fidelity),
        ("predictor structure", predictor_structure),
        ("scheduler trajectory", scheduler_trajectory),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} [{took:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why} [{took:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
