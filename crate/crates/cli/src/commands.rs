//! What each subcommand computes and writes. Every function returns the text
//! printed to stdout; files land under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adagp_core::costmodel::{
    compose, measured_alpha, model_layer_cycles, model_speedup, single_chip_steps, two_batch_steps, uniform_timeline,
    CostParams, StepPhase, TimelineResult,
};
use adagp_core::energy::{compare_schedules, EnergyParams, EnergyReport};
use adagp_core::model::{zoo, ModelSpec};
use adagp_core::pipesim::{build_schedule, check_legality, makespan, render_gantt, Mode, PipelineConfig, Strategy};
use adagp_core::scheduler::{phase_fractions, PhaseFractions};
use adagp_core::trainer::{planned_phases, run_experiment, Checkpoint, RunSummary, FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, &s)
}

/// Directory holding one training run's artifacts.
pub fn train_dir(out: &Path, baseline: bool) -> PathBuf {
    out.join("train").join(if baseline { "baseline" } else { "adagp" })
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let run = &cfg.train;
    let (train_set, eval_set) = run.dataset.load(run.seed)?;
    let outcome = run_experiment(run, &train_set, &eval_set)?;
    let summary = outcome.summary(run)?;
    let dir = train_dir(out, run.baseline);
    write(&dir.join("metrics.csv"), &outcome.log.to_csv())?;
    write_json(&dir.join("summary.json"), &summary)?;
    Checkpoint::capture(&outcome.trainer).save(&dir.join("checkpoint.json"))?;

    let c = summary.phase_counts;
    let mut s = String::new();
    writeln!(s, "{} on {} ({}), seed {}", run.model, summary.dataset, if run.baseline { "baseline" } else { "adagp" }, run.seed)
        .unwrap();
    writeln!(s, "final eval accuracy {:.4}", summary.final_eval_accuracy).unwrap();
    writeln!(
        s,
        "batches: {} warm-up, {} bp, {} gp; backward passes {}",
        c.warmup, c.bp, c.gp, summary.backward_calls
    )
    .unwrap();
    writeln!(s, "wrote {}", dir.display()).unwrap();
    Ok(s)
}

/// The configured zoo model at the dataset's sample shape.
fn model_spec(cfg: &ExperimentConfig) -> Result<(ModelSpec, usize), CliError> {
    let (shape, classes, train_len) = cfg.train.dataset.describe()?;
    Ok((zoo::by_name(&cfg.train.model, &shape, classes)?, train_len))
}

/// Phase mix the configured training run would realize.
fn schedule_fractions(cfg: &ExperimentConfig, train_len: usize) -> Result<PhaseFractions, CliError> {
    Ok(phase_fractions(&planned_phases(&cfg.train, train_len)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimelinePhase {
    Baseline,
    Bp,
    Gp,
    TwoBatch,
}

fn phase_steps(p: &CostParams, phase: TimelinePhase) -> f64 {
    match phase {
        TimelinePhase::Baseline => single_chip_steps(p, StepPhase::Baseline),
        TimelinePhase::Bp => single_chip_steps(p, StepPhase::Bp),
        TimelinePhase::Gp => single_chip_steps(p, StepPhase::Gp),
        TimelinePhase::TwoBatch => two_batch_steps(p),
    }
}

#[derive(Debug, Serialize)]
struct UniformSteps {
    baseline: f64,
    bp: f64,
    gp: f64,
    two_batch: f64,
    speedup_at_mix: f64,
}

#[derive(Debug, Serialize)]
struct ModelTimeline {
    name: String,
    batch_size: usize,
    /// Predictor MACs over mean layer MACs; reported, not used.
    measured_alpha: f64,
    timeline: TimelineResult,
    speedup_at_mix: f64,
    schedule_fractions: PhaseFractions,
    speedup_over_schedule: f64,
}

#[derive(Debug, Serialize)]
struct TimelineReport {
    format_version: u32,
    params: CostParams,
    phase: Option<TimelinePhase>,
    steps: Option<f64>,
    gp_fraction: f64,
    uniform: UniformSteps,
    model: ModelTimeline,
}

pub fn timeline(cfg: &ExperimentConfig, out: &Path, phase: Option<TimelinePhase>) -> Result<String, CliError> {
    let p = &cfg.timeline;
    let mix = cfg.mix.fractions()?;
    let u = uniform_timeline(p)?;
    let (spec, train_len) = model_spec(cfg)?;
    let batch = cfg.train.batch_size;
    let composed = compose(&model_layer_cycles(&spec, batch, p)?, p)?;
    let sched = schedule_fractions(cfg, train_len)?;
    let report = TimelineReport {
        format_version: FORMAT_VERSION,
        params: *p,
        phase,
        steps: phase.map(|ph| phase_steps(p, ph)),
        gp_fraction: cfg.mix.gp_fraction,
        uniform: UniformSteps {
            baseline: u.baseline,
            bp: u.bp,
            gp: u.gp,
            two_batch: u.two_batch,
            speedup_at_mix: model_speedup(&u, &mix)?,
        },
        model: ModelTimeline {
            name: spec.name.clone(),
            batch_size: batch,
            measured_alpha: measured_alpha(&spec, &cfg.train.predictor, batch)?,
            speedup_at_mix: model_speedup(&composed, &mix)?,
            speedup_over_schedule: model_speedup(&composed, &sched)?,
            schedule_fractions: sched,
            timeline: composed,
        },
    };
    write_json(&out.join("timeline.json"), &report)?;

    let mut s = String::new();
    if let (Some(ph), Some(steps)) = (phase, report.steps) {
        writeln!(s, "steps {steps} ({} N={} alpha={})", name_of(&ph), p.layers, p.alpha).unwrap();
    }
    writeln!(
        s,
        "uniform N={}: baseline {} bp {} gp {} two-batch {}",
        p.layers, u.baseline, u.bp, u.gp, u.two_batch
    )
    .unwrap();
    writeln!(
        s,
        "{}: speedup {:.4} at gp fraction {}, {:.4} over the configured schedule; measured alpha {:.4}",
        report.model.name,
        report.model.speedup_at_mix,
        cfg.mix.gp_fraction,
        report.model.speedup_over_schedule,
        report.model.measured_alpha
    )
    .unwrap();
    Ok(s)
}

/// Serde name of a unit enum value.
pub fn name_of<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

pub const PIPELINE_CSV_HEADER: &str =
    "format_version,strategy,mode,devices,micro_batches,bw_ratio,predictor_alpha,makespan,events,barriers";

fn pipeline_row(cfg: &PipelineConfig) -> Result<(String, f64, String), CliError> {
    let trace = build_schedule(cfg)?;
    check_legality(&trace, cfg)?;
    let span = makespan(&trace)?;
    let row = format!(
        "{FORMAT_VERSION},{},{},{},{},{},{},{span},{},{}",
        cfg.strategy,
        cfg.mode,
        cfg.devices,
        cfg.micro_batches,
        cfg.bw_ratio,
        cfg.predictor_alpha.map(|a| a.to_string()).unwrap_or_default(),
        trace.events.len(),
        trace.barriers.len()
    );
    Ok((row, span, render_gantt(&trace)?))
}

pub fn pipeline_stem(cfg: &PipelineConfig) -> String {
    format!("{}-{}-d{}-m{}", cfg.strategy, cfg.mode, cfg.devices, cfg.micro_batches)
}

pub fn pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let p = &cfg.pipeline;
    let (row, span, svg) = pipeline_row(p)?;
    let stem = out.join("pipeline").join(pipeline_stem(p));
    write(&stem.with_extension("csv"), &format!("{PIPELINE_CSV_HEADER}\n{row}\n"))?;
    write(&stem.with_extension("svg"), &svg)?;
    Ok(format!(
        "{} {} D={} M={}: makespan {span}\nwrote {}.csv and .svg\n",
        p.strategy,
        p.mode,
        p.devices,
        p.micro_batches,
        stem.display()
    ))
}

#[derive(Debug, Serialize)]
struct SweepPoint {
    gp_fraction: f64,
    reduction: f64,
}

#[derive(Debug, Serialize)]
struct EnergyOutput {
    format_version: u32,
    model: String,
    batch_size: usize,
    params: EnergyParams,
    mix: EnergyReport,
    gp_fraction: f64,
    schedule_fractions: PhaseFractions,
    schedule: EnergyReport,
    sweep: Vec<SweepPoint>,
}

pub fn energy(cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let (spec, train_len) = model_spec(cfg)?;
    let batch = cfg.train.batch_size;
    let params = cfg.energy;
    let pred = &cfg.train.predictor;
    let report = |f: &PhaseFractions| compare_schedules(&spec, f, batch, &params, pred);
    let sched = schedule_fractions(cfg, train_len)?;
    let sweep = (0..=10)
        .map(|i| {
            let g = f64::from(i) / 10.0;
            let r = report(&PhaseFractions::new(0.0, 1.0 - g, g)?)?;
            Ok(SweepPoint { gp_fraction: g, reduction: r.reduction })
        })
        .collect::<adagp_core::Result<Vec<_>>>()?;
    let result = EnergyOutput {
        format_version: FORMAT_VERSION,
        model: spec.name.clone(),
        batch_size: batch,
        params,
        mix: report(&cfg.mix.fractions()?)?,
        gp_fraction: cfg.mix.gp_fraction,
        schedule: report(&sched)?,
        schedule_fractions: sched,
        sweep,
    };
    write_json(&out.join("energy.json"), &result)?;
    Ok(format!(
        "{} batch {batch}: backward share f_bw {:.4}; reduction {:.4} at gp fraction {}, {:.4} over the configured schedule; break-even gp fraction {:.4}\n",
        result.model,
        result.mix.f_bw,
        result.mix.reduction,
        cfg.mix.gp_fraction,
        result.schedule.reduction,
        result.mix.break_even_gp_fraction
    ))
}

/// `(section, metric, value)` rows gathered from every module.
pub fn report_rows(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(String, String, String)>, CliError> {
    let mut rows = Vec::new();
    let mut push = |section: &str, metric: String, value: String| rows.push((section.to_string(), metric, value));
    let p = &cfg.timeline;
    for ph in [TimelinePhase::Baseline, TimelinePhase::Bp, TimelinePhase::Gp, TimelinePhase::TwoBatch] {
        push("timeline", format!("{} steps (N={} alpha={})", name_of(&ph), p.layers, p.alpha), phase_steps(p, ph).to_string());
    }
    let (spec, train_len) = model_spec(cfg)?;
    let batch = cfg.train.batch_size;
    let composed = compose(&model_layer_cycles(&spec, batch, p)?, p)?;
    let mix = cfg.mix.fractions()?;
    let sched = schedule_fractions(cfg, train_len)?;
    push("timeline", format!("{} speedup at gp fraction {}", spec.name, cfg.mix.gp_fraction), format!("{:.4}", model_speedup(&composed, &mix)?));
    push("timeline", format!("{} speedup over the configured schedule", spec.name), format!("{:.4}", model_speedup(&composed, &sched)?));
    push("timeline", format!("{} measured alpha", spec.name), format!("{:.4}", measured_alpha(&spec, &cfg.train.predictor, batch)?));

    let base = cfg.pipeline;
    for strategy in Strategy::ALL {
        for mode in [Mode::Baseline, Mode::Gp, Mode::Transition] {
            let pc = PipelineConfig { strategy, mode, ..base };
            let value = match pc.validate() {
                Ok(()) => pipeline_row(&pc)?.1.to_string(),
                Err(_) => "n/a".into(),
            };
            push("pipeline", format!("{strategy} {mode} makespan (D={} M={})", pc.devices, pc.micro_batches), value);
        }
    }

    let e = compare_schedules(&spec, &mix, batch, &cfg.energy, &cfg.train.predictor)?;
    push("energy", format!("{} f_bw", spec.name), format!("{:.4}", e.f_bw));
    push("energy", format!("{} reduction at gp fraction {}", spec.name, cfg.mix.gp_fraction), format!("{:.4}", e.reduction));
    let es = compare_schedules(&spec, &sched, batch, &cfg.energy, &cfg.train.predictor)?;
    push("energy", format!("{} reduction over the configured schedule", spec.name), format!("{:.4}", es.reduction));

    for baseline in [false, true] {
        let path = train_dir(out, baseline).join("summary.json");
        let Ok(text) = fs::read_to_string(&path) else { continue };
        let s: RunSummary = serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        let label = if baseline { "baseline" } else { "adagp" };
        push("train", format!("{label} final eval accuracy"), format!("{:.4}", s.final_eval_accuracy));
        push("train", format!("{label} backward passes"), s.backward_calls.to_string());
        let f = s.phase_fractions;
        push("train", format!("{label} phase fractions (warm-up/bp/gp)"), format!("{:.4}/{:.4}/{:.4}", f.warmup, f.bp, f.gp));
    }
    Ok(rows)
}

pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let rows = report_rows(cfg, out)?;
    let mut csv = String::from("format_version,section,metric,value\n");
    for (section, metric, value) in &rows {
        writeln!(csv, "{FORMAT_VERSION},{section},{metric},{value}").unwrap();
    }
    write(&out.join("report.csv"), &csv)?;

    let width = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let mut table = String::new();
    let mut section = "";
    for (sec, metric, value) in &rows {
        if sec != section {
            writeln!(table, "[{sec}]").unwrap();
            section = sec;
        }
        writeln!(table, "  {metric:<width$}  {value}").unwrap();
    }
    Ok(table)
}
