//! Command-line arguments. Flags mirror config keys and win over the file.

use std::path::{Path, PathBuf};

use adagp_core::costmodel::{Dataflow, Variant};
use adagp_core::energy::PredictorTraffic;
use adagp_core::pipesim::{Mode, Strategy};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::commands::{self, TimelinePhase};
use crate::config::{parse_config, ExperimentConfig};
use crate::error::CliError;

/// Parses a flag value with the same spelling the config file uses.
fn by_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "adagp", version, about = "Gradient-prediction training experiments, cost models and pipeline schedules")]
pub struct Cli {
    /// Experiment file (TOML). Without it every setting takes its default.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` from the config.
    #[arg(short, long, global = true, env = "ADAGP_OUT")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics CSV, summary JSON and a checkpoint.
    Train(TrainArgs),
    /// Step counts and speedups from the analytical cost model (JSON).
    Timeline(TimelineArgs),
    /// Simulate one pipeline-parallel schedule (makespan CSV and Gantt SVG).
    Pipeline(PipelineArgs),
    /// Off-chip memory traffic and energy against all-backprop training (JSON).
    Energy(EnergyArgs),
    /// Merge every module's headline numbers into one table.
    Report,
    /// Print the fully defaulted configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Plain backpropagation on every batch.
    #[arg(long)]
    pub baseline: bool,
    /// Warm-up epochs (L).
    #[arg(long)]
    pub warmup_epochs: Option<u32>,
    #[arg(long)]
    pub m_initial: Option<u32>,
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long)]
    pub growth: Option<u32>,
    /// Model optimizer learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TimelineArgs {
    /// Layer count of the uniform model.
    #[arg(short = 'N', long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub bw_ratio: Option<f64>,
    #[arg(long, value_parser = by_name::<Variant>)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = by_name::<Dataflow>)]
    pub dataflow: Option<Dataflow>,
    #[arg(long)]
    pub pe_count: Option<u64>,
    /// Report the step count of one phase: baseline, bp, gp or two_batch.
    #[arg(long, value_parser = by_name::<TimelinePhase>)]
    pub phase: Option<TimelinePhase>,
    #[arg(long)]
    pub gp_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// gpipe, dapple or chimera.
    #[arg(long, value_parser = by_name::<Strategy>)]
    pub strategy: Option<Strategy>,
    #[arg(short = 'D', long)]
    pub devices: Option<usize>,
    #[arg(short = 'M', long)]
    pub micro_batches: Option<usize>,
    /// baseline, gp or transition.
    #[arg(long, value_parser = by_name::<Mode>)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub bw_ratio: Option<f64>,
    /// Add a predictor event of this length after every forward.
    #[arg(long)]
    pub predictor_alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    pub gp_fraction: Option<f64>,
    #[arg(long)]
    pub buffer_capacity: Option<u64>,
    /// resident or streamed.
    #[arg(long, value_parser = by_name::<PredictorTraffic>)]
    pub predictor_traffic: Option<PredictorTraffic>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        set(&mut t.model, self.model.clone());
        set(&mut t.seed, self.seed);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        t.baseline |= self.baseline;
        set(&mut t.schedule.warmup_epochs, self.warmup_epochs);
        set(&mut t.schedule.m_initial, self.m_initial);
        set(&mut t.schedule.k, self.k);
        set(&mut t.schedule.growth, self.growth);
        set(&mut t.model_optimizer.learning_rate, self.learning_rate);
    }
}

impl TimelineArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let p = &mut cfg.timeline;
        set(&mut p.layers, self.layers);
        set(&mut p.alpha, self.alpha);
        set(&mut p.bw_ratio, self.bw_ratio);
        set(&mut p.variant, self.variant);
        set(&mut p.dataflow, self.dataflow);
        set(&mut p.pe_count, self.pe_count);
        set(&mut cfg.mix.gp_fraction, self.gp_fraction);
    }
}

impl PipelineArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let p = &mut cfg.pipeline;
        set(&mut p.strategy, self.strategy);
        set(&mut p.devices, self.devices);
        set(&mut p.micro_batches, self.micro_batches);
        set(&mut p.mode, self.mode);
        set(&mut p.bw_ratio, self.bw_ratio);
        if self.predictor_alpha.is_some() {
            p.predictor_alpha = self.predictor_alpha;
        }
    }
}

impl EnergyArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set(&mut cfg.mix.gp_fraction, self.gp_fraction);
        if self.buffer_capacity.is_some() {
            cfg.energy.buffer_capacity = self.buffer_capacity;
        }
        set(&mut cfg.energy.predictor_traffic, self.predictor_traffic);
        set(&mut cfg.train.batch_size, self.batch_size);
    }
}

/// Loads the config, applies flag overrides, runs the subcommand and returns
/// what it prints.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let out: &Path = &out;
    match &cli.command {
        Command::Train(a) => a.apply(&mut cfg),
        Command::Timeline(a) => a.apply(&mut cfg),
        Command::Pipeline(a) => a.apply(&mut cfg),
        Command::Energy(a) => a.apply(&mut cfg),
        Command::Report | Command::ShowConfig => {}
    }
    cfg.validate(None)?;
    match &cli.command {
        Command::Train(_) => commands::train(&cfg, out),
        Command::Timeline(a) => commands::timeline(&cfg, out, a.phase),
        Command::Pipeline(_) => commands::pipeline(&cfg, out),
        Command::Energy(_) => commands::energy(&cfg, out),
        Command::Report => commands::report(&cfg, out),
        Command::ShowConfig => cfg.to_toml(),
    }
}
