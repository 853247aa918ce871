//! Multi-device pipeline schedules.
//!
//! Every device owns one queue of operations per pipeline it serves (Chimera
//! runs two pipelines in opposite directions, so its devices own two queues).
//! Each queue lists the device's work for all batches in order. The simulator
//! repeatedly starts the queue head that can begin earliest, so the schedule is
//! "as soon as possible" under the per-queue order. Ties go to the earlier
//! batch, then the deeper stage (to drain backward chains first), then the
//! queue index and device id.
//!
//! A BP batch contains forward and backward work; a GP batch only forward
//! work (plus optional predictor events). One time unit is the forward time
//! of one micro-batch on one device.

mod gantt;
mod legality;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gantt::{export_gantt, render_gantt};
pub use legality::check_legality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// All forwards, then all backwards.
    Gpipe,
    /// One-forward-one-backward after a warm-up of `D - stage - 1` forwards.
    Dapple,
    /// Two 1F1B pipelines over the same devices in opposite directions.
    Chimera,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Gpipe, Strategy::Dapple, Strategy::Chimera];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Gpipe => "gpipe",
            Strategy::Dapple => "dapple",
            Strategy::Chimera => "chimera",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One batch trained with backpropagation.
    Baseline,
    /// One batch trained from predicted gradients: forward work only.
    Gp,
    /// A GP batch followed by a BP batch; the BP batch's forward work starts as
    /// soon as devices free up, so it fills the gaps of the forward-only batch.
    Transition,
}

impl Mode {
    pub fn batches(self) -> Vec<BatchKind> {
        match self {
            Mode::Baseline => vec![BatchKind::Bp],
            Mode::Gp => vec![BatchKind::Gp],
            Mode::Transition => vec![BatchKind::Gp, BatchKind::Bp],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Gp => "gp",
            Mode::Transition => "transition",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchKind {
    Bp,
    Gp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub devices: usize,
    pub micro_batches: usize,
    pub bw_ratio: f64,
    pub strategy: Strategy,
    pub mode: Mode,
    /// When set, each forward event is followed by a predictor event of this
    /// length on the same device.
    pub predictor_alpha: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            devices: 4,
            micro_batches: 4,
            bw_ratio: 2.0,
            strategy: Strategy::Gpipe,
            mode: Mode::Baseline,
            predictor_alpha: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices < 1 || self.micro_batches < 1 {
            return Err(Error::Config("devices and micro_batches must be at least 1".into()));
        }
        if !(self.bw_ratio > 0.0 && self.bw_ratio.is_finite()) {
            return Err(Error::Config(format!("bw_ratio must be positive, got {}", self.bw_ratio)));
        }
        if self.strategy == Strategy::Chimera && !self.micro_batches.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "chimera splits micro-batches evenly between its two pipelines; {} is odd",
                self.micro_batches
            )));
        }
        if let Some(a) = self.predictor_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("predictor_alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }

    fn duration(&self, kind: EventKind) -> f64 {
        match kind {
            EventKind::Fw => 1.0,
            EventKind::Bw => self.bw_ratio,
            EventKind::PredictorFw => self.predictor_alpha.unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fw,
    Bw,
    PredictorFw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub device: usize,
    pub start: f64,
    pub duration: f64,
    pub kind: EventKind,
    pub batch: usize,
    pub micro_batch: usize,
    /// Pipeline stage (model partition) the event computes.
    pub stage: usize,
    /// 0 for the downward pipeline, 1 for Chimera's upward one.
    pub pipeline: usize,
}

impl Event {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Gradient synchronization point at the end of a BP batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncBarrier {
    pub batch: usize,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub devices: usize,
    pub micro_batches: usize,
    pub strategy: Strategy,
    pub batches: Vec<BatchKind>,
    /// Sorted by (start, device).
    pub events: Vec<Event>,
    pub barriers: Vec<SyncBarrier>,
}

impl ScheduleTrace {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// Last event end minus first event start.
pub fn makespan(trace: &ScheduleTrace) -> Result<f64> {
    let first = trace.events.iter().map(|e| e.start).min_by(f64::total_cmp);
    let last = trace.events.iter().map(Event::end).max_by(f64::total_cmp);
    match (first, last) {
        (Some(a), Some(b)) => Ok(b - a),
        _ => Err(Error::Schedule("makespan of an empty trace".into())),
    }
}

/// Stage served by `device` in a pipeline, and that pipeline's micro-batches.
pub(crate) fn pipelines(strategy: Strategy, devices: usize, micro_batches: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = (0..micro_batches).collect();
    match strategy {
        Strategy::Gpipe | Strategy::Dapple => vec![((0..devices).collect(), all)],
        Strategy::Chimera => {
            let half = micro_batches / 2;
            vec![
                ((0..devices).collect(), all[..half].to_vec()),
                ((0..devices).rev().collect(), all[half..].to_vec()),
            ]
        }
    }
}

/// Per-stage work order of one BP batch.
fn bp_order(strategy: Strategy, stage: usize, devices: usize, mbs: &[usize]) -> Vec<(EventKind, usize)> {
    match strategy {
        Strategy::Gpipe => mbs
            .iter()
            .map(|&m| (EventKind::Fw, m))
            .chain(mbs.iter().map(|&m| (EventKind::Bw, m)))
            .collect(),
        Strategy::Dapple | Strategy::Chimera => {
            let warm = (devices - stage - 1).min(mbs.len());
            let mut seq: Vec<_> = mbs[..warm].iter().map(|&m| (EventKind::Fw, m)).collect();
            let (mut f, mut b) = (warm, 0);
            while f < mbs.len() {
                seq.push((EventKind::Fw, mbs[f]));
                seq.push((EventKind::Bw, mbs[b]));
                f += 1;
                b += 1;
            }
            seq.extend(mbs[b..].iter().map(|&m| (EventKind::Bw, m)));
            seq
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct OpKey {
    batch: usize,
    pipeline: usize,
    micro_batch: usize,
    stage: usize,
    kind: EventKind,
}

impl OpKey {
    fn dependency(&self, devices: usize) -> Option<OpKey> {
        let mut d = *self;
        match self.kind {
            EventKind::Fw if self.stage == 0 => return None,
            EventKind::Fw => d.stage -= 1,
            EventKind::Bw if self.stage == devices - 1 => d.kind = EventKind::Fw,
            EventKind::Bw => d.stage += 1,
            EventKind::PredictorFw => d.kind = EventKind::Fw,
        }
        Some(d)
    }
}

/// Builds the schedule for the config's mode.
pub fn build_schedule(config: &PipelineConfig) -> Result<ScheduleTrace> {
    build_batches(config, &config.mode.batches())
}

/// Builds the schedule of an arbitrary sequence of BP and GP batches.
pub fn build_batches(config: &PipelineConfig, batches: &[BatchKind]) -> Result<ScheduleTrace> {
    config.validate()?;
    if batches.is_empty() {
        return Err(Error::Schedule("no batches to schedule".into()));
    }
    let d_count = config.devices;
    let pipes = pipelines(config.strategy, d_count, config.micro_batches);

    // queues[device] = list of op queues, one per pipeline that has micro-batches
    let mut queues: Vec<Vec<Vec<OpKey>>> = vec![Vec::new(); d_count];
    for (pipeline, (stage_device, mbs)) in pipes.iter().enumerate() {
        if mbs.is_empty() {
            continue;
        }
        for (stage, &device) in stage_device.iter().enumerate() {
            let mut q = Vec::new();
            for (batch, kind) in batches.iter().enumerate() {
                let order = match kind {
                    BatchKind::Bp => bp_order(config.strategy, stage, d_count, mbs),
                    BatchKind::Gp => mbs.iter().map(|&m| (EventKind::Fw, m)).collect(),
                };
                for (k, micro_batch) in order {
                    q.push(OpKey { batch, pipeline, micro_batch, stage, kind: k });
                    if k == EventKind::Fw && config.predictor_alpha.is_some() {
                        q.push(OpKey { batch, pipeline, micro_batch, stage, kind: EventKind::PredictorFw });
                    }
                }
            }
            queues[device].push(q);
        }
    }

    let total: usize = queues.iter().flatten().map(Vec::len).sum();
    let mut heads: Vec<Vec<usize>> = queues.iter().map(|qs| vec![0; qs.len()]).collect();
    let mut free = vec![0.0f64; d_count];
    let mut done: HashMap<OpKey, f64> = HashMap::with_capacity(total);
    let mut events = Vec::with_capacity(total);

    while events.len() < total {
        let mut best: Option<(f64, usize, std::cmp::Reverse<usize>, usize, usize)> = None;
        for d in 0..d_count {
            for (qi, q) in queues[d].iter().enumerate() {
                let Some(op) = q.get(heads[d][qi]) else { continue };
                let ready = match op.dependency(d_count) {
                    None => 0.0,
                    Some(dep) => match done.get(&dep) {
                        Some(&t) => t,
                        None => continue,
                    },
                };
                let key = (ready.max(free[d]), op.batch, std::cmp::Reverse(op.stage), qi, d);
                let better = match &best {
                    None => true,
                    Some(b) => key.0.total_cmp(&b.0).then_with(|| (key.1, key.2, key.3, key.4).cmp(&(b.1, b.2, b.3, b.4))).is_lt(),
                };
                if better {
                    best = Some(key);
                }
            }
        }
        let (start, _, _, qi, d) = best.ok_or_else(|| Error::Schedule("schedule deadlocked".into()))?;
        let op = queues[d][qi][heads[d][qi]];
        heads[d][qi] += 1;
        let duration = config.duration(op.kind);
        free[d] = start + duration;
        done.insert(op, start + duration);
        events.push(Event {
            device: d,
            start,
            duration,
            kind: op.kind,
            batch: op.batch,
            micro_batch: op.micro_batch,
            stage: op.stage,
            pipeline: op.pipeline,
        });
    }
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.device.cmp(&b.device)));

    let barriers = batches
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == BatchKind::Bp)
        .map(|(batch, _)| SyncBarrier {
            batch,
            step: events.iter().filter(|e| e.batch == batch).map(Event::end).fold(0.0, f64::max),
        })
        .collect();

    Ok(ScheduleTrace {
        devices: d_count,
        micro_batches: config.micro_batches,
        strategy: config.strategy,
        batches: batches.to_vec(),
        events,
        barriers,
    })
}

/// Makespan of a GP batch followed by a BP batch.
pub fn two_batch_transition_steps(config: &PipelineConfig) -> Result<f64> {
    makespan(&build_schedule(&PipelineConfig { mode: Mode::Transition, ..*config })?)
}

/// Closed form of a GPipe batch: `(M + D - 1)(t_f + t_b)`.
pub fn gpipe_closed_form(devices: usize, micro_batches: usize, bw_ratio: f64) -> f64 {
    (micro_batches + devices - 1) as f64 * (1.0 + bw_ratio)
}
