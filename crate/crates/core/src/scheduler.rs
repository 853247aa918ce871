//! Phase state machine: warm-up epochs, then cycles of `k` predicted-gradient
//! batches followed by `m` backprop batches, with `m` growing once per epoch
//! until it reaches `k`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmUp,
    Bp,
    Gp,
}

impl Phase {
    /// One-letter tag used in golden sequences: `W`, `B`, `G`.
    pub fn letter(self) -> char {
        match self {
            Phase::WarmUp => 'W',
            Phase::Bp => 'B',
            Phase::Gp => 'G',
        }
    }

    /// Whether the batch runs true backpropagation.
    pub fn uses_backprop(self) -> bool {
        !matches!(self, Phase::Gp)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::WarmUp => "warmup",
            Phase::Bp => "bp",
            Phase::Gp => "gp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    /// Warm-up epochs (`L`).
    pub warmup_epochs: u32,
    /// BP batches per cycle at the end of warm-up.
    pub m_initial: u32,
    /// GP batches per cycle.
    pub k: u32,
    /// Added to `m` after each post-warm-up epoch.
    pub growth: u32,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { warmup_epochs: 3, m_initial: 1, k: 4, growth: 1 }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.m_initial < 1 {
            return Err(Error::Schedule("m_initial must be at least 1".into()));
        }
        if self.k < self.m_initial {
            return Err(Error::Schedule(format!(
                "k ({}) must be at least m_initial ({})",
                self.k, self.m_initial
            )));
        }
        Ok(())
    }
}

/// Batches per phase, as logged by a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub warmup: u64,
    pub bp: u64,
    pub gp: u64,
}

impl PhaseCounts {
    pub fn record(&mut self, phase: Phase) {
        match phase {
            Phase::WarmUp => self.warmup += 1,
            Phase::Bp => self.bp += 1,
            Phase::Gp => self.gp += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.warmup + self.bp + self.gp
    }

    pub fn add(&mut self, other: &PhaseCounts) {
        self.warmup += other.warmup;
        self.bp += other.bp;
        self.gp += other.gp;
    }
}

/// Fractions of warm-up, BP and GP batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFractions {
    pub warmup: f64,
    pub bp: f64,
    pub gp: f64,
}

impl PhaseFractions {
    pub fn new(warmup: f64, bp: f64, gp: f64) -> Result<Self> {
        let f = Self { warmup, bp, gp };
        if [warmup, bp, gp].iter().any(|v| !(0.0..=1.0).contains(v)) || (f.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Schedule(format!(
                "phase fractions ({warmup}, {bp}, {gp}) must be in [0, 1] and sum to 1"
            )));
        }
        Ok(f)
    }

    pub fn sum(&self) -> f64 {
        self.warmup + self.bp + self.gp
    }

    /// Share of batches that run backprop (warm-up plus BP).
    pub fn backprop(&self) -> f64 {
        self.warmup + self.bp
    }

    /// Long-run mix once `m` has settled: one cycle of `k` GP and `m` BP batches.
    pub fn steady_state(m: u32, k: u32) -> Result<Self> {
        phase_fractions(&PhaseCounts { warmup: 0, bp: m as u64, gp: k as u64 })
    }
}

pub fn phase_fractions(counts: &PhaseCounts) -> Result<PhaseFractions> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Schedule("phase fractions of an empty run".into()));
    }
    let t = total as f64;
    let bp = counts.bp as f64 / t;
    let gp = counts.gp as f64 / t;
    // Derive the last share by subtraction so the three sum to 1 exactly.
    Ok(PhaseFractions { warmup: 1.0 - bp - gp, bp, gp })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseState {
    params: ScheduleParams,
    m: u32,
    epoch: u32,
    /// Position inside the current GP/BP cycle.
    cycle_pos: u32,
    /// `m` latched when the current cycle started.
    cycle_m: u32,
    counts: PhaseCounts,
}

impl PhaseState {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            m: params.m_initial,
            epoch: 0,
            cycle_pos: 0,
            cycle_m: params.m_initial,
            counts: PhaseCounts::default(),
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn k(&self) -> u32 {
        self.params.k
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn in_warmup(&self) -> bool {
        self.epoch < self.params.warmup_epochs
    }

    pub fn counts(&self) -> &PhaseCounts {
        &self.counts
    }

    /// Phase of the next batch. Cycles run on across epoch boundaries; a new
    /// cycle picks up the `m` in force when it starts.
    pub fn next_batch_phase(&mut self) -> Phase {
        let phase = if self.in_warmup() {
            Phase::WarmUp
        } else {
            if self.cycle_pos == 0 {
                self.cycle_m = self.m;
            }
            let phase = if self.cycle_pos < self.params.k { Phase::Gp } else { Phase::Bp };
            self.cycle_pos += 1;
            if self.cycle_pos == self.params.k + self.cycle_m {
                self.cycle_pos = 0;
            }
            phase
        };
        self.counts.record(phase);
        phase
    }

    /// Closes the current epoch; grows `m` if the epoch was past warm-up.
    pub fn end_of_epoch(&mut self) {
        if !self.in_warmup() {
            self.m = self.params.k.min(self.m.saturating_add(self.params.growth));
        }
        self.epoch += 1;
    }
}

/// Phase tags of a whole run, one inner vector per epoch.
pub fn unroll(params: ScheduleParams, epochs: u32, batches_per_epoch: usize) -> Result<Vec<Vec<Phase>>> {
    let mut state = PhaseState::new(params)?;
    Ok((0..epochs)
        .map(|_| {
            let tags = (0..batches_per_epoch).map(|_| state.next_batch_phase()).collect();
            state.end_of_epoch();
            tags
        })
        .collect())
}
