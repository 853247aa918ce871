//! Off-chip memory traffic per batch and the energy it costs.
//!
//! Counting rules, per layer (elements, batch size `B`):
//!
//! * forward: weights read once per buffer pass, input activations read,
//!   output activations written;
//! * backward (baseline and BP batches only): weights re-read, stored input
//!   activations re-read, upstream gradients read, input gradients and weight
//!   gradients written, weight gradients read back for the update;
//! * update (every batch, GP included): weights written;
//! * predictor (BP and GP batches, streamed mode only): predictor weights read
//!   per layer invocation, the batch-mean activations read, and in BP batches
//!   the predictor weights read again and written for its training step.
//!
//! With a finite on-chip buffer a layer's weights are streamed once per pass,
//! `ceil((W + B * A_in) / capacity)` passes per sweep.

use serde::{Deserialize, Serialize};

use crate::costmodel::StepPhase;
use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::model::ModelSpec;
use crate::predictor::{PredictorConfig, PredictorNet};
use crate::scheduler::PhaseFractions;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounts {
    pub fw_weight_reads: u64,
    pub fw_activation_reads: u64,
    pub fw_activation_writes: u64,
    pub bw_weight_reads: u64,
    pub bw_activation_reads: u64,
    pub bw_gradient_reads: u64,
    pub bw_gradient_writes: u64,
    pub update_weight_writes: u64,
    pub predictor_reads: u64,
    pub predictor_writes: u64,
}

impl AccessCounts {
    pub fn reads(&self) -> u64 {
        self.fw_weight_reads
            + self.fw_activation_reads
            + self.bw_weight_reads
            + self.bw_activation_reads
            + self.bw_gradient_reads
            + self.predictor_reads
    }

    pub fn writes(&self) -> u64 {
        self.fw_activation_writes + self.bw_gradient_writes + self.update_weight_writes + self.predictor_writes
    }

    /// Only the backward-pass fields.
    pub fn backward_only(&self) -> AccessCounts {
        AccessCounts {
            bw_weight_reads: self.bw_weight_reads,
            bw_activation_reads: self.bw_activation_reads,
            bw_gradient_reads: self.bw_gradient_reads,
            bw_gradient_writes: self.bw_gradient_writes,
            ..Default::default()
        }
    }

    pub fn weight_reads(&self) -> u64 {
        self.fw_weight_reads + self.bw_weight_reads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorTraffic {
    /// Predictor weights stay on chip; it adds no off-chip traffic.
    Resident,
    /// Predictor weights and inputs are fetched from off-chip memory.
    Streamed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    /// Energy of one off-chip element read (arbitrary units).
    pub read_energy: f64,
    /// Energy of one off-chip element write.
    pub write_energy: f64,
    /// On-chip buffer size in elements; `None` holds any layer entirely.
    pub buffer_capacity: Option<u64>,
    pub predictor_traffic: PredictorTraffic,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self { read_energy: 1.0, write_energy: 1.25, buffer_capacity: None, predictor_traffic: PredictorTraffic::Resident }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.read_energy > 0.0 && self.write_energy > 0.0) {
            return Err(Error::Config("read_energy and write_energy must be positive".into()));
        }
        if self.buffer_capacity == Some(0) {
            return Err(Error::Config("buffer_capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { read_energy: self.read_energy * c, write_energy: self.write_energy * c, ..*self }
    }
}

fn weight_count(layer: &LayerKind) -> u64 {
    layer.param_shapes().map_or(0, |(w, b)| (w.iter().product::<usize>() + b.iter().product::<usize>()) as u64)
}

/// Per-batch off-chip accesses of `spec` in the given phase.
pub fn count_accesses(
    spec: &ModelSpec,
    phase: StepPhase,
    batch: usize,
    params: &EnergyParams,
    predictor: &PredictorConfig,
) -> Result<AccessCounts> {
    let shapes = spec.shapes()?;
    let b = batch as u64;
    let kinds = spec.trainable_layers();
    let predictor_size = match phase {
        StepPhase::Baseline => 0,
        _ => {
            let f_max = PredictorNet::required_width(&kinds, predictor);
            let s = predictor.pool_size * predictor.pool_size;
            let c = predictor.conv_channels;
            (c * 9 + c + c * s * f_max + f_max) as u64
        }
    };
    let streamed = params.predictor_traffic == PredictorTraffic::Streamed;
    let mut n = AccessCounts::default();
    for (i, layer) in spec.layers.iter().enumerate() {
        if *layer == LayerKind::SoftmaxCrossEntropy {
            continue;
        }
        let a_in: u64 = shapes[i].iter().product::<usize>() as u64;
        let a_out: u64 = shapes[i + 1].iter().product::<usize>() as u64;
        let w = weight_count(layer);
        let passes = match params.buffer_capacity {
            Some(cap) if w > 0 => (w + b * a_in).div_ceil(cap),
            _ => 1,
        };
        n.fw_weight_reads += w * passes;
        n.fw_activation_reads += b * a_in;
        n.fw_activation_writes += b * a_out;
        if phase != StepPhase::Gp {
            n.bw_weight_reads += w * passes;
            n.bw_activation_reads += b * a_in;
            n.bw_gradient_reads += b * a_out + w;
            n.bw_gradient_writes += b * a_in + w;
        }
        n.update_weight_writes += w;
        if streamed && layer.is_trainable() && phase != StepPhase::Baseline {
            n.predictor_reads += predictor_size + a_out;
            if phase == StepPhase::Bp {
                n.predictor_reads += predictor_size;
                n.predictor_writes += predictor_size;
            }
        }
    }
    Ok(n)
}

pub fn energy_total(counts: &AccessCounts, params: &EnergyParams) -> f64 {
    counts.reads() as f64 * params.read_energy + counts.writes() as f64 * params.write_energy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub baseline: AccessCounts,
    pub bp: AccessCounts,
    pub gp: AccessCounts,
    pub baseline_energy: f64,
    pub bp_energy: f64,
    pub gp_energy: f64,
    /// Backward share of the baseline batch energy.
    pub f_bw: f64,
    pub mixed_energy: f64,
    /// `1 - mixed / baseline`.
    pub reduction: f64,
    /// GP fraction at which the mixed schedule starts saving energy.
    pub break_even_gp_fraction: f64,
}

/// Energy of a batch mix against the all-backprop baseline, per batch.
pub fn compare_schedules(
    spec: &ModelSpec,
    fractions: &PhaseFractions,
    batch: usize,
    params: &EnergyParams,
    predictor: &PredictorConfig,
) -> Result<EnergyReport> {
    params.validate()?;
    if (fractions.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("phase fractions must sum to 1".into()));
    }
    let baseline = count_accesses(spec, StepPhase::Baseline, batch, params, predictor)?;
    let bp = count_accesses(spec, StepPhase::Bp, batch, params, predictor)?;
    let gp = count_accesses(spec, StepPhase::Gp, batch, params, predictor)?;
    let (eb, ep, eg) = (energy_total(&baseline, params), energy_total(&bp, params), energy_total(&gp, params));
    let mixed = fractions.backprop() * ep + fractions.gp * eg;
    let (cost, gain) = (ep - eb, eb - eg);
    Ok(EnergyReport {
        f_bw: energy_total(&baseline.backward_only(), params) / eb,
        baseline,
        bp,
        gp,
        baseline_energy: eb,
        bp_energy: ep,
        gp_energy: eg,
        mixed_energy: mixed,
        reduction: 1.0 - mixed / eb,
        break_even_gp_fraction: if cost + gain > 0.0 { cost / (cost + gain) } else { 1.0 },
    })
}
