//! Central-difference gradient checking for short layer stacks.

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, Cache, LayerKind, Params};
use crate::tensor::Tensor;

/// Scalar reduction applied to a fragment's output.
#[derive(Clone, Debug)]
pub enum Probe {
    /// `sum(out * weights)`.
    Project(Tensor),
    /// `0.5 * sum(out^2)`.
    HalfSquared,
}

impl Probe {
    fn value(&self, out: &Tensor) -> f64 {
        match self {
            Probe::Project(r) => out.dot(r),
            Probe::HalfSquared => 0.5 * out.dot(out),
        }
    }

    fn grad(&self, out: &Tensor) -> Result<Tensor> {
        match self {
            Probe::Project(r) => {
                r.check_shape(out.shape(), "probe weights")?;
                Ok(r.clone())
            }
            Probe::HalfSquared => Ok(out.clone()),
        }
    }
}

/// A stack of layers with their parameters, small enough to perturb every value.
#[derive(Clone, Debug)]
pub struct Fragment {
    pub layers: Vec<LayerKind>,
    pub params: Vec<Option<Params>>,
    pub labels: Option<Vec<usize>>,
}

impl Fragment {
    pub fn new(layers: Vec<LayerKind>, params: Vec<Option<Params>>) -> Self {
        Self { layers, params, labels: None }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }

    /// Runs layers `from..` on `x`, appending each layer's input to `inputs`
    /// (when given) and each layer's branch signature to `sigs`.
    fn run_from(
        &self,
        from: usize,
        mut x: Tensor,
        mut inputs: Option<&mut Vec<Tensor>>,
        sigs: &mut Vec<u64>,
    ) -> Result<Tensor> {
        for i in from..self.layers.len() {
            let (y, cache) = layer_forward(&self.layers[i], self.params[i].as_ref(), &x, self.labels.as_deref())
                .map_err(|e| e.at_layer(i))?;
            sigs.push(branch_signature(&cache));
            if let Some(v) = inputs.as_deref_mut() {
                v.push(x);
            }
            x = y;
        }
        Ok(x)
    }

    fn probed(&self, out: &Tensor, probe: &Probe) -> Result<f64> {
        let v = probe.value(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { context: "fragment loss".into() })
        }
    }

    /// Analytic gradients of the probed loss: `(input_grad, per-layer param grads)`.
    pub fn gradients(&self, input: &Tensor, probe: &Probe) -> Result<(Tensor, Vec<Option<Params>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, (kind, p)) in self.layers.iter().zip(&self.params).enumerate() {
            let (y, c) = layer_forward(kind, p.as_ref(), &x, self.labels.as_deref())
                .map_err(|e| e.at_layer(i))?;
            caches.push(c);
            x = y;
        }
        let mut g = probe.grad(&x)?;
        let mut grads = vec![None; self.layers.len()];
        for (i, cache) in caches.into_iter().enumerate().rev() {
            let (gi, gp) = layer_backward(&self.layers[i], self.params[i].as_ref(), cache, &g)
                .map_err(|e| e.at_layer(i))?;
            grads[i] = gp;
            g = gi;
        }
        Ok((g, grads))
    }
}

/// Hash of the discrete choices a layer made (ReLU signs, max-pool winners).
/// Piecewise-linear layers are only differentiable where these stay fixed.
fn branch_signature(cache: &Cache) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
    match cache {
        Cache::Relu { input } => input.data().iter().for_each(|&v| eat(u64::from(v > 0.0))),
        Cache::MaxPool2d { argmax, .. } => argmax.iter().for_each(|&i| eat(i as u64)),
        _ => {}
    }
    h
}

fn param_slot(frag: &mut Fragment, layer: usize, which: usize, i: usize) -> &mut f64 {
    let p = frag.params[layer].as_mut().expect("trainable layer");
    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
    &mut t.data_mut()[i]
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckReport {
    /// Max of `|analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `+-epsilon` probe crossed a ReLU or max-pool switch,
    /// where the central difference is not a derivative.
    pub skipped: usize,
}

/// Max over every parameter and input element of
/// `|analytic - central_difference| / max(1, |central_difference|)`,
/// skipping coordinates whose perturbation crosses a non-differentiable point.
pub fn finite_diff_check(fragment: &Fragment, input: &Tensor, probe: &Probe, epsilon: f64) -> Result<f64> {
    Ok(finite_diff_report(fragment, input, probe, epsilon)?.max_rel_error)
}

pub fn finite_diff_report(fragment: &Fragment, input: &Tensor, probe: &Probe, epsilon: f64) -> Result<CheckReport> {
    finite_diff_strided(fragment, input, probe, epsilon, 1, 0)
}

/// Like [`finite_diff_report`] but only perturbs every `stride`-th coordinate
/// of each tensor, starting at `offset % stride`. Rotating the offset across
/// seeds covers every coordinate at a fraction of the cost.
pub fn finite_diff_strided(
    fragment: &Fragment,
    input: &Tensor,
    probe: &Probe,
    epsilon: f64,
    stride: usize,
    offset: usize,
) -> Result<CheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let start = offset % stride;
    let (gin, gparams) = fragment.gradients(input, probe)?;
    let mut inputs = Vec::new();
    let mut base_sigs = Vec::new();
    fragment.run_from(0, input.clone(), Some(&mut inputs), &mut base_sigs)?;

    let mut report = CheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    // loss with layer `from` fed `x`; None if a branch choice changed
    let eval = |frag: &Fragment, from: usize, x: Tensor| -> Result<Option<f64>> {
        let mut sigs = Vec::new();
        let out = frag.run_from(from, x, None, &mut sigs)?;
        let v = frag.probed(&out, probe)?;
        Ok((sigs[..] == base_sigs[from..]).then_some(v))
    };
    let mut record = |analytic: f64, up: Option<f64>, down: Option<f64>| match (up, down) {
        (Some(u), Some(d)) => {
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel_err(analytic, (u - d) / (2.0 * epsilon)));
        }
        _ => report.skipped += 1,
    };

    let mut x = input.clone();
    for i in (start..x.len()).step_by(stride) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let up = eval(fragment, 0, x.clone())?;
        x.data_mut()[i] = orig - epsilon;
        let down = eval(fragment, 0, x.clone())?;
        x.data_mut()[i] = orig;
        record(gin.data()[i], up, down);
    }

    let mut frag = fragment.clone();
    for (l, grad) in gparams.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for which in 0..2 {
            let analytic = if which == 0 { grad.weight.data() } else { grad.bias.data() };
            for (i, &a) in analytic.iter().enumerate().skip(start).step_by(stride) {
                let orig = *param_slot(&mut frag, l, which, i);
                *param_slot(&mut frag, l, which, i) = orig + epsilon;
                let up = eval(&frag, l, inputs[l].clone())?;
                *param_slot(&mut frag, l, which, i) = orig - epsilon;
                let down = eval(&frag, l, inputs[l].clone())?;
                *param_slot(&mut frag, l, which, i) = orig;
                record(a, up, down);
            }
        }
    }
    Ok(report)
}
