//! The shared gradient predictor.
//!
//! A layer's output activations are averaged over the batch and each output
//! channel becomes one sample of a pseudo-batch `(C_out, 1, H, W)`. One small
//! network (adaptive average pool, 3x3 conv, ReLU, fully connected) maps every
//! such sample to a row of `F_max` values: the predicted gradient of that
//! channel's filter. `F_max` is sized for the widest filter of the attached
//! model; narrower layers read only the first `fan_in (+1 bias)` columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, LayerKind, Params};
use crate::model::GradientEntry;
use crate::optim::Optimizer;
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Side of the adaptive average pool output.
    pub pool_size: usize,
    /// Output channels of the predictor's convolution.
    pub conv_channels: usize,
    /// Predict a bias gradient as one extra column per filter row.
    pub predict_bias: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { pool_size: 7, conv_channels: 8, predict_bias: true }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.conv_channels == 0 {
            return Err(Error::Config("predictor pool_size and conv_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Batch-averaged activations of one layer, one row per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ReorganizedInput {
    /// Shape `(C_out, 1, H, W)`; dense layers give `(D, 1, 1, 1)`.
    pub tensor: Tensor,
    pub layer: usize,
}

/// Batch mean of a layer's output, with channels promoted to the batch axis.
pub fn reorganize(activations: &Tensor, layer: &LayerKind, layer_id: usize) -> Result<ReorganizedInput> {
    let shape = activations.shape();
    let (batch, channels, h, w) = match *shape {
        [b, c, h, w] => (b, c, h, w),
        [b, d] => (b, d, 1, 1),
        _ => {
            return Err(Error::shape(format!(
                "activations must have rank 2 or 4, got {shape:?}"
            )))
        }
    };
    let expected = match (layer, shape.len()) {
        (LayerKind::Conv2d { out_ch, .. }, 4) => *out_ch,
        (LayerKind::Dense { outputs, .. }, 2) => *outputs,
        _ => {
            return Err(Error::shape(format!(
                "activations {shape:?} do not belong to a {layer} layer"
            )))
        }
    };
    if channels != expected {
        return Err(Error::shape(format!(
            "{layer} produces {expected} channels, activations have {channels}"
        )));
    }
    let plane = channels * h * w;
    let mut mean = vec![0.0; plane];
    for sample in activations.data().chunks(plane) {
        mean.iter_mut().zip(sample).for_each(|(m, v)| *m += v);
    }
    let inv = 1.0 / batch as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(ReorganizedInput { tensor: Tensor::new(vec![channels, 1, h, w], mean)?, layer: layer_id })
}

/// Which columns of the predictor output belong to a given layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionMask {
    pub layer: LayerKind,
    pub rows: usize,
    pub weight_cols: usize,
    pub bias: bool,
}

impl PredictionMask {
    pub fn for_layer(layer: &LayerKind, predict_bias: bool) -> Result<Self> {
        match (layer.fan_out(), layer.fan_in()) {
            (Some(rows), Some(weight_cols)) => {
                Ok(Self { layer: *layer, rows, weight_cols, bias: predict_bias })
            }
            _ => Err(Error::shape(format!("{layer} has no weights to predict"))),
        }
    }

    /// Valid columns per row.
    pub fn width(&self) -> usize {
        self.weight_cols + usize::from(self.bias)
    }
}

/// Rearranges a `(out, in, kh, kw)` convolution weight (or gradient) into the
/// `(in, out, kh, kw)` order some frameworks print.
pub fn transpose_out_in(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected a rank-4 weight, got {s:?}")));
    }
    let (o, i, k) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[i, o, s[2], s[3]]);
    for a in 0..o {
        for b in 0..i {
            let src = (a * i + b) * k;
            let dst = (b * o + a) * k;
            out.data_mut()[dst..dst + k].copy_from_slice(&t.data()[src..src + k]);
        }
    }
    Ok(out)
}

fn adaptive_avg_pool(x: &Tensor, size: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Tensor::zeros(&[n, c, size, size]);
    for plane in 0..n * c {
        for oy in 0..size {
            let (y0, y1) = (oy * h / size, ((oy + 1) * h).div_ceil(size));
            for ox in 0..size {
                let (x0, x1) = (ox * w / size, ((ox + 1) * w).div_ceil(size));
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x.data()[plane * h * w + iy * w + ix];
                    }
                }
                y.data_mut()[(plane * size + oy) * size + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    y
}

/// The single predictor network shared by every layer of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorNet {
    config: PredictorConfig,
    f_max: usize,
    conv: Params,
    fc: Params,
}

impl PredictorNet {
    /// `F_max` for a model: widest filter row, plus one when biases are predicted.
    pub fn required_width(layers: &[LayerKind], config: &PredictorConfig) -> usize {
        layers.iter().filter_map(LayerKind::fan_in).max().unwrap_or(0) + usize::from(config.predict_bias)
    }

    /// Builds a predictor sized for the given trainable layers. The output layer
    /// starts at zero so the first predictions are zero gradients.
    pub fn for_layers(layers: &[LayerKind], config: PredictorConfig, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let f_max = Self::required_width(layers, &config);
        if f_max == 0 {
            return Err(Error::Build("no trainable layers to predict for".into()));
        }
        let conv = Params::init(&Self::conv_kind(&config), rng).unwrap();
        let fc = Params::zeros(&Self::fc_kind(&config, f_max)).unwrap();
        Ok(Self { config, f_max, conv, fc })
    }

    fn conv_kind(config: &PredictorConfig) -> LayerKind {
        LayerKind::conv(1, config.conv_channels, 3, 1, 1)
    }

    fn fc_kind(config: &PredictorConfig, f_max: usize) -> LayerKind {
        LayerKind::dense(config.conv_channels * config.pool_size * config.pool_size, f_max)
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn f_max(&self) -> usize {
        self.f_max
    }

    /// The parameter tensors, in optimizer-slot order.
    pub fn params(&self) -> [&Params; 2] {
        [&self.conv, &self.fc]
    }

    pub fn params_mut(&mut self) -> [&mut Params; 2] {
        [&mut self.conv, &mut self.fc]
    }

    pub fn parameter_count(&self) -> usize {
        self.conv.len() + self.fc.len()
    }

    /// Stable checksum of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Multiply-accumulates of one invocation on a reorganized input.
    pub fn macs(&self, rows: usize, h: usize, w: usize) -> u64 {
        predictor_macs(&self.config, self.f_max, rows, h, w)
    }

    fn check_mask(&self, reorg: &ReorganizedInput, mask: &PredictionMask) -> Result<()> {
        if mask.width() > self.f_max {
            return Err(Error::shape(format!(
                "{} needs {} predictor columns but the predictor only has {}; rebuild it for this model",
                mask.layer,
                mask.width(),
                self.f_max
            )));
        }
        if reorg.tensor.shape()[0] != mask.rows {
            return Err(Error::shape(format!(
                "reorganized input has {} rows, {} expects {}",
                reorg.tensor.shape()[0],
                mask.layer,
                mask.rows
            )));
        }
        Ok(())
    }

    /// Full `(rows, F_max)` output before masking.
    pub fn raw_output(&self, reorg: &ReorganizedInput) -> Result<Tensor> {
        Ok(self.forward(reorg)?.0)
    }

    fn forward(&self, reorg: &ReorganizedInput) -> Result<(Tensor, Vec<crate::layers::Cache>)> {
        let pooled = adaptive_avg_pool(&reorg.tensor, self.config.pool_size);
        let (h1, c1) = layer_forward(&Self::conv_kind(&self.config), Some(&self.conv), &pooled, None)?;
        let (h2, c2) = layer_forward(&LayerKind::Relu, None, &h1, None)?;
        let (h3, c3) = layer_forward(&LayerKind::Flatten, None, &h2, None)?;
        let (out, c4) = layer_forward(&Self::fc_kind(&self.config, self.f_max), Some(&self.fc), &h3, None)?;
        Ok((out, vec![c1, c2, c3, c4]))
    }

    /// Predicted gradient for one layer, shaped like its parameters.
    pub fn predict(&self, reorg: &ReorganizedInput, mask: &PredictionMask) -> Result<GradientEntry> {
        self.check_mask(reorg, mask)?;
        let raw = self.raw_output(reorg)?;
        unpack_rows(&raw, mask)
    }

    /// One optimizer step on the masked mean squared error against `target`.
    /// Returns the loss and the prediction made before the step.
    pub fn train_step(
        &mut self,
        reorg: &ReorganizedInput,
        target: &GradientEntry,
        mask: &PredictionMask,
        optimizer: &mut Optimizer,
    ) -> Result<(f64, GradientEntry)> {
        self.check_mask(reorg, mask)?;
        let target_rows = pack_rows(target, mask)?;
        let (raw, mut caches) = self.forward(reorg)?;
        let prediction = unpack_rows(&raw, mask)?;
        let (loss, grad_raw) = masked_mse(&raw, &target_rows, mask);

        let c4 = caches.pop().unwrap();
        let c3 = caches.pop().unwrap();
        let c2 = caches.pop().unwrap();
        let c1 = caches.pop().unwrap();
        let fc_kind = Self::fc_kind(&self.config, self.f_max);
        let (g3, g_fc) = layer_backward(&fc_kind, Some(&self.fc), c4, &grad_raw)?;
        let (g2, _) = layer_backward(&LayerKind::Flatten, None, c3, &g3)?;
        let (g1, _) = layer_backward(&LayerKind::Relu, None, c2, &g2)?;
        let (_, g_conv) = layer_backward(&Self::conv_kind(&self.config), Some(&self.conv), c1, &g1)?;
        let (g_conv, g_fc) = (g_conv.unwrap(), g_fc.unwrap());

        optimizer.step(0, &mut self.conv.weight, &g_conv.weight)?;
        optimizer.step(1, &mut self.conv.bias, &g_conv.bias)?;
        optimizer.step(2, &mut self.fc.weight, &g_fc.weight)?;
        optimizer.step(3, &mut self.fc.bias, &g_fc.bias)?;
        Ok((loss, prediction))
    }
}

/// Multiply-accumulates of one predictor invocation on `rows` planes of `h x w`.
pub fn predictor_macs(c: &PredictorConfig, f_max: usize, rows: usize, h: usize, w: usize) -> u64 {
    let s = c.pool_size;
    let pool = h.max(s) * w.max(s);
    let conv = c.conv_channels * s * s * 9;
    let fc = c.conv_channels * s * s * f_max;
    (rows * (pool + conv + fc)) as u64
}

/// Free-function form of [`PredictorNet::predict`].
pub fn predict(net: &PredictorNet, reorg: &ReorganizedInput, mask: &PredictionMask) -> Result<GradientEntry> {
    net.predict(reorg, mask)
}

/// Free-function form of [`PredictorNet::train_step`] returning only the loss.
pub fn train_predictor_step(
    net: &mut PredictorNet,
    reorg: &ReorganizedInput,
    target: &GradientEntry,
    mask: &PredictionMask,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    Ok(net.train_step(reorg, target, mask, optimizer)?.0)
}

/// `(rows, width)` target matrix: weight row followed by the bias (if predicted).
fn pack_rows(entry: &GradientEntry, mask: &PredictionMask) -> Result<Tensor> {
    let (ws, bs) = mask.layer.param_shapes().unwrap();
    entry.weight.check_shape(&ws, "true weight gradient")?;
    entry.bias.check_shape(&bs, "true bias gradient")?;
    let width = mask.width();
    let mut rows = Tensor::zeros(&[mask.rows, width]);
    for r in 0..mask.rows {
        let dst = &mut rows.data_mut()[r * width..(r + 1) * width];
        dst[..mask.weight_cols]
            .copy_from_slice(&entry.weight.data()[r * mask.weight_cols..(r + 1) * mask.weight_cols]);
        if mask.bias {
            dst[mask.weight_cols] = entry.bias.data()[r];
        }
    }
    Ok(rows)
}

/// Reads the valid columns of a raw `(rows, F_max)` output into parameter shapes.
fn unpack_rows(raw: &Tensor, mask: &PredictionMask) -> Result<GradientEntry> {
    let f_max = raw.shape()[1];
    let (ws, bs) = mask.layer.param_shapes().unwrap();
    let mut weight = Vec::with_capacity(mask.rows * mask.weight_cols);
    let mut bias = vec![0.0; mask.rows];
    for r in 0..mask.rows {
        let row = &raw.data()[r * f_max..(r + 1) * f_max];
        weight.extend_from_slice(&row[..mask.weight_cols]);
        if mask.bias {
            bias[r] = row[mask.weight_cols];
        }
    }
    Ok(GradientEntry { weight: Tensor::new(ws, weight)?, bias: Tensor::new(bs, bias)? })
}

/// Mean squared error over the unmasked columns and its gradient on the raw output.
pub fn masked_mse(raw: &Tensor, target_rows: &Tensor, mask: &PredictionMask) -> (f64, Tensor) {
    let f_max = raw.shape()[1];
    let width = mask.width();
    let n = (mask.rows * width) as f64;
    let mut grad = Tensor::zeros(raw.shape());
    let mut loss = 0.0;
    for r in 0..mask.rows {
        for c in 0..width {
            let d = raw.data()[r * f_max + c] - target_rows.data()[r * width + c];
            loss += d * d;
            grad.data_mut()[r * f_max + c] = 2.0 * d / n;
        }
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = seeded(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn reorganize_vgg_layer_shape() {
        let layer = LayerKind::conv(128, 256, 3, 1, 1);
        let acts = Tensor::zeros(&[2, 256, 28, 28]);
        let r = reorganize(&acts, &layer, 3).unwrap();
        assert_eq!(r.tensor.shape(), &[256, 1, 28, 28]);
        let mask = PredictionMask::for_layer(&layer, false).unwrap();
        assert_eq!((mask.rows, mask.width()), (256, 1152));
    }

    #[test]
    fn reorganize_single_sample_is_identity() {
        let layer = LayerKind::conv(1, 2, 3, 1, 1);
        let acts = random(&[1, 2, 3, 3], 1);
        let r = reorganize(&acts, &layer, 0).unwrap();
        assert_eq!(r.tensor.data(), acts.data());
    }

    #[test]
    fn reorganize_is_batch_mean() {
        let layer = LayerKind::conv(1, 2, 3, 1, 1);
        let acts = random(&[4, 2, 3, 3], 2);
        let r = reorganize(&acts, &layer, 0).unwrap();
        for c in 0..2 {
            for p in 0..9 {
                let sum: f64 = (0..4).map(|b| acts.data()[(b * 2 + c) * 9 + p]).sum();
                assert!((r.tensor.data()[c * 9 + p] - sum / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reorganize_rejects_bad_rank() {
        let layer = LayerKind::dense(2, 3);
        assert!(reorganize(&Tensor::zeros(&[2, 3, 4]), &layer, 0).is_err());
        assert!(reorganize(&Tensor::zeros(&[2, 4]), &layer, 0).is_err());
        let r = reorganize(&Tensor::zeros(&[2, 3]), &layer, 0).unwrap();
        assert_eq!(r.tensor.shape(), &[3, 1, 1, 1]);
    }

    #[test]
    fn vgg_layer_prediction_matches_weight_shape() {
        let layer = LayerKind::conv(128, 256, 3, 1, 1);
        let cfg = PredictorConfig { predict_bias: false, ..Default::default() };
        let net = PredictorNet::for_layers(&[layer], cfg, &mut seeded(0)).unwrap();
        assert_eq!(net.f_max(), 1152);
        let reorg = reorganize(&random(&[1, 256, 28, 28], 3), &layer, 3).unwrap();
        let raw = net.raw_output(&reorg).unwrap();
        assert_eq!(raw.shape(), &[256, 1152]);
        let mask = PredictionMask::for_layer(&layer, false).unwrap();
        let g = net.predict(&reorg, &mask).unwrap();
        assert_eq!(g.weight.shape(), &[256, 128, 3, 3]);
        assert_eq!(transpose_out_in(&g.weight).unwrap().shape(), &[128, 256, 3, 3]);
    }

    #[test]
    fn transpose_moves_filter_rows() {
        let t = Tensor::from_fn(&[2, 3, 1, 2], |i| i as f64);
        let u = transpose_out_in(&t).unwrap();
        // u[b, a, :] == t[a, b, :]
        for a in 0..2 {
            for b in 0..3 {
                for k in 0..2 {
                    assert_eq!(u.data()[(b * 2 + a) * 2 + k], t.data()[(a * 3 + b) * 2 + k]);
                }
            }
        }
    }

    #[test]
    fn dense_layer_is_masked_to_fan_in() {
        let big = LayerKind::conv(128, 256, 3, 1, 1);
        let small = LayerKind::dense(4, 8);
        let cfg = PredictorConfig { predict_bias: false, ..Default::default() };
        let mut net = PredictorNet::for_layers(&[big, small], cfg, &mut seeded(0)).unwrap();
        net.fc.weight = random(net.fc.weight.shape(), 5);
        let reorg = reorganize(&random(&[3, 8], 4), &small, 1).unwrap();
        let raw = net.raw_output(&reorg).unwrap();
        assert_eq!(raw.shape(), &[8, 1152]);
        let g = net.predict(&reorg, &PredictionMask::for_layer(&small, false).unwrap()).unwrap();
        assert_eq!(g.weight.shape(), &[8, 4]);
        for r in 0..8 {
            assert_eq!(&g.weight.data()[r * 4..r * 4 + 4], &raw.data()[r * 1152..r * 1152 + 4]);
        }
        assert_eq!(g.bias.max_abs(), 0.0);
    }

    #[test]
    fn zero_weights_predict_zero() {
        let layer = LayerKind::conv(2, 3, 3, 1, 1);
        let net = PredictorNet::for_layers(&[layer], PredictorConfig::default(), &mut seeded(0)).unwrap();
        let reorg = reorganize(&random(&[2, 3, 5, 5], 1), &layer, 0).unwrap();
        let g = net.predict(&reorg, &PredictionMask::for_layer(&layer, true).unwrap()).unwrap();
        assert_eq!(g.weight.max_abs() + g.bias.max_abs(), 0.0);
    }

    #[test]
    fn too_wide_layer_is_rejected() {
        let net = PredictorNet::for_layers(&[LayerKind::dense(4, 2)], PredictorConfig::default(), &mut seeded(0))
            .unwrap();
        let wide = LayerKind::dense(10, 2);
        let reorg = reorganize(&Tensor::zeros(&[1, 2]), &wide, 0).unwrap();
        let err = net.predict(&reorg, &PredictionMask::for_layer(&wide, true).unwrap()).unwrap_err();
        assert!(err.to_string().contains("rebuild"));
    }

    #[test]
    fn exact_target_gives_zero_loss_and_no_update() {
        let layer = LayerKind::dense(3, 2);
        let mut net = PredictorNet::for_layers(&[layer], PredictorConfig::default(), &mut seeded(0)).unwrap();
        let reorg = reorganize(&random(&[4, 2], 1), &layer, 0).unwrap();
        let mask = PredictionMask::for_layer(&layer, true).unwrap();
        let target = net.predict(&reorg, &mask).unwrap();
        let before = net.clone();
        let mut opt = Optimizer::new(OptimizerConfig::predictor_default());
        let loss = train_predictor_step(&mut net, &reorg, &target, &mask, &mut opt).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn masked_tail_does_not_change_loss() {
        let layer = LayerKind::dense(3, 2);
        let mask = PredictionMask::for_layer(&layer, true).unwrap();
        let raw = random(&[2, 10], 7);
        let target = random(&[2, 4], 8);
        let (l0, g0) = masked_mse(&raw, &target, &mask);
        let mut perturbed = raw.clone();
        for r in 0..2 {
            for c in 4..10 {
                perturbed.data_mut()[r * 10 + c] += 100.0 * (c as f64);
            }
        }
        let (l1, g1) = masked_mse(&perturbed, &target, &mask);
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
        for r in 0..2 {
            assert!(g0.data()[r * 10 + 4..(r + 1) * 10].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn overfits_one_example() {
        let layer = LayerKind::conv(2, 3, 3, 1, 1);
        let mut net = PredictorNet::for_layers(&[layer], PredictorConfig::default(), &mut seeded(1)).unwrap();
        let reorg = reorganize(&random(&[4, 3, 6, 6], 2), &layer, 0).unwrap();
        let mask = PredictionMask::for_layer(&layer, true).unwrap();
        let target = GradientEntry { weight: random(&[3, 2, 3, 3], 3), bias: random(&[3], 4) };
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3));
        let losses: Vec<f64> = (0..50)
            .map(|_| train_predictor_step(&mut net, &reorg, &target, &mask, &mut opt).unwrap())
            .collect();
        let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 5, "{rises} non-monotone steps: {losses:?}");
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn adaptive_pool_replicates_small_inputs() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let y = adaptive_avg_pool(&x, 7);
        assert!(y.data().iter().all(|&v| v == 2.5));
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let y = adaptive_avg_pool(&x, 2);
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
