//! Layer kinds with explicit forward and backward rules.
//!
//! Every layer works on a leading batch dimension. Trainable layers store the
//! weight as `(out, in)` for dense and `(out_ch, in_ch, kh, kw)` for convolution,
//! so each output unit owns one contiguous row of its fan-in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2d {
        k: usize,
        s: usize,
    },
    AvgPool2d {
        k: usize,
        s: usize,
    },
    Flatten,
    SoftmaxCrossEntropy,
}

impl LayerKind {
    pub fn conv(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        LayerKind::Conv2d { in_ch, out_ch, kh: k, kw: k, stride, pad }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerKind::Dense { inputs, outputs }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// `(weight_shape, bias_shape)` for trainable layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerKind::Conv2d { in_ch, out_ch, kh, kw, .. } => {
                Some((vec![out_ch, in_ch, kh, kw], vec![out_ch]))
            }
            _ => None,
        }
    }

    /// Number of weights feeding one output unit (one filter row).
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { inputs, .. } => Some(inputs),
            LayerKind::Conv2d { in_ch, kh, kw, .. } => Some(in_ch * kh * kw),
            _ => None,
        }
    }

    /// Output units: dense width or convolution filters.
    pub fn fan_out(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { outputs, .. } => Some(outputs),
            LayerKind::Conv2d { out_ch, .. } => Some(out_ch),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Err(Error::shape(format!("{self} expects {what}, got per-sample input {input:?}")))
        };
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return bad(&format!("[{inputs}]"));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d { in_ch, out_ch, kh, kw, stride, pad } => {
                if input.len() != 3 || input[0] != in_ch {
                    return bad(&format!("[{in_ch}, H, W]"));
                }
                if stride == 0 {
                    return bad("a positive stride");
                }
                let (h, w) = (input[1] + 2 * pad, input[2] + 2 * pad);
                if h < kh || w < kw {
                    return bad("a padded input at least as large as the kernel");
                }
                Ok(vec![out_ch, (h - kh) / stride + 1, (w - kw) / stride + 1])
            }
            LayerKind::MaxPool2d { k, s } | LayerKind::AvgPool2d { k, s } => {
                if input.len() != 3 || k == 0 || s == 0 || input[1] < k || input[2] < k {
                    return bad("[C, H, W] with H, W >= kernel");
                }
                Ok(vec![input[0], (input[1] - k) / s + 1, (input[2] - k) / s + 1])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::SoftmaxCrossEntropy => {
                if input.len() != 1 {
                    return bad("[classes]");
                }
                Ok(vec![1])
            }
        }
    }

    /// Multiply-accumulate (or elementwise op) count of one forward pass.
    pub fn macs(&self, input: &[usize], batch: usize) -> Result<u64> {
        let out = self.output_shape(input)?;
        let out_elems: usize = out.iter().product();
        let per_sample = match *self {
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
            LayerKind::Conv2d { .. } => out_elems * self.fan_in().unwrap(),
            LayerKind::MaxPool2d { k, .. } | LayerKind::AvgPool2d { k, .. } => out_elems * k * k,
            LayerKind::Relu => out_elems,
            LayerKind::Flatten => 0,
            LayerKind::SoftmaxCrossEntropy => 3 * input.iter().product::<usize>(),
        };
        Ok((per_sample * batch) as u64)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            LayerKind::Dense { inputs, outputs } => write!(f, "Dense({inputs}->{outputs})"),
            LayerKind::Conv2d { in_ch, out_ch, kh, kw, stride, pad } => {
                write!(f, "Conv2d({in_ch}->{out_ch}, {kh}x{kw}, s{stride}, p{pad})")
            }
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::MaxPool2d { k, s } => write!(f, "MaxPool2d({k}, s{s})"),
            LayerKind::AvgPool2d { k, s } => write!(f, "AvgPool2d({k}, s{s})"),
            LayerKind::Flatten => write!(f, "Flatten"),
            LayerKind::SoftmaxCrossEntropy => write!(f, "SoftmaxCrossEntropy"),
        }
    }
}

/// Weight and bias of one trainable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Params {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both weight and bias.
    pub fn init(kind: &LayerKind, rng: &mut impl Rng) -> Option<Self> {
        let (ws, bs) = kind.param_shapes()?;
        let bound = 1.0 / (kind.fan_in()? as f64).sqrt();
        let weight = Tensor::from_fn(&ws, |_| rng.gen_range(-bound..bound));
        let bias = Tensor::from_fn(&bs, |_| rng.gen_range(-bound..bound));
        Some(Self { weight, bias })
    }

    pub fn zeros(kind: &LayerKind) -> Option<Self> {
        let (ws, bs) = kind.param_shapes()?;
        Some(Self { weight: Tensor::zeros(&ws), bias: Tensor::zeros(&bs) })
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whatever the backward rule needs from the forward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Dense { input: Tensor },
    Conv2d { input: Tensor },
    Relu { input: Tensor },
    MaxPool2d { input_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool2d { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    SoftmaxCrossEntropy { probs: Tensor, labels: Vec<usize> },
}

/// Runs one layer forward. `labels` is only read by the loss layer.
pub fn layer_forward(
    kind: &LayerKind,
    params: Option<&Params>,
    input: &Tensor,
    labels: Option<&[usize]>,
) -> Result<(Tensor, Cache)> {
    if input.rank() < 2 {
        return Err(Error::shape(format!(
            "{kind} needs a batched input, got {:?}",
            input.shape()
        )));
    }
    let batch = input.shape()[0];
    let out_sample = kind.output_shape(&input.shape()[1..])?;
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&out_sample);

    let need_params = || {
        params.ok_or_else(|| Error::State(format!("{kind} forward called without parameters")))
    };

    let (output, cache) = match *kind {
        LayerKind::Dense { inputs, outputs } => {
            let p = need_params()?;
            let w = p.weight.data();
            let b = p.bias.data();
            let x = input.data();
            let mut y = Tensor::zeros(&out_shape);
            let yd = y.data_mut();
            for n in 0..batch {
                let xr = &x[n * inputs..(n + 1) * inputs];
                for o in 0..outputs {
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    yd[n * outputs + o] = b[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            (y, Cache::Dense { input: input.clone() })
        }
        LayerKind::Conv2d { in_ch, out_ch, kh, kw, stride, pad } => {
            let p = need_params()?;
            let (h, w) = (input.shape()[2], input.shape()[3]);
            let (ho, wo) = (out_sample[1], out_sample[2]);
            let x = input.data();
            let wt = p.weight.data();
            let b = p.bias.data();
            let mut y = Tensor::zeros(&out_shape);
            let yd = y.data_mut();
            for n in 0..batch {
                for o in 0..out_ch {
                    let ybase = (n * out_ch + o) * ho * wo;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b[o];
                            for c in 0..in_ch {
                                let xbase = (n * in_ch + c) * h * w;
                                let wbase = (o * in_ch + c) * kh * kw;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += x[xbase + iy as usize * w + ix as usize]
                                            * wt[wbase + ky * kw + kx];
                                    }
                                }
                            }
                            yd[ybase + oy * wo + ox] = acc;
                        }
                    }
                }
            }
            (y, Cache::Conv2d { input: input.clone() })
        }
        LayerKind::Relu => {
            let y = Tensor::from_fn(input.shape(), |i| input.data()[i].max(0.0));
            (y, Cache::Relu { input: input.clone() })
        }
        LayerKind::MaxPool2d { k, s } => {
            let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
            let (ho, wo) = (out_sample[1], out_sample[2]);
            let x = input.data();
            let mut y = Tensor::zeros(&out_shape);
            let mut argmax = vec![0; y.len()];
            for plane in 0..batch * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = (0, f64::NEG_INFINITY);
                        for ky in 0..k {
                            for kx in 0..k {
                                let idx = plane * h * w + (oy * s + ky) * w + ox * s + kx;
                                if x[idx] > best.1 {
                                    best = (idx, x[idx]);
                                }
                            }
                        }
                        let o = plane * ho * wo + oy * wo + ox;
                        y.data_mut()[o] = best.1;
                        argmax[o] = best.0;
                    }
                }
            }
            (y, Cache::MaxPool2d { input_shape: input.shape().to_vec(), argmax })
        }
        LayerKind::AvgPool2d { k, s } => {
            let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
            let (ho, wo) = (out_sample[1], out_sample[2]);
            let x = input.data();
            let norm = 1.0 / (k * k) as f64;
            let mut y = Tensor::zeros(&out_shape);
            for plane in 0..batch * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += x[plane * h * w + (oy * s + ky) * w + ox * s + kx];
                            }
                        }
                        y.data_mut()[plane * ho * wo + oy * wo + ox] = acc * norm;
                    }
                }
            }
            (y, Cache::AvgPool2d { input_shape: input.shape().to_vec() })
        }
        LayerKind::Flatten => {
            let y = input.clone().reshape(&out_shape)?;
            (y, Cache::Flatten { input_shape: input.shape().to_vec() })
        }
        LayerKind::SoftmaxCrossEntropy => {
            let labels = labels
                .ok_or_else(|| Error::State("loss layer called without labels".into()))?;
            let classes = input.shape()[1];
            if labels.len() != batch {
                return Err(Error::shape(format!(
                    "{} labels for a batch of {batch}",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::shape(format!("label {bad} out of range for {classes} classes")));
            }
            let mut probs = input.clone();
            let mut loss = 0.0;
            for (row, &label) in probs.data_mut().chunks_mut(classes).zip(labels) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - row[label];
                row.iter_mut().for_each(|v| *v = (*v - log_z).exp());
            }
            let y = Tensor::scalar(loss / batch as f64);
            (y, Cache::SoftmaxCrossEntropy { probs, labels: labels.to_vec() })
        }
    };
    output.ensure_finite(&format!("{kind} output"))?;
    Ok((output, cache))
}

/// Gradient of one layer with respect to its input and (if any) its parameters.
pub fn layer_backward(
    kind: &LayerKind,
    params: Option<&Params>,
    cache: Cache,
    upstream: &Tensor,
) -> Result<(Tensor, Option<Params>)> {
    let mismatch = || Error::State(format!("cache does not belong to a {kind} layer"));
    let need_params = || {
        params.ok_or_else(|| Error::State(format!("{kind} backward called without parameters")))
    };
    let (grad_in, grad_params) = match (*kind, cache) {
        (LayerKind::Dense { inputs, outputs }, Cache::Dense { input }) => {
            let p = need_params()?;
            let batch = input.shape()[0];
            upstream.check_shape(&[batch, outputs], "Dense upstream gradient")?;
            let (x, g, w) = (input.data(), upstream.data(), p.weight.data());
            let mut dx = Tensor::zeros(input.shape());
            let mut dw = Tensor::zeros(p.weight.shape());
            let mut db = Tensor::zeros(p.bias.shape());
            for n in 0..batch {
                for o in 0..outputs {
                    let go = g[n * outputs + o];
                    if go == 0.0 {
                        continue;
                    }
                    db.data_mut()[o] += go;
                    let dwr = &mut dw.data_mut()[o * inputs..(o + 1) * inputs];
                    for (d, xi) in dwr.iter_mut().zip(&x[n * inputs..(n + 1) * inputs]) {
                        *d += go * xi;
                    }
                    let dxr = &mut dx.data_mut()[n * inputs..(n + 1) * inputs];
                    for (d, wi) in dxr.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                        *d += go * wi;
                    }
                }
            }
            (dx, Some(Params { weight: dw, bias: db }))
        }
        (LayerKind::Conv2d { in_ch, out_ch, kh, kw, stride, pad }, Cache::Conv2d { input }) => {
            let p = need_params()?;
            let out = kind.output_shape(&input.shape()[1..])?;
            let (batch, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
            let (ho, wo) = (out[1], out[2]);
            upstream.check_shape(&[batch, out_ch, ho, wo], "Conv2d upstream gradient")?;
            let (x, g, wt) = (input.data(), upstream.data(), p.weight.data());
            let mut dx = Tensor::zeros(input.shape());
            let mut dw = Tensor::zeros(p.weight.shape());
            let mut db = Tensor::zeros(p.bias.shape());
            for n in 0..batch {
                for o in 0..out_ch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[((n * out_ch + o) * ho + oy) * wo + ox];
                            if go == 0.0 {
                                continue;
                            }
                            db.data_mut()[o] += go;
                            for c in 0..in_ch {
                                let xbase = (n * in_ch + c) * h * w;
                                let wbase = (o * in_ch + c) * kh * kw;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * w + ix as usize;
                                        let wi = wbase + ky * kw + kx;
                                        dw.data_mut()[wi] += go * x[xi];
                                        dx.data_mut()[xi] += go * wt[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dx, Some(Params { weight: dw, bias: db }))
        }
        (LayerKind::Relu, Cache::Relu { input }) => {
            upstream.check_shape(input.shape(), "ReLU upstream gradient")?;
            let dx = Tensor::from_fn(input.shape(), |i| {
                if input.data()[i] > 0.0 {
                    upstream.data()[i]
                } else {
                    0.0
                }
            });
            (dx, None)
        }
        (LayerKind::MaxPool2d { .. }, Cache::MaxPool2d { input_shape, argmax }) => {
            if upstream.len() != argmax.len() {
                return Err(Error::shape("MaxPool2d upstream gradient does not match output"));
            }
            let mut dx = Tensor::zeros(&input_shape);
            for (&src, &g) in argmax.iter().zip(upstream.data()) {
                dx.data_mut()[src] += g;
            }
            (dx, None)
        }
        (LayerKind::AvgPool2d { k, s }, Cache::AvgPool2d { input_shape }) => {
            let out = kind.output_shape(&input_shape[1..])?;
            let (batch, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
            let (ho, wo) = (out[1], out[2]);
            upstream.check_shape(&[batch, c, ho, wo], "AvgPool2d upstream gradient")?;
            let norm = 1.0 / (k * k) as f64;
            let mut dx = Tensor::zeros(&input_shape);
            for plane in 0..batch * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = upstream.data()[plane * ho * wo + oy * wo + ox] * norm;
                        for ky in 0..k {
                            for kx in 0..k {
                                dx.data_mut()[plane * h * w + (oy * s + ky) * w + ox * s + kx] += g;
                            }
                        }
                    }
                }
            }
            (dx, None)
        }
        (LayerKind::Flatten, Cache::Flatten { input_shape }) => {
            (upstream.clone().reshape(&input_shape)?, None)
        }
        (LayerKind::SoftmaxCrossEntropy, Cache::SoftmaxCrossEntropy { probs, labels }) => {
            upstream.check_shape(&[1], "loss upstream gradient")?;
            let (batch, classes) = (probs.shape()[0], probs.shape()[1]);
            let scale = upstream.data()[0] / batch as f64;
            let mut dx = probs;
            for (row, &label) in dx.data_mut().chunks_mut(classes).zip(&labels) {
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            (dx, None)
        }
        _ => return Err(mismatch()),
    };
    grad_in.ensure_finite(&format!("{kind} input gradient"))?;
    Ok((grad_in, grad_params))
}
