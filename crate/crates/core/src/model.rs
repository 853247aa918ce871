//! Declarative model descriptions and whole-network forward/backward passes
//! that expose per-layer activations and per-layer weight gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, Cache, LayerKind, Params};
use crate::optim::Optimizer;
use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[3, 16, 16]` or `[8]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerKind>,
}

impl ModelSpec {
    /// Per-sample shape flowing into each layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Build(format!("model '{}' has no layers", self.name)));
        }
        if self.layers.last() != Some(&LayerKind::SoftmaxCrossEntropy) {
            return Err(Error::Build("the last layer must be SoftmaxCrossEntropy".into()));
        }
        if let Some(i) = self.layers[..self.layers.len() - 1]
            .iter()
            .position(|l| *l == LayerKind::SoftmaxCrossEntropy)
        {
            return Err(Error::Build(format!("layer {i}: loss layer before the end of the model")));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes.last().unwrap();
            let out = layer.output_shape(input).map_err(|e| {
                let producer = match i {
                    0 => "the model input".to_string(),
                    _ => format!("layer {} ({})", i - 1, self.layers[i - 1]),
                };
                Error::Build(format!("layer {i} ({layer}) cannot consume {input:?} from {producer}: {e}"))
            })?;
            shapes.push(out);
        }
        let logits = &shapes[shapes.len() - 2];
        if logits != &[self.classes] {
            return Err(Error::Build(format!(
                "loss layer receives {logits:?} but the model has {} classes",
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// Indices (into `layers`) of the dense and convolution layers.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn trainable_layers(&self) -> Vec<LayerKind> {
        self.layers.iter().copied().filter(LayerKind::is_trainable).collect()
    }

    /// Per-sample output shape of every trainable layer.
    pub fn trainable_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        Ok(self.trainable_indices().into_iter().map(|i| shapes[i + 1].clone()).collect())
    }
}

/// The built-in desk-scale models.
pub mod zoo {
    use super::*;
    use LayerKind::*;

    pub const NAMES: [&str; 3] = ["mini_mlp", "mini_cnn", "mini_vgg"];

    /// Flatten, dense, ReLU, dense.
    pub fn mini_mlp(input_shape: &[usize], classes: usize) -> ModelSpec {
        let width: usize = input_shape.iter().product();
        ModelSpec {
            name: "mini_mlp".into(),
            input_shape: input_shape.to_vec(),
            classes,
            layers: vec![
                Flatten,
                LayerKind::dense(width, 32),
                Relu,
                LayerKind::dense(32, classes),
                SoftmaxCrossEntropy,
            ],
        }
    }

    /// Two conv/ReLU/max-pool blocks and a dense classifier. Needs a 16x16 input.
    pub fn mini_cnn(in_ch: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            name: "mini_cnn".into(),
            input_shape: vec![in_ch, 16, 16],
            classes,
            layers: vec![
                LayerKind::conv(in_ch, 4, 3, 1, 1),
                Relu,
                MaxPool2d { k: 2, s: 2 },
                LayerKind::conv(4, 8, 3, 1, 1),
                Relu,
                MaxPool2d { k: 2, s: 2 },
                Flatten,
                LayerKind::dense(8 * 4 * 4, classes),
                SoftmaxCrossEntropy,
            ],
        }
    }

    /// Three conv blocks and two dense layers on a 16x16 input.
    pub fn mini_vgg(in_ch: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            name: "mini_vgg".into(),
            input_shape: vec![in_ch, 16, 16],
            classes,
            layers: vec![
                LayerKind::conv(in_ch, 8, 3, 1, 1),
                Relu,
                MaxPool2d { k: 2, s: 2 },
                LayerKind::conv(8, 16, 3, 1, 1),
                Relu,
                MaxPool2d { k: 2, s: 2 },
                LayerKind::conv(16, 16, 3, 1, 1),
                Relu,
                AvgPool2d { k: 2, s: 2 },
                Flatten,
                LayerKind::dense(16 * 2 * 2, 32),
                Relu,
                LayerKind::dense(32, classes),
                SoftmaxCrossEntropy,
            ],
        }
    }

    /// Looks a zoo model up by name for a given per-sample input shape.
    pub fn by_name(name: &str, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let image = |what: &str| -> Result<usize> {
            match input_shape {
                [c, 16, 16] => Ok(*c),
                _ => Err(Error::Build(format!("{what} needs a [C, 16, 16] input, got {input_shape:?}"))),
            }
        };
        match name {
            "mini_mlp" => Ok(mini_mlp(input_shape, classes)),
            "mini_cnn" => Ok(mini_cnn(image(name)?, classes)),
            "mini_vgg" => Ok(mini_vgg(image(name)?, classes)),
            other => Err(Error::Build(format!(
                "unknown model '{other}' (expected one of {NAMES:?})"
            ))),
        }
    }

    /// Every zoo model at its canonical input.
    pub fn all(classes: usize) -> Vec<ModelSpec> {
        vec![mini_mlp(&[3, 16, 16], classes), mini_cnn(3, classes), mini_vgg(3, classes)]
    }
}

/// Output activations of every trainable layer for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub activations: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientKind {
    True,
    Predicted,
}

/// Weight and bias gradient of one trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEntry {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GradientEntry {
    pub fn zeros_like(kind: &LayerKind) -> Option<Self> {
        Params::zeros(kind).map(|p| Self { weight: p.weight, bias: p.bias })
    }

    /// Weight and bias values concatenated.
    pub fn flatten(&self) -> Tensor {
        let mut data = self.weight.data().to_vec();
        data.extend_from_slice(self.bias.data());
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty gradient")
    }
}

/// One gradient entry per trainable layer; `kind` is metadata only.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub kind: GradientKind,
    pub entries: Vec<GradientEntry>,
}

#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Params>>,
    caches: Option<Vec<Cache>>,
    backward_calls: u64,
    label_gradient_reads: u64,
}

impl Model {
    /// Validates shape composition and initializes parameters from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = rng::stream(seed, streams::MODEL_INIT);
        let params = spec.layers.iter().map(|l| Params::init(l, &mut rng)).collect();
        Ok(Self {
            spec,
            shapes,
            params,
            caches: None,
            backward_calls: 0,
            label_gradient_reads: 0,
        })
    }

    /// Rebuilds a model from explicit parameters (one per trainable layer).
    pub fn from_parts(spec: ModelSpec, trainable: Vec<Params>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let idx = spec.trainable_indices();
        if idx.len() != trainable.len() {
            return Err(Error::Build(format!(
                "{} parameter sets for {} trainable layers",
                trainable.len(),
                idx.len()
            )));
        }
        let mut params: Vec<Option<Params>> = vec![None; spec.layers.len()];
        for (&i, p) in idx.iter().zip(trainable) {
            let (ws, bs) = spec.layers[i].param_shapes().unwrap();
            p.weight.check_shape(&ws, "weight").map_err(|e| e.at_layer(i))?;
            p.bias.check_shape(&bs, "bias").map_err(|e| e.at_layer(i))?;
            params[i] = Some(p);
        }
        Ok(Self { spec, shapes, params, caches: None, backward_calls: 0, label_gradient_reads: 0 })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.is_some()).count()
    }

    pub fn trainable_kinds(&self) -> Vec<LayerKind> {
        self.spec.trainable_layers()
    }

    /// Parameters of each trainable layer, in order.
    pub fn trainable_params(&self) -> Vec<&Params> {
        self.params.iter().flatten().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(Params::len).sum()
    }

    /// All parameter values as little-endian bytes, for bit-exact comparisons.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()))
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    /// Number of completed `backward_collect` calls.
    pub fn backward_calls(&self) -> u64 {
        self.backward_calls
    }

    /// Number of times labels were read to form a gradient.
    pub fn label_gradient_reads(&self) -> u64 {
        self.label_gradient_reads
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() < 2 || batch.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(format!(
                "batch {:?} does not match model input (B, {:?})",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the caches for one subsequent `backward_collect`.
    /// Parameters are not touched.
    pub fn forward_collect(&mut self, batch: &Tensor, labels: &[usize]) -> Result<(f64, ActivationTrace)> {
        self.check_batch(batch)?;
        self.caches = None;
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut activations = Vec::new();
        let mut x = batch.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let (y, cache) = layer_forward(layer, self.params[i].as_ref(), &x, Some(labels))
                .map_err(|e| e.at_layer(i))?;
            caches.push(cache);
            if layer.is_trainable() {
                activations.push(y.clone());
            }
            x = y;
        }
        let loss = x.data()[0];
        self.caches = Some(caches);
        Ok((loss, ActivationTrace { activations }))
    }

    /// True gradients for the batch seen by the last `forward_collect`.
    /// Consumes the caches, so a second call without a new forward fails.
    pub fn backward_collect(&mut self) -> Result<GradientSet> {
        let caches = self.caches.take().ok_or_else(|| {
            Error::State("backward_collect needs a preceding forward_collect".into())
        })?;
        let mut g = Tensor::scalar(1.0);
        let mut entries = Vec::with_capacity(self.trainable_count());
        for (i, cache) in caches.into_iter().enumerate().rev() {
            let layer = &self.spec.layers[i];
            if *layer == LayerKind::SoftmaxCrossEntropy {
                self.label_gradient_reads += 1;
            }
            let (gi, gp) = layer_backward(layer, self.params[i].as_ref(), cache, &g)
                .map_err(|e| e.at_layer(i))?;
            if let Some(p) = gp {
                entries.push(GradientEntry { weight: p.weight, bias: p.bias });
            }
            g = gi;
        }
        entries.reverse();
        self.backward_calls += 1;
        Ok(GradientSet { kind: GradientKind::True, entries })
    }

    /// Applies one gradient entry to trainable layer `t` (0-based among trainable layers).
    pub fn apply_layer_gradient(
        &mut self,
        t: usize,
        entry: &GradientEntry,
        optimizer: &mut Optimizer,
    ) -> Result<()> {
        let i = *self
            .spec
            .trainable_indices()
            .get(t)
            .ok_or_else(|| Error::shape(format!("no trainable layer {t}")))?;
        let p = self.params[i].as_mut().unwrap();
        entry.weight.check_shape(p.weight.shape(), "weight gradient").map_err(|e| e.at_layer(i))?;
        entry.bias.check_shape(p.bias.shape(), "bias gradient").map_err(|e| e.at_layer(i))?;
        optimizer.step(2 * t, &mut p.weight, &entry.weight)?;
        optimizer.step(2 * t + 1, &mut p.bias, &entry.bias)?;
        Ok(())
    }

    /// Applies a whole gradient set. True and predicted sets are treated alike.
    pub fn apply_gradients(&mut self, grads: &GradientSet, optimizer: &mut Optimizer) -> Result<()> {
        if grads.entries.len() != self.trainable_count() {
            return Err(Error::shape(format!(
                "{} gradient entries for {} trainable layers",
                grads.entries.len(),
                self.trainable_count()
            )));
        }
        for (t, e) in grads.entries.iter().enumerate() {
            self.apply_layer_gradient(t, e, optimizer)?;
        }
        Ok(())
    }

    /// Forward pass that updates each trainable layer right after it produces
    /// its output. `predict` maps `(trainable index, layer, output activation)`
    /// to the gradient applied to that layer. No caches are kept, and labels are
    /// only used to report the loss.
    pub fn forward_with_updates<F>(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        optimizer: &mut Optimizer,
        mut predict: F,
    ) -> Result<f64>
    where
        F: FnMut(usize, &LayerKind, &Tensor) -> Result<GradientEntry>,
    {
        self.check_batch(batch)?;
        self.caches = None;
        let mut x = batch.clone();
        let mut t = 0;
        for i in 0..self.spec.layers.len() {
            let layer = self.spec.layers[i];
            let (y, _) = layer_forward(&layer, self.params[i].as_ref(), &x, Some(labels))
                .map_err(|e| e.at_layer(i))?;
            if layer.is_trainable() {
                let entry = predict(t, &layer, &y)?;
                self.apply_layer_gradient(t, &entry, optimizer)?;
                t += 1;
            }
            x = y;
        }
        Ok(x.data()[0])
    }

    /// Logits (input of the loss layer) without keeping caches.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if *layer == LayerKind::SoftmaxCrossEntropy {
                break;
            }
            x = layer_forward(layer, self.params[i].as_ref(), &x, None)
                .map_err(|e| e.at_layer(i))?
                .0;
        }
        Ok(x)
    }

    /// Per-sample shapes into each layer (last entry is the loss shape).
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }
}
