//! Small fully-connected classifier evaluated over a flat parameter vector.
//!
//! Parameter layout, layer by layer: the weight matrix (`out × in`, row-major)
//! followed by the bias vector (`out`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{sample_loss, sample_loss_grad, softmax, LossSpec};
use crate::numkit::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlice {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, init_seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "a model needs at least an input and an output size".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(Self {
            layer_sizes,
            activation,
            init_seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> Vec<LayerSlice> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = LayerSlice {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    /// Offsets of every bias entry, in parameter order.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers()
            .iter()
            .map(|l| l.bias_offset..l.bias_offset + l.fan_out)
            .collect()
    }

    /// Range of the final layer's weight matrix.
    pub fn final_weight_range(&self) -> std::ops::Range<usize> {
        let last = *self.layers().last().unwrap();
        last.weight_offset..last.bias_offset
    }

    /// Glorot-uniform bound for the weights of layer `index`.
    pub fn init_bound(&self, index: usize) -> f64 {
        let fan_in = self.layer_sizes[index] as f64;
        let fan_out = self.layer_sizes[index + 1] as f64;
        (6.0 / (fan_in + fan_out)).sqrt()
    }
}

/// A batch of feature rows with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// New batch holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features,
            labels,
            dim: self.dim,
        }
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }
}

pub fn init_params(spec: &ModelSpec) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut params = vec![0.0; spec.param_count()];
    for (i, layer) in spec.layers().iter().enumerate() {
        let bound = spec.init_bound(i);
        for w in &mut params[layer.weight_offset..layer.bias_offset] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    ParamVector::new(params)
}

fn check_inputs(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            actual: params.len(),
        });
    }
    if batch.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            actual: batch.dim(),
        });
    }
    Ok(())
}

/// Forward pass of one sample; returns the post-activation output of every
/// layer (the last entry holds the logits).
fn forward_sample(params: &[f64], spec: &ModelSpec, layers: &[LayerSlice], x: &[f64]) -> Vec<Vec<f64>> {
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let input: &[f64] = if li == 0 { x } else { &outputs[li - 1] };
        let mut out = vec![0.0; layer.fan_out];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &params[layer.weight_offset + o * layer.fan_in..][..layer.fan_in];
            let mut acc = params[layer.bias_offset + o];
            for (w, v) in row.iter().zip(input) {
                acc += w * v;
            }
            *slot = if li + 1 < layers.len() {
                spec.activation.apply(acc)
            } else {
                acc
            };
        }
        outputs.push(out);
    }
    outputs
}

/// Raw class scores, one row per sample.
pub fn logits(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    check_inputs(params, spec, batch)?;
    let layers = spec.layers();
    Ok((0..batch.len())
        .map(|i| {
            forward_sample(params, spec, &layers, batch.row(i))
                .pop()
                .unwrap()
        })
        .collect())
}

pub fn probabilities(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    Ok(logits(params, spec, batch)?
        .iter()
        .map(|z| softmax(z))
        .collect())
}

/// Argmax class per sample, ties going to the smallest index.
pub fn predict(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Vec<usize>> {
    Ok(logits(params, spec, batch)?
        .iter()
        .map(|z| argmax(z))
        .collect())
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Mean loss over the batch, forward pass only.
pub fn loss(params: &ParamVector, spec: &ModelSpec, batch: &Batch, loss: &LossSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch.check_labels(spec.classes())?;
    let rows = logits(params, spec, batch)?;
    let total = rows
        .iter()
        .zip(batch.labels())
        .fold(0.0, |acc, (z, &c)| acc + sample_loss(loss, z, c));
    Ok(total / batch.len() as f64)
}

/// Per-sample losses, in batch order.
pub fn per_sample_losses(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    loss: &LossSpec,
) -> Result<Vec<f64>> {
    batch.check_labels(spec.classes())?;
    Ok(logits(params, spec, batch)?
        .iter()
        .zip(batch.labels())
        .map(|(z, &c)| sample_loss(loss, z, c))
        .collect())
}

/// Mean loss over the batch and its exact gradient by backpropagation.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    loss: &LossSpec,
) -> Result<(f64, ParamVector)> {
    check_inputs(params, spec, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch.check_labels(spec.classes())?;
    let layers = spec.layers();
    let classes = spec.classes();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    let mut dz = vec![0.0; classes];

    for i in 0..batch.len() {
        let x = batch.row(i);
        let outputs = forward_sample(params, spec, &layers, x);
        let label = batch.labels()[i];
        total += sample_loss_grad(loss, outputs.last().unwrap(), label, &mut dz);
        if dz.iter().all(|v| *v == 0.0) {
            continue;
        }

        // delta holds dL/d(pre-activation) for the current layer.
        let mut delta: Vec<f64> = dz.iter().map(|v| v * scale).collect();
        for li in (0..layers.len()).rev() {
            let layer = layers[li];
            let input: &[f64] = if li == 0 { x } else { &outputs[li - 1] };
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.weight_offset + o * layer.fan_in..][..layer.fan_in];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
                grad[layer.bias_offset + o] += d;
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &params[layer.weight_offset + o * layer.fan_in..][..layer.fan_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, y) in prev.iter_mut().zip(&outputs[li - 1]) {
                *p *= spec.activation.derivative_from_output(*y);
            }
            delta = prev;
        }
    }
    let value = total * scale;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss gradient"));
    }
    Ok((value, ParamVector::new(grad)))
}
