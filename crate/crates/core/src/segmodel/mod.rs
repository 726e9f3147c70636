//! A small fully convolutional segmentation network.
//!
//! `conv3×3 → relu → conv3×3 → relu` produces per-pixel features; a `1×1`
//! head maps them to class logits. Spatial size is preserved by zero padding.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{BlobFormat, Checkpoint, CheckpointEntry};

use serde::{Deserialize, Serialize};

use crate::dataio::DataError;
use crate::numkit::{Graph, NumError, Rng, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            hidden: 8,
            feature_dim: 8,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.hidden == 0 || self.feature_dim < 2 || self.classes < 2 {
            return Err(ModelError::BadConfig(format!(
                "in_channels={} hidden={} feature_dim={} classes={} (need >=1, >=1, >=2, >=2)",
                self.in_channels, self.hidden, self.feature_dim, self.classes
            )));
        }
        Ok(())
    }

    /// Shapes in [`PARAM_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 6] {
        let (i, h, d, c) = (self.in_channels, self.hidden, self.feature_dim, self.classes);
        [vec![h, i, 3, 3], vec![h], vec![d, h, 3, 3], vec![d], vec![c, d, 1, 1], vec![c]]
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

pub const PARAM_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

/// Network parameters, also used as the container for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights `~ U(-s, s)` with `s = sqrt(1 / fan_in)`, biases zero.
    pub fn init(seed: u64, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let tensors = config
            .shapes()
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let s = (1.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| s * (2.0 * rng.next_f64() - 1.0)).collect();
                Tensor::new(shape.clone(), data).expect("finite init")
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            tensors: config.shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.shapes();
        if tensors.len() != shapes.len() || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice()) {
            return Err(ModelError::ShapeMismatch(format!(
                "expected shapes {shapes:?}, got {:?}",
                tensors.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|&n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn expect_same(&self, other: &ModelParams) -> Result<(), ModelError> {
        if self.config != other.config {
            return Err(ModelError::ShapeMismatch(format!("{:?} vs {:?}", self.config, other.config)));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ModelParams) -> Result<f64, ModelError> {
        self.expect_same(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).expect("same config").sqrt()
    }

    /// `self + c · other`.
    pub fn add_scaled(&self, other: &ModelParams, c: f64) -> Result<ModelParams, ModelError> {
        self.expect_same(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.zip_with(b, |x, y| x + c * y))
            .collect::<Result<_, _>>()?;
        Ok(ModelParams {
            config: self.config.clone(),
            tensors,
        })
    }

    pub fn scale(&self, c: f64) -> ModelParams {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| t.scale(c).expect("finite scale")).collect(),
        }
    }

    /// FNV-1a over the IEEE bit patterns; equal iff bitwise-equal parameters
    /// (up to hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Records every tensor as a graph parameter.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let v: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Bound {
            conv1_w: v[0],
            conv1_b: v[1],
            conv2_w: v[2],
            conv2_b: v[3],
            head_w: v[4],
            head_b: v[5],
        }
    }

    /// Collects gradients for `bound` into a parameter-shaped container.
    pub fn grads_of(&self, g: &Graph, loss: Var, bound: &Bound) -> Result<ModelParams, ModelError> {
        let tensors = g.grad(loss, &bound.vars())?;
        Ok(ModelParams {
            config: self.config.clone(),
            tensors,
        })
    }
}

/// Graph handles of a bound [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl Bound {
    pub fn vars(&self) -> [Var; 6] {
        [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.head_w, self.head_b]
    }

    /// Records the forward pass for `input` shaped `(N, in_channels, H, W)`.
    /// Returns `(features, logits)`.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<(Var, Var), ModelError> {
        let a1 = g.conv2d(input, self.conv1_w, Some(self.conv1_b))?;
        let h1 = g.relu(a1)?;
        let a2 = g.conv2d(h1, self.conv2_w, Some(self.conv2_b))?;
        let features = g.relu(a2)?;
        let logits = g.conv2d(features, self.head_w, Some(self.head_b))?;
        Ok((features, logits))
    }
}

/// Per-pixel model outputs for a batch shaped `(N, ·, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    pub logits: Tensor,
    pub features: Tensor,
}

fn as_batch(images: &Tensor, config: &ModelConfig) -> Result<Tensor, ModelError> {
    let s = images.shape();
    let batched = match s.len() {
        3 => images.clone().reshape(vec![1, s[0], s[1], s[2]])?,
        4 => images.clone(),
        _ => return Err(ModelError::ShapeMismatch(format!("image tensor {s:?}"))),
    };
    if batched.shape()[1] != config.in_channels {
        return Err(ModelError::ShapeMismatch(format!(
            "{} input channels for a {}-channel model",
            batched.shape()[1],
            config.in_channels
        )));
    }
    Ok(batched)
}

/// Forward pass for `(C, H, W)` or `(N, C, H, W)` images.
pub fn forward(params: &ModelParams, images: &Tensor) -> Result<ForwardOut, ModelError> {
    let x = as_batch(images, &params.config)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let input = g.constant(x);
    let (features, logits) = b.forward(&mut g, input)?;
    Ok(ForwardOut {
        logits: g.value(logits).clone(),
        features: g.value(features).clone(),
    })
}

/// Per-pixel argmax class of `(N, C, H, W)` logits, row-major over `(n, y, x)`.
pub fn predict_classes(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
    let z = logits.data();
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for k in 0..inner {
            let mut best = 0;
            for ch in 1..c {
                if z[(b * c + ch) * inner + k] > z[(b * c + best) * inner + k] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// How per-pixel losses are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `Σ w·CE / Σ w`, zero when the total weight is zero.
    Normalized,
    /// `Σ w·CE`.
    Sum,
}

/// Pixel-weighted cross-entropy of `(N, C, H, W)` logits.
pub fn seg_loss(logits: &Tensor, labels: &[u8], weights: &[f64], mode: LossMode) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let targets: Vec<usize> = labels.iter().map(|&c| c as usize).collect();
    let total = g.weighted_ce(z, &targets, weights)?;
    let sum = g.value(total).data()[0];
    Ok(match mode {
        LossMode::Sum => sum,
        LossMode::Normalized => normalize(sum, weights),
    })
}

fn normalize(sum: f64, weights: &[f64]) -> f64 {
    let w: f64 = weights.iter().sum();
    if w > 0.0 {
        sum / w
    } else {
        0.0
    }
}

/// A stacked minibatch: images `(N, C, H, W)`, and per-pixel targets and
/// weights in `(n, y, x)` order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub weights: Vec<f64>,
    /// Second weighted target per pixel; soft targets are the sum of both
    /// cross-entropy terms.
    pub secondary: Option<(Vec<u8>, Vec<f64>)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_weight(&self) -> f64 {
        let extra: f64 = self.secondary.as_ref().map_or(0.0, |(_, w)| w.iter().sum());
        self.weights.iter().sum::<f64>() + extra
    }

    pub fn with_secondary(mut self, labels: Vec<u8>, weights: Vec<f64>) -> Result<Batch, ModelError> {
        if labels.len() != self.labels.len() || weights.len() != self.labels.len() {
            return Err(ModelError::ShapeMismatch("secondary targets".into()));
        }
        self.secondary = Some((labels, weights));
        Ok(self)
    }

    /// Stacks `(C, H, W)` images of equal shape.
    pub fn stack(images: &[&Tensor], labels: Vec<u8>, weights: Vec<f64>) -> Result<Batch, ModelError> {
        let first = images
            .first()
            .ok_or_else(|| ModelError::ShapeMismatch("empty batch".into()))?
            .shape()
            .to_vec();
        if first.len() != 3 {
            return Err(ModelError::ShapeMismatch(format!("image tensor {first:?}")));
        }
        let mut data = Vec::with_capacity(images.len() * images[0].numel());
        for im in images {
            if im.shape() != first.as_slice() {
                return Err(ModelError::ShapeMismatch(format!("{:?} vs {first:?}", im.shape())));
            }
            data.extend_from_slice(im.data());
        }
        let pixels = images.len() * first[1] * first[2];
        if labels.len() != pixels || weights.len() != pixels {
            return Err(ModelError::ShapeMismatch(format!(
                "{pixels} pixels with {} labels and {} weights",
                labels.len(),
                weights.len()
            )));
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&first);
        Ok(Batch {
            images: Tensor::new(shape, data)?,
            labels,
            weights,
            secondary: None,
        })
    }
}

/// Value and parameter gradient of a batch loss.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ModelParams,
    pub features: Tensor,
}

/// Loss and gradient for `batch`. `extra` sees the batch features and may
/// return an additional loss value together with its gradient with respect
/// to the features; both are added to the result.
pub fn loss_and_grad_with<F>(params: &ModelParams, batch: &Batch, mode: LossMode, extra: F) -> Result<LossGrad, ModelError>
where
    F: FnOnce(&Tensor) -> Result<Option<(f64, Tensor)>, ModelError>,
{
    let x = as_batch(&batch.images, &params.config)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let input = g.constant(x);
    let (features, logits) = b.forward(&mut g, input)?;
    let targets: Vec<usize> = batch.labels.iter().map(|&c| c as usize).collect();
    let mut ce_sum = g.weighted_ce(logits, &targets, &batch.weights)?;
    if let Some((labels, weights)) = &batch.secondary {
        let targets: Vec<usize> = labels.iter().map(|&c| c as usize).collect();
        let second = g.weighted_ce(logits, &targets, weights)?;
        ce_sum = g.add(ce_sum, second)?;
    }
    let (mut loss_var, mut loss) = match mode {
        LossMode::Sum => (ce_sum, g.value(ce_sum).data()[0]),
        LossMode::Normalized => {
            let w = batch.total_weight();
            let c = if w > 0.0 { 1.0 / w } else { 0.0 };
            let v = g.scale(ce_sum, c)?;
            (v, g.value(v).data()[0])
        }
    };
    let feature_values = g.value(features).clone();
    if let Some((value, feature_grad)) = extra(&feature_values)? {
        // Σ F ⊙ G has gradient G with respect to F
        let linear = g.weight(features, feature_grad)?;
        let linear = g.sum(linear)?;
        loss_var = g.add(loss_var, linear)?;
        loss += value;
    }
    let grads = params.grads_of(&g, loss_var, &b)?;
    Ok(LossGrad {
        loss,
        grads,
        features: feature_values,
    })
}

pub fn loss_and_grad(params: &ModelParams, batch: &Batch, mode: LossMode) -> Result<LossGrad, ModelError> {
    loss_and_grad_with(params, batch, mode, |_| Ok(None))
}
