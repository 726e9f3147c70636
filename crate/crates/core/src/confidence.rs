//! Per-pixel confidence weights learned from loss consistency.
//!
//! A shadow copy of the model takes one plain gradient step on the
//! confidence-weighted fuzzy loss. The gradient of the non-fuzzy loss at the
//! shadow parameters, dotted with each fuzzy pixel's own loss gradient, is the
//! exact derivative of that non-fuzzy loss with respect to the pixel's
//! confidence (up to the factor `-inner_lr`). Confidences move along it and a
//! pixel is kept as clean when it is positive.

use serde::{Deserialize, Serialize};

use crate::numkit::{Graph, Rng, Tensor};
use crate::partition::RegionSample;
use crate::segmodel::{loss_and_grad, Batch, LossMode, ModelError, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum ConfidenceError {
    #[error("meta-gradient has not been computed")]
    UninitializedGradient,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::numkit::NumError> for ConfidenceError {
    fn from(e: crate::numkit::NumError) -> Self {
        ConfidenceError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceConfig {
    /// Step size of the confidence update.
    pub eta: f64,
    pub omega_max: f64,
    pub omega_init: f64,
    /// Keep confidences across outer iterations instead of resetting them.
    pub warm_start: bool,
    /// Confidence rounds per outer iteration.
    pub rounds: usize,
    /// Pixels with fuzzy-mask weight at or below this are never updated.
    pub support_threshold: f64,
    /// Per-image cap on pixels whose meta-gradient is computed.
    pub max_pixels: Option<usize>,
    /// Step size of the shadow update; `None` uses the optimizer rate.
    pub inner_lr: Option<f64>,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            omega_max: 2.0,
            omega_init: 1.0,
            warm_start: true,
            rounds: 1,
            support_threshold: 0.01,
            max_pixels: Some(256),
            inner_lr: None,
        }
    }
}

/// Confidence weights and the latest meta-gradient of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub omega: Vec<f64>,
    /// Zero wherever `evaluated` is false.
    pub grad_omega: Option<Vec<f64>>,
    pub evaluated: Vec<bool>,
    pub eta: f64,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, omega_init: f64, eta: f64) -> Self {
        Self {
            height,
            width,
            omega: vec![omega_init; height * width],
            grad_omega: None,
            evaluated: vec![false; height * width],
            eta,
        }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// True where the latest meta-gradient is strictly positive; false for
    /// pixels that were not evaluated.
    pub fn noise_indicator(&self) -> Result<Vec<bool>, ConfidenceError> {
        let g = self.grad_omega.as_ref().ok_or(ConfidenceError::UninitializedGradient)?;
        Ok(g.iter().zip(&self.evaluated).map(|(&v, &e)| e && v > 0.0).collect())
    }

    fn accumulate(&mut self, pixels: &[usize], grads: &[f64], omega_max: f64) {
        let g = self.grad_omega.get_or_insert_with(|| vec![0.0; self.omega.len()]);
        for (&k, &gk) in pixels.iter().zip(grads) {
            g[k] = gk;
            self.evaluated[k] = true;
            self.omega[k] = (self.omega[k] + self.eta * gk).clamp(0.0, omega_max);
        }
    }

    fn reset_gradient(&mut self) {
        self.grad_omega = Some(vec![0.0; self.omega.len()]);
        self.evaluated.iter_mut().for_each(|e| *e = false);
    }
}

/// Parameters after the shadow step, tagged with the outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowModel {
    pub params: ModelParams,
    pub iteration: usize,
}

fn fuzzy_batch(samples: &[&RegionSample], omegas: &[&[f64]]) -> Result<Batch, ConfidenceError> {
    if samples.len() != omegas.len() {
        return Err(ConfidenceError::ShapeMismatch(format!("{} samples, {} confidence maps", samples.len(), omegas.len())));
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.base.image).collect();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for (s, om) in samples.iter().zip(omegas) {
        if om.len() != s.masks.fuzzy.len() {
            return Err(ConfidenceError::ShapeMismatch("confidence map size".into()));
        }
        labels.extend_from_slice(s.base.label.data());
        weights.extend(om.iter().zip(&s.masks.fuzzy).map(|(o, m)| o * m));
    }
    Ok(Batch::stack(&images, labels, weights)?)
}

/// `θ_p = θ_n − inner_lr · ∇ Σ_k ω_k M_k ℓ_k(θ_n)` over the fuzzy batch,
/// with `M` the fuzzy mask.
pub fn pseudo_update(
    theta_n: &ModelParams,
    samples: &[&RegionSample],
    omegas: &[&[f64]],
    inner_lr: f64,
    iteration: usize,
) -> Result<ShadowModel, ConfidenceError> {
    let batch = fuzzy_batch(samples, omegas)?;
    let lg = loss_and_grad(theta_n, &batch, LossMode::Sum)?;
    Ok(ShadowModel {
        params: theta_n.add_scaled(&lg.grads, -inner_lr)?,
        iteration,
    })
}

/// Gradient of the single-pixel cross-entropy at each of `pixels` (row-major
/// indices into an `H × W` image).
///
/// Each pixel's logit depends on a 5×5 input window, so the reverse pass runs
/// on that window; hidden activations outside the image are masked to match
/// the full network's zero padding.
pub fn per_pixel_grads(
    theta: &ModelParams,
    image: &Tensor,
    labels: &[u8],
    pixels: &[usize],
) -> Result<Vec<ModelParams>, ConfidenceError> {
    let s = image.shape();
    if s.len() != 3 || labels.len() != s[1] * s[2] {
        return Err(ConfidenceError::ShapeMismatch(format!("image {s:?} with {} labels", labels.len())));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hidden = theta.config().hidden;
    let img = image.data();
    const R: usize = 2;
    const WIN: usize = 2 * R + 1;
    let mut center_weight = vec![0.0; WIN * WIN];
    center_weight[R * WIN + R] = 1.0;
    let mut out = Vec::with_capacity(pixels.len());
    for &k in pixels {
        if k >= h * w {
            return Err(ConfidenceError::ShapeMismatch(format!("pixel {k} outside {h}x{w}")));
        }
        let (y, x) = (k / w, k % w);
        let mut window = vec![0.0; c * WIN * WIN];
        let mut inside = [0.0; WIN * WIN];
        for dy in 0..WIN {
            for dx in 0..WIN {
                let (yy, xx) = (y as isize + dy as isize - R as isize, x as isize + dx as isize - R as isize);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                inside[dy * WIN + dx] = 1.0;
                for ch in 0..c {
                    window[(ch * WIN + dy) * WIN + dx] = img[(ch * h + yy as usize) * w + xx as usize];
                }
            }
        }
        let hidden_mask: Vec<f64> = (0..hidden).flat_map(|_| inside.iter().copied()).collect();

        let mut g = Graph::new();
        let b = theta.bind(&mut g);
        let input = g.constant(Tensor::new(vec![1, c, WIN, WIN], window)?);
        let a1 = g.conv2d(input, b.conv1_w, Some(b.conv1_b))?;
        let h1 = g.relu(a1)?;
        let h1 = g.weight(h1, Tensor::new(vec![1, hidden, WIN, WIN], hidden_mask)?)?;
        let a2 = g.conv2d(h1, b.conv2_w, Some(b.conv2_b))?;
        let f = g.relu(a2)?;
        let logits = g.conv2d(f, b.head_w, Some(b.head_b))?;
        let mut targets = vec![0usize; WIN * WIN];
        targets[R * WIN + R] = labels[k] as usize;
        let loss = g.weighted_ce(logits, &targets, &center_weight)?;
        out.push(theta.grads_of(&g, loss, &b)?);
    }
    Ok(out)
}

/// Meta-gradients `M_k ⟨g_n, ∇ℓ_k(θ_n)⟩` of the given pixels of one image.
pub fn meta_gradients(
    g_n: &ModelParams,
    theta_n: &ModelParams,
    sample: &RegionSample,
    pixels: &[usize],
) -> Result<Vec<f64>, ConfidenceError> {
    let grads = per_pixel_grads(theta_n, &sample.base.image, sample.base.label.data(), pixels)?;
    pixels
        .iter()
        .zip(&grads)
        .map(|(&k, gk)| Ok(sample.masks.fuzzy[k] * g_n.dot(gk)?))
        .collect()
}

/// Gradient of the mask-weighted, normalized non-fuzzy loss.
pub fn nonfuzzy_gradient(theta: &ModelParams, nonfuzzy: &Batch) -> Result<ModelParams, ConfidenceError> {
    Ok(loss_and_grad(theta, nonfuzzy, LossMode::Normalized)?.grads)
}

/// One confidence round: computes `g_n` at the shadow parameters and moves
/// every selected pixel's confidence by `eta · grad`, clamped to
/// `[0, omega_max]`.
pub fn omega_update(
    shadow: &ShadowModel,
    theta_n: &ModelParams,
    nonfuzzy: &Batch,
    samples: &[&RegionSample],
    maps: &mut [&mut ConfidenceMap],
    selections: &[Vec<usize>],
    omega_max: f64,
) -> Result<(), ConfidenceError> {
    let g_n = nonfuzzy_gradient(&shadow.params, nonfuzzy)?;
    for ((s, map), pixels) in samples.iter().zip(maps.iter_mut()).zip(selections) {
        let grads = meta_gradients(&g_n, theta_n, s, pixels)?;
        map.accumulate(pixels, &grads, omega_max);
    }
    Ok(())
}

/// Pixels with fuzzy weight above the threshold, uniformly subsampled to the
/// cap; sorted.
pub fn select_pixels(fuzzy_mask: &[f64], threshold: f64, cap: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let support: Vec<usize> = (0..fuzzy_mask.len()).filter(|&k| fuzzy_mask[k] > threshold).collect();
    match cap {
        Some(cap) if support.len() > cap => rng.sample_indices(support.len(), cap).into_iter().map(|i| support[i]).collect(),
        _ => support,
    }
}

/// Runs `cfg.rounds` shadow-step / confidence-update rounds on one fuzzy
/// batch. `nonfuzzy` supplies the non-fuzzy batch for each round.
#[allow(clippy::too_many_arguments)]
pub fn omega_loop(
    theta_n: &ModelParams,
    samples: &[&RegionSample],
    maps: &mut [&mut ConfidenceMap],
    nonfuzzy: &mut dyn FnMut(usize) -> Result<Batch, ConfidenceError>,
    cfg: &ConfidenceConfig,
    inner_lr: f64,
    iteration: usize,
    rng: &mut Rng,
) -> Result<(), ConfidenceError> {
    if samples.len() != maps.len() {
        return Err(ConfidenceError::ShapeMismatch(format!("{} samples, {} maps", samples.len(), maps.len())));
    }
    let selections: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| select_pixels(&s.masks.fuzzy, cfg.support_threshold, cfg.max_pixels, rng))
        .collect();
    for map in maps.iter_mut() {
        map.reset_gradient();
    }
    for round in 0..cfg.rounds {
        let omegas: Vec<&[f64]> = maps.iter().map(|m| m.omega.as_slice()).collect();
        let shadow = pseudo_update(theta_n, samples, &omegas, inner_lr, iteration)?;
        let batch = nonfuzzy(round)?;
        omega_update(&shadow, theta_n, &batch, samples, maps, &selections, cfg.omega_max)?;
    }
    Ok(())
}
