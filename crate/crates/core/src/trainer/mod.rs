//! Alternating training loop and the unpartitioned baseline.
//!
//! Each DALE iteration trains on the non-fuzzy region set, captures class
//! feature statistics there, learns per-pixel confidences on the fuzzy set,
//! then trains on the fuzzy set with confidence-weighted cross-entropy plus
//! the Gaussian alignment term. The baseline spends the same number of
//! optimizer steps on plain unit-weight training.

mod output;

pub use output::{MetricsRow, RunDir, METRICS_HEADER};

use serde::{Deserialize, Serialize};

use crate::calib::{self, CalibConfig, CalibError, ClassGaussian};
use crate::confidence::{self, ConfidenceConfig, ConfidenceError, ConfidenceMap};
use crate::dataio::{DataError, Sample};
use crate::metrics::SegMetrics;
use crate::numkit::{NumError, Rng, Tensor};
use crate::partition::{split, PartitionConfig, PartitionError, RegionSample};
use crate::segmodel::{
    adam_step, forward, loss_and_grad, loss_and_grad_with, predict_classes, AdamConfig, AdamState, Batch, BlobFormat,
    Checkpoint, LossMode, ModelConfig, ModelError, ModelParams,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("checkpoint does not match this run: {0}")]
    Resume(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dale,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Outer iterations.
    pub iterations: usize,
    pub batch_size: usize,
    /// Epochs over each region set per iteration; the baseline runs twice as
    /// many epochs over the whole set.
    pub phase_epochs: usize,
    pub seed: u64,
    /// Multiply images and labels by the soft masks instead of weighting the
    /// loss by them.
    pub literal_masks: bool,
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
    /// Dump confidence maps of the first this many training images.
    pub omega_dump_images: usize,
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub confidence: ConfidenceConfig,
    pub calib: CalibConfig,
    pub adam: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dale,
            iterations: 20,
            batch_size: 24,
            phase_epochs: 1,
            seed: 0,
            literal_masks: false,
            checkpoint_every: 1,
            omega_dump_images: 4,
            model: ModelConfig::default(),
            partition: PartitionConfig::default(),
            confidence: ConfidenceConfig::default(),
            calib: CalibConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.iterations == 0 || self.batch_size == 0 || self.phase_epochs == 0 {
            return bad("iterations, batch_size and phase_epochs must be positive");
        }
        self.model.validate()?;
        let p = &self.partition;
        if p.patch_h == 0 || p.patch_w == 0 || p.bins == 0 || !(p.tau > 0.0 && p.tau <= 1.0) {
            return bad("partition needs positive patch size and bins and tau in (0, 1]");
        }
        let c = &self.confidence;
        if c.rounds == 0 || c.eta < 0.0 || !(c.omega_max > 0.0) || !(0.0..=c.omega_max).contains(&c.omega_init) {
            return bad("confidence needs rounds >= 1, eta >= 0 and 0 <= omega_init <= omega_max");
        }
        if c.max_pixels == Some(0) || c.inner_lr.is_some_and(|v| !(v > 0.0)) {
            return bad("confidence max_pixels and inner_lr must be positive");
        }
        let k = &self.calib;
        if k.alpha < 0.0 || k.eps_max < 0.0 || k.ridge < 0.0 {
            return bad("calib alpha, eps_max and ridge must be non-negative");
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam needs lr > 0, betas in [0, 1) and eps > 0");
        }
        Ok(())
    }

    pub fn inner_lr(&self) -> f64 {
        self.confidence.inner_lr.unwrap_or(self.adam.lr)
    }

    /// Optimizer steps in one iteration of either arm.
    pub fn steps_per_iteration(&self, n_train: usize) -> u64 {
        (2 * self.phase_epochs * n_train.div_ceil(self.batch_size)) as u64
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_ITER: u64 = 2;
const NONFUZZY: u64 = 1;
const OMEGA_ORDER: u64 = 2;
const OMEGA_BATCH: u64 = 3;
const OMEGA_PIXELS: u64 = 4;
const PERTURB: u64 = 5;
const FUZZY: u64 = 6;
const BASELINE: u64 = 7;

/// Everything a run needs to continue; a function of the configuration, the
/// training data and the completed iteration count.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed outer iterations.
    pub iteration: usize,
    pub maps: Vec<ConfidenceMap>,
    pub regions: Vec<RegionSample>,
    pub history: Vec<MetricsRow>,
    pub steps: u64,
}

impl TrainState {
    pub fn new(config: RunConfig, train: &[Sample]) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptySplit);
        }
        let regions = partition_all(train, &config)?;
        let params = ModelParams::init(Rng::new(config.seed).fork(STREAM_INIT).state(), &config.model)?;
        let adam = AdamState::new(&params, config.adam.clone());
        let maps = fresh_maps(&regions, &config.confidence);
        Ok(Self {
            config,
            params,
            adam,
            iteration: 0,
            maps,
            regions,
            history: Vec::new(),
            steps: 0,
        })
    }

    /// Full state as a checkpoint: parameters and optimizer moments (with
    /// exact copies), confidence maps, the metric history and the config.
    pub fn to_checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let extra = serde_json::json!({
            "iteration": self.iteration,
            "steps": self.steps,
            "config": self.config,
            "history": self.history,
        });
        let mut ck = Checkpoint::from_model(&self.params, Some(&self.adam), true, extra);
        if let (Mode::Dale, Some(first)) = (self.config.mode, self.maps.first()) {
            let shape = vec![self.maps.len(), first.height, first.width];
            let cat = |f: &dyn Fn(&ConfidenceMap) -> Vec<f64>| -> Result<Tensor, NumError> {
                Tensor::new(shape.clone(), self.maps.iter().flat_map(f).collect())
            };
            ck.insert("omega", cat(&|m| m.omega.clone())?, BlobFormat::Dld1);
            ck.insert(
                "grad_omega",
                cat(&|m| m.grad_omega.clone().unwrap_or_else(|| vec![0.0; m.len()]))?,
                BlobFormat::Dld1,
            );
            ck.insert(
                "evaluated",
                cat(&|m| m.evaluated.iter().map(|&e| e as u8 as f64).collect())?,
                BlobFormat::Dld1,
            );
            ck.insert(
                "grad_present",
                Tensor::new(vec![self.maps.len()], self.maps.iter().map(|m| m.grad_omega.is_some() as u8 as f64).collect())?,
                BlobFormat::Dld1,
            );
        }
        Ok(ck)
    }

    /// Inverse of [`TrainState::to_checkpoint`]; `train` must be the data the
    /// run was started with.
    pub fn from_checkpoint(ck: &Checkpoint, train: &[Sample]) -> Result<Self, TrainError> {
        let extra = ck.extra();
        let config: RunConfig = serde_json::from_value(extra["config"].clone())?;
        let mut state = Self::new(config, train)?;
        let (params, adam) = ck.to_model()?;
        if params.config() != &state.config.model {
            return Err(TrainError::Resume("model configuration differs".into()));
        }
        state.params = params;
        state.adam = adam.ok_or_else(|| TrainError::Resume("missing optimizer state".into()))?;
        state.iteration = serde_json::from_value(extra["iteration"].clone())?;
        state.steps = serde_json::from_value(extra["steps"].clone())?;
        state.history = serde_json::from_value(extra["history"].clone())?;
        if let (Some(om), Some(gr), Some(ev), Some(pr)) =
            (ck.get("omega"), ck.get("grad_omega"), ck.get("evaluated"), ck.get("grad_present"))
        {
            let n = state.maps.len();
            let plane = state.maps.first().map_or(0, |m| m.len());
            if om.numel() != n * plane || gr.numel() != n * plane || ev.numel() != n * plane || pr.numel() != n {
                return Err(TrainError::Resume("confidence maps do not match the training set".into()));
            }
            for (i, m) in state.maps.iter_mut().enumerate() {
                let span = i * plane..(i + 1) * plane;
                m.omega = om.data()[span.clone()].to_vec();
                m.grad_omega = (pr.data()[i] != 0.0).then(|| gr.data()[span.clone()].to_vec());
                m.evaluated = ev.data()[span].iter().map(|&v| v != 0.0).collect();
            }
        }
        Ok(state)
    }
}

fn partition_all(train: &[Sample], cfg: &RunConfig) -> Result<Vec<RegionSample>, TrainError> {
    train.iter().map(|s| Ok(split(s, &cfg.partition)?)).collect()
}

fn fresh_maps(regions: &[RegionSample], cfg: &ConfidenceConfig) -> Vec<ConfidenceMap> {
    regions
        .iter()
        .map(|r| ConfidenceMap::new(r.base.height(), r.base.width(), cfg.omega_init, cfg.eta))
        .collect()
}

fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Which per-pixel weight a batch carries.
#[derive(Clone, Copy)]
enum Weighting {
    Unit,
    NonFuzzy,
    Fuzzy,
}

fn build_batch(state: &TrainState, idx: &[usize], weighting: Weighting) -> Result<Batch, TrainError> {
    let literal = state.config.literal_masks && !matches!(weighting, Weighting::Unit);
    let mask_of = |i: usize| -> &[f64] {
        let r = &state.regions[i];
        match weighting {
            Weighting::NonFuzzy => &r.masks.nonfuzzy,
            _ => &r.masks.fuzzy,
        }
    };
    let mut images = Vec::with_capacity(idx.len());
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let mut second = Vec::new();
    for &i in idx {
        let r = &state.regions[i];
        let lab = r.base.label.data();
        let omega: Option<&[f64]> = matches!(weighting, Weighting::Fuzzy).then(|| state.maps[i].omega.as_slice());
        let pixel_scale = |k: usize| omega.map_or(1.0, |o| o[k]);
        match weighting {
            Weighting::Unit => {
                images.push(r.base.image.clone());
                labels.extend_from_slice(lab);
                weights.extend(std::iter::repeat_n(1.0, lab.len()));
            }
            _ if literal => {
                // image ⊙ M, and the label ⊙ M read as a soft target between
                // the labelled class and background
                let m = mask_of(i);
                let plane = lab.len();
                let img = r.base.image.data().iter().enumerate().map(|(j, v)| v * m[j % plane]).collect();
                images.push(Tensor::new(r.base.image.shape().to_vec(), img)?);
                for k in 0..plane {
                    let q = if lab[k] == 0 { 1.0 } else { m[k] };
                    labels.push(lab[k]);
                    weights.push(pixel_scale(k) * q);
                    second.push(pixel_scale(k) * (1.0 - q));
                }
            }
            _ => {
                let m = mask_of(i);
                images.push(r.base.image.clone());
                labels.extend_from_slice(lab);
                weights.extend((0..lab.len()).map(|k| pixel_scale(k) * m[k]));
            }
        }
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    let n = labels.len();
    let batch = Batch::stack(&refs, labels, weights)?;
    Ok(if literal { batch.with_secondary(vec![0; n], second)? } else { batch })
}

fn iteration_rng(state: &TrainState, t: usize) -> Rng {
    Rng::new(state.config.seed).fork_path(&[STREAM_ITER, t as u64])
}

fn total_mask(state: &TrainState, fuzzy: bool) -> f64 {
    state
        .regions
        .iter()
        .map(|r| if fuzzy { r.masks.fuzzy.iter().sum::<f64>() } else { r.masks.nonfuzzy.iter().sum() })
        .sum()
}

/// Plain weighted-CE epochs; returns (mean batch loss, steps taken).
fn ce_epochs(state: &mut TrainState, weighting: Weighting, epochs: usize, rng: &Rng) -> Result<(f64, u64), TrainError> {
    let (mut loss_sum, mut steps) = (0.0, 0u64);
    for epoch in 0..epochs {
        let order = permutation(state.regions.len(), &mut rng.fork(epoch as u64));
        for chunk in order.chunks(state.config.batch_size) {
            let batch = build_batch(state, chunk, weighting)?;
            let lg = loss_and_grad(&state.params, &batch, LossMode::Normalized)?;
            adam_step(&mut state.params, &lg.grads, &mut state.adam)?;
            loss_sum += lg.loss;
            steps += 1;
        }
    }
    state.steps += steps;
    Ok((loss_sum / steps.max(1) as f64, steps))
}

/// Features of every training image under the current parameters,
/// concatenated to `(N, d, H, W)`.
fn all_features(state: &TrainState) -> Result<Tensor, TrainError> {
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for chunk in state.regions.chunks(state.config.batch_size) {
        let images: Vec<&Tensor> = chunk.iter().map(|r| &r.base.image).collect();
        let n = chunk.len() * chunk[0].base.label.len();
        let batch = Batch::stack(&images, vec![0; n], vec![0.0; n])?;
        let out = forward(&state.params, &batch.images)?;
        if shape.is_empty() {
            shape = out.features.shape().to_vec();
            shape[0] = 0;
        }
        shape[0] += out.features.shape()[0];
        data.extend_from_slice(out.features.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// Perturbed non-fuzzy class Gaussians at the current parameters.
fn nonfuzzy_targets(state: &TrainState, rng: &Rng) -> Result<Vec<ClassGaussian>, TrainError> {
    let features = all_features(state)?;
    let labels: Vec<u8> = state.regions.iter().flat_map(|r| r.base.label.data().iter().copied()).collect();
    let weights: Vec<f64> = state.regions.iter().flat_map(|r| r.masks.nonfuzzy.iter().copied()).collect();
    let stats = calib::class_stats(&features, &labels, &weights, state.config.model.classes, state.config.calib.ridge)?;
    Ok(calib::perturb_stats(&stats, state.config.calib.eps_max, &mut rng.fork(PERTURB))?)
}

fn omega_phase(state: &mut TrainState, rng: &Rng, t: usize) -> Result<(), TrainError> {
    let cfg = state.config.confidence.clone();
    if !cfg.warm_start {
        state.maps = fresh_maps(&state.regions, &cfg);
    }
    let inner_lr = state.config.inner_lr();
    let n = state.regions.len();
    let b = state.config.batch_size.min(n);
    let order = permutation(n, &mut rng.fork(OMEGA_ORDER));
    let mut maps = std::mem::take(&mut state.maps);
    let result = (|| -> Result<(), TrainError> {
        for (bi, chunk) in order.chunks(state.config.batch_size).enumerate() {
            let samples: Vec<&RegionSample> = chunk.iter().map(|&i| &state.regions[i]).collect();
            let mut views: Vec<&mut ConfidenceMap> = Vec::with_capacity(chunk.len());
            // disjoint mutable borrows in chunk order
            let mut slots: Vec<Option<&mut ConfidenceMap>> = maps.iter_mut().map(Some).collect();
            for &i in chunk {
                views.push(slots[i].take().expect("indices in a chunk are distinct"));
            }
            let batch_rng = rng.fork_path(&[OMEGA_BATCH, bi as u64]);
            let mut provider = |round: usize| -> Result<Batch, ConfidenceError> {
                let idx = batch_rng.fork(round as u64).clone().sample_indices(n, b);
                build_batch(state, &idx, Weighting::NonFuzzy).map_err(|e| match e {
                    TrainError::Model(m) => ConfidenceError::Model(m),
                    other => ConfidenceError::ShapeMismatch(other.to_string()),
                })
            };
            let mut pixel_rng = rng.fork_path(&[OMEGA_PIXELS, bi as u64]);
            confidence::omega_loop(
                &state.params,
                &samples,
                &mut views,
                &mut provider,
                &cfg,
                inner_lr,
                t,
                &mut pixel_rng,
            )?;
        }
        Ok(())
    })();
    state.maps = maps;
    result
}

/// Means of ω over clean and injected-noise fuzzy-support pixels, and the
/// precision with which the indicator's rejected pixels are injected noise,
/// with the noise rate among evaluated pixels for reference.
fn omega_summary(state: &TrainState) -> (f64, f64, f64, f64) {
    let thr = state.config.confidence.support_threshold;
    let (mut clean, mut nc, mut noisy, mut nn) = (0.0, 0usize, 0.0, 0usize);
    let (mut flagged, mut flagged_noisy, mut evaluated, mut evaluated_noisy) = (0usize, 0usize, 0usize, 0usize);
    for (r, m) in state.regions.iter().zip(&state.maps) {
        let keep = m.noise_indicator().ok();
        for k in 0..m.len() {
            if r.masks.fuzzy[k] <= thr {
                continue;
            }
            let is_noise = r.base.noise_mask[k];
            if is_noise {
                noisy += m.omega[k];
                nn += 1;
            } else {
                clean += m.omega[k];
                nc += 1;
            }
            if let Some(keep) = &keep {
                if m.evaluated[k] {
                    evaluated += 1;
                    evaluated_noisy += is_noise as usize;
                    if !keep[k] {
                        flagged += 1;
                        flagged_noisy += is_noise as usize;
                    }
                }
            }
        }
    }
    let ratio = |a: f64, b: usize| if b > 0 { a / b as f64 } else { f64::NAN };
    (
        ratio(clean, nc),
        ratio(noisy, nn),
        ratio(flagged_noisy as f64, flagged),
        ratio(evaluated_noisy as f64, evaluated),
    )
}

/// Fuzzy-phase epochs with the alignment term; returns (mean loss, mean
/// alignment distance, steps).
fn fuzzy_epochs(state: &mut TrainState, targets: &[ClassGaussian], rng: &Rng) -> Result<(f64, f64, u64), TrainError> {
    let thr_keep: Vec<Vec<bool>> = state
        .maps
        .iter()
        .map(|m| m.noise_indicator().unwrap_or_else(|_| vec![false; m.len()]))
        .collect();
    let calib_cfg = state.config.calib.clone();
    let (mut loss_sum, mut lw_sum, mut steps) = (0.0, 0.0, 0u64);
    for epoch in 0..state.config.phase_epochs {
        let order = permutation(state.regions.len(), &mut rng.fork(epoch as u64));
        for chunk in order.chunks(state.config.batch_size) {
            let batch = build_batch(state, chunk, Weighting::Fuzzy)?;
            let mut labels = Vec::new();
            let mut stat_weights = Vec::new();
            let (mut omega_sum, mut support) = (0.0, 0usize);
            for &i in chunk {
                let r = &state.regions[i];
                labels.extend_from_slice(r.base.label.data());
                stat_weights.extend(calib::denoise_features(&r.masks.fuzzy, &thr_keep[i]));
                for (o, m) in state.maps[i].omega.iter().zip(&r.masks.fuzzy) {
                    if *m > 0.0 {
                        omega_sum += o;
                        support += 1;
                    }
                }
            }
            let scale = if support > 0 { omega_sum / support as f64 * calib_cfg.alpha } else { 0.0 };
            let mut align = Ok(0.0);
            let lg = loss_and_grad_with(&state.params, &batch, LossMode::Normalized, |features| {
                if scale == 0.0 {
                    return Ok(None);
                }
                match calib::lw_loss_and_grad(features, &labels, &stat_weights, targets, &calib_cfg) {
                    Ok(out) => {
                        align = Ok(out.loss);
                        Ok(Some((scale * out.loss, out.grad.scale(scale)?)))
                    }
                    Err(e) => {
                        align = Err(e);
                        Ok(None)
                    }
                }
            })?;
            lw_sum += align?;
            adam_step(&mut state.params, &lg.grads, &mut state.adam)?;
            loss_sum += lg.loss;
            steps += 1;
        }
    }
    state.steps += steps;
    let n = steps.max(1) as f64;
    Ok((loss_sum / n, lw_sum / n, steps))
}

/// One alternating iteration. Appends a `nonfuzzy`, an `omega` and a `fuzzy`
/// row to the history; a phase whose region set has no mask weight is
/// skipped with a warning.
pub fn dale_iteration(state: &mut TrainState, log: &mut dyn FnMut(&str)) -> Result<(), TrainError> {
    let t = state.iteration + 1;
    let rng = iteration_rng(state, t);

    let start = state.params.checksum();
    let mut row = MetricsRow::new(t, "nonfuzzy");
    row.checksum_in = Some(start);
    if total_mask(state, false) > 0.0 {
        let (loss, steps) = ce_epochs(state, Weighting::NonFuzzy, state.config.phase_epochs, &rng.fork(NONFUZZY))?;
        row.loss = loss;
        row.steps = steps;
    } else {
        log(&format!("t={t}: non-fuzzy region set is empty, phase skipped"));
    }
    let theta_n = state.params.checksum();
    row.checksum_out = Some(theta_n);
    state.history.push(row);

    let fuzzy_present = total_mask(state, true) > 0.0;
    let mut omega_row = MetricsRow::new(t, "omega");
    let mut fuzzy_row = MetricsRow::new(t, "fuzzy");
    fuzzy_row.checksum_in = Some(theta_n);
    if fuzzy_present {
        let targets = nonfuzzy_targets(state, &rng)?;
        omega_phase(state, &rng, t)?;
        let (clean, noisy, precision, rate) = omega_summary(state);
        omega_row.mean_omega_clean = clean;
        omega_row.mean_omega_noisy = noisy;
        omega_row.flag_precision = precision;
        omega_row.noise_rate = rate;
        let (loss, lw, steps) = fuzzy_epochs(state, &targets, &rng.fork(FUZZY))?;
        fuzzy_row.loss = loss;
        fuzzy_row.l_w = lw;
        fuzzy_row.steps = steps;
    } else {
        log(&format!("t={t}: fuzzy region set is empty, confidence and fuzzy phases skipped"));
    }
    fuzzy_row.checksum_out = Some(state.params.checksum());
    state.history.push(omega_row);
    state.history.push(fuzzy_row);
    state.iteration = t;
    Ok(())
}

/// Unit-weight training on the whole set with the step count of one DALE
/// iteration. Appends a `baseline` row.
pub fn baseline_iteration(state: &mut TrainState) -> Result<(), TrainError> {
    let t = state.iteration + 1;
    let rng = iteration_rng(state, t);
    let mut row = MetricsRow::new(t, "baseline");
    row.checksum_in = Some(state.params.checksum());
    let (loss, steps) = ce_epochs(state, Weighting::Unit, 2 * state.config.phase_epochs, &rng.fork(BASELINE))?;
    row.loss = loss;
    row.steps = steps;
    row.checksum_out = Some(state.params.checksum());
    state.history.push(row);
    state.iteration = t;
    Ok(())
}

/// Mean metrics against the clean labels, and mean lesion Dice against the
/// (possibly noisy) training labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clean: SegMetrics,
    pub noisy_dice: f64,
}

pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let classes = params.config().classes;
    let mut rows = Vec::with_capacity(samples.len());
    let mut noisy = 0.0;
    for chunk in samples.chunks(32) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let n = chunk.iter().map(|s| s.label.len()).sum();
        let batch = Batch::stack(&images, vec![0; n], vec![0.0; n])?;
        let pred = predict_classes(&forward(params, &batch.images)?.logits);
        let plane = chunk[0].label.len();
        for (j, s) in chunk.iter().enumerate() {
            let p = crate::dataio::ClassMap::new(s.height(), s.width(), pred[j * plane..(j + 1) * plane].to_vec())?;
            rows.push(SegMetrics::of(&p, &s.clean_label, classes));
            noisy += SegMetrics::of(&p, &s.label, classes).dice;
        }
    }
    Ok(Evaluation {
        clean: SegMetrics::mean(&rows).expect("non-empty"),
        noisy_dice: noisy / samples.len() as f64,
    })
}

/// Runs the remaining iterations. After each one an `eval` row is appended
/// (when `test` is non-empty) and, with an output directory, metrics,
/// checkpoints and confidence dumps are written.
pub fn run(state: &mut TrainState, test: &[Sample], out: Option<&RunDir>, log: &mut dyn FnMut(&str)) -> Result<(), TrainError> {
    while state.iteration < state.config.iterations {
        match state.config.mode {
            Mode::Dale => dale_iteration(state, log)?,
            Mode::Baseline => baseline_iteration(state)?,
        }
        let t = state.iteration;
        if !test.is_empty() {
            let ev = evaluate(&state.params, test)?;
            let mut row = MetricsRow::new(t, "eval");
            row.set_metrics(&ev);
            state.history.push(row);
            log(&format!(
                "t={t} dice={:.4} miou={:.4} hd95={:.3} asd={:.3} steps={}",
                ev.clean.dice, ev.clean.miou, ev.clean.hd95, ev.clean.asd, state.steps
            ));
        } else {
            log(&format!("t={t} steps={}", state.steps));
        }
        if let Some(dir) = out {
            dir.write_metrics(&state.history)?;
            let every = state.config.checkpoint_every;
            if t == state.config.iterations || (every > 0 && t.is_multiple_of(every)) {
                dir.write_checkpoint(t, &state.to_checkpoint()?)?;
            }
            if state.config.mode == Mode::Dale {
                for (i, m) in state.maps.iter().take(state.config.omega_dump_images).enumerate() {
                    dir.write_omega(t, i, m)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
