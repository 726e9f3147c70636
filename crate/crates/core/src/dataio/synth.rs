//! Synthetic lesion images with controllable boundary blur and label noise.

use serde::{Deserialize, Serialize};

use super::{ClassMap, DataError, Sample};
use crate::numkit::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Gaussian blur width (pixels) applied to the clean intensity map.
    pub blur_sigma: f64,
    pub channels: usize,
    pub classes: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Intensity of class 0; class `C-1` sits at `foreground`.
    pub background: f64,
    pub foreground: f64,
    /// Standard deviation of the per-pixel background texture.
    pub texture_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            blur_sigma: 3.0,
            channels: 1,
            classes: 2,
            min_blobs: 1,
            max_blobs: 3,
            background: 0.2,
            foreground: 0.8,
            texture_std: 0.004,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Flip pixels near the clean boundary only.
    BoundaryBand,
    /// Flip pixels anywhere in the image (ablation).
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub rate: f64,
    pub band: usize,
    pub mode: NoiseMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            band: 2,
            mode: NoiseMode::BoundaryBand,
        }
    }
}

/// Train/test dataset recipe; everything downstream is a function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub noise: NoiseConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 50,
            seed: 0,
            synth: SynthConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_NOISE: u64 = 3;

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, DataError> {
    let root = Rng::new(cfg.seed);
    let make = |stream: u64, n: usize| -> Result<Vec<Sample>, DataError> {
        let clean = gen_synthetic_with(n, &cfg.synth, root.fork(stream).state())?;
        clean
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = root.fork_path(&[STREAM_NOISE, stream, i as u64]).state();
                inject_noise_with(s, &cfg.noise, cfg.synth.classes, seed)
            })
            .collect()
    };
    let train = make(STREAM_TRAIN, cfg.n_train)?;
    let test = if cfg.n_test > 0 { make(STREAM_TEST, cfg.n_test)? } else { Vec::new() };
    Ok(Dataset { train, test })
}

/// `n` clean samples of size `h×w` with default appearance settings.
pub fn gen_synthetic(n: usize, h: usize, w: usize, blur_sigma: f64, seed: u64) -> Result<Vec<Sample>, DataError> {
    let cfg = SynthConfig {
        height: h,
        width: w,
        blur_sigma,
        ..SynthConfig::default()
    };
    gen_synthetic_with(n, &cfg, seed)
}

pub fn gen_synthetic_with(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>, DataError> {
    let (h, w) = (cfg.height, cfg.width);
    if n == 0 || !(8..=256).contains(&h) || !(8..=256).contains(&w) {
        return Err(DataError::BadDims(format!("n={n}, {h}x{w} (need n>=1, 8<=h,w<=256)")));
    }
    if cfg.classes < 2 || cfg.channels == 0 || cfg.min_blobs == 0 || cfg.max_blobs < cfg.min_blobs {
        return Err(DataError::BadDims(format!(
            "classes={} channels={} blobs={}..={}",
            cfg.classes, cfg.channels, cfg.min_blobs, cfg.max_blobs
        )));
    }
    if !(cfg.blur_sigma >= 0.0) || !(cfg.texture_std >= 0.0) {
        return Err(DataError::BadDims("blur and texture must be non-negative".into()));
    }
    let root = Rng::new(seed);
    Ok((0..n).map(|i| one_sample(cfg, &mut root.fork(i as u64))).collect())
}

fn one_sample(cfg: &SynthConfig, rng: &mut Rng) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let mut label = vec![0u8; h * w];
    let nblobs = cfg.min_blobs + rng.below(cfg.max_blobs - cfg.min_blobs + 1);
    let side = h.min(w) as f64;
    for _ in 0..nblobs {
        let cy = rng.uniform(0.2, 0.8).unwrap() * h as f64;
        let cx = rng.uniform(0.2, 0.8).unwrap() * w as f64;
        let ry = rng.uniform(0.1, 0.25).unwrap() * side;
        let rx = rng.uniform(0.1, 0.25).unwrap() * side;
        let angle = rng.uniform(0.0, std::f64::consts::PI).unwrap();
        let class = if cfg.classes == 2 { 1 } else { 1 + rng.below(cfg.classes - 1) as u8 };
        let (sa, ca) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = ca * dx + sa * dy;
                let v = -sa * dx + ca * dy;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    label[y * w + x] = class;
                }
            }
        }
    }

    let step = (cfg.foreground - cfg.background) / (cfg.classes - 1) as f64;
    let levels: Vec<f64> = label.iter().map(|&c| cfg.background + step * c as f64).collect();
    let blurred = gaussian_blur(&levels, h, w, cfg.blur_sigma);
    let mut image = Vec::with_capacity(cfg.channels * h * w);
    for _ in 0..cfg.channels {
        image.extend(
            blurred
                .iter()
                .map(|&v| (v + cfg.texture_std * rng.normal()).clamp(0.0, 1.0)),
        );
    }

    let clean = ClassMap::new(h, w, label).expect("generated shape");
    Sample {
        image: Tensor::new(vec![cfg.channels, h, w], image).expect("finite intensities"),
        label: clean.clone(),
        clean_label: clean,
        noise_mask: vec![false; h * w],
    }
}

/// Separable Gaussian blur with edge clamping; `sigma == 0` is the identity.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + clamp(x as i64 + k as i64 - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as i64 + k as i64 - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Pixels whose Manhattan distance to the nearest clean-boundary pixel is
/// below `band` (so `band = 1` is the boundary itself).
pub fn boundary_band(label: &ClassMap, band: usize) -> Vec<bool> {
    let (h, w) = (label.height(), label.width());
    let edges = label.edge_map();
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = std::collections::VecDeque::new();
    for (k, &e) in edges.iter().enumerate() {
        if e {
            dist[k] = 0;
            queue.push_back(k);
        }
    }
    while let Some(k) = queue.pop_front() {
        let (y, x) = (k / w, k % w);
        let d = dist[k] + 1;
        if d >= band {
            continue;
        }
        let mut visit = |nk: usize| {
            if dist[nk] == usize::MAX {
                dist[nk] = d;
                queue.push_back(nk);
            }
        };
        if y > 0 {
            visit(k - w);
        }
        if y + 1 < h {
            visit(k + w);
        }
        if x > 0 {
            visit(k - 1);
        }
        if x + 1 < w {
            visit(k + 1);
        }
    }
    dist.iter().map(|&d| d < band).collect()
}

/// Boundary-band label flipping with the default class count of 2.
pub fn inject_noise(sample: &Sample, rate: f64, band: usize, seed: u64) -> Result<Sample, DataError> {
    let cfg = NoiseConfig {
        rate,
        band,
        mode: NoiseMode::BoundaryBand,
    };
    inject_noise_with(sample, &cfg, 2, seed)
}

/// Flips `round(rate · |candidates|)` pixels of the clean label, chosen
/// uniformly without replacement from the boundary band (or the whole
/// image in [`NoiseMode::Uniform`]). Binary labels swap class; with more
/// classes the replacement is drawn uniformly from the other classes.
pub fn inject_noise_with(sample: &Sample, cfg: &NoiseConfig, classes: usize, seed: u64) -> Result<Sample, DataError> {
    if cfg.band == 0 {
        return Err(DataError::BadDims("noise band must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(DataError::BadDims(format!("noise rate {} outside [0,1]", cfg.rate)));
    }
    let clean = &sample.clean_label;
    let candidates: Vec<usize> = match cfg.mode {
        NoiseMode::BoundaryBand => boundary_band(clean, cfg.band)
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
            .collect(),
        NoiseMode::Uniform => (0..clean.len()).collect(),
    };
    let count = (cfg.rate * candidates.len() as f64).round() as usize;
    let mut rng = Rng::new(seed);
    let chosen = rng.sample_indices(candidates.len(), count);

    let mut label = clean.data().to_vec();
    let mut noise_mask = vec![false; label.len()];
    for ci in chosen {
        let k = candidates[ci];
        let c = label[k] as usize;
        let flipped = if classes == 2 { 1 - c.min(1) } else { (c + 1 + rng.below(classes - 1)) % classes };
        label[k] = flipped as u8;
        noise_mask[k] = true;
    }
    Ok(Sample {
        image: sample.image.clone(),
        label: ClassMap::new(clean.height(), clean.width(), label)?,
        clean_label: clean.clone(),
        noise_mask,
    })
}
