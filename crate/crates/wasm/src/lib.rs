//! Browser bindings: region masks of a synthetic image, the 2-D Gaussian
//! transport distance, and confidence maps after a short training run.
//!
//! Images are 32×32 (masks) or 16×16 (confidence); all maps are returned
//! row-major and concatenated.

use dale::calib::bures_w2_moments;
use dale::dataio::{generate_dataset, gen_synthetic_with, inject_noise, Dataset, DatasetConfig, SynthConfig};
use dale::numkit::Tensor;
use dale::partition::{split, PartitionConfig};
use dale::segmodel::ModelConfig;
use dale::trainer::{dale_iteration, RunConfig, TrainState};
use wasm_bindgen::prelude::*;

pub const MASK_SIDE: usize = 32;
pub const OMEGA_SIDE: usize = 16;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// `[image, noisy label, fuzzy mask, non-fuzzy mask]`, each `32 × 32`.
pub fn region_maps(seed: u32, blur: f64, tau: f64, patch: usize) -> Result<Vec<f64>, String> {
    let synth = SynthConfig {
        blur_sigma: blur,
        ..SynthConfig::default()
    };
    let sample = &gen_synthetic_with(1, &synth, seed as u64).map_err(err)?[0];
    let noisy = inject_noise(sample, 0.3, 2, seed as u64).map_err(err)?;
    let cfg = PartitionConfig {
        patch_h: patch,
        patch_w: patch,
        tau,
        ..PartitionConfig::default()
    };
    let r = split(&noisy, &cfg).map_err(err)?;
    let mut out = r.base.gray();
    out.extend(r.base.label.data().iter().map(|&c| c as f64));
    out.extend_from_slice(&r.masks.fuzzy);
    out.extend_from_slice(&r.masks.nonfuzzy);
    Ok(out)
}

/// Squared 2-Wasserstein distance between `N(m1, S1)` and `N(m2, S2)`;
/// covariances are row-major `2 × 2`.
pub fn gaussian_distance(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64, String> {
    if m1.len() != 2 || m2.len() != 2 || s1.len() != 4 || s2.len() != 4 {
        return Err("expected 2-vectors and 2x2 matrices".into());
    }
    for s in [s1, s2] {
        let symmetric = (s[1] - s[2]).abs() <= 1e-12 * (1.0 + s[1].abs());
        if !symmetric || s[0] <= 0.0 || s[0] * s[3] - s[1] * s[2] <= 0.0 {
            return Err("covariances must be symmetric positive definite".into());
        }
    }
    let a = Tensor::new(vec![2, 2], s1.to_vec()).map_err(err)?;
    let b = Tensor::new(vec![2, 2], s2.to_vec()).map_err(err)?;
    bures_w2_moments(m1, &a, m2, &b).map_err(err)
}

fn omega_data(seed: u32) -> Result<Dataset, String> {
    generate_dataset(&DatasetConfig {
        n_train: 8,
        n_test: 0,
        seed: seed as u64,
        synth: SynthConfig {
            height: OMEGA_SIDE,
            width: OMEGA_SIDE,
            blur_sigma: 1.5,
            ..SynthConfig::default()
        },
        ..DatasetConfig::default()
    })
    .map_err(err)
}

/// Runs `iterations` alternating iterations on eight `16 × 16` images and
/// returns `[confidence, injected-noise indicator, noise flag]` of image 0.
/// The noise flag is 1 where a pixel was evaluated and judged noisy.
pub fn confidence_maps(seed: u32, iterations: usize) -> Result<Vec<f64>, String> {
    if !(1..=10).contains(&iterations) {
        return Err("iterations must be in 1..=10".into());
    }
    let data = omega_data(seed)?;
    let mut cfg = RunConfig {
        iterations,
        batch_size: 4,
        seed: seed as u64,
        phase_epochs: 3,
        model: ModelConfig {
            hidden: 4,
            feature_dim: 4,
            ..ModelConfig::default()
        },
        partition: PartitionConfig {
            patch_h: 8,
            patch_w: 8,
            ..PartitionConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.confidence.max_pixels = Some(64);
    cfg.adam.lr = 1e-2;
    let mut state = TrainState::new(cfg, &data.train).map_err(err)?;
    for _ in 0..iterations {
        dale_iteration(&mut state, &mut |_| {}).map_err(err)?;
    }
    let map = &state.maps[0];
    let flagged = map.noise_indicator().map_err(err)?;
    let mut out = map.omega.clone();
    out.extend(state.regions[0].base.noise_mask.iter().map(|&b| b as u8 as f64));
    out.extend((0..map.len()).map(|k| (map.evaluated[k] && !flagged[k]) as u8 as f64));
    Ok(out)
}

#[wasm_bindgen(js_name = regionMaps)]
pub fn region_maps_js(seed: u32, blur: f64, tau: f64, patch: usize) -> Result<Vec<f64>, JsError> {
    region_maps(seed, blur, tau, patch).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = gaussianDistance)]
pub fn gaussian_distance_js(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64, JsError> {
    gaussian_distance(m1, s1, m2, s2).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = confidenceMaps)]
pub fn confidence_maps_js(seed: u32, iterations: usize) -> Result<Vec<f64>, JsError> {
    confidence_maps(seed, iterations).map_err(|e| JsError::new(&e))
}
