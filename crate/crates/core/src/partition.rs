//! Average-entropy / edge-ratio soft-threshold partitioning.
//!
//! Each image is tiled into `h × w` patches. A patch's fuzziness score is
//! `m = max(r_std, e_std)`, where `r` is the patch's average pixel entropy,
//! `e` the fraction of label-boundary pixels, and `_std` the per-image
//! min–max normalization. The soft threshold `τ` turns `m` into a fuzzy mask
//! `M_f` and a non-fuzzy mask `M_n` that are broadcast to pixels and used as
//! per-pixel loss weights.

use serde::{Deserialize, Serialize};

use crate::dataio::{ClassMap, Sample};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PartitionError {
    #[error("empty patch")]
    EmptyPatch,
    #[error("bad patch size: {0}")]
    BadPatchSize(String),
    #[error("need at least 2 bins, got {0}")]
    BadBins(usize),
    #[error("threshold {0} outside (0, 1]")]
    BadTau(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub bins: usize,
    pub tau: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            patch_h: 16,
            patch_w: 16,
            bins: 32,
            tau: 0.9,
        }
    }
}

/// Average entropy of a patch in nats: `-(1/n) Σ_k p_k ln p_k`, where `p_k` is
/// the within-patch frequency of pixel `k`'s intensity bin (`bins` equal-width
/// bins over `[0, 1]`).
pub fn avg_entropy(patch: &[f64], bins: usize) -> Result<f64, PartitionError> {
    if patch.is_empty() {
        return Err(PartitionError::EmptyPatch);
    }
    if bins < 2 {
        return Err(PartitionError::BadBins(bins));
    }
    let mut counts = vec![0usize; bins];
    for &v in patch {
        counts[bin_of(v, bins)] += 1;
    }
    let n = patch.len() as f64;
    // group the pixel sum by bin: n_b pixels each contribute p_b ln p_b
    let sum: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            c as f64 * p * p.ln()
        })
        .sum();
    Ok((-sum / n).max(0.0))
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Fraction of boundary pixels inside the `h × w` patch at `(y0, x0)`.
/// Boundary pixels are decided on the full label map (4-neighbourhood,
/// out-of-image neighbours ignored).
pub fn edge_ratio(label: &ClassMap, y0: usize, x0: usize, h: usize, w: usize) -> f64 {
    let (lh, lw) = (label.height(), label.width());
    let mut edges = 0usize;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let c = label.get(y, x);
            let is_edge = (y > 0 && label.get(y - 1, x) != c)
                || (y + 1 < lh && label.get(y + 1, x) != c)
                || (x > 0 && label.get(y, x - 1) != c)
                || (x + 1 < lw && label.get(y, x + 1) != c);
            edges += is_edge as usize;
        }
    }
    edges as f64 / (h * w) as f64
}

/// `(v - min) / (max - min)`; a constant vector maps to all zeros.
pub fn minmax_norm(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// `(M_f, M_n)` for one patch score. The non-fuzzy else-branch `τ - m` is
/// clamped to `[0, 1]`.
pub fn mask_values(m: f64, tau: f64) -> (f64, f64) {
    let fuzzy = if m > tau { 1.0 } else { m };
    let nonfuzzy = if m < tau { 1.0 } else { (tau - m).clamp(0.0, 1.0) };
    (fuzzy, nonfuzzy)
}

/// Per-patch scores in row-major patch-grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub r: Vec<f64>,
    pub e: Vec<f64>,
    pub r_std: Vec<f64>,
    pub e_std: Vec<f64>,
    pub m: Vec<f64>,
}

impl PatchScores {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Fuses raw per-patch scores into `m`.
    pub fn from_raw(grid_h: usize, grid_w: usize, patch_h: usize, patch_w: usize, r: Vec<f64>, e: Vec<f64>) -> Self {
        let r_std = minmax_norm(&r);
        let e_std = minmax_norm(&e);
        let m = r_std.iter().zip(&e_std).map(|(a, b)| a.max(*b)).collect();
        Self {
            grid_h,
            grid_w,
            patch_h,
            patch_w,
            r,
            e,
            r_std,
            e_std,
            m,
        }
    }
}

/// Pixel-level fuzzy / non-fuzzy masks (constant within each patch).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMasks {
    pub height: usize,
    pub width: usize,
    pub fuzzy: Vec<f64>,
    pub nonfuzzy: Vec<f64>,
    pub tau: f64,
}

/// Broadcasts patch masks to a `height × width` image. Patches
/// may overhang the image (padded grids); overhanging cells are dropped.
pub fn soft_masks(scores: &PatchScores, height: usize, width: usize, tau: f64) -> SoftMasks {
    let mut fuzzy = vec![0.0; height * width];
    let mut nonfuzzy = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let p = (y / scores.patch_h) * scores.grid_w + x / scores.patch_w;
            let (f, n) = mask_values(scores.m[p], tau);
            fuzzy[y * width + x] = f;
            nonfuzzy[y * width + x] = n;
        }
    }
    SoftMasks {
        height,
        width,
        fuzzy,
        nonfuzzy,
        tau,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSample {
    pub base: Sample,
    pub scores: PatchScores,
    pub masks: SoftMasks,
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 2 - i
    }
}

/// Scores and masks one sample. Images whose size is not a multiple of the
/// patch size are reflection-padded for scoring; masks are cropped back.
pub fn split(sample: &Sample, cfg: &PartitionConfig) -> Result<RegionSample, PartitionError> {
    let (h, w) = (sample.height(), sample.width());
    let (ph, pw) = (cfg.patch_h, cfg.patch_w);
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(PartitionError::BadPatchSize(format!("{ph}x{pw} patches on a {h}x{w} image")));
    }
    if cfg.bins < 2 {
        return Err(PartitionError::BadBins(cfg.bins));
    }
    if !(cfg.tau > 0.0 && cfg.tau <= 1.0) {
        return Err(PartitionError::BadTau(cfg.tau));
    }
    let (gh, gw) = (h.div_ceil(ph), w.div_ceil(pw));
    let (hp, wp) = (gh * ph, gw * pw);
    if hp - h >= h.max(2) - 1 || wp - w >= w.max(2) - 1 {
        return Err(PartitionError::BadPatchSize(format!("padding {h}x{w} to {hp}x{wp} exceeds reflection range")));
    }

    let gray = sample.gray();
    let (padded_gray, padded_label) = if (hp, wp) == (h, w) {
        (gray, sample.label.clone())
    } else {
        let mut g = vec![0.0; hp * wp];
        let mut l = vec![0u8; hp * wp];
        for y in 0..hp {
            for x in 0..wp {
                let (sy, sx) = (reflect(y, h), reflect(x, w));
                g[y * wp + x] = gray[sy * w + sx];
                l[y * wp + x] = sample.label.get(sy, sx);
            }
        }
        (g, ClassMap::new(hp, wp, l).expect("padded shape"))
    };

    let mut r = Vec::with_capacity(gh * gw);
    let mut e = Vec::with_capacity(gh * gw);
    let mut patch = Vec::with_capacity(ph * pw);
    for gy in 0..gh {
        for gx in 0..gw {
            let (y0, x0) = (gy * ph, gx * pw);
            patch.clear();
            for y in y0..y0 + ph {
                patch.extend_from_slice(&padded_gray[y * wp + x0..y * wp + x0 + pw]);
            }
            r.push(avg_entropy(&patch, cfg.bins)?);
            e.push(edge_ratio(&padded_label, y0, x0, ph, pw));
        }
    }
    let scores = PatchScores::from_raw(gh, gw, ph, pw, r, e);
    let masks = soft_masks(&scores, h, w, cfg.tau);
    Ok(RegionSample {
        base: sample.clone(),
        scores,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{boundary_band, gen_synthetic};
    use crate::numkit::{Rng, Tensor};
    use proptest::prelude::*;

    fn sample_from(gray: Vec<f64>, label: Vec<u8>, h: usize, w: usize) -> Sample {
        let l = ClassMap::new(h, w, label).unwrap();
        Sample {
            image: Tensor::new(vec![1, h, w], gray).unwrap(),
            label: l.clone(),
            clean_label: l,
            noise_mask: vec![false; h * w],
        }
    }

    #[test]
    fn entropy_fixtures() {
        assert_eq!(avg_entropy(&[0.3; 16], 32).unwrap(), 0.0);
        // two bins, p = 1/2 for every pixel: -(1/4)·4·(0.5 ln 0.5)
        let r = avg_entropy(&[0.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert!((r - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((r - 0.3466).abs() < 5e-5);
        // 16 pixels in 16 distinct bins: ln16/16
        let distinct: Vec<f64> = (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect();
        let r = avg_entropy(&distinct, 16).unwrap();
        assert!((r - 16f64.ln() / 16.0).abs() < 1e-15);
        assert!((r - 0.1733).abs() < 5e-5);
        assert_eq!(avg_entropy(&[], 4), Err(PartitionError::EmptyPatch));
        assert_eq!(avg_entropy(&[0.1], 1), Err(PartitionError::BadBins(1)));
    }

    #[test]
    fn edge_ratio_fixtures() {
        let constant = ClassMap::filled(4, 4, 1);
        assert_eq!(edge_ratio(&constant, 0, 0, 4, 4), 0.0);
        // columns 0–1 class 0, 2–3 class 1: columns 1 and 2 are edges
        let halves = ClassMap::new(4, 4, (0..16).map(|k| (k % 4 >= 2) as u8).collect()).unwrap();
        assert_eq!(edge_ratio(&halves, 0, 0, 4, 4), 0.5);
        // isolated pixel: itself plus 4 neighbours
        let mut iso = vec![0u8; 36];
        iso[2 * 6 + 3] = 1;
        let iso = ClassMap::new(6, 6, iso).unwrap();
        assert_eq!(edge_ratio(&iso, 0, 0, 6, 6), 5.0 / 36.0);
    }

    #[test]
    fn minmax_fixtures() {
        assert_eq!(minmax_norm(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_norm(&[3.0, 3.0, 3.0]), vec![0.0; 3]);
        assert_eq!(minmax_norm(&[0.0, 1.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn mask_value_fixtures() {
        assert_eq!(mask_values(0.5, 0.9), (0.5, 1.0));
        assert_eq!(mask_values(0.95, 0.9), (1.0, 0.0));
        assert_eq!(mask_values(0.9, 0.9), (0.9, 0.0));
    }

    #[test]
    fn constant_sample_is_entirely_non_fuzzy() {
        let s = sample_from(vec![0.4; 1024], vec![0; 1024], 32, 32);
        let rs = split(&s, &PartitionConfig::default()).unwrap();
        assert_eq!(rs.scores.len(), 4);
        assert!(rs.scores.m.iter().all(|&m| m == 0.0));
        assert!(rs.masks.fuzzy.iter().all(|&f| f == 0.0));
        assert!(rs.masks.nonfuzzy.iter().all(|&n| n == 1.0));
    }

    #[test]
    fn patch_grid_size() {
        let s = &gen_synthetic(1, 32, 32, 3.0, 0).unwrap()[0];
        let rs = split(s, &PartitionConfig::default()).unwrap();
        assert_eq!((rs.scores.grid_h, rs.scores.grid_w, rs.scores.len()), (2, 2, 4));
    }

    #[test]
    fn non_divisible_sizes_are_padded_and_cropped() {
        let s = &gen_synthetic(1, 30, 27, 2.0, 5).unwrap()[0];
        let cfg = PartitionConfig {
            patch_h: 8,
            patch_w: 8,
            ..PartitionConfig::default()
        };
        let rs = split(s, &cfg).unwrap();
        assert_eq!((rs.scores.grid_h, rs.scores.grid_w), (4, 4));
        assert_eq!(rs.masks.fuzzy.len(), 30 * 27);
    }

    #[test]
    fn bad_patch_sizes() {
        let s = &gen_synthetic(1, 16, 16, 1.0, 0).unwrap()[0];
        for (ph, pw) in [(0, 4), (4, 0), (17, 4)] {
            let cfg = PartitionConfig {
                patch_h: ph,
                patch_w: pw,
                ..PartitionConfig::default()
            };
            assert!(matches!(split(s, &cfg), Err(PartitionError::BadPatchSize(_))));
        }
        let cfg = PartitionConfig {
            tau: 0.0,
            ..PartitionConfig::default()
        };
        assert!(matches!(split(s, &cfg), Err(PartitionError::BadTau(_))));
    }

    fn patch_touches(mask: &[bool], width: usize, p: usize, scores: &PatchScores) -> bool {
        let (y0, x0) = ((p / scores.grid_w) * scores.patch_h, (p % scores.grid_w) * scores.patch_w);
        (y0..y0 + scores.patch_h).any(|y| (x0..x0 + scores.patch_w).any(|x| mask[y * width + x]))
    }

    #[test]
    fn boundary_patches_score_above_interior_patches() {
        // interior: no pixel within the blur kernel's reach of the clean boundary
        let cfg = PartitionConfig {
            patch_h: 8,
            patch_w: 8,
            ..PartitionConfig::default()
        };
        let mut checked = 0;
        for s in gen_synthetic(10, 32, 32, 3.0, 3).unwrap() {
            let rs = split(&s, &cfg).unwrap();
            let reach = boundary_band(&s.clean_label, 10);
            let boundary: Vec<usize> = (0..rs.scores.len()).filter(|&p| rs.scores.e[p] > 0.0).collect();
            let interior: Vec<usize> = (0..rs.scores.len())
                .filter(|&p| !patch_touches(&reach, 32, p, &rs.scores))
                .collect();
            if boundary.is_empty() || interior.is_empty() {
                continue;
            }
            let min_boundary = boundary.iter().map(|&p| rs.scores.m[p]).fold(f64::INFINITY, f64::min);
            let max_interior = interior.iter().map(|&p| rs.scores.m[p]).fold(0.0, f64::max);
            assert!(min_boundary > max_interior, "{min_boundary} <= {max_interior}");
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn step_edges_have_lower_boundary_entropy_than_blurred_edges() {
        let cfg = PartitionConfig::default();
        let mean_boundary_entropy = |blur: f64| {
            let mut values = Vec::new();
            for s in gen_synthetic(20, 32, 32, blur, 11).unwrap() {
                let rs = split(&s, &cfg).unwrap();
                values.extend((0..rs.scores.len()).filter(|&p| rs.scores.e[p] > 0.0).map(|p| rs.scores.r[p]));
            }
            values.iter().sum::<f64>() / values.len() as f64
        };
        let (sharp, blurred) = (mean_boundary_entropy(0.0), mean_boundary_entropy(3.0));
        assert!(sharp < blurred, "{sharp} >= {blurred}");
    }

    #[test]
    fn flat_interior_pixels_are_non_fuzzy() {
        // a flat lesion-free quadrant next to a textured, edged one
        let (h, w) = (16, 16);
        let mut gray = vec![0.2; h * w];
        let mut label = vec![0u8; h * w];
        let mut rng = Rng::new(1);
        for y in 0..8 {
            for x in 8..16 {
                gray[y * w + x] = rng.uniform(0.0, 1.0).unwrap();
                label[y * w + x] = (x >= 12) as u8;
            }
        }
        let s = sample_from(gray, label, h, w);
        let cfg = PartitionConfig {
            patch_h: 8,
            patch_w: 8,
            ..PartitionConfig::default()
        };
        let rs = split(&s, &cfg).unwrap();
        for y in 8..16 {
            for x in 0..8 {
                assert_eq!(rs.masks.nonfuzzy[y * w + x], 1.0);
                assert_eq!(rs.masks.fuzzy[y * w + x], 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn mask_branches(m in 0.0f64..=1.0, tau in 0.001f64..0.999) {
            let (f, n) = mask_values(m, tau);
            if m > tau {
                prop_assert_eq!(f, 1.0);
                prop_assert_eq!(n, 0.0);
            } else if m < tau {
                prop_assert_eq!(f, m);
                prop_assert_eq!(n, 1.0);
            } else {
                prop_assert_eq!(f, m);
                prop_assert_eq!(n, 0.0);
            }
            prop_assert!((0.0..=1.0).contains(&f) && (0.0..=1.0).contains(&n));
        }
    }

    proptest! {
        #[test]
        fn entropy_invariant_under_bin_relabeling(bins_used in proptest::collection::vec(0usize..8, 1..64), seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..8).collect();
            Rng::new(seed).shuffle(&mut perm);
            let to_value = |b: usize| (b as f64 + 0.5) / 8.0;
            let a: Vec<f64> = bins_used.iter().map(|&b| to_value(b)).collect();
            let p: Vec<f64> = bins_used.iter().map(|&b| to_value(perm[b])).collect();
            let (ra, rp) = (avg_entropy(&a, 8).unwrap(), avg_entropy(&p, 8).unwrap());
            prop_assert!((ra - rp).abs() < 1e-15);
        }

        #[test]
        fn entropy_bounds(values in proptest::collection::vec(0.0f64..=1.0, 1..300), bins in 2usize..64) {
            // each pixel contributes -p ln p <= 1/e
            let r = avg_entropy(&values, bins).unwrap();
            prop_assert!((0.0..=(-1f64).exp() + 1e-15).contains(&r));
        }

        #[test]
        fn edge_ratio_invariant_under_class_permutation(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let data: Vec<u8> = (0..64).map(|_| rng.below(3) as u8).collect();
            let perm = [2u8, 0, 1];
            let a = ClassMap::new(8, 8, data.clone()).unwrap();
            let b = ClassMap::new(8, 8, data.iter().map(|&c| perm[c as usize]).collect()).unwrap();
            prop_assert_eq!(edge_ratio(&a, 2, 1, 4, 5), edge_ratio(&b, 2, 1, 4, 5));
        }
    }
}
