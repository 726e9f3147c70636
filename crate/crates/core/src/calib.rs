//! Class-conditional Gaussian feature statistics and their squared
//! 2-Wasserstein alignment.
//!
//! Features are `(N, d, H, W)` tensors; per-pixel labels and non-negative
//! weights are indexed `(n, y, x)` row-major. Pixels with zero weight are
//! excluded from all statistics.

use serde::{Deserialize, Serialize};

use crate::numkit::{inv_sqrtm_spd, sqrtm_spd, NumError, Rng, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CalibError {
    #[error("class {class} has {count} pixels, need at least {need}")]
    DegenerateClass { class: u8, count: usize, need: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// Weight of the alignment term in the fuzzy loss.
    pub alpha: f64,
    /// Upper bound of the uniform covariance perturbation.
    pub eps_max: f64,
    pub ridge: f64,
    /// Minimum pixel count for a usable class; `None` means `d + 1`.
    pub min_count: Option<usize>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            eps_max: 0.01,
            ridge: 1e-6,
            min_count: None,
        }
    }
}

impl CalibConfig {
    pub fn min_count_for(&self, d: usize) -> usize {
        self.min_count.unwrap_or(d + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGaussian {
    pub class: u8,
    pub mean: Vec<f64>,
    /// `d × d`, ridge included.
    pub cov: Tensor,
    /// Pixels with positive weight.
    pub count: usize,
    pub weight_sum: f64,
}

impl ClassGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn usable(&self, min_count: usize) -> bool {
        self.count >= min_count && self.weight_sum > 0.0
    }
}

/// Zeroes the statistics weight of pixels the indicator rejects.
pub fn denoise_features(weights: &[f64], keep: &[bool]) -> Vec<f64> {
    assert_eq!(weights.len(), keep.len(), "weights and indicator differ in length");
    weights.iter().zip(keep).map(|(&w, &k)| if k { w } else { 0.0 }).collect()
}

struct Layout {
    n: usize,
    d: usize,
    plane: usize,
}

fn layout(features: &Tensor, labels: &[u8], weights: &[f64]) -> Result<Layout, CalibError> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(CalibError::ShapeMismatch(format!("features {s:?}")));
    }
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != n * plane || weights.len() != n * plane {
        return Err(CalibError::ShapeMismatch(format!(
            "{} pixels with {} labels and {} weights",
            n * plane,
            labels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(CalibError::ShapeMismatch("weights must be finite and non-negative".into()));
    }
    Ok(Layout { n, d, plane })
}

fn pixel<'a>(features: &'a [f64], l: &Layout, k: usize) -> impl Iterator<Item = f64> + 'a {
    let (b, s) = (k / l.plane, k % l.plane);
    let base = b * l.d * l.plane + s;
    let plane = l.plane;
    (0..l.d).map(move |j| features[base + j * plane])
}

/// Weighted mean and covariance (normalized by the weight sum) of each class
/// `0..classes`. Classes without weight get a zero mean and `ridge·I`.
pub fn class_stats(
    features: &Tensor,
    labels: &[u8],
    weights: &[f64],
    classes: usize,
    ridge: f64,
) -> Result<Vec<ClassGaussian>, CalibError> {
    let l = layout(features, labels, weights)?;
    let f = features.data();
    let d = l.d;
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let members: Vec<usize> = (0..l.n * l.plane)
            .filter(|&k| labels[k] as usize == c && weights[k] > 0.0)
            .collect();
        let weight_sum: f64 = members.iter().map(|&k| weights[k]).sum();
        let mut mean = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        if weight_sum > 0.0 {
            for &k in &members {
                for (m, x) in mean.iter_mut().zip(pixel(f, &l, k)) {
                    *m += weights[k] * x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= weight_sum);
            let mut centered = vec![0.0; d];
            for &k in &members {
                for (cv, (x, m)) in centered.iter_mut().zip(pixel(f, &l, k).zip(&mean)) {
                    *cv = x - m;
                }
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] += weights[k] * centered[i] * centered[j];
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= weight_sum);
        }
        for i in 0..d {
            cov[i * d + i] += ridge;
        }
        out.push(ClassGaussian {
            class: c as u8,
            mean,
            cov: Tensor::new(vec![d, d], cov)?,
            count: members.len(),
            weight_sum,
        });
    }
    Ok(out)
}

/// `Σ + ε·𝟙` with `ε ~ U(0, eps_max)` drawn from `rng`.
pub fn perturb_cov(cov: &Tensor, eps_max: f64, rng: &mut Rng) -> Result<Tensor, CalibError> {
    let eps = if eps_max > 0.0 { rng.uniform(0.0, eps_max)? } else { 0.0 };
    Ok(cov.map(|v| v + eps)?)
}

/// Applies [`perturb_cov`] to every class, one draw per class.
pub fn perturb_stats(stats: &[ClassGaussian], eps_max: f64, rng: &mut Rng) -> Result<Vec<ClassGaussian>, CalibError> {
    stats
        .iter()
        .map(|g| {
            let mut stream = rng.fork(g.class as u64);
            Ok(ClassGaussian {
                cov: perturb_cov(&g.cov, eps_max, &mut stream)?,
                ..g.clone()
            })
        })
        .collect()
}

fn check_pair(a: &ClassGaussian, b: &ClassGaussian, min_count: usize) -> Result<(), CalibError> {
    for g in [a, b] {
        if !g.usable(min_count) {
            return Err(CalibError::DegenerateClass {
                class: g.class,
                count: g.count,
                need: min_count,
            });
        }
    }
    if a.dim() != b.dim() {
        return Err(CalibError::ShapeMismatch(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(√Σ₁ Σ₂ √Σ₁)^{1/2})` on raw moments.
pub fn bures_w2_moments(m1: &[f64], s1: &Tensor, m2: &[f64], s2: &Tensor) -> Result<f64, CalibError> {
    let mean_term: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let r1 = sqrtm_spd(s1)?;
    let cross = sqrtm_spd(&r1.matmul(s2)?.matmul(&r1)?)?;
    let trace_term = s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

/// Squared 2-Wasserstein distance between two usable class Gaussians.
pub fn bures_w2(a: &ClassGaussian, b: &ClassGaussian, min_count: usize) -> Result<f64, CalibError> {
    check_pair(a, b, min_count)?;
    bures_w2_moments(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Gradient of `bures_w2(target, ·)` with respect to the second argument's
/// mean and covariance: `2(μ − μ_t)` and `I − √A (√A Σ √A)^{-1/2} √A` with
/// `A = Σ_t`.
pub fn bures_grad(target_mean: &[f64], target_cov: &Tensor, mean: &[f64], cov: &Tensor) -> Result<(Vec<f64>, Tensor), CalibError> {
    let d = mean.len();
    let dmu = mean.iter().zip(target_mean).map(|(m, t)| 2.0 * (m - t)).collect();
    let ra = sqrtm_spd(target_cov)?;
    let inner = ra.matmul(cov)?.matmul(&ra)?;
    let inv_root = inv_sqrtm_spd(&inner, 1e-300)?;
    let prod = ra.matmul(&inv_root)?.matmul(&ra)?;
    let mut dsigma = Tensor::identity(d).sub(&prod)?;
    // symmetrize away round-off
    let t = dsigma.transpose()?;
    dsigma = dsigma.add(&t)?.scale(0.5)?;
    Ok((dmu, dsigma))
}

/// Alignment loss and its gradient with respect to the fuzzy features.
#[derive(Clone, Debug)]
pub struct AlignOut {
    pub loss: f64,
    /// Same shape as the input features.
    pub grad: Tensor,
    /// `(class, distance)` of every class that contributed.
    pub per_class: Vec<(u8, f64)>,
}

/// `Σ_c W₂²(target_c, fuzzy_c)` over classes usable on both sides, where the
/// fuzzy statistics are computed from `features` with `weights`. Targets are
/// constants.
pub fn lw_loss_and_grad(
    features: &Tensor,
    labels: &[u8],
    weights: &[f64],
    targets: &[ClassGaussian],
    cfg: &CalibConfig,
) -> Result<AlignOut, CalibError> {
    let l = layout(features, labels, weights)?;
    let min_count = cfg.min_count_for(l.d);
    let fuzzy = class_stats(features, labels, weights, targets.len(), cfg.ridge)?;
    let f = features.data();
    let d = l.d;
    let mut grad = vec![0.0; f.len()];
    let mut loss = 0.0;
    let mut per_class = Vec::new();
    for (t, g) in targets.iter().zip(&fuzzy) {
        if !t.usable(min_count) || !g.usable(min_count) {
            continue;
        }
        let dist = bures_w2(t, g, min_count)?;
        loss += dist;
        per_class.push((g.class, dist));
        let (dmu, dsigma) = bures_grad(&t.mean, &t.cov, &g.mean, &g.cov)?;
        let gs = dsigma.data();
        let c = g.class;
        for k in (0..l.n * l.plane).filter(|&k| labels[k] == c && weights[k] > 0.0) {
            let a = weights[k] / g.weight_sum;
            let centered: Vec<f64> = pixel(f, &l, k).zip(&g.mean).map(|(x, m)| x - m).collect();
            let (b, s) = (k / l.plane, k % l.plane);
            for i in 0..d {
                let gc: f64 = (0..d).map(|j| gs[i * d + j] * centered[j]).sum();
                grad[b * d * l.plane + i * l.plane + s] += a * dmu[i] + 2.0 * a * gc;
            }
        }
    }
    Ok(AlignOut {
        loss,
        grad: Tensor::new(features.shape().to_vec(), grad)?,
        per_class,
    })
}

/// `Σ ω·M·ce / Σ ω·M + mean(ω over M > 0)·α·lw`; zero-weight batches
/// contribute only the alignment term.
pub fn fuzzy_loss(ce: &[f64], omega: &[f64], mask: &[f64], lw: f64, alpha: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    let (mut omega_sum, mut support) = (0.0, 0usize);
    for k in 0..ce.len() {
        let w = omega[k] * mask[k];
        num += w * ce[k];
        den += w;
        if mask[k] > 0.0 {
            omega_sum += omega[k];
            support += 1;
        }
    }
    let ce_term = if den > 0.0 { num / den } else { 0.0 };
    let omega_mean = if support > 0 { omega_sum / support as f64 } else { 0.0 };
    ce_term + omega_mean * alpha * lw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::sym_eig;
    use proptest::prelude::{any, prop_assert, proptest};

    fn gaussian(class: u8, mean: Vec<f64>, cov: Tensor) -> ClassGaussian {
        ClassGaussian {
            class,
            mean,
            cov,
            count: 100,
            weight_sum: 100.0,
        }
    }

    fn random_spd(rng: &mut Rng, d: usize) -> Tensor {
        let a = Tensor::new(vec![d, d], (0..d * d).map(|_| rng.normal()).collect()).unwrap();
        let at = a.transpose().unwrap();
        a.matmul(&at).unwrap().add(&Tensor::identity(d).scale(0.1).unwrap()).unwrap()
    }

    /// `(1, d, 1, P)` features from pixel-major rows.
    fn features_of(rows: &[Vec<f64>]) -> Tensor {
        let (p, d) = (rows.len(), rows[0].len());
        let mut data = vec![0.0; p * d];
        for (k, r) in rows.iter().enumerate() {
            for j in 0..d {
                data[j * p + k] = r[j];
            }
        }
        Tensor::new(vec![1, d, 1, p], data).unwrap()
    }

    #[test]
    fn hand_covariance() {
        let f = features_of(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let st = class_stats(&f, &[0, 0], &[1.0, 1.0], 2, 1e-6).unwrap();
        assert_eq!(st[0].mean, vec![1.0, 0.0]);
        assert_eq!(st[0].cov.data(), &[1.0 + 1e-6, 0.0, 0.0, 1e-6]);
        assert_eq!(st[0].count, 2);
        assert_eq!(st[1].count, 0);
        assert_eq!(st[1].cov.data(), &[1e-6, 0.0, 0.0, 1e-6]);
    }

    #[test]
    fn single_pixel_weight_gives_ridge() {
        let f = features_of(&[vec![1.0, 2.0], vec![5.0, -1.0], vec![0.3, 0.3]]);
        let st = class_stats(&f, &[1, 1, 1], &[0.0, 2.5, 0.0], 2, 1e-6).unwrap();
        assert_eq!(st[1].mean, vec![5.0, -1.0]);
        assert_eq!(st[1].cov.data(), &[1e-6, 0.0, 0.0, 1e-6]);
    }

    #[test]
    fn excluded_pixels_are_dropped_not_zeroed() {
        let rows = vec![vec![1.0, 1.0], vec![3.0, 1.0], vec![10.0, 10.0], vec![-7.0, 4.0]];
        let f = features_of(&rows);
        let w = denoise_features(&[1.0; 4], &[true, true, false, false]);
        let st = class_stats(&f, &[0; 4], &w, 1, 0.0).unwrap();
        assert_eq!(st[0].mean, vec![2.0, 1.0]);
        assert_eq!(st[0].count, 2);
        let none = class_stats(&f, &[0; 4], &denoise_features(&[1.0; 4], &[false; 4]), 1, 0.0).unwrap();
        assert_eq!(none[0].count, 0);
        let all = denoise_features(&[0.5, 1.0, 0.0, 2.0], &[true; 4]);
        assert_eq!(all, vec![0.5, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn perturbation_fixtures() {
        let mut rng = Rng::new(3);
        let eye = Tensor::identity(2);
        assert_eq!(perturb_cov(&eye, 0.0, &mut rng).unwrap(), eye);
        let bumped = eye.map(|v| v + 0.01).unwrap();
        assert_eq!(bumped.data(), &[1.01, 0.01, 0.01, 1.01]);
        let p = perturb_cov(&eye, 0.01, &mut rng).unwrap();
        let eps = p.data()[1];
        assert!(eps > 0.0 && eps < 0.01);
        assert_eq!(p.data(), &[1.0 + eps, eps, eps, 1.0 + eps]);
    }

    #[test]
    fn closed_forms() {
        let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let d = bures_w2(&gaussian(0, vec![0.0], one(1.0)), &gaussian(0, vec![3.0], one(4.0)), 2).unwrap();
        assert!((d - 10.0).abs() <= 1e-8);
        let a = gaussian(0, vec![0.5, 0.5], Tensor::from_diag(&[1.0, 4.0]));
        let b = gaussian(0, vec![0.5, 0.5], Tensor::from_diag(&[4.0, 1.0]));
        assert!((bures_w2(&a, &b, 3).unwrap() - 2.0).abs() <= 1e-8);
        assert!(bures_w2(&a, &a, 3).unwrap().abs() <= 1e-10);
        let thin = ClassGaussian { count: 2, ..a.clone() };
        assert_eq!(
            bures_w2(&thin, &b, 3),
            Err(CalibError::DegenerateClass { class: 0, count: 2, need: 3 })
        );
    }

    fn random_instance(rng: &mut Rng, d: usize, p: usize) -> (Tensor, Vec<u8>, Vec<f64>, Vec<ClassGaussian>) {
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<u8> = (0..p).map(|k| (k % 2) as u8).collect();
        let weights: Vec<f64> = (0..p).map(|_| rng.uniform(0.2, 1.0).unwrap()).collect();
        let targets = (0..2)
            .map(|c| gaussian(c, (0..d).map(|_| rng.normal()).collect(), random_spd(rng, d)))
            .collect();
        (features_of(&rows), labels, weights, targets)
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let mut rng = Rng::new(41);
        let cfg = CalibConfig {
            min_count: Some(4),
            ..CalibConfig::default()
        };
        for _ in 0..20 {
            let (f, labels, weights, targets) = random_instance(&mut rng, 3, 12);
            let out = lw_loss_and_grad(&f, &labels, &weights, &targets, &cfg).unwrap();
            assert_eq!(out.per_class.len(), 2);
            let h = 1e-6;
            let mut diff = 0.0;
            let mut norm = 0.0;
            for i in 0..f.numel() {
                let bump = |s: f64| {
                    let mut d = f.data().to_vec();
                    d[i] += s;
                    let t = Tensor::new(f.shape().to_vec(), d).unwrap();
                    lw_loss_and_grad(&t, &labels, &weights, &targets, &cfg).unwrap().loss
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                diff += (fd - out.grad.data()[i]).powi(2);
                norm += fd * fd;
            }
            assert!(diff.sqrt() / norm.sqrt() <= 1e-4, "{}", diff.sqrt() / norm.sqrt());
        }
    }

    #[test]
    fn aligned_stats_have_zero_loss_and_gradient() {
        let mut rng = Rng::new(5);
        let (f, labels, weights, _) = random_instance(&mut rng, 3, 12);
        let cfg = CalibConfig {
            min_count: Some(4),
            ..CalibConfig::default()
        };
        let own = class_stats(&f, &labels, &weights, 2, cfg.ridge).unwrap();
        let out = lw_loss_and_grad(&f, &labels, &weights, &own, &cfg).unwrap();
        assert!(out.loss.abs() < 1e-9);
        assert!(out.grad.max_abs() < 1e-6);
    }

    #[test]
    fn missing_fuzzy_class_is_skipped() {
        let mut rng = Rng::new(6);
        let (f, _, weights, targets) = random_instance(&mut rng, 2, 12);
        let labels = vec![1u8; 12];
        let out = lw_loss_and_grad(&f, &labels, &weights, &targets, &CalibConfig::default()).unwrap();
        assert_eq!(out.per_class.len(), 1);
        assert_eq!(out.per_class[0].0, 1);
        let st = class_stats(&f, &labels, &weights, 2, 1e-6).unwrap();
        assert!((out.loss - bures_w2(&targets[1], &st[1], 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradient_descent_decreases_alignment_loss() {
        let mut rng = Rng::new(8);
        let cfg = CalibConfig {
            min_count: Some(4),
            ..CalibConfig::default()
        };
        for _ in 0..5 {
            let (mut f, labels, weights, targets) = random_instance(&mut rng, 3, 12);
            let mut prev = f64::INFINITY;
            for _ in 0..50 {
                let out = lw_loss_and_grad(&f, &labels, &weights, &targets, &cfg).unwrap();
                assert!(out.loss <= prev + 1e-12, "{} > {prev}", out.loss);
                prev = out.loss;
                f = f.sub(&out.grad.scale(0.05).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn fuzzy_loss_reductions() {
        let ce = [0.5, 1.0, 2.0, 0.1];
        let mask = [1.0, 0.5, 0.0, 0.2];
        let ones = [1.0; 4];
        let plain = (0.5 + 0.5 + 0.02) / 1.7;
        assert!((fuzzy_loss(&ce, &ones, &mask, 3.0, 0.0) - plain).abs() < 1e-15);
        assert!((fuzzy_loss(&ce, &ones, &mask, 3.0, 0.05) - (plain + 0.15)).abs() < 1e-15);
        let omega = [2.0, 0.0, 5.0, 1.0];
        let expected = (1.0 + 0.02) / 2.2 + (3.0 / 3.0) * 0.05 * 3.0;
        assert!((fuzzy_loss(&ce, &omega, &mask, 3.0, 0.05) - expected).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bures_properties(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = gaussian(0, (0..d).map(|_| rng.normal()).collect(), random_spd(&mut rng, d));
            let b = gaussian(0, (0..d).map(|_| rng.normal()).collect(), random_spd(&mut rng, d));
            let ab = bures_w2(&a, &b, 1).unwrap();
            let ba = bures_w2(&b, &a, 1).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
            prop_assert!(bures_w2(&a, &a, 1).unwrap() <= 1e-9 * a.cov.trace().max(1.0));
            prop_assert!(ab > 1e-9);
        }

        #[test]
        fn perturbation_never_lowers_eigenvalues(seed in any::<u64>(), d in 1usize..8) {
            let mut rng = Rng::new(seed);
            let s = random_spd(&mut rng, d);
            let p = perturb_cov(&s, 0.01, &mut rng).unwrap();
            let (before, after) = (sym_eig(&s).unwrap().values, sym_eig(&p).unwrap().values);
            for (x, y) in before.iter().zip(&after) {
                prop_assert!(*y >= *x - 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn stats_ignore_pixel_order(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (f, labels, weights, _) = random_instance(&mut rng, 3, 10);
            let mut order: Vec<usize> = (0..10).collect();
            rng.shuffle(&mut order);
            let rows: Vec<Vec<f64>> = order.iter().map(|&k| (0..3).map(|j| f.data()[j * 10 + k]).collect()).collect();
            let pl: Vec<u8> = order.iter().map(|&k| labels[k]).collect();
            let pw: Vec<f64> = order.iter().map(|&k| weights[k]).collect();
            let a = class_stats(&f, &labels, &weights, 2, 1e-6).unwrap();
            let b = class_stats(&features_of(&rows), &pl, &pw, 2, 1e-6).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.mean.iter().zip(&y.mean) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
                prop_assert!(x.cov.sub(&y.cov).unwrap().max_abs() < 1e-12);
            }
        }
    }
}
