//! Symmetric eigendecomposition and spectral matrix functions.

use super::{NumError, Tensor};

const SYMMETRY_TOL: f64 = 1e-9;
const OFF_DIAG_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix; `vectors` holds eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

fn check_symmetric(a: &Tensor) -> Result<usize, NumError> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(NumError::ShapeMismatch(format!("expected square matrix, got {shape:?}")));
    }
    let n = shape[0];
    let tol = SYMMETRY_TOL * a.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (a.get2(i, j) - a.get2(j, i)).abs();
            if gap > tol {
                return Err(NumError::NonSymmetric { row: i, col: j, gap });
            }
        }
    }
    Ok(n)
}

/// Cyclic Jacobi eigendecomposition with ascending eigenvalues.
///
/// Sweeps rotate every off-diagonal pair until the off-diagonal Frobenius norm
/// drops below `1e-12·‖A‖_F`; more than 100 sweeps is reported as
/// [`NumError::NonConvergent`].
pub fn sym_eig(a: &Tensor) -> Result<SymEig, NumError> {
    let n = check_symmetric(a)?;
    // work on the symmetrized copy so tiny asymmetries cannot bias rotations
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.get2(i, j) + a.get2(j, i));
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.frobenius();
    let threshold = if scale > 0.0 { OFF_DIAG_TOL * scale } else { 0.0 };

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&m) <= threshold;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(NumError::NonConvergent { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J, rows/cols p and q
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&m) <= threshold;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + new_col] = v[r * n + old_col];
        }
    }
    Ok(SymEig {
        values,
        vectors: Tensor::from_parts(vec![n, n], vectors),
    })
}

/// `V · diag(f(λ)) · Vᵀ`.
pub fn spectral_apply(eig: &SymEig, f: impl Fn(f64) -> f64) -> Result<Tensor, NumError> {
    let n = eig.values.len();
    let fv: Vec<f64> = eig.values.iter().map(|&l| f(l)).collect();
    let v = eig.vectors.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in 0..n {
                s += v[i * n + k] * fv[k] * v[j * n + k];
            }
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues below zero (round-off) are clamped to zero.
pub fn sqrtm_spd(a: &Tensor) -> Result<Tensor, NumError> {
    let eig = sym_eig(a)?;
    spectral_apply(&eig, |l| l.max(0.0).sqrt())
}

/// `A^{-1/2}` with eigenvalues floored at `floor > 0`.
pub fn inv_sqrtm_spd(a: &Tensor, floor: f64) -> Result<Tensor, NumError> {
    let eig = sym_eig(a)?;
    spectral_apply(&eig, |l| 1.0 / l.max(floor).sqrt())
}
