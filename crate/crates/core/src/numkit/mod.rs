//! Dense tensors, deterministic random streams, symmetric eigensolver and
//! reverse-mode differentiation.

mod autodiff;
mod linalg;
mod rng;
mod tensor;

pub use autodiff::{grad, Graph, Var};
pub use linalg::{inv_sqrtm_spd, spectral_apply, sqrtm_spd, sym_eig, SymEig};
pub use rng::Rng;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("matrix not symmetric at ({row}, {col}): gap {gap:e}")]
    NonSymmetric { row: usize, col: usize, gap: f64 },
    #[error("Jacobi iteration did not converge within {sweeps} sweeps")]
    NonConvergent { sweeps: usize },
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("node {0} is not a parameter of this graph")]
    DetachedNode(usize),
    #[error("empty range [{lo}, {hi})")]
    BadRange { lo: f64, hi: f64 },
}
