//! Dense linear algebra kernels for small matrices.

mod decomp;
mod expm;
mod matrix;

pub use decomp::{
    column_projector, frobenius_inner, frobenius_norm, matmul, numerical_rank, pseudo_inverse,
    qr_thin, spectral_norm, svd_thin, Projector, DEFAULT_RANK_TOL,
};
pub use expm::{expm, expm_with_tape, ExpmTape, TAYLOR_ORDER};
pub use matrix::Matrix;
