//! Matrix exponential by scaling and squaring around a fixed-order Taylor
//! kernel, with a reverse-mode tape over the same computation graph.
//!
//! The squaring count is `s = max(0, ⌈log₂‖M‖₁⌉ + 1)`, which leaves
//! `‖M / 2ˢ‖₁ ≤ 1/2`. At that radius an order-18 truncation sits far below
//! double-precision rounding, so the kernel is exact for our purposes and the
//! tape differentiates exactly what was computed.

use super::Matrix;
use crate::error::{Error, Result};

/// Taylor truncation order of the scaled kernel.
pub const TAYLOR_ORDER: usize = 18;

fn squaring_count(m: &Matrix) -> u32 {
    let n1 = m.norm_1();
    if n1 == 0.0 {
        return 0;
    }
    let s = n1.log2().ceil() + 1.0;
    if s <= 0.0 {
        0
    } else {
        s as u32
    }
}

/// `exp(m)` for square `m`.
pub fn expm(m: &Matrix) -> Result<Matrix> {
    Ok(expm_with_tape(m)?.0)
}

/// Recorded intermediates of one [`expm`] evaluation.
#[derive(Debug, Clone)]
pub struct ExpmTape {
    scale: f64,
    scaled: Matrix,
    /// Horner partial sums; `horner[0]` is the innermost (identity) term.
    horner: Vec<Matrix>,
    /// Matrices before each squaring.
    squarings: Vec<Matrix>,
}

/// Evaluates `exp(m)` and keeps what [`ExpmTape::backward`] needs.
pub fn expm_with_tape(m: &Matrix) -> Result<(Matrix, ExpmTape)> {
    if !m.is_square() {
        return Err(Error::dim("expm", format!("non-square {:?}", m.shape())));
    }
    let n = m.rows();
    let s = squaring_count(m);
    if s > 1000 {
        return Err(Error::Invalid("expm: argument norm too large".into()));
    }
    let scale = 0.5f64.powi(s as i32);
    let x = m.scale(scale);
    let eye = Matrix::identity(n);

    let mut horner = Vec::with_capacity(TAYLOR_ORDER + 1);
    let mut p = eye.clone();
    for j in (1..=TAYLOR_ORDER).rev() {
        let next = eye.add(&x.dot(&p).scale(1.0 / j as f64));
        horner.push(p);
        p = next;
    }
    let mut squarings = Vec::with_capacity(s as usize);
    for _ in 0..s {
        let sq = p.dot(&p);
        squarings.push(p);
        p = sq;
    }
    if !p.is_finite() {
        return Err(Error::Invalid("expm: result overflowed".into()));
    }
    Ok((
        p,
        ExpmTape {
            scale,
            scaled: x,
            horner,
            squarings,
        },
    ))
}

impl ExpmTape {
    /// Pulls `∂L/∂exp(m)` back to `∂L/∂m`.
    pub fn backward(&self, grad_out: &Matrix) -> Matrix {
        let mut g = grad_out.clone();
        for e in self.squarings.iter().rev() {
            // d(E·E) = dE·E + E·dE
            g = g.dot_t(e).add(&e.t_dot(&g));
        }
        // Horner steps were P_j = I + X·P_{j+1} / j for j = q..1; walk j = 1..q.
        let mut gx = Matrix::zeros(self.scaled.rows(), self.scaled.cols());
        for (idx, p_inner) in self.horner.iter().enumerate().rev() {
            let j = (TAYLOR_ORDER - idx) as f64;
            gx.add_scaled(&g.dot_t(p_inner), 1.0 / j);
            g = self.scaled.t_dot(&g).scale(1.0 / j);
        }
        gx.scale(self.scale)
    }
}
