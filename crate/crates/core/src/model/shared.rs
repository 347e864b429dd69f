//! Shared ambient bases from per-domain LoRA pairs and the induced core
//! sequence `F_t = C_t D_t`.

use serde::{Deserialize, Serialize};

use super::adapter::{compose_delta, LoraPair};
use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, svd_thin, Matrix, DEFAULT_RANK_TOL};

/// Least-squares coefficients of one pair in the shared bases.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `B⁺ B_t`, r′ × r.
    pub c: Matrix,
    /// `A_t A⁺`, r × r′.
    pub d: Matrix,
    /// `‖B C_t − B_t‖_F`
    pub residual_b: f64,
    /// `‖D_t A − A_t‖_F`
    pub residual_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBases {
    /// d × r′, orthonormal columns.
    pub b: Matrix,
    /// r′ × k, orthonormal rows.
    pub a: Matrix,
    /// Fraction of squared singular mass kept from the B stack and the A stack.
    pub energy: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreTarget {
    pub f: Matrix,
    pub projection: Projection,
    /// `‖B F_t A − B_t A_t‖_F`
    pub residual: f64,
}

struct BasisInverses {
    b_pinv: Matrix,
    a_pinv: Matrix,
}

fn inverses(b: &Matrix, a: &Matrix) -> Result<BasisInverses> {
    let r_prime = b.cols();
    if a.rows() != r_prime {
        return Err(Error::dim(
            "project_onto_bases",
            format!("B is {:?}, A is {:?}", b.shape(), a.shape()),
        ));
    }
    let (b_pinv, rank_b) = pseudo_inverse(b, DEFAULT_RANK_TOL)?;
    let (a_pinv, rank_a) = pseudo_inverse(a, DEFAULT_RANK_TOL)?;
    if rank_b < r_prime || rank_a < r_prime {
        return Err(Error::Rank(format!(
            "bases have ranks ({rank_b}, {rank_a}), need {r_prime}"
        )));
    }
    Ok(BasisInverses { b_pinv, a_pinv })
}

fn project(b: &Matrix, a: &Matrix, inv: &BasisInverses, pair: &LoraPair) -> Result<Projection> {
    if pair.b.rows() != b.rows() || pair.a.cols() != a.cols() {
        return Err(Error::dim(
            "project_onto_bases",
            format!("pair is {:?}·{:?}, bases {:?}·{:?}", pair.b.shape(), pair.a.shape(), b.shape(), a.shape()),
        ));
    }
    let c = inv.b_pinv.dot(&pair.b);
    let d = pair.a.dot(&inv.a_pinv);
    let residual_b = b.dot(&c).sub(&pair.b).frobenius_norm();
    let residual_a = d.dot(a).sub(&pair.a).frobenius_norm();
    Ok(Projection {
        c,
        d,
        residual_b,
        residual_a,
    })
}

/// Coefficients `C_t = B⁺B_t`, `D_t = A_tA⁺` and their fit residuals.
pub fn project_onto_bases(b: &Matrix, a: &Matrix, pair: &LoraPair) -> Result<Projection> {
    project(b, a, &inverses(b, a)?, pair)
}

/// Top-`r′` left singular vectors of `[B_1 | … | B_T]` and top-`r′` right
/// singular vectors (as rows) of the vertical stack of the `A_t`.
pub fn build_shared_bases(pairs: &[LoraPair], r_prime: usize) -> Result<SharedBases> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Argument("no LoRA pairs to build bases from".into()))?;
    let (d, k) = (first.b.rows(), first.a.cols());
    for p in pairs {
        if p.b.rows() != d || p.a.cols() != k || p.b.cols() != p.a.rows() {
            return Err(Error::dim(
                "build_shared_bases",
                format!("pair {:?}·{:?} vs d = {d}, k = {k}", p.b.shape(), p.a.shape()),
            ));
        }
    }
    if r_prime == 0 {
        return Err(Error::Argument("r' must be positive".into()));
    }
    let bs: Vec<&Matrix> = pairs.iter().map(|p| &p.b).collect();
    let as_: Vec<&Matrix> = pairs.iter().map(|p| &p.a).collect();
    let b_stack = Matrix::hstack(&bs)?;
    let a_stack = Matrix::vstack(&as_)?;
    let (ub, sb, _) = svd_thin(&b_stack)?;
    let (_, sa, va) = svd_thin(&a_stack)?;
    let rank = |s: &[f64]| {
        let top = s.first().copied().unwrap_or(0.0);
        s.iter().filter(|&&x| top > 0.0 && x > DEFAULT_RANK_TOL * top).count()
    };
    let (rank_b, rank_a) = (rank(&sb), rank(&sa));
    if r_prime > rank_b || r_prime > rank_a {
        return Err(Error::Rank(format!(
            "r' = {r_prime} exceeds stack ranks (B: {rank_b}, A: {rank_a})"
        )));
    }
    let energy = |s: &[f64]| {
        let total: f64 = s.iter().map(|x| x * x).sum();
        s[..r_prime].iter().map(|x| x * x).sum::<f64>() / total
    };
    Ok(SharedBases {
        b: ub.leading_cols(r_prime),
        a: va.leading_cols(r_prime).transpose(),
        energy: (energy(&sb), energy(&sa)),
    })
}

/// `F_t = C_t D_t` for every pair, with the reconstruction residual of
/// `B F_t A` against `B_t A_t`.
pub fn core_sequence_from_pairs(pairs: &[LoraPair], b: &Matrix, a: &Matrix) -> Result<Vec<CoreTarget>> {
    let inv = inverses(b, a)?;
    pairs
        .iter()
        .map(|pair| {
            let projection = project(b, a, &inv, pair)?;
            let f = projection.c.dot(&projection.d);
            let residual = compose_delta(b, &f, a)?.sub(&pair.delta()).frobenius_norm();
            Ok(CoreTarget {
                f,
                projection,
                residual,
            })
        })
        .collect()
}
