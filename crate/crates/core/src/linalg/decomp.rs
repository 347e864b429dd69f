//! QR, SVD, orthogonal projectors and norms for small dense matrices.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Relative rank tolerance used when callers have no better idea.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const SPECTRAL_TOL: f64 = 1e-9;
const SPECTRAL_MAX_ITER: usize = 1000;
const JACOBI_MAX_SWEEPS: usize = 80;

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::dim(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.dot(b))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

/// `tr(aᵀ b)`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "frobenius_inner",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum())
}

struct Householder {
    /// Packed reflector vectors; `vs[k]` acts on rows `k..`.
    vs: Vec<Option<Vec<f64>>>,
    r: Matrix,
    rows: usize,
}

fn householder_qr(m: &Matrix, pivot: bool) -> Householder {
    let (rows, cols) = m.shape();
    let steps = cols.min(rows);
    let mut a = m.clone();
    let mut vs = Vec::with_capacity(steps);

    for k in 0..steps {
        if pivot {
            let best = (k..cols)
                .map(|j| (j, (k..rows).map(|i| a[(i, j)].powi(2)).sum::<f64>()))
                .fold((k, -1.0), |acc, (j, n)| if n > acc.1 { (j, n) } else { acc });
            if best.0 != k {
                for i in 0..rows {
                    let tmp = a[(i, k)];
                    a[(i, k)] = a[(i, best.0)];
                    a[(i, best.0)] = tmp;
                }
            }
        }

        let norm = (k..rows).map(|i| a[(i, k)].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            vs.push(None);
            continue;
        }
        let alpha = if a[(k, k)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..rows).map(|i| a[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            vs.push(None);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);

        for j in k..cols {
            let dot: f64 = v.iter().enumerate().map(|(o, vi)| vi * a[(k + o, j)]).sum();
            for (o, vi) in v.iter().enumerate() {
                a[(k + o, j)] -= 2.0 * vi * dot;
            }
        }
        vs.push(Some(v));
    }

    let r = Matrix::from_fn(steps, cols, |i, j| if j >= i { a[(i, j)] } else { 0.0 });
    Householder { vs, r, rows }
}

impl Householder {
    /// Thin Q (rows × steps) with R rows flipped so its diagonal is nonnegative.
    fn thin_q(&mut self) -> Matrix {
        let steps = self.vs.len();
        let mut q = Matrix::from_fn(self.rows, steps, |i, j| if i == j { 1.0 } else { 0.0 });
        for k in (0..steps).rev() {
            if let Some(v) = &self.vs[k] {
                for j in 0..steps {
                    let dot: f64 = v.iter().enumerate().map(|(o, vi)| vi * q[(k + o, j)]).sum();
                    for (o, vi) in v.iter().enumerate() {
                        q[(k + o, j)] -= 2.0 * vi * dot;
                    }
                }
            }
        }
        for k in 0..steps {
            if self.r[(k, k)] < 0.0 {
                for j in 0..self.r.cols() {
                    self.r[(k, j)] = -self.r[(k, j)];
                }
                for i in 0..self.rows {
                    q[(i, k)] = -q[(i, k)];
                }
            }
        }
        q
    }
}

/// Thin Householder QR: `m = Q R` with `Q` (rows × cols) column-orthonormal and
/// `R` (cols × cols) upper triangular with nonnegative diagonal.
pub fn qr_thin(m: &Matrix) -> Result<(Matrix, Matrix)> {
    if m.is_empty() {
        return Err(Error::dim("qr_thin", "empty matrix"));
    }
    if m.rows() < m.cols() {
        return Err(Error::dim(
            "qr_thin",
            format!("need rows >= cols, got {:?}", m.shape()),
        ));
    }
    let mut h = householder_qr(m, false);
    let q = h.thin_q();
    Ok((q, h.r))
}

/// Orthogonal projector `P = Pᵀ = P²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    p: Matrix,
    rank: usize,
}

impl Projector {
    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    /// `P · x`
    pub fn apply(&self, x: &Matrix) -> Matrix {
        self.p.dot(x)
    }

    /// `(I − P) · x`
    pub fn complement_apply(&self, x: &Matrix) -> Matrix {
        x.sub(&self.p.dot(x))
    }

    /// `x · (I − P)`
    pub fn complement_apply_right(&self, x: &Matrix) -> Matrix {
        x.sub(&x.dot(&self.p))
    }
}

/// Orthogonal projector onto `col(m)`, built from pivoted-QR columns whose
/// `|R_kk|` exceeds `rank_tol · ‖m‖_F`. An all-zero input yields the zero
/// projector.
pub fn column_projector(m: &Matrix, rank_tol: f64) -> Projector {
    let d = m.rows();
    let scale = m.frobenius_norm();
    if scale == 0.0 || m.is_empty() {
        return Projector {
            p: Matrix::zeros(d, d),
            rank: 0,
        };
    }
    let mut h = householder_qr(m, true);
    let q = h.thin_q();
    let rank = (0..h.r.rows())
        .take_while(|&k| h.r[(k, k)].abs() > rank_tol * scale)
        .count();
    let basis = q.leading_cols(rank);
    let mut p = basis.dot_t(&basis);
    // Symmetrize exactly; the product is symmetric only up to rounding.
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = avg;
            p[(j, i)] = avg;
        }
    }
    Projector { p, rank }
}

/// Thin SVD `m = U diag(s) Vᵀ` by one-sided Jacobi rotations on the smaller
/// dimension. `s` is sorted nonincreasing; `U` is rows × n and `V` is
/// cols × n with `n = min(rows, cols)`.
pub fn svd_thin(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if m.is_empty() {
        return Err(Error::dim("svd_thin", "empty matrix"));
    }
    if m.rows() < m.cols() {
        let (u, s, v) = jacobi_tall(&m.transpose());
        return Ok((v, s, u));
    }
    Ok(jacobi_tall(m))
}

fn jacobi_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, n) = m.shape();
    let mut u = m.clone();
    let mut v = Matrix::identity(n);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (up, uq) = (u[(i, p)], u[(i, q)]);
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_cols(&mut u, p, q, c, s);
                rotate_cols(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = (0..n)
        .map(|j| (j, (0..rows).map(|i| u[(i, j)].powi(2)).sum::<f64>().sqrt()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let smax = order[0].1;
    let mut u_out = Matrix::zeros(rows, n);
    let mut v_out = Matrix::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for (dst, &(src, sigma)) in order.iter().enumerate() {
        s_out.push(sigma);
        for i in 0..n {
            v_out[(i, dst)] = v[(i, src)];
        }
        if sigma > 1e-14 * smax && sigma > 0.0 {
            for i in 0..rows {
                u_out[(i, dst)] = u[(i, src)] / sigma;
            }
        } else {
            degenerate.push(dst);
        }
    }
    for j in degenerate {
        complete_column(&mut u_out, j);
    }
    (u_out, s_out, v_out)
}

fn rotate_cols(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.rows() {
        let (a, b) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

/// Fills column `j` with a unit vector orthogonal to every other nonzero column.
fn complete_column(m: &mut Matrix, j: usize) {
    let rows = m.rows();
    let others: Vec<Vec<f64>> = (0..m.cols())
        .filter(|&c| c != j)
        .map(|c| m.col(c))
        .filter(|c| c.iter().any(|&x| x != 0.0))
        .collect();
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        // Two passes of Gram-Schmidt for stability.
        for _ in 0..2 {
            for o in &others {
                let d: f64 = o.iter().zip(&cand).map(|(a, b)| a * b).sum();
                cand.iter_mut().zip(o).for_each(|(c, oi)| *c -= d * oi);
            }
        }
        let nrm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > best_norm {
            best_norm = nrm;
            best = Some(cand);
        }
        if nrm > 0.5 {
            break;
        }
    }
    if let Some(c) = best {
        let scaled: Vec<f64> = c.iter().map(|x| x / best_norm).collect();
        m.set_col(j, &scaled);
    }
}

/// Largest singular value by power iteration on `mᵀm`. Zero matrices give 0.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() || m.max_abs() == 0.0 {
        return 0.0;
    }
    let gram = m.t_dot(m);
    let n = gram.rows();
    // Start from the Gram column of largest norm; it cannot be orthogonal to
    // the dominant eigenvector unless that column is zero.
    let start = (0..n)
        .max_by(|&a, &b| {
            let na: f64 = gram.col(a).iter().map(|x| x * x).sum();
            let nb: f64 = gram.col(b).iter().map(|x| x * x).sum();
            na.total_cmp(&nb)
        })
        .unwrap_or(0);
    let mut v = Matrix::column(&gram.col(start));
    let nv = v.frobenius_norm();
    v = v.scale(1.0 / nv);

    // Stop on the eigen-residual ‖Gv − λv‖ ≤ tol·λ; the Rayleigh quotient error
    // is then quadratic in the residual.
    let mut sigma = 0.0;
    for _ in 0..SPECTRAL_MAX_ITER {
        let w = gram.dot(&v);
        let lambda: f64 = v.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        sigma = lambda.max(0.0).sqrt();
        let residual = w.sub(&v.scale(lambda)).frobenius_norm();
        let wn = w.frobenius_norm();
        if wn == 0.0 || residual <= SPECTRAL_TOL * lambda.abs() {
            return sigma;
        }
        v = w.scale(1.0 / wn);
    }
    sigma
}

/// Number of singular values above `rel_tol · s₁`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    match svd_thin(m) {
        Ok((_, s, _)) => {
            let top = s.first().copied().unwrap_or(0.0);
            if top == 0.0 {
                0
            } else {
                s.iter().filter(|&&x| x > rel_tol * top).count()
            }
        }
        Err(_) => 0,
    }
}

/// Moore–Penrose pseudoinverse, truncating singular values at `rel_tol · s₁`.
/// Also returns the numerical rank that was kept.
pub fn pseudo_inverse(m: &Matrix, rel_tol: f64) -> Result<(Matrix, usize)> {
    let (u, s, v) = svd_thin(m)?;
    let top = s[0];
    let mut out = Matrix::zeros(m.cols(), m.rows());
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        if top == 0.0 || sk <= rel_tol * top {
            continue;
        }
        rank += 1;
        for i in 0..m.cols() {
            let vik = v[(i, k)] / sk;
            for j in 0..m.rows() {
                out[(i, j)] += vik * u[(j, k)];
            }
        }
    }
    Ok((out, rank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::Rng;

    fn random(rng: &mut rand_pcg::Pcg64, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| {
            (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn rng() -> rand_pcg::Pcg64 {
        rand_pcg::Pcg64::new(0xcafe, 0xa02bdbf7bb3c0a7ac28fa16a64abf96)
    }

    #[test]
    fn matmul_cases() {
        let mut g = rng();
        let x = random(&mut g, 3, 3);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);
        assert_eq!(matmul(&x, &Matrix::zeros(3, 3)).unwrap(), Matrix::zeros(3, 3));
        let a = random(&mut g, 3, 4);
        let b = random(&mut g, 4, 2);
        let diff = matmul(&a, &b).unwrap().sub(&naive_matmul(&a, &b));
        assert!(diff.max_abs() < 1e-14);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn qr_examples() {
        let (q, r) = qr_thin(&Matrix::identity(3)).unwrap();
        assert_eq!(q, Matrix::identity(3));
        assert_eq!(r, Matrix::identity(3));

        let (q, r) = qr_thin(&Matrix::from_rows(&[[3.0], [4.0]])).unwrap();
        assert!((q[(0, 0)] - 0.6).abs() < 1e-15 && (q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!((r[(0, 0)] - 5.0).abs() < 1e-15);

        let m = random(&mut rng(), 6, 3);
        let (q, r) = qr_thin(&m).unwrap();
        assert!(q.dot(&r).sub(&m).frobenius_norm() < 1e-10 * m.frobenius_norm());
        assert!(q.t_dot(&q).sub(&Matrix::identity(3)).frobenius_norm() < 1e-10);
        for i in 0..3 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
        assert!(qr_thin(&Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn qr_rank_deficient_has_zero_diagonal() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        let (q, r) = qr_thin(&m).unwrap();
        assert!(r[(1, 1)].abs() < 1e-12 * m.frobenius_norm());
        assert!(q.t_dot(&q).sub(&Matrix::identity(2)).frobenius_norm() < 1e-10);
        assert!(q.dot(&r).sub(&m).frobenius_norm() < 1e-10 * m.frobenius_norm());
    }

    #[test]
    fn projector_examples() {
        let p = column_projector(&Matrix::from_rows(&[[1.0], [0.0]]), DEFAULT_RANK_TOL);
        assert!(p.matrix().sub(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]])).max_abs() < 1e-15);

        let inv = Matrix::from_rows(&[[2.0, 1.0], [1.0, 3.0]]);
        let p = column_projector(&inv, DEFAULT_RANK_TOL);
        assert!(p.matrix().sub(&Matrix::identity(2)).max_abs() < 1e-14);

        let m = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]);
        let p = column_projector(&m, DEFAULT_RANK_TOL);
        let want = Matrix::from_rows(&[[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 0.0]]);
        assert!(p.matrix().sub(&want).max_abs() < 1e-14);
        assert_eq!(p.rank(), 1);

        let z = column_projector(&Matrix::zeros(3, 2), DEFAULT_RANK_TOL);
        assert_eq!(z.matrix(), &Matrix::zeros(3, 3));
    }

    #[test]
    fn projector_handles_leading_zero_column() {
        // An unpivoted QR would drop this column space entirely.
        let m = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        let p = column_projector(&m, DEFAULT_RANK_TOL);
        assert!(p.matrix().sub(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]])).max_abs() < 1e-15);
    }

    #[test]
    fn svd_examples() {
        let (_, s, _) = svd_thin(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);

        let u = Matrix::column(&[1.0, -2.0, 0.5, 3.0]);
        let v = Matrix::column(&[0.3, 0.7, -1.1]);
        let m = u.dot_t(&v);
        let (_, s, _) = svd_thin(&m).unwrap();
        let thr = 1e-10 * m.frobenius_norm();
        assert_eq!(s.iter().filter(|&&x| x > thr).count(), 1);

        for (rows, cols) in [(8, 5), (5, 8)] {
            let m = random(&mut rng(), rows, cols);
            let (u, s, v) = svd_thin(&m).unwrap();
            let recon = u.dot(&Matrix::from_diag(&s)).dot_t(&v);
            assert!(recon.sub(&m).frobenius_norm() <= 1e-8 * m.frobenius_norm());
            let n = s.len();
            assert!(u.t_dot(&u).sub(&Matrix::identity(n)).frobenius_norm() < 1e-8);
            assert!(v.t_dot(&v).sub(&Matrix::identity(n)).frobenius_norm() < 1e-8);
            assert!(s.windows(2).all(|w| w[0] >= w[1]) && s[n - 1] >= 0.0);
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        let m = Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let (u, s, v) = svd_thin(&m).unwrap();
        assert!(u.t_dot(&u).sub(&Matrix::identity(3)).frobenius_norm() < 1e-8);
        let recon = u.dot(&Matrix::from_diag(&s)).dot_t(&v);
        assert!(recon.sub(&m).frobenius_norm() < 1e-12);
    }

    #[test]
    fn spectral_norm_cases() {
        assert!((spectral_norm(&Matrix::from_diag(&[2.0, 5.0])) - 5.0).abs() < 1e-12);
        let (q, _) = qr_thin(&random(&mut rng(), 4, 4)).unwrap();
        assert!((spectral_norm(&q) - 1.0).abs() < 1e-9);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3)), 0.0);
        let mut g = rng();
        for _ in 0..20 {
            let m = random(&mut g, 5, 5);
            let (_, s, _) = svd_thin(&m).unwrap();
            assert!((spectral_norm(&m) - s[0]).abs() <= 1e-8 * s[0]);
        }
    }

    #[test]
    fn frobenius_examples() {
        assert!((frobenius_norm(&Matrix::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(frobenius_inner(&a, &b).unwrap(), 70.0);
        assert!((frobenius_inner(&a, &a).unwrap() - a.frobenius_norm().powi(2)).abs() < 1e-12);
        assert!(frobenius_inner(&a, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn pseudo_inverse_recovers_coefficients() {
        let mut g = rng();
        let b = random(&mut g, 7, 3);
        let c = random(&mut g, 3, 3);
        let (pinv, rank) = pseudo_inverse(&b, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rank, 3);
        assert!(pinv.dot(&b.dot(&c)).sub(&c).max_abs() < 1e-10);
    }
}
