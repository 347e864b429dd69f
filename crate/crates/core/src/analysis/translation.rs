//! Checks that re-centring a weight trajectory at an anchor preserves its
//! metric and affine structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, Matrix};

/// Pairwise distances must agree to this factor of `max(1, ‖Wᵢ − Wⱼ‖_F)`.
pub const DISTANCE_TOL: f64 = 1e-12;
/// Singular values above this fraction of the largest count toward the affine rank.
pub const AFFINE_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub points: usize,
    pub pairs: usize,
    /// Largest `|‖(Wᵢ−W₀)−(Wⱼ−W₀)‖ − ‖Wᵢ−Wⱼ‖| / max(1, ‖Wᵢ−Wⱼ‖)`.
    pub max_distance_error: f64,
    pub affine_rank: usize,
    pub translated_affine_rank: usize,
    pub distances_preserved: bool,
    pub rank_preserved: bool,
}

impl TranslationReport {
    pub fn passed(&self) -> bool {
        self.distances_preserved && self.rank_preserved
    }
}

/// Rank of the points after subtracting their mean, one flattened point per row.
fn centered_rank(points: &[Matrix]) -> usize {
    let n = points.len();
    let len = points[0].as_slice().len();
    let mut mean = vec![0.0; len];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, len, |i, j| points[i].as_slice()[j] - mean[j]);
    numerical_rank(&centered, AFFINE_RANK_TOL)
}

pub fn translation_property_check(trajectory: &[Matrix], anchor: &Matrix) -> Result<TranslationReport> {
    if trajectory.is_empty() {
        return Err(Error::Argument("empty trajectory".into()));
    }
    if let Some(bad) = trajectory.iter().find(|w| w.shape() != anchor.shape()) {
        return Err(Error::dim(
            "translation_property_check",
            format!("point {:?} vs anchor {:?}", bad.shape(), anchor.shape()),
        ));
    }
    let translated: Vec<Matrix> = trajectory.iter().map(|w| w.sub(anchor)).collect();
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for i in 0..trajectory.len() {
        for j in i + 1..trajectory.len() {
            let raw = trajectory[i].sub(&trajectory[j]).frobenius_norm();
            let moved = translated[i].sub(&translated[j]).frobenius_norm();
            worst = worst.max((moved - raw).abs() / raw.max(1.0));
            pairs += 1;
        }
    }
    let affine_rank = centered_rank(trajectory);
    let translated_affine_rank = centered_rank(&translated);
    Ok(TranslationReport {
        points: trajectory.len(),
        pairs,
        max_distance_error: worst,
        affine_rank,
        translated_affine_rank,
        distances_preserved: worst <= DISTANCE_TOL,
        rank_preserved: affine_rank == translated_affine_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn gauss(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn zero_anchor_changes_nothing() {
        let mut rng = SeededRng::new(1);
        let traj: Vec<Matrix> = (0..4).map(|_| gauss(3, 3, &mut rng)).collect();
        let rep = translation_property_check(&traj, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(rep.max_distance_error, 0.0);
        assert!(rep.passed());
    }

    #[test]
    fn two_points_give_one_distance() {
        let mut rng = SeededRng::new(2);
        let traj = vec![gauss(2, 4, &mut rng), gauss(2, 4, &mut rng)];
        let rep = translation_property_check(&traj, &gauss(2, 4, &mut rng)).unwrap();
        assert_eq!(rep.pairs, 1);
        assert_eq!(rep.affine_rank, 1);
        assert!(rep.passed());
    }

    #[test]
    fn points_on_a_three_dimensional_affine_subspace() {
        let mut rng = SeededRng::new(3);
        let base = gauss(5, 4, &mut rng);
        let dirs: Vec<Matrix> = (0..3).map(|_| gauss(5, 4, &mut rng)).collect();
        let traj: Vec<Matrix> = (0..10)
            .map(|_| {
                let mut w = base.clone();
                for d in &dirs {
                    w.add_scaled(d, rng.normal());
                }
                w
            })
            .collect();
        let rep = translation_property_check(&traj, &gauss(5, 4, &mut rng).scale(10.0)).unwrap();
        assert_eq!(rep.affine_rank, 3);
        assert_eq!(rep.translated_affine_rank, 3);
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn rejects_bad_shapes() {
        let traj = vec![Matrix::zeros(2, 2)];
        assert!(translation_property_check(&traj, &Matrix::zeros(3, 2)).is_err());
        assert!(translation_property_check(&[], &Matrix::zeros(3, 2)).is_err());
    }
}
