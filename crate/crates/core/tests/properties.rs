use matlora::analysis::{boundary_grid, param_counts, param_counts_with_core, translation_property_check};
use matlora::data::{gen_two_moons, rotate2d, moons_center, Domain, DomainSequence, TwoMoonsConfig};
use matlora::linalg::{column_projector, expm, numerical_rank, qr_thin, spectral_norm, svd_thin, DEFAULT_RANK_TOL};
use matlora::model::{
    compose_delta, Adapted, AdaptedModel, Backbone, CoreVariant, LoraPair, SharedAdapters, SharedBasisAdapter,
    TemporalCore,
};
use matlora::rng::SeededRng;
use matlora::training::{evaluate, train_baseline, Strategy, TrainConfig, TrainedModel};
use matlora::Matrix;
use proptest::prelude::*;

fn gauss(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projectors_are_symmetric_and_idempotent(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9, deficit in 0usize..3) {
        let mut rng = SeededRng::new(seed);
        // Low-rank products exercise the rank-revealing path.
        let inner = cols.saturating_sub(deficit).max(1);
        let m = gauss(rows, inner, 1.0, &mut rng).dot(&gauss(inner, cols, 1.0, &mut rng));
        let p = column_projector(&m, DEFAULT_RANK_TOL);
        let pm = p.matrix();
        let scale = pm.frobenius_norm().max(1.0);
        prop_assert!(pm.sub(&pm.transpose()).frobenius_norm() <= 1e-12 * scale);
        prop_assert!(pm.dot(pm).sub(pm).frobenius_norm() <= 1e-10 * scale);
        prop_assert_eq!(p.rank(), rows.min(inner).min(cols));
    }

    #[test]
    fn param_count_identities(d in 1u64..5000, k in 1u64..5000, r in 1u64..64, rp in 1u64..64, t in 1u64..100, core in 0u64..100_000) {
        let c = param_counts_with_core(d, k, r, rp, t, CoreVariant::LinDyn, core);
        prop_assert_eq!(c.multi, t * (d + k) * r);
        prop_assert_eq!(c.single, (d + k) * r);
        prop_assert_eq!(c.ours, (d + k) * rp + core);
        for v in CoreVariant::ALL {
            let c = param_counts(d, k, r, rp, t, v);
            prop_assert_eq!(c.core_params, v.param_count(rp as usize) as u64);
            prop_assert_eq!(c.ours, (d + k) * rp + c.core_params);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn expm_inverse_and_group_law(seed in any::<u64>(), n in 1usize..7, fro in 0.0f64..5.0, s in -2.0f64..2.0, t in -2.0f64..2.0) {
        let mut rng = SeededRng::new(seed);
        let mut m = gauss(n, n, 1.0, &mut rng);
        let norm = m.frobenius_norm();
        if norm > 0.0 {
            m = m.scale(fro / norm);
        }
        let id = Matrix::identity(n);
        prop_assert!(rel(&expm(&m).unwrap().dot(&expm(&m.scale(-1.0)).unwrap()), &id) <= 1e-9);
        let w = m.scale(0.5);
        let joint = expm(&w.scale(s + t)).unwrap();
        let split = expm(&w.scale(s)).unwrap().dot(&expm(&w.scale(t)).unwrap());
        prop_assert!(rel(&split, &joint) <= 1e-9);
    }

    #[test]
    fn qr_and_svd_reconstruct(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10) {
        let mut rng = SeededRng::new(seed);
        let m = gauss(rows, cols, 1.0, &mut rng);
        let norm = m.frobenius_norm();
        if rows >= cols {
            let (q, r) = qr_thin(&m).unwrap();
            prop_assert!(q.t_dot(&q).sub(&Matrix::identity(cols)).frobenius_norm() <= 1e-10);
            prop_assert!(q.dot(&r).sub(&m).frobenius_norm() <= 1e-10 * norm);
            for i in 0..cols {
                for j in 0..i {
                    prop_assert_eq!(r[(i, j)], 0.0);
                }
            }
        }
        let (u, s, v) = svd_thin(&m).unwrap();
        let n = rows.min(cols);
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]) && s.iter().all(|x| *x >= 0.0));
        prop_assert!(u.dot(&Matrix::from_diag(&s)).dot_t(&v).sub(&m).frobenius_norm() <= 1e-8 * norm);
        prop_assert!(u.t_dot(&u).sub(&Matrix::identity(n)).frobenius_norm() <= 1e-8);
        prop_assert!(v.t_dot(&v).sub(&Matrix::identity(n)).frobenius_norm() <= 1e-8);
        prop_assert!((spectral_norm(&m) - s[0]).abs() <= 1e-8 * s[0].max(1.0));
    }

    #[test]
    fn norm_inequalities(seed in any::<u64>(), a in 1usize..7, b in 1usize..7, c in 1usize..7) {
        let mut rng = SeededRng::new(seed);
        let x = gauss(a, b, 1.0, &mut rng);
        let y = gauss(b, c, 1.0, &mut rng);
        let slack = 1e-9;
        let two = spectral_norm(&x);
        prop_assert!(two <= x.frobenius_norm() * (1.0 + slack));
        prop_assert!(x.dot(&y).frobenius_norm() <= two * y.frobenius_norm() * (1.0 + slack) + slack);
        let z = gauss(a, b, 1.0, &mut rng);
        prop_assert!(x.add(&z).frobenius_norm() <= (x.frobenius_norm() + z.frobenius_norm()) * (1.0 + slack));
    }

    #[test]
    fn composed_updates_respect_the_core_rank(seed in any::<u64>(), d in 2usize..10, k in 2usize..10, rp in 1usize..4, t in 0u32..12) {
        let mut rng = SeededRng::new(seed);
        let rp = rp.min(d).min(k);
        for v in CoreVariant::ALL {
            let mut ad = SharedBasisAdapter::init(d, k, rp, 0, v, 8.0, &mut rng);
            ad.b = gauss(d, rp, 1.0, &mut rng);
            let dw = ad.delta(f64::from(t)).unwrap();
            let cut = 1e-9 * dw.frobenius_norm();
            let (_, s, _) = svd_thin(&dw).unwrap();
            prop_assert!(s.iter().filter(|x| **x > cut).count() <= rp);
        }
    }

    #[test]
    fn linear_flow_semigroup(seed in any::<u64>(), rp in 1usize..5, t1 in 0.0f64..3.0, t2 in 0.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let mut core = TemporalCore::init(CoreVariant::LinDyn, rp, 1.0, &mut rng);
        let TemporalCore::LinDyn(ref mut c) = core else { unreachable!() };
        c.velocity = gauss(rp, rp, 0.3, &mut rng);
        c.f0 = gauss(rp, rp, 1.0, &mut rng);
        let w = c.velocity.clone();
        let lhs = core.eval(t1 + t2).unwrap();
        let rhs = expm(&w.scale(t1)).unwrap().dot(&core.eval(t2).unwrap());
        prop_assert!(rel(&rhs, &lhs) <= 1e-9);
    }

    #[test]
    fn generated_domains_are_balanced_and_deterministic(seed in any::<u64>(), half in 1usize..40, domains in 2usize..6, deg in -40.0f64..40.0) {
        let cfg = TwoMoonsConfig { num_domains: domains, samples_per_domain: 2 * half, rotation_deg: deg, noise_sigma: 0.1, train_count: domains - 1 };
        let a = gen_two_moons(&cfg, seed).unwrap();
        let b = gen_two_moons(&cfg, seed).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        for d in &a.domains {
            prop_assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), half);
            prop_assert_eq!(d.len(), 2 * half);
        }
    }

    #[test]
    fn noiseless_domains_rotate_back_to_the_first(seed in any::<u64>(), half in 1usize..40, deg in -40.0f64..40.0) {
        let cfg = TwoMoonsConfig { num_domains: 4, samples_per_domain: 2 * half, rotation_deg: deg, noise_sigma: 0.0, train_count: 3 };
        let seq = gen_two_moons(&cfg, seed).unwrap();
        let center = moons_center(2 * half);
        let first = &seq.domains[0];
        for (t, d) in seq.domains.iter().enumerate() {
            let angle = -(t as f64 * deg).to_radians();
            for i in 0..d.len() {
                let q = rotate2d([d.inputs[(i, 0)], d.inputs[(i, 1)]], angle, center);
                prop_assert!((q[0] - first.inputs[(i, 0)]).abs() <= 1e-12);
                prop_assert!((q[1] - first.inputs[(i, 1)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn translation_check_passes_on_random_trajectories(seed in any::<u64>(), pts in 1usize..8, rows in 1usize..6, cols in 1usize..6, shift in 0.0f64..100.0) {
        let mut rng = SeededRng::new(seed);
        let traj: Vec<Matrix> = (0..pts).map(|_| gauss(rows, cols, 1.0, &mut rng)).collect();
        let anchor = gauss(rows, cols, shift, &mut rng);
        let rep = translation_property_check(&traj, &anchor).unwrap();
        prop_assert_eq!(rep.pairs, pts * (pts - 1) / 2);
        prop_assert!(rep.passed(), "{:?}", rep);
    }

    #[test]
    fn boundary_grid_agrees_with_evaluate_at_grid_nodes(seed in any::<u64>(), t in 0u32..12) {
        let mut rng = SeededRng::new(seed);
        let backbone = Backbone::init(2, 6, 2, 2, &mut rng);
        let mut ad = SharedBasisAdapter::init(6, 6, 2, 0, CoreVariant::LinDyn, 8.0, &mut rng);
        ad.b = gauss(6, 2, 0.5, &mut rng);
        let model = AdaptedModel {
            params: Adapted { head: backbone.head.clone(), adapters: SharedAdapters { adapters: vec![ad] } },
            backbone,
        };
        let t = f64::from(t);
        let res = 15;
        let grid = boundary_grid(&model, t, (-2.0, 3.0), (-1.5, 2.0), res).unwrap();
        // Samples snapped to random nodes, labelled with the grid's class.
        let picks: Vec<usize> = (0..30).map(|_| (rng.next_u64() % grid.len() as u64) as usize).collect();
        let domain = Domain {
            timestamp: t,
            inputs: Matrix::from_fn(picks.len(), 2, |i, j| if j == 0 { grid[picks[i]].x } else { grid[picks[i]].y }),
            labels: picks.iter().map(|&i| grid[i].class).collect(),
        };
        let later = Domain { timestamp: t + 1.0, ..domain.clone() };
        let seq = DomainSequence::new(vec![domain, later], 1, 2).unwrap();
        prop_assert_eq!(evaluate(&model, &seq, &[0]).unwrap(), vec![1.0]);
    }
}

#[test]
fn translation_check_passes_on_multi_lora_increments() {
    let gc = TwoMoonsConfig { num_domains: 6, samples_per_domain: 60, train_count: 5, ..TwoMoonsConfig::default() };
    let seq = gen_two_moons(&gc, 4).unwrap();
    let cfg = TrainConfig { epochs: 40, width: 12, r: 4, r_prime: 2, pretrain_epochs: 100, adapted_layers: vec![0, 1], ..TrainConfig::default() };
    let (model, _) = train_baseline(&seq, &cfg, Strategy::MultiLora).unwrap();
    let TrainedModel::MultiLora(multi) = model else { panic!("wrong model kind") };
    for layer in [0, 1] {
        let traj = multi.layer_trajectory(layer);
        assert_eq!(traj.len(), 5);
        let anchor = &multi.backbone.hidden[layer].weight;
        let rep = translation_property_check(&traj, anchor).unwrap();
        assert!(rep.passed(), "layer {layer}: {rep:?}");
        // Full weights W_pre + ΔW_t against the same anchor.
        let full: Vec<Matrix> = traj.iter().map(|d| anchor.add(d)).collect();
        assert!(translation_property_check(&full, anchor).unwrap().passed());
    }
}

#[test]
fn lora_rank_bound() {
    let mut rng = SeededRng::new(3);
    for r in 1..5 {
        let mut pair = LoraPair::init(9, 7, r, 0, &mut rng);
        pair.b = gauss(9, r, 1.0, &mut rng);
        assert!(numerical_rank(&pair.delta(), 1e-9) <= r);
        let f = Matrix::identity(r);
        assert_eq!(compose_delta(&pair.b, &f, &pair.a).unwrap(), pair.delta());
    }
}
