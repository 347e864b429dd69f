//! Low-rank adapters, the shared-basis factorization, and adapted models.

use serde::{Deserialize, Serialize};

use super::core::{CoreTape, CoreVariant, TemporalCore};
use super::network::{backward, forward, softmax_cross_entropy, Backbone, Dense};
use super::Params;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

/// Per-domain factors `ΔW = B A` for one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    /// d × r
    pub b: Matrix,
    /// r × k
    pub a: Matrix,
    pub layer: usize,
}

impl LoraPair {
    /// `B = 0` so the initial increment vanishes; `A` is Gaussian.
    pub fn init(d: usize, k: usize, r: usize, layer: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (k as f64).sqrt();
        LoraPair {
            b: Matrix::zeros(d, r),
            a: Matrix::from_fn(r, k, |_, _| std * rng.normal()),
            layer,
        }
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn delta(&self) -> Matrix {
        self.b.dot(&self.a)
    }
}

/// `B · F · A` with shape checks.
pub fn compose_delta(b: &Matrix, f: &Matrix, a: &Matrix) -> Result<Matrix> {
    if b.cols() != f.rows() || f.cols() != a.rows() {
        return Err(Error::dim(
            "compose_delta",
            format!("B {:?}, F {:?}, A {:?}", b.shape(), f.shape(), a.shape()),
        ));
    }
    Ok(b.dot(&f.dot(a)))
}

/// `ΔW(t) = B · F_t · A` with time-invariant bases and a temporal core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBasisAdapter {
    /// d × r′
    pub b: Matrix,
    /// r′ × k
    pub a: Matrix,
    pub core: TemporalCore,
    pub layer: usize,
}

impl SharedBasisAdapter {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        d: usize,
        k: usize,
        r_prime: usize,
        layer: usize,
        variant: CoreVariant,
        time_scale: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let std = 1.0 / (k as f64).sqrt();
        let a = Matrix::from_fn(r_prime, k, |_, _| std * rng.normal());
        let core = TemporalCore::init(variant, r_prime, time_scale, rng);
        SharedBasisAdapter {
            b: Matrix::zeros(d, r_prime),
            a,
            core,
            layer,
        }
    }

    pub fn r_prime(&self) -> usize {
        self.b.cols()
    }

    pub fn delta(&self, t: f64) -> Result<Matrix> {
        compose_delta(&self.b, &self.core.eval(t)?, &self.a)
    }
}

/// A set of adapters producing per-layer weight increments at time `t`.
pub trait DeltaSource: Params {
    type Tape;

    fn layers(&self) -> Vec<usize>;

    fn deltas_with_tape(&self, t: f64, num_layers: usize) -> Result<(Vec<Option<Matrix>>, Self::Tape)>;

    /// Accumulates adapter gradients from `∂L/∂ΔW_ℓ` for every hidden layer.
    fn backward(&self, tape: &Self::Tape, layer_grads: &[Matrix], grads: &mut Self);

    fn deltas(&self, t: f64, num_layers: usize) -> Result<Vec<Option<Matrix>>> {
        Ok(self.deltas_with_tape(t, num_layers)?.0)
    }
}

fn place(
    slots: &mut [Option<Matrix>],
    layer: usize,
    delta: Matrix,
) -> Result<()> {
    match slots.get_mut(layer) {
        None => Err(Error::Argument(format!(
            "adapter targets layer {layer} but the backbone has {} hidden layers",
            slots.len()
        ))),
        Some(Some(_)) => Err(Error::Argument(format!("two adapters target layer {layer}"))),
        Some(slot) => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Static LoRA pairs (no time dependence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticAdapters {
    pub pairs: Vec<LoraPair>,
}

impl DeltaSource for StaticAdapters {
    type Tape = ();

    fn layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.layer).collect()
    }

    fn deltas_with_tape(&self, _t: f64, num_layers: usize) -> Result<(Vec<Option<Matrix>>, ())> {
        let mut slots = vec![None; num_layers];
        for p in &self.pairs {
            place(&mut slots, p.layer, p.delta())?;
        }
        Ok((slots, ()))
    }

    fn backward(&self, _tape: &(), layer_grads: &[Matrix], grads: &mut Self) {
        for (p, g) in self.pairs.iter().zip(grads.pairs.iter_mut()) {
            let gw = &layer_grads[p.layer];
            g.b.add_scaled(&gw.dot_t(&p.a), 1.0);
            g.a.add_scaled(&p.b.t_dot(gw), 1.0);
        }
    }
}

impl Params for StaticAdapters {
    fn params(&self) -> Vec<&Matrix> {
        self.pairs.iter().flat_map(|p| [&p.b, &p.a]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.pairs.iter_mut().flat_map(|p| [&mut p.b, &mut p.a]).collect()
    }

    fn param_names(&self) -> Vec<String> {
        self.pairs
            .iter()
            .flat_map(|p| [format!("lora{}.b", p.layer), format!("lora{}.a", p.layer)])
            .collect()
    }
}

/// Shared-basis adapters, one per adapted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedAdapters {
    pub adapters: Vec<SharedBasisAdapter>,
}

/// Core outputs and their tapes for one evaluation time.
#[derive(Debug, Clone)]
pub struct AdapterTape {
    cores: Vec<(Matrix, CoreTape)>,
}

impl DeltaSource for SharedAdapters {
    type Tape = AdapterTape;

    fn layers(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.layer).collect()
    }

    fn deltas_with_tape(&self, t: f64, num_layers: usize) -> Result<(Vec<Option<Matrix>>, AdapterTape)> {
        let mut slots = vec![None; num_layers];
        let mut cores = Vec::with_capacity(self.adapters.len());
        for ad in &self.adapters {
            let (f, tape) = ad.core.eval_with_tape(t)?;
            place(&mut slots, ad.layer, compose_delta(&ad.b, &f, &ad.a)?)?;
            cores.push((f, tape));
        }
        Ok((slots, AdapterTape { cores }))
    }

    fn backward(&self, tape: &AdapterTape, layer_grads: &[Matrix], grads: &mut Self) {
        for ((ad, (f, core_tape)), g) in self
            .adapters
            .iter()
            .zip(&tape.cores)
            .zip(grads.adapters.iter_mut())
        {
            let gw = &layer_grads[ad.layer];
            g.b.add_scaled(&gw.dot_t(&f.dot(&ad.a)), 1.0);
            g.a.add_scaled(&ad.b.dot(f).t_dot(gw), 1.0);
            let gf = ad.b.t_dot(gw).dot_t(&ad.a);
            ad.core.backward(core_tape, &gf, &mut g.core);
        }
    }
}

impl Params for SharedAdapters {
    fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for ad in &self.adapters {
            out.push(&ad.b);
            out.push(&ad.a);
            out.extend(ad.core.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for ad in &mut self.adapters {
            out.push(&mut ad.b);
            out.push(&mut ad.a);
            out.extend(ad.core.params_mut());
        }
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for ad in &self.adapters {
            out.push(format!("shared{}.b", ad.layer));
            out.push(format!("shared{}.a", ad.layer));
            for n in ad.core.param_names() {
                out.push(format!("shared{}.core.{n}", ad.layer));
            }
        }
        out
    }
}

/// Trainable part of an adapted network: its own classifier head plus adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapted<S> {
    pub head: Dense,
    pub adapters: S,
}

impl<S: DeltaSource> Adapted<S> {
    pub fn logits(&self, backbone: &Backbone, x: &Matrix, t: f64) -> Result<Matrix> {
        let deltas = self.adapters.deltas(t, backbone.num_hidden())?;
        Ok(forward(backbone, &self.head, &deltas, x)?.logits)
    }

    /// Mean cross-entropy at time `t` and its gradient, both multiplied by `scale`.
    pub fn loss_and_grad(
        &self,
        backbone: &Backbone,
        x: &Matrix,
        labels: &[usize],
        t: f64,
        scale: f64,
    ) -> Result<(f64, Self)> {
        let mut grads = self.zeros_like();
        let loss = self.accumulate_grad(backbone, x, labels, t, scale, &mut grads)?;
        Ok((loss, grads))
    }

    /// Like [`Adapted::loss_and_grad`] but adds into `grads`; returns the unscaled loss.
    pub fn accumulate_grad(
        &self,
        backbone: &Backbone,
        x: &Matrix,
        labels: &[usize],
        t: f64,
        scale: f64,
        grads: &mut Self,
    ) -> Result<f64> {
        let (deltas, tape) = self.adapters.deltas_with_tape(t, backbone.num_hidden())?;
        let cache = forward(backbone, &self.head, &deltas, x)?;
        let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels, scale)?;
        let net = backward(&self.head, &cache, &dlogits, false);
        grads.head.weight.add_scaled(&net.head.weight, 1.0);
        grads.head.bias.add_scaled(&net.head.bias, 1.0);
        self.adapters.backward(&tape, &net.deltas, &mut grads.adapters);
        Ok(loss)
    }
}

impl<S: Params> Params for Adapted<S> {
    fn params(&self) -> Vec<&Matrix> {
        let mut out = self.head.params();
        out.extend(self.adapters.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.head.params_mut();
        out.extend(self.adapters.params_mut());
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = vec!["head.weight".to_string(), "head.bias".to_string()];
        out.extend(self.adapters.param_names());
        out
    }
}

/// Anything that maps a batch at a timestamp to logits.
pub trait Predictor {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict_logits(&self, x: &Matrix, t: f64) -> Result<Matrix>;
}

/// A frozen backbone together with one trainable adapter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedModel<S> {
    pub backbone: Backbone,
    pub params: Adapted<S>,
}

pub type MatLoraModel = AdaptedModel<SharedAdapters>;
pub type LoraModel = AdaptedModel<StaticAdapters>;

impl<S: DeltaSource> Predictor for AdaptedModel<S> {
    fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.params.head.outputs()
    }

    fn predict_logits(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.params.logits(&self.backbone, x, t)
    }
}

/// One independent LoRA model per training timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLoraModel {
    pub backbone: Backbone,
    /// `(timestamp, adapters)` sorted by timestamp.
    pub members: Vec<(f64, Adapted<StaticAdapters>)>,
}

impl MultiLoraModel {
    /// Member used at time `t`: the exact timestamp if trained, else the
    /// latest earlier one (the first member before the sequence starts).
    pub fn member_at(&self, t: f64) -> Option<&Adapted<StaticAdapters>> {
        let idx = self.members.iter().rposition(|(ts, _)| *ts <= t).unwrap_or(0);
        self.members.get(idx).map(|(_, m)| m)
    }

    /// Increments `ΔW_t` of every member on `layer`.
    pub fn layer_trajectory(&self, layer: usize) -> Vec<Matrix> {
        self.members
            .iter()
            .filter_map(|(_, m)| m.adapters.pairs.iter().find(|p| p.layer == layer))
            .map(LoraPair::delta)
            .collect()
    }
}

impl Predictor for MultiLoraModel {
    fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.backbone.num_classes()
    }

    fn predict_logits(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let member = self
            .member_at(t)
            .ok_or_else(|| Error::Invalid("multi-LoRA model has no members".into()))?;
        member.logits(&self.backbone, x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd_thin;

    const D: usize = 8;

    fn setup(seed: u64) -> (Backbone, Matrix, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let bb = Backbone::init(2, D, 2, 3, &mut rng);
        let x = Matrix::from_fn(7, 2, |_, _| rng.normal());
        let labels = (0..7).map(|i| i % 3).collect();
        (bb, x, labels)
    }

    fn randomize<P: Params>(p: &mut P, std: f64, rng: &mut SeededRng) {
        for m in p.params_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v = std * rng.normal());
        }
    }

    /// Per-group relative error of the analytic gradient against central
    /// differences with step 1e-5.
    fn fd_errors<S: DeltaSource>(
        model: &Adapted<S>,
        bb: &Backbone,
        x: &Matrix,
        labels: &[usize],
        t: f64,
    ) -> Vec<(String, f64)> {
        let (_, grads) = model.loss_and_grad(bb, x, labels, t, 1.0).unwrap();
        let h = 1e-5;
        let names = model.param_names();
        let mut out = Vec::new();
        for (gi, g) in grads.params().into_iter().enumerate() {
            let mut diff = 0.0;
            let mut norm = 0.0f64;
            for j in 0..g.as_slice().len() {
                let mut plus = model.clone();
                plus.params_mut()[gi].as_mut_slice()[j] += h;
                let mut minus = model.clone();
                minus.params_mut()[gi].as_mut_slice()[j] -= h;
                let lp = plus.loss_and_grad(bb, x, labels, t, 1.0).unwrap().0;
                let lm = minus.loss_and_grad(bb, x, labels, t, 1.0).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.as_slice()[j];
                diff += (fd - an).powi(2);
                norm = norm.max(fd.abs()).max(an.abs());
            }
            let rel = diff.sqrt() / (norm * (g.as_slice().len() as f64).sqrt()).max(1e-300);
            out.push((names[gi].clone(), rel));
        }
        out
    }

    fn shared_model(variant: CoreVariant, seed: u64) -> Adapted<SharedAdapters> {
        let mut rng = SeededRng::new(seed);
        let mut m = Adapted {
            head: Dense::init(D, 3, &mut rng),
            adapters: SharedAdapters {
                adapters: (0..2)
                    .map(|l| SharedBasisAdapter::init(D, D, 3, l, variant, 4.0, &mut rng))
                    .collect(),
            },
        };
        randomize(&mut m, 0.4, &mut rng);
        m
    }

    #[test]
    fn shared_gradients_match_finite_differences() {
        let (bb, x, labels) = setup(1);
        for variant in CoreVariant::ALL {
            let m = shared_model(variant, 2);
            for (name, rel) in fd_errors(&m, &bb, &x, &labels, 3.0) {
                assert!(rel < 1e-5, "{variant} {name}: {rel:e}");
            }
        }
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        let (bb, x, labels) = setup(3);
        let mut rng = SeededRng::new(4);
        let mut m = Adapted {
            head: Dense::init(D, 3, &mut rng),
            adapters: StaticAdapters {
                pairs: vec![LoraPair::init(D, D, 2, 1, &mut rng)],
            },
        };
        randomize(&mut m, 0.5, &mut rng);
        for (name, rel) in fd_errors(&m, &bb, &x, &labels, 0.0) {
            assert!(rel < 1e-5, "{name}: {rel:e}");
        }
    }

    #[test]
    fn zero_b_gives_zero_a_gradient() {
        let (bb, x, labels) = setup(5);
        let mut rng = SeededRng::new(6);
        let m = Adapted {
            head: bb.head.clone(),
            adapters: StaticAdapters {
                pairs: vec![LoraPair::init(D, D, 4, 0, &mut rng)],
            },
        };
        let (_, g) = m.loss_and_grad(&bb, &x, &labels, 0.0, 1.0).unwrap();
        assert!(g.adapters.pairs[0].a.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.adapters.pairs[0].b.max_abs() > 0.0);
    }

    #[test]
    fn loss_scale_scales_gradients() {
        let (bb, x, labels) = setup(7);
        let m = shared_model(CoreVariant::LinDyn, 8);
        let (l1, g1) = m.loss_and_grad(&bb, &x, &labels, 2.0, 1.0).unwrap();
        let (l3, g3) = m.loss_and_grad(&bb, &x, &labels, 2.0, 3.0).unwrap();
        assert_eq!(l1, l3);
        for (a, b) in g1.params().into_iter().zip(g3.params()) {
            assert!(a.scale(3.0).sub(b).max_abs() <= 1e-12 * (1.0 + b.max_abs()));
        }
    }

    #[test]
    fn zero_adapters_reproduce_backbone() {
        let (bb, x, _) = setup(9);
        let plain = forward(&bb, &bb.head, &[], &x).unwrap().logits;
        let empty = Adapted {
            head: bb.head.clone(),
            adapters: StaticAdapters { pairs: vec![] },
        };
        assert_eq!(empty.logits(&bb, &x, 0.0).unwrap(), plain);
        // B = 0 at initialization, so a fresh shared adapter is inert too.
        let mut rng = SeededRng::new(1);
        let fresh = Adapted {
            head: bb.head.clone(),
            adapters: SharedAdapters {
                adapters: vec![SharedBasisAdapter::init(D, D, 3, 0, CoreVariant::LinDyn, 1.0, &mut rng)],
            },
        };
        assert_eq!(fresh.logits(&bb, &x, 5.0).unwrap(), plain);
    }

    #[test]
    fn duplicate_or_missing_layers_are_rejected() {
        let mut rng = SeededRng::new(2);
        let pair = LoraPair::init(D, D, 2, 0, &mut rng);
        let dup = StaticAdapters { pairs: vec![pair.clone(), pair.clone()] };
        assert!(matches!(dup.deltas(0.0, 2), Err(Error::Argument(_))));
        let far = StaticAdapters {
            pairs: vec![LoraPair { layer: 5, ..pair }],
        };
        assert!(matches!(far.deltas(0.0, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn compose_delta_examples() {
        let i = Matrix::identity(3);
        assert_eq!(compose_delta(&i, &i, &i).unwrap(), i);
        let mut rng = SeededRng::new(11);
        let b = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let f = Matrix::from_fn(2, 2, |_, _| rng.normal());
        let a = Matrix::from_fn(2, 5, |_, _| rng.normal());
        assert_eq!(compose_delta(&b, &Matrix::zeros(2, 2), &a).unwrap(), Matrix::zeros(6, 5));
        // Naive triple loop.
        let got = compose_delta(&b, &f, &a).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let mut s = 0.0;
                for p in 0..2 {
                    for q in 0..2 {
                        s += b[(i, p)] * f[(p, q)] * a[(q, j)];
                    }
                }
                assert!((got[(i, j)] - s).abs() < 1e-13);
            }
        }
        assert!(compose_delta(&b, &f, &b).is_err());
    }

    #[test]
    fn composed_delta_rank_is_bounded() {
        for variant in CoreVariant::ALL {
            let m = shared_model(variant, 13);
            for t in [0.0, 2.0, 6.0] {
                let dw = m.adapters.adapters[0].delta(t).unwrap();
                let (_, s, _) = svd_thin(&dw).unwrap();
                let tol = 1e-9 * dw.frobenius_norm();
                assert!(s.iter().filter(|&&v| v > tol).count() <= 3);
            }
        }
    }

    #[test]
    fn multi_lora_member_lookup() {
        let (bb, _, _) = setup(1);
        let mut rng = SeededRng::new(3);
        let member = |rng: &mut SeededRng| Adapted {
            head: bb.head.clone(),
            adapters: StaticAdapters {
                pairs: vec![LoraPair::init(D, D, 2, 0, rng)],
            },
        };
        let model = MultiLoraModel {
            backbone: bb.clone(),
            members: (0..3).map(|t| (t as f64, member(&mut rng))).collect(),
        };
        assert!(std::ptr::eq(model.member_at(1.0).unwrap(), &model.members[1].1));
        assert!(std::ptr::eq(model.member_at(7.0).unwrap(), &model.members[2].1));
        assert!(std::ptr::eq(model.member_at(-1.0).unwrap(), &model.members[0].1));
        assert_eq!(model.layer_trajectory(0).len(), 3);
    }
}
