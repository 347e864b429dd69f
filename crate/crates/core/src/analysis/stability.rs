//! Instrumented gradient descent on a single LoRA pair, measuring how far
//! the factors leave the column and row spaces of their initialization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::DomainSequence;
use crate::error::{Error, Result};
use crate::linalg::{column_projector, frobenius_inner, spectral_norm, Matrix, DEFAULT_RANK_TOL};
use crate::model::{Adapted, LoraPair, StaticAdapters};
use crate::rng::{SeededRng, TAG_ADAPTER};
use crate::training::{pretrain_backbone, Optimizer, OptimizerKind, TrainConfig};

/// `|expansion residual| ≤ EXPANSION_TOL · max(1, e_t²)`.
pub const EXPANSION_TOL: f64 = 1e-8;
/// `leak ≤ bound + LEAK_TOL · max(1, bound)`.
pub const LEAK_TOL: f64 = 1e-9;
const ALPHA_GRID: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub eta: f64,
    pub steps_per_domain: usize,
    pub seed: u64,
    pub r: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub pretrain_epochs: usize,
    /// Adam epochs fitting `(B₁, A₁)` on the first domain.
    pub init_epochs: usize,
    pub init_lr: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            eta: 0.05,
            steps_per_domain: 25,
            seed: 0,
            r: 8,
            width: 32,
            hidden_layers: 2,
            pretrain_epochs: 300,
            init_epochs: 100,
            init_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStep {
    pub step: usize,
    pub domain: usize,
    pub e_b: f64,
    pub e_a: f64,
    /// `⟨R B_t, R ∇_B 𝒥_t⟩`
    pub grad_inner_b: f64,
    /// `⟨A_t R_A, ∇_A 𝒥_t R_A⟩`
    pub grad_inner_a: f64,
    pub grad_out_norm_b: f64,
    pub grad_out_norm_a: f64,
    /// `‖R ΔW_t‖_F`
    pub leak_b: f64,
    /// `e_B · ‖A_t‖₂`
    pub leak_bound_b: f64,
    /// `‖ΔW_t R_A‖_F`
    pub leak_a: f64,
    /// `‖B_t‖₂ · e_A`
    pub leak_bound_a: f64,
    /// `‖R B_{t+1}‖² − (‖R B_t‖² − 2η⟨·,·⟩ + η²‖R ∇_B‖²)`
    pub expansion_residual: f64,
    pub expansion_residual_a: f64,
    /// `e_{t+1}² ≤ (1 − ηα) e_t² + ηε` with the fitted constants.
    pub recursion_holds_b: bool,
    pub recursion_holds_a: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrace {
    pub eta: f64,
    pub alpha_b: f64,
    pub eps_b: f64,
    pub alpha_a: f64,
    pub eps_a: f64,
    pub steps: Vec<StabilityStep>,
}

/// Summary verdicts over a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub steps: usize,
    pub max_expansion_ratio: f64,
    pub expansion_ok: bool,
    pub leak_violations: usize,
    pub initial_energy_zero: bool,
    pub recursion_failures_b: usize,
    pub recursion_failures_a: usize,
}

impl StabilityTrace {
    pub fn summary(&self) -> StabilitySummary {
        let mut ratio = 0.0f64;
        let mut leaks = 0;
        for s in &self.steps {
            ratio = ratio
                .max(s.expansion_residual.abs() / (s.e_b * s.e_b).max(1.0))
                .max(s.expansion_residual_a.abs() / (s.e_a * s.e_a).max(1.0));
            if s.leak_b > s.leak_bound_b + LEAK_TOL * s.leak_bound_b.max(1.0)
                || s.leak_a > s.leak_bound_a + LEAK_TOL * s.leak_bound_a.max(1.0)
            {
                leaks += 1;
            }
        }
        StabilitySummary {
            steps: self.steps.len(),
            max_expansion_ratio: ratio,
            expansion_ok: ratio <= EXPANSION_TOL,
            leak_violations: leaks,
            initial_energy_zero: self.steps.first().is_some_and(|s| s.e_b == 0.0 && s.e_a == 0.0),
            recursion_failures_b: self.steps.iter().filter(|s| !s.recursion_holds_b).count(),
            recursion_failures_a: self.steps.iter().filter(|s| !s.recursion_holds_a).count(),
        }
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "step,domain,e_b,e_a,grad_inner_b,grad_inner_a,grad_out_norm_b,grad_out_norm_a,\
             leak_b,leak_bound_b,leak_a,leak_bound_a,expansion_residual,expansion_residual_a,\
             recursion_holds_b,recursion_holds_a"
        )?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.domain,
                s.e_b,
                s.e_a,
                s.grad_inner_b,
                s.grad_inner_a,
                s.grad_out_norm_b,
                s.grad_out_norm_a,
                s.leak_b,
                s.leak_bound_b,
                s.leak_a,
                s.leak_bound_a,
                s.expansion_residual,
                s.expansion_residual_a,
                s.recursion_holds_b,
                s.recursion_holds_a
            )?;
        }
        Ok(())
    }
}

/// Tightest `(α, ε)` with `inner_t ≥ α e_t² − ε` on every step, choosing
/// `α ∈ (0, 1/η]` to minimize the asymptotic level `ε/α` (ties go to the
/// larger `α`).
pub fn fit_dissipativity(energies_sq: &[f64], inners: &[f64], eta: f64) -> (f64, f64) {
    let eps_at = |alpha: f64| {
        energies_sq
            .iter()
            .zip(inners)
            .map(|(e2, g)| alpha * e2 - g)
            .fold(0.0f64, f64::max)
    };
    let hi = 1.0 / eta;
    let lo = hi * 1e-8;
    let mut best = (hi, eps_at(hi));
    // Breakpoints where a single step's constraint becomes tight are exact
    // candidates on top of the log grid.
    let kinks = energies_sq
        .iter()
        .zip(inners)
        .filter(|(e2, _)| **e2 > 0.0)
        .map(|(e2, g)| g / e2)
        .filter(|a| *a > 0.0 && *a <= hi);
    let grid = (0..ALPHA_GRID).map(|i| lo * (hi / lo).powf(i as f64 / (ALPHA_GRID - 1) as f64));
    for alpha in grid.chain(kinks) {
        let eps = eps_at(alpha);
        let (r, br) = (eps / alpha, best.1 / best.0);
        if r < br || (r == br && alpha > best.0) {
            best = (alpha, eps);
        }
    }
    best
}

fn recursion_holds(next_sq: f64, cur_sq: f64, eta: f64, alpha: f64, eps: f64) -> bool {
    let rhs = (1.0 - eta * alpha) * cur_sq + eta * eps;
    next_sq <= rhs + EXPANSION_TOL * rhs.abs().max(1.0)
}

fn check(step: usize, field: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Harness { step, field })
    }
}

/// Fits a pair `(B₁, A₁)` on domain 0 (head frozen), then runs plain GD
/// with step `η` for `steps_per_domain` steps on each training domain in
/// order, recording every quantity of the out-of-subspace analysis.
pub fn stability_harness(seq: &DomainSequence, cfg: &StabilityConfig) -> Result<StabilityTrace> {
    if !(cfg.eta > 0.0 && cfg.eta.is_finite()) {
        return Err(Error::Argument(format!("step size {} must be positive", cfg.eta)));
    }
    let tc = TrainConfig {
        seed: cfg.seed,
        r: cfg.r,
        r_prime: 1,
        width: cfg.width,
        hidden_layers: cfg.hidden_layers.max(1),
        adapted_layers: vec![0],
        pretrain_epochs: cfg.pretrain_epochs,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let (backbone, _) = pretrain_backbone(seq, &tc)?;
    let mut rng = SeededRng::derive(cfg.seed, TAG_ADAPTER);
    let mut params = Adapted {
        head: backbone.head.clone(),
        adapters: StaticAdapters {
            pairs: vec![LoraPair::init(cfg.width, cfg.width, cfg.r, 0, &mut rng)],
        },
    };
    let first = &seq.domains[0];

    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.init_lr);
    for _ in 0..cfg.init_epochs {
        let (_, mut g) = params.loss_and_grad(&backbone, &first.inputs, &first.labels, first.timestamp, 1.0)?;
        g.head.weight.fill(0.0);
        g.head.bias.fill(0.0);
        opt.step(&mut params, &g);
    }
    let b1 = params.adapters.pairs[0].b.clone();
    let a1 = params.adapters.pairs[0].a.clone();
    let p_b = column_projector(&b1, DEFAULT_RANK_TOL);
    let p_a = column_projector(&a1.transpose(), DEFAULT_RANK_TOL);
    // Out-of-subspace parts measured relative to the reference factors, so
    // they vanish exactly at the first step.
    let out_b = |b: &Matrix| p_b.complement_apply(&b.sub(&b1));
    let out_a = |a: &Matrix| p_a.complement_apply_right(&a.sub(&a1));

    let eta = cfg.eta;
    let mut raw = Vec::new();
    let mut energies = (Vec::new(), Vec::new());
    let mut step = 0;
    for (di, dom) in seq.train_domains().iter().enumerate() {
        for _ in 0..cfg.steps_per_domain {
            let (_, g) = params.loss_and_grad(&backbone, &dom.inputs, &dom.labels, dom.timestamp, 1.0)?;
            let pair = &params.adapters.pairs[0];
            let (gb, ga) = (&g.adapters.pairs[0].b, &g.adapters.pairs[0].a);
            let (rb, ra) = (out_b(&pair.b), out_a(&pair.a));
            let (rgb, rga) = (p_b.complement_apply(gb), p_a.complement_apply_right(ga));
            let e_b = check(step, "e_b", rb.frobenius_norm())?;
            let e_a = check(step, "e_a", ra.frobenius_norm())?;
            let inner_b = check(step, "grad_inner_b", frobenius_inner(&rb, &rgb)?)?;
            let inner_a = check(step, "grad_inner_a", frobenius_inner(&ra, &rga)?)?;
            let gn_b = check(step, "grad_out_norm_b", rgb.frobenius_norm())?;
            let gn_a = check(step, "grad_out_norm_a", rga.frobenius_norm())?;
            let dw = pair.delta();
            let leak_b = check(step, "leak_b", p_b.complement_apply(&dw).frobenius_norm())?;
            let leak_a = check(step, "leak_a", p_a.complement_apply_right(&dw).frobenius_norm())?;
            let bound_b = check(step, "leak_bound_b", e_b * spectral_norm(&pair.a))?;
            let bound_a = check(step, "leak_bound_a", spectral_norm(&pair.b) * e_a)?;

            let mut next = params.adapters.clone();
            next.pairs[0].b.add_scaled(gb, -eta);
            next.pairs[0].a.add_scaled(ga, -eta);
            let nb = out_b(&next.pairs[0].b).frobenius_norm().powi(2);
            let na = out_a(&next.pairs[0].a).frobenius_norm().powi(2);
            let res_b = check(step, "expansion_residual", nb - (e_b * e_b - 2.0 * eta * inner_b + eta * eta * gn_b * gn_b))?;
            let res_a = check(step, "expansion_residual_a", na - (e_a * e_a - 2.0 * eta * inner_a + eta * eta * gn_a * gn_a))?;
            params.adapters = next;

            energies.0.push(e_b * e_b);
            energies.1.push(e_a * e_a);
            raw.push((
                StabilityStep {
                    step,
                    domain: di,
                    e_b,
                    e_a,
                    grad_inner_b: inner_b,
                    grad_inner_a: inner_a,
                    grad_out_norm_b: gn_b,
                    grad_out_norm_a: gn_a,
                    leak_b,
                    leak_bound_b: bound_b,
                    leak_a,
                    leak_bound_a: bound_a,
                    expansion_residual: res_b,
                    expansion_residual_a: res_a,
                    recursion_holds_b: false,
                    recursion_holds_a: false,
                },
                nb,
                na,
            ));
            step += 1;
        }
    }
    let inners_b: Vec<f64> = raw.iter().map(|(s, _, _)| s.grad_inner_b).collect();
    let inners_a: Vec<f64> = raw.iter().map(|(s, _, _)| s.grad_inner_a).collect();
    let (alpha_b, eps_b) = fit_dissipativity(&energies.0, &inners_b, eta);
    let (alpha_a, eps_a) = fit_dissipativity(&energies.1, &inners_a, eta);
    let steps = raw
        .into_iter()
        .map(|(mut s, nb, na)| {
            s.recursion_holds_b = recursion_holds(nb, s.e_b * s.e_b, eta, alpha_b, eps_b);
            s.recursion_holds_a = recursion_holds(na, s.e_a * s.e_a, eta, alpha_a, eps_a);
            s
        })
        .collect();
    Ok(StabilityTrace {
        eta,
        alpha_b,
        eps_b,
        alpha_a,
        eps_a,
        steps,
    })
}
