use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loops::{joint_finetune, report_for, time_scale, train_baseline, Strategy, TrainedModel};
use super::optim::Optimizer;
use super::report::TrainReport;
use super::{OptimizerKind, TrainConfig};
use crate::data::DomainSequence;
use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, Matrix};
use crate::model::{
    build_shared_bases, core_sequence_from_pairs, Adapted, AdaptedModel, CoreTape,
    CoreVariant, Dense, LoraPair, MatLoraModel, MultiLoraModel, Params, SharedAdapters,
    SharedBasisAdapter, TemporalCore,
};
use crate::rng::{SeededRng, TAG_ADAPTER};

/// Truncation for the closed-form output-layer solves.
const LSQ_RANK_TOL: f64 = 1e-13;

/// Per-layer diagnostics of a distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistill {
    pub layer: usize,
    pub energy: (f64, f64),
    /// `‖B_t A_t‖_F` per member.
    pub delta_norms: Vec<f64>,
    /// `‖B F_t A − B_t A_t‖_F` with the extracted (unfitted) cores.
    pub target_residuals: Vec<f64>,
    /// `‖B F̂(t) A − B_t A_t‖_F` with the fitted temporal core.
    pub fit_residuals: Vec<f64>,
    pub core_fit_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub core_variant: CoreVariant,
    pub layers: Vec<LayerDistill>,
}

impl DistillReport {
    /// Largest `residual / ‖B_t A_t‖_F` over layers and members (absolute
    /// residual when the increment is zero).
    pub fn max_relative(&self, fitted: bool) -> f64 {
        let mut worst = 0.0f64;
        for l in &self.layers {
            let res = if fitted { &l.fit_residuals } else { &l.target_residuals };
            for (r, n) in res.iter().zip(&l.delta_norms) {
                worst = worst.max(if *n > 0.0 { r / n } else { *r });
            }
        }
        worst
    }
}

fn core_mse(core: &TemporalCore, times: &[f64], targets: &[Matrix]) -> Result<(f64, TemporalCore)> {
    let n = times.len() as f64;
    let mut grads = core.zeros_like();
    let mut loss = 0.0;
    for (&t, target) in times.iter().zip(targets) {
        let (f, tape) = core.eval_with_tape(t)?;
        let diff = f.sub(target);
        loss += diff.frobenius_norm().powi(2) / n;
        core.backward(&tape, &diff.scale(2.0 / n), &mut grads);
    }
    Ok((loss, grads))
}

fn solve_readout(features: &[Matrix], targets: &[Matrix]) -> Result<(Matrix, Matrix)> {
    // Rows [hᵀ, 1] against rows vec(F)ᵀ.
    let h = features[0].rows();
    let q = targets[0].rows() * targets[0].cols();
    let design = Matrix::from_fn(features.len(), h + 1, |i, j| if j < h { features[i][(j, 0)] } else { 1.0 });
    let rhs = Matrix::from_fn(targets.len(), q, |i, j| targets[i].as_slice()[j]);
    let (pinv, _) = pseudo_inverse(&design, LSQ_RANK_TOL)?;
    let x = pinv.dot(&rhs);
    let w = Matrix::from_fn(q, h, |i, j| x[(j, i)]);
    let b = Matrix::from_fn(q, 1, |i, _| x[(h, i)]);
    Ok((w, b))
}

/// Closed-form refit of the part of the core that is linear in its
/// parameters given everything else.
fn refit_linear_part(core: &mut TemporalCore, times: &[f64], targets: &[Matrix]) -> Result<()> {
    let tapes = times
        .iter()
        .map(|&t| core.eval_with_tape(t).map(|(_, tape)| tape))
        .collect::<Result<Vec<_>>>()?;
    match core {
        TemporalCore::LinDyn(c) => {
            let flows: Vec<&Matrix> = tapes
                .iter()
                .map(|tp| match tp {
                    CoreTape::LinDyn { flow, .. } => flow,
                    _ => unreachable!(),
                })
                .collect();
            let stacked = Matrix::vstack(&flows)?;
            let rhs = Matrix::vstack(&targets.iter().collect::<Vec<_>>())?;
            let (pinv, _) = pseudo_inverse(&stacked, LSQ_RANK_TOL)?;
            c.f0 = pinv.dot(&rhs);
        }
        TemporalCore::Markov(c) => {
            let states: Vec<Matrix> = tapes
                .iter()
                .map(|tp| match tp {
                    CoreTape::Markov { states } => states.last().expect("h0").clone(),
                    _ => unreachable!(),
                })
                .collect();
            let (w, b) = solve_readout(&states, targets)?;
            c.w_o = w;
            c.b_o = b;
        }
        TemporalCore::NonLin(c) => {
            let feats: Vec<Matrix> = tapes
                .iter()
                .map(|tp| match tp {
                    CoreTape::NonLin { z2, .. } => z2.clone(),
                    _ => unreachable!(),
                })
                .collect();
            let (w, b) = solve_readout(&feats, targets)?;
            c.w3 = w;
            c.b3 = b;
        }
    }
    Ok(())
}

/// Fits `core` to `F(times[i]) ≈ targets[i]` in least squares: gradient
/// steps on all parameters, then an exact solve of the linear read-out.
/// Returns the final mean squared Frobenius error.
pub fn fit_core(core: &mut TemporalCore, times: &[f64], targets: &[Matrix], steps: usize, lr: f64) -> Result<f64> {
    if times.is_empty() || times.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} timestamps for {} core targets",
            times.len(),
            targets.len()
        )));
    }
    let r = core.size();
    if let Some(bad) = targets.iter().find(|m| m.shape() != (r, r)) {
        return Err(Error::dim("fit_core", format!("target {:?} for core size {r}", bad.shape())));
    }
    if let TemporalCore::LinDyn(c) = core {
        // Constant flow through the first target.
        c.velocity.fill(0.0);
        c.f0 = targets[0].clone();
    }
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr);
    for step in 0..steps {
        let (loss, grads) = core_mse(core, times, targets)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("core fit loss {loss}"),
            });
        }
        opt.step(core, &grads);
    }
    refit_linear_part(core, times, targets)?;
    Ok(core_mse(core, times, targets)?.0)
}

/// Shared bases from the members' pairs, extracted core targets, fitted
/// temporal cores, and the mean of the members' heads.
pub fn distill_to_shared(
    multi: &MultiLoraModel,
    seq: &DomainSequence,
    cfg: &TrainConfig,
) -> Result<(MatLoraModel, DistillReport)> {
    cfg.validate()?;
    let first = multi
        .members
        .first()
        .ok_or_else(|| Error::Invalid("multi-LoRA model has no members".into()))?;
    let times: Vec<f64> = multi.members.iter().map(|(t, _)| *t).collect();
    let mut rng = SeededRng::derive(cfg.seed, TAG_ADAPTER);
    let mut adapters = Vec::new();
    let mut layers = Vec::new();
    for layer in first.1.adapters.pairs.iter().map(|p| p.layer) {
        let pairs: Vec<LoraPair> = multi
            .members
            .iter()
            .map(|(_, m)| {
                m.adapters
                    .pairs
                    .iter()
                    .find(|p| p.layer == layer)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("member without an adapter on layer {layer}")))
            })
            .collect::<Result<_>>()?;
        let bases = build_shared_bases(&pairs, cfg.r_prime)?;
        let seq_targets = core_sequence_from_pairs(&pairs, &bases.b, &bases.a)?;
        let targets: Vec<Matrix> = seq_targets.iter().map(|c| c.f.clone()).collect();
        let mut core = TemporalCore::init(cfg.core_variant, cfg.r_prime, time_scale(seq), &mut rng);
        let mse = fit_core(&mut core, &times, &targets, cfg.distill_fit_steps, cfg.distill_fit_lr)?;
        let adapter = SharedBasisAdapter {
            b: bases.b.clone(),
            a: bases.a.clone(),
            core,
            layer,
        };
        let fit_residuals = times
            .iter()
            .zip(&pairs)
            .map(|(&t, p)| Ok(adapter.delta(t)?.sub(&p.delta()).frobenius_norm()))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerDistill {
            layer,
            energy: bases.energy,
            delta_norms: pairs.iter().map(|p| p.delta().frobenius_norm()).collect(),
            target_residuals: seq_targets.iter().map(|c| c.residual).collect(),
            fit_residuals,
            core_fit_mse: mse,
        });
        adapters.push(adapter);
    }
    let mut head = Dense::zeros(first.1.head.inputs(), first.1.head.outputs());
    for (_, m) in &multi.members {
        head.axpy(1.0 / multi.members.len() as f64, &m.head);
    }
    let model = AdaptedModel {
        backbone: multi.backbone.clone(),
        params: Adapted {
            head,
            adapters: SharedAdapters { adapters },
        },
    };
    Ok((
        model,
        DistillReport {
            core_variant: cfg.core_variant,
            layers,
        },
    ))
}

/// Multi-LoRA training, distillation, and the optional joint fine-tune.
pub fn train_distilled(seq: &DomainSequence, cfg: &TrainConfig) -> Result<(MatLoraModel, TrainReport)> {
    let started = Instant::now();
    let (multi, base) = train_baseline(seq, cfg, Strategy::MultiLora)?;
    let TrainedModel::MultiLora(multi) = multi else {
        unreachable!("multi-LoRA strategy returns a multi-LoRA model")
    };
    let (mut model, _) = distill_to_shared(&multi, seq, cfg)?;
    let mut losses = base.losses;
    let mut warnings = base.warnings;
    if cfg.distill_finetune_epochs > 0 {
        joint_finetune(&mut model, seq, cfg, cfg.distill_finetune_epochs, &mut losses, &mut warnings)?;
    }
    let label = format!("distill:{}", cfg.core_variant);
    let report = report_for(label, &model, seq, cfg, base.pretrain_loss, losses, warnings, started)?;
    Ok((model, report))
}
