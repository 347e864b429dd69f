use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::accuracy;
use super::optim::Optimizer;
use super::report::{monotonicity_warnings, LossRecord, TrainReport};
use super::{PretrainSource, TrainConfig};
use crate::analysis::param_counts;
use crate::data::{Domain, DomainSequence};
use crate::error::{Error, Result};
use crate::model::{
    backward, forward, softmax_cross_entropy, Adapted, AdaptedModel, Backbone, DeltaSource, Dense,
    LoraModel, LoraPair, MatLoraModel, MultiLoraModel, Params, Predictor, SharedAdapters,
    SharedBasisAdapter, StaticAdapters,
};
use crate::rng::{SeededRng, TAG_ADAPTER, TAG_BACKBONE, TAG_SHUFFLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Offline,
    LastDomain,
    IncFinetune,
    MultiLora,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Offline,
        Strategy::LastDomain,
        Strategy::IncFinetune,
        Strategy::MultiLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Offline => "offline",
            Strategy::LastDomain => "last_domain",
            Strategy::IncFinetune => "inc_finetune",
            Strategy::MultiLora => "multi_lora",
        }
    }
}

/// Every trainable method; shared-basis methods take their core from the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Matlora,
    Distill,
    Baseline(Strategy),
}

impl Method {
    pub const NAMES: [&'static str; 6] = [
        "matlora",
        "offline",
        "last_domain",
        "inc_finetune",
        "multi_lora",
        "distill",
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Matlora => f.write_str("matlora"),
            Method::Distill => f.write_str("distill"),
            Method::Baseline(s) => f.write_str(s.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matlora" => Ok(Method::Matlora),
            "distill" => Ok(Method::Distill),
            other => Strategy::ALL
                .into_iter()
                .find(|st| st.name() == other)
                .map(Method::Baseline)
                .ok_or_else(|| {
                    Error::Argument(format!(
                        "unknown method '{other}' (expected one of {})",
                        Method::NAMES.join(", ")
                    ))
                }),
        }
    }
}

/// Any trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Matlora(MatLoraModel),
    Lora(LoraModel),
    MultiLora(MultiLoraModel),
}

impl TrainedModel {
    pub fn backbone(&self) -> &Backbone {
        match self {
            TrainedModel::Matlora(m) => &m.backbone,
            TrainedModel::Lora(m) => &m.backbone,
            TrainedModel::MultiLora(m) => &m.backbone,
        }
    }

    pub fn trainable_params(&self) -> usize {
        match self {
            TrainedModel::Matlora(m) => m.params.num_params(),
            TrainedModel::Lora(m) => m.params.num_params(),
            TrainedModel::MultiLora(m) => m.members.iter().map(|(_, a)| a.num_params()).sum(),
        }
    }
}

impl Predictor for TrainedModel {
    fn input_dim(&self) -> usize {
        self.backbone().input_dim()
    }

    fn num_classes(&self) -> usize {
        match self {
            TrainedModel::Matlora(m) => m.num_classes(),
            TrainedModel::Lora(m) => m.num_classes(),
            TrainedModel::MultiLora(m) => m.num_classes(),
        }
    }

    fn predict_logits(&self, x: &crate::linalg::Matrix, t: f64) -> Result<crate::linalg::Matrix> {
        match self {
            TrainedModel::Matlora(m) => m.predict_logits(x, t),
            TrainedModel::Lora(m) => m.predict_logits(x, t),
            TrainedModel::MultiLora(m) => m.predict_logits(x, t),
        }
    }
}

fn check_sequence(seq: &DomainSequence, cfg: &TrainConfig, min_train: usize) -> Result<()> {
    cfg.validate()?;
    seq.validate()?;
    if seq.train_count < min_train {
        return Err(Error::Argument(format!(
            "need at least {min_train} training domains, got {}",
            seq.train_count
        )));
    }
    Ok(())
}

fn backbone_grads(g: crate::model::NetGrads) -> Backbone {
    let biases = g.hidden_bias.expect("full backward");
    Backbone {
        input: g.input.expect("full backward"),
        hidden: g
            .deltas
            .into_iter()
            .zip(biases)
            .map(|(weight, bias)| Dense { weight, bias })
            .collect(),
        head: g.head,
    }
}

/// Fits every backbone parameter (full batch, Adam or SGD per `cfg`) on the
/// configured anchor data. Returns the backbone and its final loss.
pub fn pretrain_backbone(seq: &DomainSequence, cfg: &TrainConfig) -> Result<(Backbone, f64)> {
    cfg.validate()?;
    seq.validate()?;
    let mut rng = SeededRng::derive(cfg.seed, TAG_BACKBONE);
    let mut backbone = Backbone::init(seq.input_dim(), cfg.width, cfg.hidden_layers, seq.num_classes, &mut rng);
    let domains: &[Domain] = match cfg.pretrain_source {
        PretrainSource::FirstDomain => &seq.domains[..1],
        PretrainSource::TrainingPool => seq.train_domains(),
    };
    let scale = 1.0 / domains.len() as f64;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr);
    let mut last = f64::NAN;
    for step in 0..=cfg.pretrain_epochs {
        let mut grads = backbone.zeros_like();
        let mut loss = 0.0;
        for d in domains {
            let cache = forward(&backbone, &backbone.head, &[], &d.inputs)?;
            let (l, dlogits) = softmax_cross_entropy(&cache.logits, &d.labels, scale)?;
            grads.axpy(1.0, &backbone_grads(backward(&backbone.head, &cache, &dlogits, true)));
            loss += l * scale;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("pretraining loss {loss}"),
            });
        }
        last = loss;
        if step == cfg.pretrain_epochs {
            break;
        }
        opt.step(&mut backbone, &grads);
    }
    Ok((backbone, last))
}

/// Mutable training state shared by the loops below.
struct Run<'a> {
    cfg: &'a TrainConfig,
    backbone: &'a Backbone,
    shuffle: SeededRng,
    step: usize,
    losses: Vec<LossRecord>,
    warnings: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig, backbone: &'a Backbone) -> Self {
        Run {
            cfg,
            backbone,
            shuffle: SeededRng::derive(cfg.seed, TAG_SHUFFLE),
            step: 0,
            losses: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn batches<'d>(&mut self, domain: &'d Domain) -> Vec<Cow<'d, Domain>> {
        let bs = self.cfg.batch_size;
        if bs >= domain.len() {
            return vec![Cow::Borrowed(domain)];
        }
        let mut order: Vec<usize> = (0..domain.len()).collect();
        self.shuffle.shuffle(&mut order);
        order.chunks(bs).map(|c| Cow::Owned(domain.subset(c))).collect()
    }

    /// `epochs` epochs of the mean loss over `domains` (index, domain);
    /// every epoch walks the minibatches of all domains in lockstep.
    fn train<S: DeltaSource>(
        &mut self,
        params: &mut Adapted<S>,
        domains: &[(usize, &Domain)],
        epochs: usize,
        epoch_offset: usize,
        label: &str,
    ) -> Result<()> {
        let mut opt = Optimizer::new(self.cfg.optimizer, self.cfg.learning_rate);
        let mut epoch_means = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let plans: Vec<Vec<Cow<Domain>>> = domains.iter().map(|(_, d)| self.batches(d)).collect();
            let steps = plans.iter().map(Vec::len).max().unwrap_or(0);
            let mut sums = vec![0.0; domains.len()];
            for j in 0..steps {
                let active: Vec<usize> = (0..domains.len()).filter(|&i| j < plans[i].len()).collect();
                let scale = 1.0 / active.len() as f64;
                let mut grads = params.zeros_like();
                for &i in &active {
                    let b = &plans[i][j];
                    let loss = params.accumulate_grad(self.backbone, &b.inputs, &b.labels, b.timestamp, scale, &mut grads)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged {
                            step: self.step,
                            detail: format!("{label}: loss {loss} on domain {}", domains[i].0),
                        });
                    }
                    sums[i] += loss * b.len() as f64;
                }
                opt.step(params, &grads);
                if !params.all_finite() {
                    return Err(Error::Diverged {
                        step: self.step,
                        detail: format!("{label}: non-finite parameters"),
                    });
                }
                self.step += 1;
            }
            let mut mean = 0.0;
            for (i, (idx, d)) in domains.iter().enumerate() {
                let loss = sums[i] / d.len() as f64;
                mean += loss / domains.len() as f64;
                self.losses.push(LossRecord {
                    epoch: epoch_offset + epoch,
                    domain: *idx,
                    loss,
                });
            }
            epoch_means.push(mean);
        }
        self.warnings.extend(monotonicity_warnings(label, &epoch_means));
        Ok(())
    }
}

fn adapter_rng(cfg: &TrainConfig) -> SeededRng {
    SeededRng::derive(cfg.seed, TAG_ADAPTER)
}

pub(crate) fn fresh_lora(backbone: &Backbone, cfg: &TrainConfig) -> Adapted<StaticAdapters> {
    let mut rng = adapter_rng(cfg);
    let w = cfg.width;
    Adapted {
        head: backbone.head.clone(),
        adapters: StaticAdapters {
            pairs: cfg
                .adapted_layers
                .iter()
                .map(|&l| LoraPair::init(w, w, cfg.r, l, &mut rng))
                .collect(),
        },
    }
}

/// Normalizer mapping training timestamps onto `[0, 1]` for the timestamp MLP.
pub fn time_scale(seq: &DomainSequence) -> f64 {
    (seq.train_count.saturating_sub(1)).max(1) as f64
}

fn fresh_shared(backbone: &Backbone, seq: &DomainSequence, cfg: &TrainConfig) -> Adapted<SharedAdapters> {
    let mut rng = adapter_rng(cfg);
    let w = cfg.width;
    Adapted {
        head: backbone.head.clone(),
        adapters: SharedAdapters {
            adapters: cfg
                .adapted_layers
                .iter()
                .map(|&l| SharedBasisAdapter::init(w, w, cfg.r_prime, l, cfg.core_variant, time_scale(seq), &mut rng))
                .collect(),
        },
    }
}

fn train_indexed(seq: &DomainSequence) -> Vec<(usize, &Domain)> {
    seq.train_domains().iter().enumerate().collect()
}

#[allow(clippy::too_many_arguments)]
fn finish_report<P: Predictor + ?Sized>(
    method: String,
    model: &P,
    trainable_params: usize,
    seq: &DomainSequence,
    cfg: &TrainConfig,
    pretrain_loss: f64,
    run: Run<'_>,
    started: Instant,
) -> Result<TrainReport> {
    let train_accuracy = seq
        .train_domains()
        .iter()
        .map(|d| accuracy(model, d))
        .collect::<Result<Vec<_>>>()?;
    let w = cfg.width as u64;
    Ok(TrainReport {
        method,
        seed: cfg.seed,
        losses: run.losses,
        train_accuracy,
        pretrain_loss,
        trainable_params,
        param_counts: param_counts(w, w, cfg.r as u64, cfg.r_prime as u64, seq.train_count as u64, cfg.core_variant),
        warnings: run.warnings,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Joint training of shared bases, temporal cores and head over all
/// training domains at their timestamps; the backbone stays frozen.
pub fn train_matlora(seq: &DomainSequence, cfg: &TrainConfig) -> Result<(MatLoraModel, TrainReport)> {
    let started = Instant::now();
    check_sequence(seq, cfg, 2)?;
    let (backbone, pretrain_loss) = pretrain_backbone(seq, cfg)?;
    let mut params = fresh_shared(&backbone, seq, cfg);
    let mut run = Run::new(cfg, &backbone);
    let label = format!("matlora:{}", cfg.core_variant);
    run.train(&mut params, &train_indexed(seq), cfg.epochs, 0, &label)?;
    let model = AdaptedModel {
        backbone: backbone.clone(),
        params,
    };
    let n = model.params.num_params();
    let report = finish_report(label, &model, n, seq, cfg, pretrain_loss, run, started)?;
    Ok((model, report))
}

/// Trains one of the reference strategies on a freshly pretrained backbone.
pub fn train_baseline(seq: &DomainSequence, cfg: &TrainConfig, strategy: Strategy) -> Result<(TrainedModel, TrainReport)> {
    let started = Instant::now();
    check_sequence(seq, cfg, 1)?;
    let (backbone, pretrain_loss) = pretrain_backbone(seq, cfg)?;
    let mut run = Run::new(cfg, &backbone);
    let label = strategy.name().to_string();
    let domains = train_indexed(seq);
    let last = seq.train_count - 1;
    let model = match strategy {
        Strategy::Offline => {
            let mut params = fresh_lora(&backbone, cfg);
            run.train(&mut params, &domains, cfg.epochs, 0, &label)?;
            TrainedModel::Lora(AdaptedModel { backbone: backbone.clone(), params })
        }
        Strategy::LastDomain => {
            let mut params = fresh_lora(&backbone, cfg);
            run.train(&mut params, &domains[last..], cfg.epochs, 0, &label)?;
            TrainedModel::Lora(AdaptedModel { backbone: backbone.clone(), params })
        }
        Strategy::IncFinetune => {
            let mut params = fresh_lora(&backbone, cfg);
            for (i, dom) in domains.iter().enumerate() {
                run.train(&mut params, std::slice::from_ref(dom), cfg.epochs, i * cfg.epochs, &label)?;
            }
            TrainedModel::Lora(AdaptedModel { backbone: backbone.clone(), params })
        }
        Strategy::MultiLora => {
            let mut members: Vec<(f64, Adapted<StaticAdapters>)> = Vec::with_capacity(domains.len());
            for dom in &domains {
                let mut params = match members.last() {
                    Some((_, prev)) if cfg.warm_start => prev.clone(),
                    _ => fresh_lora(&backbone, cfg),
                };
                // Every member sees the same shuffle stream as a standalone run.
                run.shuffle = SeededRng::derive(cfg.seed, TAG_SHUFFLE);
                run.train(&mut params, std::slice::from_ref(dom), cfg.epochs, 0, &label)?;
                members.push((dom.1.timestamp, params));
            }
            TrainedModel::MultiLora(MultiLoraModel {
                backbone: backbone.clone(),
                members,
            })
        }
    };
    let n = model.trainable_params();
    let report = finish_report(label, &model, n, seq, cfg, pretrain_loss, run, started)?;
    Ok((model, report))
}

/// Dispatches on `method`.
pub fn train(seq: &DomainSequence, cfg: &TrainConfig, method: Method) -> Result<(TrainedModel, TrainReport)> {
    match method {
        Method::Matlora => {
            let (m, r) = train_matlora(seq, cfg)?;
            Ok((TrainedModel::Matlora(m), r))
        }
        Method::Baseline(s) => train_baseline(seq, cfg, s),
        Method::Distill => {
            let (m, r) = super::distill::train_distilled(seq, cfg)?;
            Ok((TrainedModel::Matlora(m), r))
        }
    }
}

pub(crate) fn joint_finetune(
    model: &mut MatLoraModel,
    seq: &DomainSequence,
    cfg: &TrainConfig,
    epochs: usize,
    losses: &mut Vec<LossRecord>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let mut run = Run::new(cfg, &model.backbone);
    let offset = losses.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut params = model.params.clone();
    run.train(&mut params, &train_indexed(seq), epochs, offset, "distill:finetune")?;
    losses.extend(run.losses);
    warnings.extend(run.warnings);
    model.params = params;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn report_for(
    label: String,
    model: &MatLoraModel,
    seq: &DomainSequence,
    cfg: &TrainConfig,
    pretrain_loss: f64,
    losses: Vec<LossRecord>,
    warnings: Vec<String>,
    started: Instant,
) -> Result<TrainReport> {
    let mut run = Run::new(cfg, &model.backbone);
    run.losses = losses;
    run.warnings = warnings;
    finish_report(label, model, model.params.num_params(), seq, cfg, pretrain_loss, run, started)
}
