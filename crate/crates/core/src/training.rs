//! Losses, the minibatch training loop and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_check, Adam, GradCheckConfig, GradCheckReport, Graph, Var};
use crate::candidates::sample_negatives;
use crate::eval::{evaluate, gold_records, score_points, Setting};
use crate::kb::{DanglingPolicy, KnowledgeBase};
use crate::model::{kb_types, ElModel, EntityTypes, Instance, ModelConfig, ModelError};

pub use crate::autodiff::kl_bernoulli;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Multi-instance ranking loss.
    Mil,
    /// Ranking loss weighted by the noise detector, plus the prior term.
    MilNd,
    /// Ranking loss with E+ = {gold}.
    Supervised,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Mil => "mil",
            TrainMode::MilNd => "mil-nd",
            TrainMode::Supervised => "supervised",
        }
    }
}

/// `[max(neg) + margin - max(pos)]_+`.
pub fn hinge_loss(positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if positive.is_empty() {
        return Err(TrainError::Empty("E+"));
    }
    if negative.is_empty() {
        return Err(TrainError::Empty("E-"));
    }
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((max(negative) + margin - max(positive)).max(0.0))
}

/// Sum of hinge losses; each item is `(scores over E+, scores over E-)`.
pub fn loss_l1(batch: &[(Vec<f64>, Vec<f64>)], margin: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    batch.iter().map(|(p, n)| hinge_loss(p, n, margin)).sum()
}

/// `sum (1 - p_i) l_i + eta * KL(mean p_i || prior)`; each item is
/// `(hinge loss, noise probability)`.
pub fn loss_l2(batch: &[(f64, f64)], eta: f64, prior: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    let weighted: f64 = batch.iter().map(|&(l, p)| (1.0 - p) * l).sum();
    let mean = batch.iter().map(|&(_, p)| p).sum::<f64>() / batch.len() as f64;
    let kl = kl_bernoulli(mean, prior).map_err(TrainError::InvalidArgument)?;
    Ok(weighted + eta * kl)
}

/// Graph handles of a batch loss.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub loss: Var,
    /// Mean noise probability over the batch (MIL-ND only).
    pub mean_noise: Option<Var>,
}

fn point_hinge(model: &ElModel, g: &mut Graph, scores: Var, n_positive: usize) -> Result<Var> {
    let total = g.value(scores).rows();
    let pos = g.slice_rows(scores, 0, n_positive)?;
    let neg = g.slice_rows(scores, n_positive, total)?;
    let best_pos = g.max(pos)?;
    let best_neg = g.max(neg)?;
    let diff = g.sub(best_neg, best_pos)?;
    let shifted = g.add_scalar(diff, model.config.margin)?;
    Ok(g.hinge(shifted)?)
}

/// Builds L1 (or L2 in MIL-ND mode) for a batch. Every instance must have
/// non-empty E+ and E-.
pub fn batch_loss(
    model: &ElModel,
    g: &mut Graph,
    types: &EntityTypes,
    batch: &[&Instance],
    mode: TrainMode,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut noise = Vec::new();
    for inst in batch {
        if inst.positive.is_empty() || inst.negative.is_empty() {
            return Err(TrainError::InvalidArgument(format!("{}: E+ and E- must be non-empty", inst.point_id)));
        }
        let vars = model.forward_point(g, types, inst, true)?;
        let hinge = point_hinge(model, g, vars.scores, vars.n_positive)?;
        if mode == TrainMode::MilNd {
            let p = model.noise_prob_for(g, &vars)?;
            let neg_p = g.scale(p, -1.0)?;
            let p_valid = g.add_scalar(neg_p, 1.0)?;
            terms.push(g.mul(p_valid, hinge)?);
            noise.push(p);
        } else {
            terms.push(hinge);
        }
    }
    let stacked = g.concat_rows(&terms)?;
    let mut loss = g.sum(stacked)?;
    let mut mean_noise = None;
    if mode == TrainMode::MilNd {
        let ps = g.concat_rows(&noise)?;
        let mean = g.mean_rows(ps)?;
        let kl = g.kl_bernoulli(mean, model.config.prior_noise)?;
        let kl = g.scale(kl, model.config.eta)?;
        loss = g.add(loss, kl)?;
        mean_noise = Some(mean);
    }
    Ok(BatchLoss { loss, mean_noise })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mean_noise: Option<f64>,
}

/// One Adam update on a batch.
pub fn train_step(
    model: &mut ElModel,
    types: &EntityTypes,
    batch: &[&Instance],
    mode: TrainMode,
    adam: &Adam,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let out = batch_loss(model, &mut g, types, batch, mode)?;
    g.backward(out.loss, &mut model.params)?;
    adam.step(&mut model.params);
    Ok(StepStats { loss: g.scalar_value(out.loss), mean_noise: out.mean_noise.map(|m| g.scalar_value(m)) })
}

/// Finite-difference check of the batch loss gradient w.r.t. every
/// trainable parameter.
pub fn check_loss_gradients(
    model: &mut ElModel,
    types: &EntityTypes,
    batch: &[&Instance],
    mode: TrainMode,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut shadow = model.clone();
    let mut failure = None;
    let report = gradient_check(
        &mut model.params,
        |g, store| {
            shadow.params.clone_from(store);
            match batch_loss(&shadow, g, types, batch, mode) {
                Ok(out) => Ok(out.loss),
                Err(TrainError::Model(ModelError::Autodiff(e))) => Err(e),
                Err(e) => {
                    failure = Some(e.to_string());
                    Err(crate::autodiff::AutodiffError::InvalidArgument { op: "batch_loss", detail: e.to_string() })
                }
            }
        },
        config,
    );
    match (report, failure) {
        (_, Some(msg)) => Err(TrainError::InvalidArgument(msg)),
        (r, None) => Ok(r?),
    }
}

/// Replaces E+ with the gold entity (removing it from E-) for supervised training.
pub fn supervise(kb: &KnowledgeBase, instances: &[Instance]) -> Result<Vec<Instance>> {
    instances
        .iter()
        .map(|inst| {
            let gold = inst
                .gold
                .as_ref()
                .ok_or_else(|| TrainError::InvalidArgument(format!("{} has no gold entity", inst.point_id)))?;
            let idx = kb.index_of(gold.as_str()).ok_or_else(|| {
                TrainError::InvalidArgument(format!("{}: gold {gold} is not in the knowledge base", inst.point_id))
            })?;
            let mut out = inst.clone();
            out.positive = vec![idx];
            out.negative.retain(|&e| e != idx);
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub seed: u64,
    /// Draw fresh E- of this size every epoch instead of reusing the stored one.
    pub resample_negatives: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { mode: TrainMode::Mil, seed: 0, resample_negatives: None }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss per training point.
    pub train_loss: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
    /// Average of the per-batch mean noise probabilities (MIL-ND only).
    pub mean_noise: Option<f64>,
    pub skipped: usize,
    pub wallclock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs run.
    pub epoch: usize,
    pub best_dev_f1: f64,
    pub best_epoch: usize,
    pub patience_left: usize,
    pub seed: u64,
    pub history: Vec<EpochLog>,
    /// Mean noise probability of every batch, in training order.
    pub batch_mean_noise: Vec<f64>,
}

/// Dev micro-F1 under "All", linking every mention (no abstention).
pub fn dev_report(
    model: &ElModel,
    kb: &KnowledgeBase,
    types: &EntityTypes,
    dev: &[Instance],
) -> Result<crate::eval::EvalReport> {
    let golds = gold_records(kb, dev)?;
    let preds: Vec<_> = score_points(model, kb, types, dev)?.iter().map(|s| s.decide(None)).collect();
    Ok(evaluate(&preds, &golds, Setting::All))
}

/// Minibatch Adam training with per-epoch dev evaluation; the parameters of
/// the best dev epoch are restored before returning.
pub fn train(
    model: &mut ElModel,
    kb: &KnowledgeBase,
    train: &[Instance],
    dev: &[Instance],
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    if train.is_empty() {
        return Err(TrainError::Empty("training data"));
    }
    let supervised;
    let mut data: &[Instance] = train;
    if options.mode == TrainMode::Supervised {
        supervised = supervise(kb, train)?;
        data = &supervised;
    }
    let mut data = data.to_vec();
    let types = model.entity_types(kb);
    let cfg = model.config.clone();
    let adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut state = TrainState {
        epoch: 0,
        best_dev_f1: f64::NEG_INFINITY,
        best_epoch: 0,
        patience_left: cfg.patience,
        seed: options.seed,
        history: Vec::new(),
        batch_mean_noise: Vec::new(),
    };
    let mut best = None;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        if let Some(n) = options.resample_negatives {
            for inst in data.iter_mut().filter(|i| !i.positive.is_empty()) {
                inst.negative = sample_negatives(kb, &inst.positive, n, &mut rng)
                    .map_err(|e| TrainError::InvalidArgument(e.to_string()))?;
            }
        }
        let mut usable: Vec<&Instance> =
            data.iter().filter(|i| !i.positive.is_empty() && !i.negative.is_empty()).collect();
        let skipped = data.len() - usable.len();
        if skipped > 0 {
            log::warn!("epoch {epoch}: skipped {skipped} points with empty E+ or E-");
        }
        if usable.is_empty() {
            return Err(TrainError::Empty("training data after skipping points with empty E+ or E-"));
        }
        usable.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut noise = Vec::new();
        for batch in usable.chunks(cfg.batch_size) {
            let stats = train_step(model, &types, batch, options.mode, &adam)?;
            loss_sum += stats.loss;
            if let Some(m) = stats.mean_noise {
                noise.push(m);
            }
        }
        state.batch_mean_noise.extend_from_slice(&noise);

        let report = if dev.is_empty() { None } else { Some(dev_report(model, kb, &types, dev)?) };
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / usable.len() as f64,
            dev_precision: report.as_ref().map_or(0.0, |r| r.precision),
            dev_recall: report.as_ref().map_or(0.0, |r| r.recall),
            dev_f1: report.as_ref().map_or(0.0, |r| r.f1),
            mean_noise: (!noise.is_empty()).then(|| noise.iter().sum::<f64>() / noise.len() as f64),
            skipped,
            wallclock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev F1 {:.4}{}",
            log.train_loss,
            log.dev_f1,
            log.mean_noise.map(|m| format!(" mean p_N {m:.4}")).unwrap_or_default()
        );
        on_epoch(&log);
        state.epoch = epoch;
        let f1 = log.dev_f1;
        state.history.push(log);

        if dev.is_empty() {
            continue;
        }
        if f1 > state.best_dev_f1 {
            state.best_dev_f1 = f1;
            state.best_epoch = epoch;
            state.patience_left = cfg.patience;
            best = Some(model.params.snapshot());
        } else {
            state.patience_left = state.patience_left.saturating_sub(1);
            if state.patience_left == 0 {
                break;
            }
        }
    }
    match best {
        Some(snapshot) => model.params.restore(&snapshot),
        None => {
            state.best_epoch = state.epoch;
            state.best_dev_f1 = state.history.last().map_or(0.0, |l| l.dev_f1);
        }
    }
    Ok(state)
}

/// A tiny model with a batch of four points (|E+| <= 3, |E-| <= 3) for
/// gradient checking.
pub fn gradcheck_fixture(config: ModelConfig, seed: u64) -> Result<(ElModel, KnowledgeBase, Vec<Instance>)> {
    let entities = (0..8)
        .map(|i| (format!("e{i}"), format!("name {i}"), vec![format!("t{}", i % 3), format!("u{}", i % 2)]))
        .collect();
    let (kb, _) = KnowledgeBase::build(entities, vec![], DanglingPolicy::Error)
        .map_err(|e| TrainError::InvalidArgument(e.to_string()))?;
    let words = ElModel::word_vocab(["a", "b", "c", "d", "e"].map(String::from));
    let types = ElModel::type_vocab(kb_types(&kb));
    let model = ElModel::new(config, words, None, types, seed)?;
    let inst = |id: &str, tokens: Vec<usize>, span, positive: Vec<usize>, negative: Vec<usize>| Instance {
        point_id: id.into(),
        tokens,
        span,
        gold: Some(kb.id_of(positive[0]).clone()),
        positive,
        negative,
        ne_type: None,
        noise_label: None,
    };
    let batch = vec![
        inst("s1#0", vec![1, 2, 3, 4], (2, 3), vec![0, 1, 2], vec![5, 6, 7]),
        inst("s2#0", vec![2, 0, 5], (1, 1), vec![3], vec![4, 6]),
        inst("s3#1", vec![5, 4, 3, 2, 1], (5, 5), vec![6, 7], vec![0]),
        inst("s4#0", vec![3, 3, 1], (2, 3), vec![4, 5], vec![1, 2, 3]),
    ];
    Ok((model, kb, batch))
}

/// Gradient checks of L1 (MIL) and L2 (MIL-ND) on [`gradcheck_fixture`].
pub fn fixture_gradient_check(
    config: ModelConfig,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<Vec<(TrainMode, GradCheckReport)>> {
    let (mut model, kb, batch) = gradcheck_fixture(config, seed)?;
    let types = model.entity_types(&kb);
    let refs: Vec<&Instance> = batch.iter().collect();
    [TrainMode::Mil, TrainMode::MilNd]
        .into_iter()
        .map(|mode| Ok((mode, check_loss_gradients(&mut model, &types, &refs, mode, check)?)))
        .collect()
}
