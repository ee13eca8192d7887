//! The pseudo-labeling loop.
//!
//! Each iteration trains the ensemble on the current P/U/L revision, scores
//! the training set, moves the most certain unlabeled samples into L with
//! soft labels, moves doubtful pseudo-labels back into U, and re-initializes
//! the weights. The best validation snapshot θ* is tracked throughout and
//! used for the final evaluation.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Membership, PuDataset};
use crate::error::{PuError, Result};
use crate::metrics::{self, EvalReport};
use crate::network::{AdamConfig, AdamState, ParamSnapshot};
use crate::puloss::{objective_with, PuLossConfig, PuLossKind};
use crate::rng::{SeedTree, Stream};
use crate::runlog::{EpochRecord, IterationOutcome, RunLog};
use crate::uncertainty::{decompose_logits, BestSnapshot, Ensemble, EstimatorKind, UncertaintyKind, UncertaintyReport};

/// Smallest and largest stored pseudo-label; keeps the cross-entropy finite.
pub const LABEL_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Uncertainty-aware pseudo-labeling.
    Puupl,
    /// Pseudo-labeling ranked by raw sigmoid confidence `|p − 0.5|`, soft
    /// labels, no thresholds and no pseudo-unlabeling.
    NaivePl,
    /// Plain PU training: a single iteration, nothing pseudo-labeled.
    Nnpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// Equal numbers of new positives and negatives (target ratio 1).
    Equal,
    /// New positives : negatives = π : (1 − π).
    PriorRatio,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitMode {
    /// Restore θ⁰ before every iteration.
    SameWeights,
    /// Draw new random weights before every iteration.
    Fresh,
    /// Continue from the previous iteration's weights.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// AUC between labeled positives and unlabeled validation samples.
    PuAuc,
    /// Accuracy on fully labeled validation data.
    Accuracy,
}

/// Architecture of every ensemble member (input width comes from the data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
}

impl NetworkConfig {
    pub fn layer_sizes(&self, n_features: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(n_features);
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(PuError::config("network.hidden", "layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PuError::config("network.dropout", format!("must lie in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    /// Epochs of inner training per pseudo-labeling iteration.
    pub epochs: usize,
    /// Stop inner training after this many epochs without validation
    /// improvement; 0 disables early stopping.
    #[serde(default)]
    pub patience: usize,
}

fn default_lr_decay() -> f64 {
    0.99
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PuError::config("optimizer.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(PuError::config("optimizer.batch_size", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PuError::config("optimizer.weight_decay", "must be non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(PuError::config("optimizer.lr_decay", "must lie in (0,1]"));
        }
        if self.epochs == 0 {
            return Err(PuError::config("optimizer.epochs", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            ..AdamConfig::default()
        }
    }
}

/// Number of new pseudo-labels per iteration: a count or unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxLabels {
    Count(usize),
    Unbounded,
}

impl MaxLabels {
    fn limit(self) -> usize {
        match self {
            MaxLabels::Count(n) => n,
            MaxLabels::Unbounded => usize::MAX,
        }
    }
}

impl Serialize for MaxLabels {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MaxLabels::Count(n) => s.serialize_u64(*n as u64),
            MaxLabels::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for MaxLabels {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(MaxLabels::Count(n as usize)),
            Raw::Text(t) if t == "inf" => Ok(MaxLabels::Unbounded),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a count or \"inf\", got `{t}`"))),
        }
    }
}

/// Every pseudo-labeling hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PuuplConfig {
    pub method: Method,
    pub loss: PuLossKind,
    /// Class prior π.
    pub prior: f64,
    /// Weight λ of the pseudo-label loss.
    pub lambda: f64,
    /// Ensemble size K (number of passes for MC-dropout).
    pub ensemble_size: usize,
    /// T: most new pseudo-labels per iteration.
    pub max_new_labels: MaxLabels,
    /// t_l: largest uncertainty accepted for a new pseudo-label.
    pub t_low: f64,
    /// t_u: epistemic uncertainty at which a pseudo-label is withdrawn.
    pub t_high: f64,
    /// r: target ratio of new positives to new negatives for `equal` balancing.
    pub target_ratio: f64,
    pub max_iterations: usize,
    /// Stop after this many iterations without validation improvement.
    pub patience: usize,
    pub reassign_all: bool,
    pub balance: BalanceMode,
    pub reinit: ReinitMode,
    pub soft_labels: bool,
    pub uncertainty: UncertaintyKind,
    pub estimator: EstimatorKind,
}

impl Default for PuuplConfig {
    fn default() -> Self {
        PuuplConfig {
            method: Method::Puupl,
            loss: PuLossKind::Nnpu,
            prior: 0.5,
            lambda: 0.1,
            ensemble_size: 2,
            max_new_labels: MaxLabels::Count(1000),
            t_low: 0.05,
            t_high: 0.35,
            target_ratio: 1.0,
            max_iterations: 15,
            patience: 3,
            reassign_all: false,
            balance: BalanceMode::Equal,
            reinit: ReinitMode::SameWeights,
            soft_labels: true,
            uncertainty: UncertaintyKind::Epistemic,
            estimator: EstimatorKind::Ensemble,
        }
    }
}

impl PuuplConfig {
    pub fn loss_config(&self) -> PuLossConfig {
        PuLossConfig {
            prior: self.prior,
            kind: self.loss,
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        let ln2 = std::f64::consts::LN_2;
        if self.ensemble_size == 0 {
            return Err(PuError::config("puupl.ensemble_size", "must be at least 1"));
        }
        if !(self.t_low >= 0.0) {
            return Err(PuError::config("puupl.t_low", "must be non-negative"));
        }
        if self.t_low > self.t_high {
            return Err(PuError::config(
                "puupl.t_low",
                format!("t_low = {} exceeds t_high = {}", self.t_low, self.t_high),
            ));
        }
        if !(self.t_high >= 0.0) || self.t_high > ln2 {
            return Err(PuError::config("puupl.t_high", format!("must lie in [t_low, ln 2], got {}", self.t_high)));
        }
        if self.balance == BalanceMode::Equal && self.target_ratio != 1.0 {
            return Err(PuError::config("puupl.target_ratio", "equal balancing requires a ratio of 1"));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio.is_finite()) {
            return Err(PuError::config("puupl.target_ratio", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(PuError::config("puupl.max_iterations", "must be at least 1"));
        }
        if self.estimator == EstimatorKind::McDropout && self.method != Method::Nnpu && self.ensemble_size < 2 {
            return Err(PuError::config("puupl.ensemble_size", "MC-dropout needs at least 2 passes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub criterion: Criterion,
    pub bins: usize,
    /// Write per-sample uncertainties for every iteration.
    pub dump_uncertainty: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            criterion: Criterion::PuAuc,
            bins: 10,
            dump_uncertainty: false,
        }
    }
}

/// Everything the engine needs besides data and a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub puupl: PuuplConfig,
    pub eval: EvalConfig,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.puupl.validate()?;
        if self.eval.bins == 0 {
            return Err(PuError::config("eval.bins", "must be positive"));
        }
        if self.puupl.estimator == EstimatorKind::McDropout && self.network.dropout <= 0.0 {
            return Err(PuError::config("network.dropout", "MC-dropout needs dropout > 0"));
        }
        Ok(())
    }

    fn passes(&self) -> usize {
        self.puupl.ensemble_size
    }

    fn n_members(&self) -> usize {
        match self.puupl.estimator {
            EstimatorKind::Ensemble => self.puupl.ensemble_size,
            EstimatorKind::McDropout => 1,
        }
    }
}

/// Minibatches over all training samples where each batch holds at least one
/// labeled positive (the batch count is capped at |P|).
pub fn stratified_batches(membership: &[Membership], batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut pos: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for (i, &m) in membership.iter().enumerate() {
        if m == Membership::Positive {
            pos.push(i);
        } else {
            rest.push(i);
        }
    }
    pos.shuffle(rng);
    rest.shuffle(rng);
    let n = membership.len();
    let mut n_batches = n.div_ceil(batch_size).max(1);
    if !pos.is_empty() {
        n_batches = n_batches.min(pos.len());
    }
    let mut batches = vec![Vec::with_capacity(batch_size + 1); n_batches];
    for (j, &i) in pos.iter().enumerate() {
        batches[j % n_batches].push(i);
    }
    for (j, &i) in rest.iter().enumerate() {
        batches[j % n_batches].push(i);
    }
    batches
}

/// Validation score of the ensemble mean prediction.
pub fn validation_score(ensemble: &Ensemble, val: &PuDataset, criterion: Criterion) -> Result<(f64, Option<f64>, Vec<f64>)> {
    let probs = ensemble.predict_proba(val.features().view())?;
    let truth = val.evaluation_truth();
    let score = match criterion {
        Criterion::PuAuc => {
            let (p, u): (Vec<_>, Vec<_>) = val
                .membership()
                .iter()
                .zip(&probs)
                .filter(|(m, _)| **m != Membership::PseudoLabeled)
                .partition(|(m, _)| **m == Membership::Positive);
            let p: Vec<f64> = p.into_iter().map(|(_, &s)| s).collect();
            let u: Vec<f64> = u.into_iter().map(|(_, &s)| s).collect();
            metrics::pu_auc(&p, &u)?
        }
        Criterion::Accuracy => {
            let truth = truth.ok_or_else(|| PuError::config("eval.criterion", "accuracy needs labeled validation data"))?;
            metrics::accuracy(&probs, truth)?
        }
    };
    let ece = match truth {
        Some(t) => Some(metrics::ece(&probs, t, 10)?),
        None => None,
    };
    Ok((score, ece, probs))
}

/// Train every member for `training.epochs` epochs on the combined loss,
/// offering the ensemble as θ* after each epoch.
pub fn train_inner(
    ensemble: &mut Ensemble,
    train: &PuDataset,
    val: &PuDataset,
    config: &EngineConfig,
    seeds: &SeedTree,
    iteration: usize,
) -> Result<Vec<EpochRecord>> {
    let x = train.features();
    let membership = train.membership();
    let labels = train.labels();
    let risk = config.puupl.loss_config().risk();
    let lambda = config.puupl.lambda;
    let dropout = config.network.dropout > 0.0;
    let mut opts: Vec<AdamState> = ensemble
        .members()
        .iter()
        .map(|m| AdamState::new(config.training.adam(), m))
        .collect();
    let mut records = Vec::with_capacity(config.training.epochs);
    let mut best_in_iteration = f64::NEG_INFINITY;
    let mut stale = 0;
    let it = iteration as u64;

    for epoch in 0..config.training.epochs {
        let ep = epoch as u64;
        let mut loss_total = 0.0;
        let mut loss_pu = 0.0;
        let mut loss_pl = 0.0;
        let mut pl_weight = 0.0;
        let mut clamped = 0usize;
        let mut n_batches = 0usize;
        let lr = opts[0].learning_rate();
        for (k, (member, opt)) in ensemble.members_mut().iter_mut().zip(opts.iter_mut()).enumerate() {
            let mut rng = seeds.rng(Stream::Batch, &[it, k as u64, ep]);
            let batches = stratified_batches(membership, config.training.batch_size, &mut rng);
            let mut member_total = 0.0;
            let mut member_pu = 0.0;
            for (b, idx) in batches.iter().enumerate() {
                let xb = x.select(Axis(0), idx);
                let mb: Vec<Membership> = idx.iter().map(|&i| membership[i]).collect();
                let yb: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
                let drop_seed = dropout.then(|| seeds.seed(Stream::Dropout, &[it, k as u64, ep, b as u64]));
                let logits = member.forward(xb.view(), drop_seed)?;
                let out = objective_with(logits.as_slice().expect("contiguous logits"), &mb, &yb, lambda, risk.as_ref())
                    .map_err(|e| match e {
                        PuError::Numeric(msg) => {
                            PuError::Numeric(format!("iteration {iteration}, epoch {epoch}, member {k}: {msg}"))
                        }
                        other => other,
                    })?;
                let grads = member.backward(&out.grad)?;
                opt.step(member, &grads)?;
                member_total += out.total;
                member_pu += out.pu;
                if let Some(pl) = out.pseudo {
                    loss_pl += pl;
                    pl_weight += 1.0;
                }
                clamped += usize::from(out.clamped);
                n_batches += 1;
            }
            opt.decay();
            let nb = batches.len() as f64;
            loss_total += member_total / nb;
            loss_pu += member_pu / nb;
        }
        let k = ensemble.len() as f64;
        let (score, ece, _) = validation_score(ensemble, val, config.eval.criterion)?;
        ensemble.offer_best(score);
        records.push(EpochRecord {
            iteration,
            epoch,
            loss_total: loss_total / k,
            loss_pu: loss_pu / k,
            loss_pl: (pl_weight > 0.0).then(|| loss_pl / pl_weight),
            clamped_fraction: clamped as f64 / n_batches.max(1) as f64,
            learning_rate: lr,
            val_score: score,
            val_ece: ece,
        });
        if !loss_total.is_finite() {
            return Err(PuError::Numeric(format!("non-finite loss at iteration {iteration}, epoch {epoch}")));
        }
        if config.training.patience > 0 {
            if score > best_in_iteration {
                best_in_iteration = score;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.training.patience {
                    break;
                }
            }
        }
    }
    Ok(records)
}

/// Take the `max_new` candidates with the lowest uncertainty (ties broken by
/// index) and keep those with uncertainty `≤ t_low`. Returned in rank order.
/// `t_low = 0` switches selection off, like `max_new = 0`.
pub fn rank_and_select(candidates: &[usize], uncertainty: &[f64], max_new: MaxLabels, t_low: f64) -> Vec<usize> {
    if t_low <= 0.0 {
        return Vec::new();
    }
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    ranked.truncate(max_new.limit());
    ranked.retain(|&i| uncertainty[i] <= t_low);
    ranked
}

/// Target ratio of new positives to new negatives, if any.
pub fn balance_ratio(mode: BalanceMode, target_ratio: f64, prior: f64) -> Option<f64> {
    match mode {
        BalanceMode::Equal => Some(target_ratio),
        BalanceMode::PriorRatio => Some(prior / (1.0 - prior)),
        BalanceMode::None => None,
    }
}

/// Split `selected` into predicted positives (`p ≥ 0.5`) and negatives and
/// drop the most uncertain members of the larger side until
/// `|L⁺| / |L⁻|` is as close to `ratio` as whole counts allow. With
/// `ratio = None` the selection is returned unchanged. Output is sorted by
/// index.
pub fn balance(selected: &[usize], p_mean: &[f64], uncertainty: &[f64], ratio: Option<f64>) -> Vec<usize> {
    let Some(ratio) = ratio else {
        let mut out = selected.to_vec();
        out.sort_unstable();
        return out;
    };
    let key = |a: &usize, b: &usize| uncertainty[*a].total_cmp(&uncertainty[*b]).then(a.cmp(b));
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = selected.iter().partition(|&&i| p_mean[i] >= 0.5);
    pos.sort_by(key);
    neg.sort_by(key);
    let (keep_pos, keep_neg) = balanced_counts(pos.len(), neg.len(), ratio);
    pos.truncate(keep_pos);
    neg.truncate(keep_neg);
    let mut out = pos;
    out.extend(neg);
    out.sort_unstable();
    out
}

/// Counts to keep from `n_pos` positives and `n_neg` negatives for a target
/// ratio `ratio = positives / negatives`.
pub fn balanced_counts(n_pos: usize, n_neg: usize, ratio: f64) -> (usize, usize) {
    let keep_pos = n_pos.min((n_neg as f64 * ratio).round() as usize);
    let keep_neg = n_neg.min((n_pos as f64 / ratio).round() as usize);
    (keep_pos, keep_neg)
}

/// Stored value of a pseudo-label for mean prediction `p`.
pub fn pseudo_label_value(p: f64, soft: bool) -> f64 {
    if soft {
        p.clamp(LABEL_CLAMP, 1.0 - LABEL_CLAMP)
    } else if p >= 0.5 {
        1.0 - LABEL_CLAMP
    } else {
        LABEL_CLAMP
    }
}

/// Move `new` (all currently unlabeled) into L with labels from `p_mean`.
/// With `reassign_all`, labels already in L are recomputed too; otherwise
/// they stay as first assigned.
pub fn assign_pseudo_labels(
    dataset: &PuDataset,
    new: &[usize],
    p_mean: &[f64],
    soft: bool,
    reassign_all: bool,
) -> Result<PuDataset> {
    if p_mean.len() != dataset.len() {
        return Err(PuError::Shape(format!("{} predictions for {} samples", p_mean.len(), dataset.len())));
    }
    let mut labels = dataset.labels().to_vec();
    let mut membership = dataset.membership().to_vec();
    if reassign_all {
        for i in 0..labels.len() {
            if membership[i] == Membership::PseudoLabeled {
                labels[i] = pseudo_label_value(p_mean[i], soft);
            }
        }
    }
    for &i in new {
        if membership[i] != Membership::Unlabeled {
            return Err(PuError::Usage(format!("sample {i} is {:?}, not unlabeled", membership[i])));
        }
        membership[i] = Membership::PseudoLabeled;
        labels[i] = pseudo_label_value(p_mean[i], soft);
    }
    dataset.revise(labels, membership)
}

/// Move every pseudo-labeled sample with epistemic uncertainty `≥ t_high`
/// back into U with label 0. Returns the new revision and the moved indices.
pub fn pseudo_unlabel(dataset: &PuDataset, epistemic: &[f64], t_high: f64) -> Result<(PuDataset, Vec<usize>)> {
    if epistemic.len() != dataset.len() {
        return Err(PuError::Shape(format!("{} uncertainties for {} samples", epistemic.len(), dataset.len())));
    }
    let moved: Vec<usize> = dataset
        .indices(Membership::PseudoLabeled)
        .into_iter()
        .filter(|&i| epistemic[i] >= t_high)
        .collect();
    let mut labels = dataset.labels().to_vec();
    let mut membership = dataset.membership().to_vec();
    for &i in &moved {
        membership[i] = Membership::Unlabeled;
        labels[i] = 0.0;
    }
    Ok((dataset.revise(labels, membership)?, moved))
}

/// Score used for selection: lower means more trustworthy.
fn selection_scores(method: Method, kind: UncertaintyKind, report: &UncertaintyReport) -> Vec<f64> {
    match method {
        Method::NaivePl => report.p_mean.iter().map(|&p| 0.5 - (p - 0.5).abs()).collect(),
        _ => report.values(kind).to_vec(),
    }
}

/// Mutable state of a run between iterations; enough to resume exactly.
#[derive(Debug, Clone)]
pub struct RunState {
    /// Index of the next iteration to execute.
    pub next_iteration: usize,
    pub dataset: PuDataset,
    pub ensemble: Ensemble,
    pub log: RunLog,
    /// Iterations since the validation score last improved.
    pub stale_iterations: usize,
    pub finished: bool,
}

impl RunState {
    pub fn new(train: &PuDataset, config: &EngineConfig, seeds: &SeedTree) -> Result<Self> {
        let sizes = config.network.layer_sizes(train.features().ncols());
        let ensemble = Ensemble::new(config.n_members(), &sizes, config.network.dropout, |k| {
            seeds.seed(Stream::Init, &[0, k as u64])
        })?;
        Ok(RunState {
            next_iteration: 0,
            dataset: train.clone(),
            ensemble,
            log: RunLog::default(),
            stale_iterations: 0,
            finished: false,
        })
    }

    pub fn best_score(&self) -> f64 {
        self.ensemble.best().map_or(f64::NEG_INFINITY, |b| b.score)
    }

    /// Parameters that must be persisted alongside the serializable fields.
    pub fn parameter_sets(&self) -> (Vec<ParamSnapshot>, Vec<ParamSnapshot>, Option<BestSnapshot>) {
        (
            self.ensemble.init_snapshot().to_vec(),
            self.ensemble.snapshot(),
            self.ensemble.best().cloned(),
        )
    }
}

/// Called after each finished iteration (e.g. to write a checkpoint).
pub trait RunObserver {
    fn iteration_finished(&mut self, _state: &RunState, _report: &UncertaintyReport) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl RunObserver for NoObserver {}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    /// Ensemble holding θ*.
    pub best: Ensemble,
    pub best_score: f64,
    pub final_dataset: PuDataset,
}

/// Run the full loop from scratch.
pub fn run(train: &PuDataset, val: &PuDataset, config: &EngineConfig, seed: u64) -> Result<RunOutcome> {
    let seeds = SeedTree::new(seed);
    let state = RunState::new(train, config, &seeds)?;
    resume(state, val, config, &seeds, &mut NoObserver)
}

/// Continue a run from `state` until it converges.
pub fn resume(
    mut state: RunState,
    val: &PuDataset,
    config: &EngineConfig,
    seeds: &SeedTree,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    config.validate()?;
    if state.dataset.count(Membership::Positive) == 0 {
        return Err(PuError::config("dataset.n_labeled_positives", "training set has no labeled positives"));
    }
    let pl = &config.puupl;
    let max_iterations = if pl.method == Method::Nnpu { 1 } else { pl.max_iterations };

    while !state.finished && state.next_iteration < max_iterations {
        let it = state.next_iteration;
        if it > 0 {
            match pl.reinit {
                ReinitMode::SameWeights => state.ensemble.restore_init()?,
                ReinitMode::Fresh => {
                    let sizes = config.network.layer_sizes(state.dataset.features().ncols());
                    let fresh = Ensemble::new(config.n_members(), &sizes, config.network.dropout, |k| {
                        seeds.seed(Stream::Init, &[it as u64, k as u64])
                    })?;
                    state.ensemble.restore(&fresh.snapshot())?;
                }
                ReinitMode::None => {}
            }
        }
        let best_before = state.best_score();
        let records = train_inner(&mut state.ensemble, &state.dataset, val, config, seeds, it)?;
        let iteration_best = records.iter().map(|r| r.val_score).fold(f64::NEG_INFINITY, f64::max);
        state.log.epochs.extend(records);

        if state.best_score() > best_before {
            state.stale_iterations = 0;
        } else {
            state.stale_iterations += 1;
        }
        let last_allowed = it + 1 >= max_iterations;
        let out_of_patience = pl.patience > 0 && state.stale_iterations >= pl.patience;

        let x = state.dataset.features();
        let logits = state.ensemble.member_logits(
            x.view(),
            pl.estimator,
            config.passes(),
            seeds.seed(Stream::Dropout, &[it as u64, u64::MAX]),
        )?;
        let report = decompose_logits(logits.view())?;
        let (val_end, _, _) = validation_score(&state.ensemble, val, config.eval.criterion)?;

        let mut outcome = IterationOutcome {
            iteration: it,
            n_selected: 0,
            n_newly_labeled: 0,
            n_newly_positive: 0,
            n_newly_negative: 0,
            n_unlabeled_back: 0,
            val_score_end: val_end,
            val_score_iteration_best: iteration_best,
            val_score_best: state.best_score(),
            pl_accuracy_new: None,
            pl_accuracy_all: None,
            pl_nll: None,
            size_p: 0,
            size_u: 0,
            size_l: 0,
        };

        let mut changed = false;
        if pl.method != Method::Nnpu && !last_allowed && !out_of_patience {
            let scores = selection_scores(pl.method, pl.uncertainty, &report);
            let unlabeled = state.dataset.indices(Membership::Unlabeled);
            let t_low = if pl.method == Method::NaivePl { f64::INFINITY } else { pl.t_low };
            let selected = rank_and_select(&unlabeled, &scores, pl.max_new_labels, t_low);
            let ratio = balance_ratio(pl.balance, pl.target_ratio, pl.prior);
            let new = balance(&selected, &report.p_mean, &scores, ratio);

            let (after_unlabel, moved) = if pl.method == Method::Puupl {
                pseudo_unlabel(&state.dataset, &report.epistemic, pl.t_high)?
            } else {
                (state.dataset.clone(), Vec::new())
            };
            debug_assert!(new.iter().all(|i| moved.binary_search(i).is_err()));
            let next = assign_pseudo_labels(&after_unlabel, &new, &report.p_mean, pl.soft_labels, pl.reassign_all)?;

            outcome.n_selected = selected.len();
            outcome.n_newly_labeled = new.len();
            outcome.n_newly_positive = new.iter().filter(|&&i| report.p_mean[i] >= 0.5).count();
            outcome.n_newly_negative = new.len() - outcome.n_newly_positive;
            outcome.n_unlabeled_back = moved.len();
            if let Some(truth) = next.evaluation_truth() {
                let hits = |idx: &[usize]| -> Option<f64> {
                    (!idx.is_empty()).then(|| {
                        idx.iter()
                            .filter(|&&i| u8::from(next.labels()[i] >= 0.5) == truth[i])
                            .count() as f64
                            / idx.len() as f64
                    })
                };
                let all_l = next.indices(Membership::PseudoLabeled);
                outcome.pl_accuracy_new = hits(&new);
                outcome.pl_accuracy_all = hits(&all_l);
                if !all_l.is_empty() {
                    let preds: Vec<f64> = all_l.iter().map(|&i| next.labels()[i]).collect();
                    let ys: Vec<f64> = all_l.iter().map(|&i| f64::from(truth[i])).collect();
                    outcome.pl_nll = Some(metrics::nll(&preds, &ys)?);
                }
            }
            changed = !new.is_empty() || !moved.is_empty() || pl.reassign_all;
            state.dataset = next;
        }
        outcome.size_p = state.dataset.count(Membership::Positive);
        outcome.size_u = state.dataset.count(Membership::Unlabeled);
        outcome.size_l = state.dataset.count(Membership::PseudoLabeled);
        state.log.iterations.push(outcome);
        state.next_iteration = it + 1;
        state.finished = last_allowed || out_of_patience || !changed;
        observer.iteration_finished(&state, &report)?;
    }

    let best = state.ensemble.with_best()?;
    Ok(RunOutcome {
        best_score: state.best_score(),
        log: state.log,
        best,
        final_dataset: state.dataset,
    })
}

/// Evaluate an ensemble on labeled data.
pub fn evaluate(ensemble: &Ensemble, features: ArrayView2<f64>, truth: &[u8], bins: usize) -> Result<EvalReport> {
    let probs = ensemble.predict_proba(features)?;
    metrics::evaluate(&probs, truth, None, bins)
}

/// Per-prior validation scores from a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSearch {
    pub best_prior: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Train one plain PU model per prior in `grid` and pick the prior whose θ*
/// has the highest validation PU-AUC (first wins on ties).
pub fn prior_grid_search(train: &PuDataset, val: &PuDataset, config: &EngineConfig, grid: &[f64], seed: u64) -> Result<PriorSearch> {
    if grid.is_empty() {
        return Err(PuError::config("prior_grid", "grid must not be empty"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &prior in grid {
        let mut cfg = config.clone();
        cfg.puupl.prior = prior;
        cfg.puupl.method = Method::Nnpu;
        cfg.eval.criterion = Criterion::PuAuc;
        let outcome = run(train, val, &cfg, seed)?;
        scores.push((prior, outcome.best_score));
    }
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(PriorSearch {
        best_prior: best.0,
        scores,
    })
}
