//! Run configuration, multi-seed experiments, sweeps and artifacts.
//!
//! A run directory looks like
//!
//! ```text
//! <output_dir>/
//!   config.json          resolved configuration
//!   summary.json         mean ± standard error over seeds
//!   plots/*.csv          two-column series, one file per panel
//!   seed-<s>/
//!     epochs.csv         one row per epoch
//!     iterations.jsonl   one line per pseudo-labeling iteration
//!     test_metrics.json
//!     theta_star.bin     best parameters, loadable by `eval`
//!     checkpoint.json    resume state after the last finished iteration
//!     checkpoint.bin
//!     uncertainty/iteration-<i>.csv   (optional)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    binarize, load_csv, load_idx, make_gaussians, split, standardize, BiasSpec, BinaryDataset, LabeledDataset,
    Membership, PuDataset, SplitSpec, Standardizer,
};
use crate::engine::{self, EngineConfig, EvalConfig, NetworkConfig, NoObserver, PuuplConfig, RunObserver, RunState, TrainingConfig};
use crate::error::{PuError, Result};
use crate::metrics::{self, EvalReport};
use crate::network::{read_snapshots, write_snapshots, ParamSnapshot};
use crate::rng::{SeedTree, Stream};
use crate::runlog::{write_file, RunLog};
use crate::uncertainty::{BestSnapshot, Ensemble, UncertaintyReport};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "PUUPL_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Gaussians,
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// PU validation with the training label ratio.
    #[default]
    Matched,
    /// Fully labeled validation.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Training samples after the validation split; all available when unset
    /// (required for `gaussians`).
    pub n_train: Option<usize>,
    pub n_labeled_positives: usize,
    pub validation_size: usize,
    #[serde(default)]
    pub validation: ValidationMode,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Original class ids that form the positive class (`idx`, `csv`).
    #[serde(default)]
    pub positive_classes: Vec<u32>,
    /// Sampling weight per original class for biased labeling; uniform when
    /// absent.
    pub bias: Option<BTreeMap<String, f64>>,

    // gaussians
    pub n_test: Option<usize>,
    pub prior: Option<f64>,
    pub separation: Option<f64>,
    pub dim: Option<usize>,

    // idx
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,

    // csv
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// When non-empty, π is chosen per seed from this grid by validation
    /// PU-AUC before the main run.
    #[serde(default)]
    pub prior_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub optimizer: TrainingConfig,
    #[serde(default)]
    pub puupl: PuuplConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub search: SearchConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            network: self.network.clone(),
            training: self.optimizer.clone(),
            puupl: self.puupl.clone(),
            eval: self.eval.clone(),
        }
    }

    /// Every check that needs no data.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PuError::config("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(PuError::config("seeds", "seeds must be distinct"));
        }
        self.engine().validate()?;
        self.validate_dataset()?;
        if self.eval.criterion == engine::Criterion::Accuracy && self.dataset.validation == ValidationMode::Matched {
            return Err(PuError::config(
                "eval.criterion",
                "accuracy needs `dataset.validation = \"labeled\"`",
            ));
        }
        for (i, &p) in self.search.prior_grid.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(PuError::config(format!("search.prior_grid[{i}]"), format!("must lie in (0,1), got {p}")));
            }
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        if d.validation_size == 0 {
            return Err(PuError::config("dataset.validation_size", "must be positive"));
        }
        if d.n_labeled_positives == 0 {
            return Err(PuError::config("dataset.n_labeled_positives", "must be positive"));
        }
        if d.n_train == Some(0) {
            return Err(PuError::config("dataset.n_train", "must be positive"));
        }
        let require = |value: &Option<PathBuf>, key: &str| -> Result<()> {
            match value {
                None => Err(PuError::config(format!("dataset.{key}"), format!("required for source {:?}", d.source))),
                Some(p) if !p.exists() => {
                    Err(PuError::config(format!("dataset.{key}"), format!("{} does not exist", p.display())))
                }
                Some(_) => Ok(()),
            }
        };
        let forbid = |present: bool, key: &str| -> Result<()> {
            if present {
                Err(PuError::config(format!("dataset.{key}"), format!("not used by source {:?}", d.source)))
            } else {
                Ok(())
            }
        };
        match d.source {
            DataSource::Gaussians => {
                if d.n_train.is_none() {
                    return Err(PuError::config("dataset.n_train", "required for source Gaussians"));
                }
                if let Some(p) = d.prior {
                    if !(p > 0.0 && p < 1.0) {
                        return Err(PuError::config("dataset.prior", format!("must lie in (0,1), got {p}")));
                    }
                }
                if let Some(s) = d.separation {
                    if !(s >= 0.0 && s.is_finite()) {
                        return Err(PuError::config("dataset.separation", "must be finite and non-negative"));
                    }
                }
                if d.dim == Some(0) {
                    return Err(PuError::config("dataset.dim", "must be positive"));
                }
                if d.n_test == Some(0) {
                    return Err(PuError::config("dataset.n_test", "must be positive"));
                }
                forbid(!d.positive_classes.is_empty(), "positive_classes")?;
                forbid(d.train_images.is_some() || d.train_csv.is_some(), "train_images")?;
            }
            DataSource::Idx => {
                require(&d.train_images, "train_images")?;
                require(&d.train_labels, "train_labels")?;
                require(&d.test_images, "test_images")?;
                require(&d.test_labels, "test_labels")?;
                forbid(d.train_csv.is_some() || d.test_csv.is_some(), "train_csv")?;
            }
            DataSource::Csv => {
                require(&d.train_csv, "train_csv")?;
                require(&d.test_csv, "test_csv")?;
                forbid(d.train_images.is_some() || d.test_images.is_some(), "train_images")?;
            }
        }
        if d.source != DataSource::Gaussians {
            if d.positive_classes.is_empty() {
                return Err(PuError::config("dataset.positive_classes", "list at least one class"));
            }
            for key in [("n_test", d.n_test.is_some()), ("prior", d.prior.is_some()), ("separation", d.separation.is_some()), ("dim", d.dim.is_some())] {
                forbid(key.1, key.0)?;
            }
        }
        if let Some(w) = &d.bias {
            bias_weights(w)?;
        }
        Ok(())
    }

    /// Output directory after applying the output-root environment variable.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn bias_weights(raw: &BTreeMap<String, f64>) -> Result<BTreeMap<u32, f64>> {
    let mut out = BTreeMap::new();
    for (k, &w) in raw {
        let key = format!("dataset.bias.{k}");
        let id: u32 = k.parse().map_err(|_| PuError::config(&key, "class ids must be non-negative integers"))?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(PuError::config(&key, format!("weight must be finite and non-negative, got {w}")));
        }
        out.insert(id, w);
    }
    if !out.values().any(|&w| w > 0.0) {
        return Err(PuError::config("dataset.bias", "at least one weight must be positive"));
    }
    Ok(out)
}

/// Parse a TOML document; relative data paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| PuError::config("config", e.message().to_string()))?;
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        PuError::config(if key == "." { "config".into() } else { key }, e.inner().message().to_string())
    })?;
    let d = &mut cfg.dataset;
    for p in [
        &mut d.train_images,
        &mut d.train_labels,
        &mut d.test_images,
        &mut d.test_labels,
        &mut d.train_csv,
        &mut d.test_csv,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PuError::io(path, e))?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Data for one seed, standardized and split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: PuDataset,
    pub validation: PuDataset,
    pub test: BinaryDataset,
    pub standardizer: Option<Standardizer>,
    /// Fraction of positives in the training pool (evaluation only).
    pub true_prior: f64,
}

/// Raw files loaded once and shared by every seed.
#[derive(Debug, Clone)]
pub struct LoadedData {
    train: Option<BinaryDataset>,
    test: Option<BinaryDataset>,
}

pub fn load_data(cfg: &DatasetConfig) -> Result<LoadedData> {
    let (train, test): (Option<LabeledDataset>, Option<LabeledDataset>) = match cfg.source {
        DataSource::Gaussians => (None, None),
        DataSource::Idx => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| PuError::config(format!("dataset.{key}"), "missing"))
            };
            (
                Some(load_idx(need(&cfg.train_images, "train_images")?, need(&cfg.train_labels, "train_labels")?)?),
                Some(load_idx(need(&cfg.test_images, "test_images")?, need(&cfg.test_labels, "test_labels")?)?),
            )
        }
        DataSource::Csv => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| PuError::config(format!("dataset.{key}"), "missing"))
            };
            (Some(load_csv(need(&cfg.train_csv, "train_csv")?)?), Some(load_csv(need(&cfg.test_csv, "test_csv")?)?))
        }
    };
    let train = train.map(|d| binarize(&d, &cfg.positive_classes)).transpose()?;
    let test = test.map(|d| binarize(&d, &cfg.positive_classes)).transpose()?;
    if let (Some(a), Some(b)) = (&train, &test) {
        if a.n_features() != b.n_features() {
            return Err(PuError::Shape(format!(
                "train has {} features, test has {}",
                a.n_features(),
                b.n_features()
            )));
        }
    }
    Ok(LoadedData { train, test })
}

/// Build train/validation/test for one seed.
pub fn prepare(cfg: &DatasetConfig, loaded: &LoadedData, seed: u64) -> Result<PreparedData> {
    let seeds = SeedTree::new(seed);
    let (pool, mut test) = match cfg.source {
        DataSource::Gaussians => {
            let n_train = cfg.n_train.ok_or_else(|| PuError::config("dataset.n_train", "required"))?;
            let prior = cfg.prior.unwrap_or(0.5);
            let sep = cfg.separation.unwrap_or(4.0);
            let dim = cfg.dim.unwrap_or(2);
            (
                make_gaussians(n_train + cfg.validation_size, prior, sep, dim, seeds.seed(Stream::Data, &[0]))?,
                make_gaussians(cfg.n_test.unwrap_or(10_000), prior, sep, dim, seeds.seed(Stream::Data, &[1]))?,
            )
        }
        _ => {
            let full = loaded.train.as_ref().ok_or_else(|| PuError::Usage("training data not loaded".into()))?;
            let test = loaded.test.clone().ok_or_else(|| PuError::Usage("test data not loaded".into()))?;
            let pool = match cfg.n_train {
                Some(n) => {
                    let want = n + cfg.validation_size;
                    if want > full.len() {
                        return Err(PuError::config(
                            "dataset.n_train",
                            format!("{n} + {} validation exceeds the {} available samples", cfg.validation_size, full.len()),
                        ));
                    }
                    full.subsample(want, seeds.seed(Stream::Sampling, &[0]))?
                }
                None => full.clone(),
            };
            (pool, test)
        }
    };
    let bias = match &cfg.bias {
        Some(w) => Some(BiasSpec::new(pool.groups.clone(), bias_weights(w)?)?),
        None => None,
    };
    let spec = SplitSpec {
        validation_size: cfg.validation_size,
        labeled_fraction_matched: cfg.validation == ValidationMode::Matched,
        seed: seeds.seed(Stream::Split, &[0]),
    };
    let (train, validation) = split(&pool, cfg.n_labeled_positives, bias.as_ref(), &spec)?;
    let true_prior = train
        .evaluation_truth()
        .map(|t| t.iter().filter(|&&y| y == 1).count() as f64 / t.len() as f64)
        .unwrap_or(f64::NAN);
    if !cfg.standardize {
        return Ok(PreparedData {
            train,
            validation,
            test,
            standardizer: None,
            true_prior,
        });
    }
    let mut xtr = train.features().clone();
    let mut xva = validation.features().clone();
    let s = standardize(&mut xtr, &mut [&mut xva, &mut test.features])?;
    Ok(PreparedData {
        train: train.with_features(xtr)?,
        validation: validation.with_features(xva)?,
        test,
        standardizer: Some(s),
        true_prior,
    })
}

/// Serializable part of [`RunState`]; parameters go to a side file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    config: serde_json::Value,
    seed: u64,
    prior: f64,
    next_iteration: usize,
    stale_iterations: usize,
    finished: bool,
    labels: Vec<f64>,
    membership: Vec<Membership>,
    best_score: Option<f64>,
    log: RunLog,
}

struct Checkpointer<'a> {
    dir: &'a Path,
    config: serde_json::Value,
    seed: u64,
    prior: f64,
    dump_uncertainty: bool,
    extra: &'a mut dyn RunObserver,
}

impl RunObserver for Checkpointer<'_> {
    fn iteration_finished(&mut self, state: &RunState, report: &UncertaintyReport) -> Result<()> {
        if self.dump_uncertainty {
            let dir = self.dir.join("uncertainty");
            create_dir(&dir)?;
            report.write_csv(dir.join(format!("iteration-{}.csv", state.next_iteration - 1)))?;
        }
        save_checkpoint(self, state)?;
        self.extra.iteration_finished(state, report)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PuError::io(dir, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| PuError::io(path, e))
}

fn save_checkpoint(c: &Checkpointer<'_>, state: &RunState) -> Result<()> {
    let (init, current, best) = state.parameter_sets();
    let k = init.len();
    let mut all = init;
    all.extend(current);
    let best_score = best.as_ref().map(|b| b.score);
    if let Some(b) = best {
        all.extend(b.members);
    }
    let bin = c.dir.join("checkpoint.bin");
    let tmp = bin.with_extension("tmp");
    write_snapshots(&tmp, &all, serde_json::json!({ "members": k }))?;
    std::fs::rename(&tmp, &bin).map_err(|e| PuError::io(&bin, e))?;
    let ck = Checkpoint {
        config: c.config.clone(),
        seed: c.seed,
        prior: c.prior,
        next_iteration: state.next_iteration,
        stale_iterations: state.stale_iterations,
        finished: state.finished,
        labels: state.dataset.labels().to_vec(),
        membership: state.dataset.membership().to_vec(),
        best_score,
        log: state.log.clone(),
    };
    let json = serde_json::to_vec(&ck).map_err(|e| PuError::Numeric(format!("checkpoint encoding: {e}")))?;
    write_atomic(&c.dir.join("checkpoint.json"), &json)
}

/// Load a checkpoint written for the same configuration and seed.
fn load_checkpoint(dir: &Path, config: &serde_json::Value, seed: u64, train: &PuDataset) -> Result<Option<(RunState, f64)>> {
    let json_path = dir.join("checkpoint.json");
    let bin_path = dir.join("checkpoint.bin");
    if !json_path.exists() || !bin_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read(&json_path).map_err(|e| PuError::io(&json_path, e))?;
    let Ok(ck) = serde_json::from_slice::<Checkpoint>(&text) else {
        return Ok(None);
    };
    if &ck.config != config || ck.seed != seed {
        return Ok(None);
    }
    let (snaps, meta) = read_snapshots(&bin_path)?;
    let k = meta["members"].as_u64().unwrap_or(0) as usize;
    let has_best = ck.best_score.is_some();
    if k == 0 || snaps.len() != k * (2 + usize::from(has_best)) {
        return Ok(None);
    }
    let mut ensemble = Ensemble::from_snapshots(&snaps[k..2 * k])?;
    ensemble.set_init(snaps[..k].to_vec());
    ensemble.set_best(ck.best_score.map(|score| BestSnapshot {
        members: snaps[2 * k..].to_vec(),
        score,
    }));
    let dataset = train.revise(ck.labels, ck.membership)?;
    Ok(Some((
        RunState {
            next_iteration: ck.next_iteration,
            dataset,
            ensemble,
            log: ck.log,
            stale_iterations: ck.stale_iterations,
            finished: ck.finished,
        },
        ck.prior,
    )))
}

/// Result of one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub prior: f64,
    pub validation_score: f64,
    pub test: EvalReport,
}

/// Metadata stored in `theta_star.bin` so `eval` can rebuild the input
/// pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotMetadata {
    pub positive_classes: Vec<u32>,
    pub standardizer: Option<Standardizer>,
    pub seed: u64,
    pub prior: f64,
    pub validation_score: f64,
}

/// Train one seed, resuming from a checkpoint in `dir` when present.
pub fn run_seed(cfg: &RunConfig, data: &PreparedData, seed: u64, dir: &Path) -> Result<(SeedResult, RunLog)> {
    run_seed_observed(cfg, data, seed, dir, &mut NoObserver)
}

/// [`run_seed`] with an observer called after each iteration's checkpoint is
/// written. An error from the observer stops the run, leaving the checkpoint.
pub fn run_seed_observed(
    cfg: &RunConfig,
    data: &PreparedData,
    seed: u64,
    dir: &Path,
    extra: &mut dyn RunObserver,
) -> Result<(SeedResult, RunLog)> {
    create_dir(dir)?;
    let mut engine_cfg = cfg.engine();
    let config_json = serde_json::to_value(cfg).map_err(|e| PuError::Numeric(format!("config encoding: {e}")))?;
    let seeds = SeedTree::new(seed);

    let (state, prior) = match load_checkpoint(dir, &config_json, seed, &data.train)? {
        Some(found) => found,
        None => {
            let prior = if cfg.search.prior_grid.is_empty() {
                cfg.puupl.prior
            } else {
                let search = engine::prior_grid_search(&data.train, &data.validation, &engine_cfg, &cfg.search.prior_grid, seed)?;
                let mut table = String::from("prior,val_pu_auc\n");
                for (p, s) in &search.scores {
                    writeln!(table, "{p},{s}").expect("writing to a String");
                }
                write_file(&dir.join("prior_search.csv"), table.as_bytes())?;
                search.best_prior
            };
            (RunState::new(&data.train, &engine_cfg, &seeds)?, prior)
        }
    };
    engine_cfg.puupl.prior = prior;
    let mut observer = Checkpointer {
        dir,
        config: config_json,
        seed,
        prior,
        dump_uncertainty: cfg.eval.dump_uncertainty,
        extra,
    };
    let outcome = engine::resume(state, &data.validation, &engine_cfg, &seeds, &mut observer)?;

    let probs = outcome.best.predict_proba(data.test.features.view())?;
    let mut test = metrics::evaluate(&probs, &data.test.targets, None, cfg.eval.bins)?;
    test.pl_nll = pl_nll(&outcome.final_dataset)?;

    outcome.log.write_epoch_csv(dir.join("epochs.csv"))?;
    outcome.log.write_iterations_jsonl(dir.join("iterations.jsonl"))?;
    let positive_classes = match cfg.dataset.source {
        DataSource::Gaussians => vec![1],
        _ => cfg.dataset.positive_classes.clone(),
    };
    let meta = SnapshotMetadata {
        positive_classes,
        standardizer: data.standardizer,
        seed,
        prior,
        validation_score: outcome.best_score,
    };
    let meta = serde_json::to_value(&meta).map_err(|e| PuError::Numeric(format!("metadata encoding: {e}")))?;
    write_snapshots(dir.join("theta_star.bin"), &outcome.best.snapshot(), meta)?;
    let result = SeedResult {
        seed,
        prior,
        validation_score: outcome.best_score,
        test,
    };
    write_json(&dir.join("test_metrics.json"), &result)?;
    Ok((result, outcome.log))
}

fn pl_nll(ds: &PuDataset) -> Result<Option<f64>> {
    let Some(truth) = ds.evaluation_truth() else {
        return Ok(None);
    };
    let idx = ds.indices(Membership::PseudoLabeled);
    if idx.is_empty() {
        return Ok(None);
    }
    let preds: Vec<f64> = idx.iter().map(|&i| ds.labels()[i]).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| f64::from(truth[i])).collect();
    metrics::nll(&preds, &ys).map(Some)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PuError::Numeric(format!("json encoding: {e}")))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Mean and standard error (sample standard deviation over √n; 0 for n = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

pub fn mean_stderr(values: &[f64]) -> MeanStderr {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStderr {
            mean: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return MeanStderr { mean, stderr: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    MeanStderr {
        mean,
        stderr: (var / n).sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub accuracy: MeanStderr,
    pub ece: MeanStderr,
    pub nll: MeanStderr,
    pub auc: MeanStderr,
    /// Over the seeds that ended with a non-empty pseudo-labeled set.
    pub pl_nll: Option<MeanStderr>,
    pub runs: Vec<SeedResult>,
}

impl Summary {
    pub fn from_runs(runs: Vec<SeedResult>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| mean_stderr(&runs.iter().map(f).collect::<Vec<_>>());
        let pl: Vec<f64> = runs.iter().filter_map(|r| r.test.pl_nll).collect();
        Summary {
            seeds: runs.iter().map(|r| r.seed).collect(),
            accuracy: col(|r| r.test.accuracy),
            ece: col(|r| r.test.ece),
            nll: col(|r| r.test.nll),
            auc: col(|r| r.test.pu_auc),
            pl_nll: (!pl.is_empty()).then(|| mean_stderr(&pl)),
            runs,
        }
    }
}

fn two_column(header: (&str, &str), rows: impl IntoIterator<Item = (String, String)>) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (a, b) in rows {
        writeln!(out, "{a},{b}").expect("writing to a String");
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_plots(dir: &Path, seed: u64, log: &RunLog) -> Result<()> {
    create_dir(dir)?;
    let files = [
        (
            format!("val_score_seed-{seed}.csv"),
            two_column(
                ("epoch", "val_score"),
                log.epochs.iter().enumerate().map(|(i, e)| (i.to_string(), e.val_score.to_string())),
            ),
        ),
        (
            format!("loss_seed-{seed}.csv"),
            two_column(
                ("epoch", "loss_total"),
                log.epochs.iter().enumerate().map(|(i, e)| (i.to_string(), e.loss_total.to_string())),
            ),
        ),
        (
            format!("pseudo_labeled_seed-{seed}.csv"),
            two_column(
                ("iteration", "size_l"),
                log.iterations.iter().map(|o| (o.iteration.to_string(), o.size_l.to_string())),
            ),
        ),
        (
            format!("pl_accuracy_seed-{seed}.csv"),
            two_column(
                ("iteration", "pl_accuracy"),
                log.iterations.iter().map(|o| (o.iteration.to_string(), opt(o.pl_accuracy_all))),
            ),
        ),
    ];
    for (name, body) in files {
        write_file(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}

/// Run every seed of `cfg` with up to `jobs` seeds in parallel and write the
/// aggregate. All data is prepared before any training starts.
pub fn run_experiment(cfg: &RunConfig, jobs: usize) -> Result<Summary> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    create_dir(&out)?;
    write_json(&out.join("config.json"), cfg)?;
    let loaded = load_data(&cfg.dataset)?;
    let prepared = cfg
        .seeds
        .iter()
        .map(|&s| prepare(&cfg.dataset, &loaded, s))
        .collect::<Result<Vec<_>>>()?;
    drop(loaded);

    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<(SeedResult, RunLog)>>> = (0..cfg.seeds.len()).map(|_| None).collect();
    for chunk in (0..cfg.seeds.len()).collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let seed = cfg.seeds[i];
                    let data = &prepared[i];
                    let dir = out.join(format!("seed-{seed}"));
                    (i, scope.spawn(move || run_seed(cfg, data, seed, &dir)))
                })
                .collect();
            for (i, h) in handles {
                results[i] = Some(h.join().unwrap_or_else(|_| Err(PuError::Numeric("worker panicked".into()))));
            }
        });
    }
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        let (res, log) = r.expect("every seed ran")?;
        write_plots(&out.join("plots"), res.seed, &log)?;
        runs.push(res);
    }
    let summary = Summary::from_runs(runs);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Parse a sweep value: integer, float, boolean, then string.
fn sweep_value(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    }
}

/// Copy of `doc` with the dotted key `param` set to `value`.
pub fn with_param(doc: &toml::Table, param: &str, value: &str) -> Result<toml::Table> {
    let mut doc = doc.clone();
    let parts: Vec<&str> = param.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PuError::config(param, "not a dotted key"));
    }
    let mut table = &mut doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| PuError::config(param, format!("`{part}` is not a table")))?;
    }
    let mut v = sweep_value(value);
    // Integers given for float keys stay valid: serde accepts both for f64.
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(parts[parts.len() - 1]), &v) {
        v = toml::Value::Float(*i as f64);
    }
    table.insert(parts[parts.len() - 1].to_string(), v);
    Ok(doc)
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub summary: Summary,
}

/// Run one experiment per value of `param` (a dotted key such as
/// `puupl.prior`). Every variant is validated before the first one runs.
pub fn sweep(config_path: &Path, param: &str, values: &[String], jobs: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(PuError::config("values", "sweep needs at least one value"));
    }
    let text = std::fs::read_to_string(config_path).map_err(|e| PuError::io(config_path, e))?;
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| PuError::config("config", e.message().to_string()))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let base_cfg = parse_config_str(&text, base)?;
    let root = base_cfg.output_dir.clone();
    let mut variants = Vec::with_capacity(values.len());
    for v in values {
        let doc = with_param(&doc, param, v)?;
        let text = toml::to_string(&doc).map_err(|e| PuError::config(param, e.to_string()))?;
        let mut cfg = parse_config_str(&text, base)?;
        cfg.output_dir = root.join(format!("{param}={v}"));
        variants.push((v.clone(), cfg));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (v, cfg) in variants {
        let summary = run_experiment(&cfg, jobs)?;
        rows.push(SweepRow { value: v, summary });
    }
    let out = base_cfg.resolved_output_dir();
    create_dir(&out)?;
    let mut table = String::from("value,accuracy_mean,accuracy_stderr,ece_mean,ece_stderr,nll_mean,nll_stderr\n");
    for r in &rows {
        let s = &r.summary;
        writeln!(
            table,
            "{},{},{},{},{},{},{}",
            r.value, s.accuracy.mean, s.accuracy.stderr, s.ece.mean, s.ece.stderr, s.nll.mean, s.nll.stderr
        )
        .expect("writing to a String");
    }
    write_file(&out.join(format!("sweep_{param}.csv")), table.as_bytes())?;
    let plots = out.join("plots");
    create_dir(&plots)?;
    for (metric, get) in [
        ("accuracy", (|s: &Summary| s.accuracy.mean) as fn(&Summary) -> f64),
        ("ece", |s: &Summary| s.ece.mean),
    ] {
        let body = two_column((param, metric), rows.iter().map(|r| (r.value.clone(), get(&r.summary).to_string())));
        write_file(&plots.join(format!("sweep_{param}_{metric}.csv")), body.as_bytes())?;
    }
    Ok(rows)
}

/// Evaluate a saved θ* on a labeled file: a CSV, or IDX images plus labels.
pub fn evaluate_snapshot(snapshot: &Path, data: &Path, labels: Option<&Path>, bins: usize) -> Result<EvalReport> {
    let (members, meta) = read_snapshots(snapshot)?;
    let meta: SnapshotMetadata = serde_json::from_value(meta)
        .map_err(|e| PuError::Format {
            path: snapshot.to_path_buf(),
            offset: 4,
            reason: format!("snapshot metadata: {e}"),
        })?;
    let raw = match labels {
        Some(l) => load_idx(data, l)?,
        None => load_csv(data)?,
    };
    let mut ds = binarize(&raw, &meta.positive_classes)?;
    if let Some(s) = &meta.standardizer {
        s.apply(&mut ds.features);
    }
    let ensemble = Ensemble::from_snapshots(&members)?;
    let expected = members[0].layer_sizes[0];
    if ds.n_features() != expected {
        return Err(PuError::Shape(format!("snapshot expects {expected} features, data has {}", ds.n_features())));
    }
    let probs = ensemble.predict_proba(ds.features.view())?;
    metrics::evaluate(&probs, &ds.targets, None, bins)
}

/// Snapshot members of a saved θ*.
pub fn load_theta_star(path: &Path) -> Result<(Vec<ParamSnapshot>, SnapshotMetadata)> {
    let (members, meta) = read_snapshots(path)?;
    let meta = serde_json::from_value(meta).map_err(|e| PuError::Format {
        path: path.to_path_buf(),
        offset: 4,
        reason: format!("snapshot metadata: {e}"),
    })?;
    Ok((members, meta))
}
