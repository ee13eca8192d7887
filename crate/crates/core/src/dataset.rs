//! Dataset construction, loading, normalization, splitting and PU-ification.
//!
//! Three levels of labeling exist:
//!
//! * [`LabeledDataset`] carries raw class ids (e.g. MNIST digits 0-9).
//! * [`BinaryDataset`] carries binary ground truth after [`binarize`], plus the
//!   original class id of each sample as its subgroup.
//! * [`PuDataset`] is what training sees: working labels and the P/U/L
//!   membership of each sample. Ground truth is kept but only reachable through
//!   [`PuDataset::evaluation_truth`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PuError, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Dense features with multi-class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub classes: Vec<u32>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }
}

/// Dense features with binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDataset {
    pub features: Array2<f64>,
    pub targets: Vec<u8>,
    /// Subgroup of each sample (the original class id), used for biased sampling.
    pub groups: Vec<u32>,
}

impl BinaryDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_positives(&self) -> usize {
        self.targets.iter().filter(|&&t| t == 1).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.n_positives() as f64 / self.len() as f64
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> BinaryDataset {
        BinaryDataset {
            features: self.features.select(Axis(0), indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
        }
    }

    /// Uniform random subset of `n` rows without replacement.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<BinaryDataset> {
        if n > self.len() {
            return Err(PuError::config(
                "dataset.subsample",
                format!("requested {n} samples from a dataset of {}", self.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        Ok(self.select(&idx))
    }
}

/// Two isotropic unit-variance Gaussians centred at `(±separation/2, 0, ..., 0)`.
///
/// Exactly `round(n * prior)` samples belong to class 1 (the `+` cluster), in
/// random order.
pub fn make_gaussians(
    n: usize,
    prior: f64,
    separation: f64,
    dim: usize,
    seed: u64,
) -> Result<BinaryDataset> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(PuError::config("prior", format!("must lie in (0,1), got {prior}")));
    }
    if n < 2 {
        return Err(PuError::config("n", format!("need at least 2 samples, got {n}")));
    }
    if dim < 1 {
        return Err(PuError::config("dim", "must be at least 1"));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(PuError::config("separation", "must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = ((n as f64) * prior).round() as usize;
    let mut targets: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    targets.shuffle(&mut rng);

    let mut features = Array2::<f64>::zeros((n, dim));
    for (mut row, &t) in features.outer_iter_mut().zip(&targets) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let shift = if t == 1 { separation / 2.0 } else { -separation / 2.0 };
        row[0] += shift;
    }
    let groups = targets.iter().map(|&t| u32::from(t)).collect();
    Ok(BinaryDataset {
        features,
        targets,
        groups,
    })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| PuError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| PuError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| PuError::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: "truncated header".into(),
        })
}

/// Load an IDX image/label pair (MNIST family). Either file may be gzipped.
///
/// Pixels are returned unscaled in `[0, 255]`, one flattened row per image.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;

    let format_err = |path: &Path, offset: usize, reason: String| PuError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let pixels = rows * cols;
    let expected = 16 + n_images * pixels;
    if images.len() < expected {
        return Err(format_err(
            images_path,
            images.len(),
            format!("truncated image data: expected {expected} bytes"),
        ));
    }

    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_labels != n_images {
        return Err(format_err(
            labels_path,
            4,
            format!("{n_labels} labels for {n_images} images"),
        ));
    }
    if labels.len() < 8 + n_labels {
        return Err(format_err(
            labels_path,
            labels.len(),
            format!("truncated label data: expected {} bytes", 8 + n_labels),
        ));
    }

    let data: Vec<f64> = images[16..expected].iter().map(|&p| f64::from(p)).collect();
    let features = Array2::from_shape_vec((n_images, pixels), data)
        .map_err(|e| PuError::Shape(e.to_string()))?;
    let classes = labels[8..8 + n_labels].iter().map(|&l| u32::from(l)).collect();
    Ok(LabeledDataset { features, classes })
}

/// Load tabular data from CSV with a header row `f0,...,fk,label`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let width = headers.len();
    if width < 2 || &headers[width - 1] != "label" {
        return Err(PuError::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "header must be f0,...,fk,label".into(),
        });
    }
    let n_features = width - 1;
    let mut data = Vec::new();
    let mut classes = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map_or(0, |p| p.byte());
        let bad = |reason: String| PuError::Format {
            path: path.to_path_buf(),
            offset,
            reason,
        };
        for field in record.iter().take(n_features) {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("feature `{field}`: {e}")))?,
            );
        }
        let label = record[n_features].trim();
        classes.push(
            label
                .parse::<u32>()
                .map_err(|e| bad(format!("label `{label}`: {e}")))?,
        );
    }
    let features = Array2::from_shape_vec((classes.len(), n_features), data)
        .map_err(|e| PuError::Shape(e.to_string()))?;
    Ok(LabeledDataset { features, classes })
}

fn csv_error(path: &Path, e: csv::Error) -> PuError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PuError::io(path, io),
        other => PuError::Format {
            path: path.to_path_buf(),
            offset,
            reason: format!("{other:?}"),
        },
    }
}

/// Map class ids onto binary targets: 1 for ids in `positive_class_ids`.
pub fn binarize(dataset: &LabeledDataset, positive_class_ids: &[u32]) -> Result<BinaryDataset> {
    if positive_class_ids.is_empty() {
        return Err(PuError::config("dataset.positive_classes", "must not be empty"));
    }
    for id in positive_class_ids {
        if !dataset.classes.contains(id) {
            return Err(PuError::config(
                "dataset.positive_classes",
                format!("class {id} does not occur in the data"),
            ));
        }
    }
    let targets = dataset
        .classes
        .iter()
        .map(|c| u8::from(positive_class_ids.contains(c)))
        .collect();
    Ok(BinaryDataset {
        features: dataset.features.clone(),
        targets,
        groups: dataset.classes.clone(),
    })
}

/// Where a training sample currently sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Membership {
    /// Originally labeled positive (P).
    Positive,
    /// Currently unlabeled (U).
    Unlabeled,
    /// Currently pseudo-labeled (L).
    PseudoLabeled,
}

/// Features plus the working labels and P/U/L partition seen by training.
///
/// Membership is stored per sample, so P, U and L are disjoint and cover every
/// index by construction. Revisions are produced with
/// [`PuDataset::revise`]; the feature matrix is shared between revisions.
#[derive(Debug, Clone)]
pub struct PuDataset {
    features: Arc<Array2<f64>>,
    labels: Vec<f64>,
    membership: Vec<Membership>,
    truth: Option<Vec<u8>>,
}

impl PuDataset {
    pub fn new(
        features: Arc<Array2<f64>>,
        labels: Vec<f64>,
        membership: Vec<Membership>,
        truth: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || membership.len() != n {
            return Err(PuError::Shape(format!(
                "{n} rows but {} labels and {} memberships",
                labels.len(),
                membership.len()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(PuError::Shape(format!("{n} rows but {} truth labels", t.len())));
            }
        }
        let ds = PuDataset {
            features,
            labels,
            membership,
            truth,
        };
        ds.check_labels()?;
        Ok(ds)
    }

    fn check_labels(&self) -> Result<()> {
        for (i, (&y, &m)) in self.labels.iter().zip(&self.membership).enumerate() {
            let ok = match m {
                Membership::Positive => y == 1.0,
                Membership::Unlabeled => y == 0.0,
                Membership::PseudoLabeled => (0.0..=1.0).contains(&y),
            };
            if !ok {
                return Err(PuError::Usage(format!(
                    "sample {i} in {m:?} carries label {y}"
                )));
            }
        }
        Ok(())
    }

    /// New revision sharing the features and hidden truth.
    pub fn revise(&self, labels: Vec<f64>, membership: Vec<Membership>) -> Result<Self> {
        PuDataset::new(self.features.clone(), labels, membership, self.truth.clone())
    }

    /// Same labels with transformed features (e.g. after standardization).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        PuDataset::new(Arc::new(features), self.labels.clone(), self.membership.clone(), self.truth.clone())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn shared_features(&self) -> Arc<Array2<f64>> {
        self.features.clone()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn membership(&self) -> &[Membership] {
        &self.membership
    }

    /// Ascending indices with the given membership.
    pub fn indices(&self, which: Membership) -> Vec<usize> {
        self.membership
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m == which).then_some(i))
            .collect()
    }

    pub fn count(&self, which: Membership) -> usize {
        self.membership.iter().filter(|&&m| m == which).count()
    }

    /// Hidden ground truth. Only metrics and reporting may call this; no
    /// training decision reads it.
    pub fn evaluation_truth(&self) -> Option<&[u8]> {
        self.truth.as_deref()
    }
}

/// Subgroup-weighted sampling of labeled positives (violates SCAR on purpose).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    pub subgroup_ids: Vec<u32>,
    pub sampling_weights: BTreeMap<u32, f64>,
}

impl BiasSpec {
    pub fn new(subgroup_ids: Vec<u32>, sampling_weights: BTreeMap<u32, f64>) -> Result<Self> {
        let spec = BiasSpec {
            subgroup_ids,
            sampling_weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_weights.is_empty() {
            return Err(PuError::config("dataset.bias", "no subgroup weights given"));
        }
        if self.sampling_weights.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(PuError::config("dataset.bias", "weights must be non-negative"));
        }
        let total: f64 = self.sampling_weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PuError::config(
                "dataset.bias",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> BiasSpec {
        BiasSpec {
            subgroup_ids: indices.iter().map(|&i| self.subgroup_ids[i]).collect(),
            sampling_weights: self.sampling_weights.clone(),
        }
    }
}

/// Hide all labels except `n_labeled_positives` true positives.
///
/// Without `bias` the labeled positives are a uniform sample of all positives.
/// With `bias`, each draw first picks a subgroup by its weight (renormalized
/// over subgroups that still have unlabeled positives) and then a uniform
/// positive from that subgroup.
pub fn pu_ify(
    dataset: &BinaryDataset,
    n_labeled_positives: usize,
    bias: Option<&BiasSpec>,
    seed: u64,
) -> Result<PuDataset> {
    let positives: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.targets[i] == 1).collect();
    if n_labeled_positives > positives.len() {
        return Err(PuError::config(
            "dataset.n_labeled_positives",
            format!(
                "{n_labeled_positives} requested but only {} positives exist",
                positives.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = match bias {
        None => {
            let mut pool = positives;
            pool.shuffle(&mut rng);
            pool.truncate(n_labeled_positives);
            pool
        }
        Some(spec) => {
            spec.validate()?;
            if spec.subgroup_ids.len() != dataset.len() {
                return Err(PuError::Shape(format!(
                    "bias spec covers {} samples, dataset has {}",
                    spec.subgroup_ids.len(),
                    dataset.len()
                )));
            }
            biased_draw(&positives, spec, n_labeled_positives, &mut rng)?
        }
    };

    let mut membership = vec![Membership::Unlabeled; dataset.len()];
    let mut labels = vec![0.0; dataset.len()];
    for &i in &chosen {
        membership[i] = Membership::Positive;
        labels[i] = 1.0;
    }
    PuDataset::new(
        Arc::new(dataset.features.clone()),
        labels,
        membership,
        Some(dataset.targets.clone()),
    )
}

fn biased_draw(
    positives: &[usize],
    spec: &BiasSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in positives {
        pools.entry(spec.subgroup_ids[i]).or_default().push(i);
    }
    for pool in pools.values_mut() {
        pool.shuffle(rng);
    }
    let mut chosen = Vec::with_capacity(n);
    while chosen.len() < n {
        let live: Vec<(u32, f64)> = spec
            .sampling_weights
            .iter()
            .filter(|(g, &w)| w > 0.0 && pools.get(g).is_some_and(|p| !p.is_empty()))
            .map(|(&g, &w)| (g, w))
            .collect();
        let total: f64 = live.iter().map(|(_, w)| w).sum();
        if live.is_empty() || total <= 0.0 {
            return Err(PuError::config(
                "dataset.bias",
                format!(
                    "weighted subgroups ran out of positives after {} of {n} draws",
                    chosen.len()
                ),
            ));
        }
        let mut u = rng.random::<f64>() * total;
        let mut group = live[live.len() - 1].0;
        for &(g, w) in &live {
            if u < w {
                group = g;
                break;
            }
            u -= w;
        }
        let pool = pools.get_mut(&group).expect("live subgroup has a pool");
        chosen.push(pool.pop().expect("live subgroup is non-empty"));
    }
    Ok(chosen)
}

/// Global affine normalization fitted on the training features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Mean and (population) standard deviation over every entry. A constant
    /// input gets std 1.
    pub fn fit(features: &Array2<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(PuError::config("dataset", "cannot standardize empty training data"));
        }
        let n = features.len() as f64;
        let mean = features.sum() / n;
        let var = features.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let std = if std > 1e-12 && std.is_finite() { std } else { 1.0 };
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, features: &mut Array2<f64>) {
        features.mapv_inplace(|x| (x - self.mean) / self.std);
    }
}

/// Fit on `train`, then normalize `train` and every dataset in `others` with
/// the same map.
pub fn standardize(train: &mut Array2<f64>, others: &mut [&mut Array2<f64>]) -> Result<Standardizer> {
    let s = Standardizer::fit(train)?;
    s.apply(train);
    for o in others.iter_mut() {
        s.apply(o);
    }
    Ok(s)
}

/// How to carve a validation set off the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_size: usize,
    /// `true`: validation is PU with the train labeled/unlabeled proportion.
    /// `false`: validation is fully labeled (P = every true positive).
    pub labeled_fraction_matched: bool,
    pub seed: u64,
}

/// Labeled positives in a validation set of `validation_size` matching a
/// training set of `n_train` samples with `n_labeled` labeled positives.
pub fn matched_validation_positives(validation_size: usize, n_labeled: usize, n_train: usize) -> usize {
    ((validation_size as f64) * (n_labeled as f64) / (n_train as f64)).round() as usize
}

/// Draw a uniform validation subset first, then PU-ify train and validation
/// independently. Returns `(train, validation)`.
pub fn split(
    dataset: &BinaryDataset,
    n_labeled_positives: usize,
    bias: Option<&BiasSpec>,
    spec: &SplitSpec,
) -> Result<(PuDataset, PuDataset)> {
    let n = dataset.len();
    if spec.validation_size == 0 {
        return Err(PuError::config("dataset.validation_size", "must be positive"));
    }
    if spec.validation_size >= n {
        return Err(PuError::config(
            "dataset.validation_size",
            format!("{} is not smaller than the {n} available samples", spec.validation_size),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(spec.validation_size);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let train = dataset.select(&train_idx);
    let val = dataset.select(&val_idx);
    let train_bias = bias.map(|b| b.select(&train_idx));
    let val_bias = bias.map(|b| b.select(&val_idx));

    let sub_seed = rng.random::<u64>();
    let train_pu = pu_ify(&train, n_labeled_positives, train_bias.as_ref(), sub_seed)?;
    let val_pu = if spec.labeled_fraction_matched {
        let n_val_pos = matched_validation_positives(val.len(), n_labeled_positives, train.len())
            .min(val.n_positives());
        pu_ify(&val, n_val_pos, val_bias.as_ref(), sub_seed ^ 0x5eed)?
    } else {
        pu_ify(&val, val.n_positives(), None, sub_seed ^ 0x5eed)?
    };
    Ok((train_pu, val_pu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn gaussians_are_deterministic() {
        let a = make_gaussians(200, 0.3, 4.0, 3, 7).unwrap();
        let b = make_gaussians(200, 0.3, 4.0, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_positives(), 60);
        assert_eq!(a.features.dim(), (200, 3));
    }

    #[test]
    fn gaussians_reject_bad_arguments() {
        assert!(matches!(make_gaussians(10, 0.0, 1.0, 2, 0), Err(PuError::Config { .. })));
        assert!(matches!(make_gaussians(10, 1.0, 1.0, 2, 0), Err(PuError::Config { .. })));
        assert!(matches!(make_gaussians(1, 0.5, 1.0, 2, 0), Err(PuError::Config { .. })));
    }

    #[test]
    fn two_identical_clusters_are_indistinguishable() {
        let d = make_gaussians(2, 0.5, 0.0, 1, 3).unwrap();
        assert_eq!(d.n_positives(), 1);
        // With zero separation both classes share one distribution, so any
        // threshold rule is a coin flip: Bayes accuracy 1/2.
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn idx_round_trip_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 4).map(|v| v as u8 * 30).collect();
        let img = write(&dir, "img", &idx_images(2, 2, 2, &pixels));
        let lab = write(&dir, "lab", &idx_labels(&[3, 8]));
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.features.dim(), (2, 4));
        assert_eq!(d.classes, vec![3, 8]);
        assert_eq!(d.features[[1, 3]], 210.0);

        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&idx_images(2, 2, 2, &pixels)).unwrap();
        let img_gz = write(&dir, "img.gz", &gz.finish().unwrap());
        assert_eq!(load_idx(&img_gz, &lab).unwrap(), d);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(&dir, "empty", &[]);
        let lab = write(&dir, "lab", &idx_labels(&[1, 2]));
        assert!(matches!(load_idx(&empty, &lab), Err(PuError::Format { offset: 0, .. })));

        let img = write(&dir, "img", &idx_images(2, 2, 2, &[0; 8]));
        let short = write(&dir, "short", &idx_labels(&[1]));
        match load_idx(&img, &short) {
            Err(PuError::Format { offset, reason, .. }) => {
                assert_eq!(offset, 4);
                assert!(reason.contains("1 labels for 2 images"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let trunc = write(&dir, "trunc", &idx_images(2, 2, 2, &[0; 5]));
        assert!(matches!(load_idx(&trunc, &lab), Err(PuError::Format { offset: 21, .. })));

        let swapped = load_idx(&lab, &img);
        assert!(matches!(swapped, Err(PuError::Format { offset: 0, .. })));
    }

    #[test]
    fn csv_loader_reads_header_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", b"f0,f1,label\n0.5,1.5,1\n-1,2,0\n");
        let d = load_csv(&p).unwrap();
        assert_eq!(d.features.dim(), (2, 2));
        assert_eq!(d.classes, vec![1, 0]);
        let bad = write(&dir, "bad.csv", b"f0,f1,label\n0.5,x,1\n");
        assert!(matches!(load_csv(&bad), Err(PuError::Format { .. })));
        let nohdr = write(&dir, "nohdr.csv", b"a,b\n1,2\n");
        assert!(matches!(load_csv(&nohdr), Err(PuError::Format { .. })));
    }

    #[test]
    fn binarize_cases() {
        let d = LabeledDataset {
            features: Array2::zeros((4, 1)),
            classes: vec![0, 1, 2, 3],
        };
        let b = binarize(&d, &[1, 3]).unwrap();
        assert_eq!(b.targets, vec![0, 1, 0, 1]);
        assert_eq!(b.positive_fraction(), 0.5);
        let all = binarize(&d, &[0, 1, 2, 3]).unwrap();
        assert!(all.targets.iter().all(|&t| t == 1));
        assert!(matches!(binarize(&d, &[]), Err(PuError::Config { .. })));
        assert!(matches!(binarize(&d, &[9]), Err(PuError::Config { .. })));
    }

    #[test]
    fn pu_ify_partition_and_labels() {
        let d = make_gaussians(3000, 0.5, 4.0, 2, 1).unwrap();
        let pu = pu_ify(&d, 1000, None, 5).unwrap();
        assert_eq!(pu.count(Membership::Positive), 1000);
        assert_eq!(pu.count(Membership::PseudoLabeled), 0);
        assert_eq!(pu.count(Membership::Unlabeled), 2000);
        assert_eq!(pu.labels().iter().sum::<f64>(), 1000.0);
        let truth = pu.evaluation_truth().unwrap();
        assert!(pu.indices(Membership::Positive).iter().all(|&i| truth[i] == 1));

        let all = pu_ify(&d, d.n_positives(), None, 5).unwrap();
        assert!(all.indices(Membership::Unlabeled).iter().all(|&i| truth[i] == 0));
        assert!(matches!(pu_ify(&d, 1501, None, 5), Err(PuError::Config { .. })));
    }

    #[test]
    fn biased_sampling_follows_weights() {
        // Four subgroups of 2,000 positives each; weights from the bias
        // experiment. Counts over 10 seeds must sit within 3 sigma.
        let n = 8000;
        let d = BinaryDataset {
            features: Array2::zeros((n, 1)),
            targets: vec![1; n],
            groups: (0..n as u32).map(|i| i % 4).collect(),
        };
        let weights: BTreeMap<u32, f64> = [(0, 0.5), (1, 0.3), (2, 0.15), (3, 0.05)].into();
        let spec = BiasSpec::new(d.groups.clone(), weights.clone()).unwrap();
        let draws = 1000;
        let mut counts = [0usize; 4];
        for seed in 0..10 {
            let pu = pu_ify(&d, draws, Some(&spec), seed).unwrap();
            for i in pu.indices(Membership::Positive) {
                counts[d.groups[i] as usize] += 1;
            }
        }
        let total = (draws * 10) as f64;
        for (g, &w) in &weights {
            let sigma = (total * w * (1.0 - w)).sqrt();
            let diff = (counts[*g as usize] as f64 - total * w).abs();
            assert!(diff <= 3.0 * sigma, "group {g}: {} vs {}", counts[*g as usize], total * w);
        }
    }

    #[test]
    fn uniform_bias_matches_unbiased_sampling() {
        // Equal-sized subgroups with uniform weights: chi-square of the pooled
        // subgroup counts against uniform, df = 3, critical value at p = 0.01.
        let n = 4000;
        let d = BinaryDataset {
            features: Array2::zeros((n, 1)),
            targets: vec![1; n],
            groups: (0..n as u32).map(|i| i % 4).collect(),
        };
        let weights: BTreeMap<u32, f64> = (0..4).map(|g| (g, 0.25)).collect();
        let spec = BiasSpec::new(d.groups.clone(), weights).unwrap();
        for biased in [true, false] {
            let mut counts = [0f64; 4];
            for seed in 0..20 {
                let pu = pu_ify(&d, 200, biased.then_some(&spec), seed).unwrap();
                for i in pu.indices(Membership::Positive) {
                    counts[d.groups[i] as usize] += 1.0;
                }
            }
            let expected = 20.0 * 200.0 / 4.0;
            let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
            assert!(chi2 < 11.345, "biased={biased}: chi2 {chi2}");
        }
    }

    #[test]
    fn bias_spec_validation() {
        let w: BTreeMap<u32, f64> = [(0, 0.5), (1, 0.4)].into();
        assert!(BiasSpec::new(vec![0, 1], w).is_err());
        let w: BTreeMap<u32, f64> = [(0, 1.2), (1, -0.2)].into();
        assert!(BiasSpec::new(vec![0, 1], w).is_err());
    }

    #[test]
    fn standardize_cases() {
        let mut constant = Array2::from_elem((3, 2), 5.0);
        let s = standardize(&mut constant, &mut []).unwrap();
        assert_eq!(s.std, 1.0);
        assert!(constant.iter().all(|&v| v == 0.0));

        // Train with mean 10 and std 2.
        let mut train = Array2::from_shape_vec((2, 1), vec![8.0, 12.0]).unwrap();
        let mut other = Array2::from_shape_vec((1, 1), vec![12.0]).unwrap();
        let s = standardize(&mut train, &mut [&mut other]).unwrap();
        assert_eq!((s.mean, s.std), (10.0, 2.0));
        assert_eq!(other[[0, 0]], 1.0);

        let d = make_gaussians(500, 0.5, 0.0, 4, 2).unwrap();
        let mut x = d.features.clone();
        standardize(&mut x, &mut []).unwrap();
        let mean = x.sum() / x.len() as f64;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        let mut again = x.clone();
        standardize(&mut again, &mut []).unwrap();
        assert!(again.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn stored_map_reproduces_train_exactly() {
        let d = make_gaussians(100, 0.5, 2.0, 3, 9).unwrap();
        let mut x = d.features.clone();
        let s = standardize(&mut x, &mut []).unwrap();
        let mut y = d.features.clone();
        s.apply(&mut y);
        assert_eq!(x, y);
    }

    #[test]
    fn split_matches_labeled_proportion() {
        // 50,000 samples with 10% positives held back from a pool; the train
        // side keeps 45,000 samples and 1,000 labeled positives.
        let n = 50_000;
        let d = BinaryDataset {
            features: Array2::zeros((n, 1)),
            targets: (0..n).map(|i| u8::from(i % 2 == 0)).collect(),
            groups: vec![0; n],
        };
        let spec = SplitSpec {
            validation_size: 5000,
            labeled_fraction_matched: true,
            seed: 11,
        };
        let (train, val) = split(&d, 1000, None, &spec).unwrap();
        assert_eq!(train.len(), 45_000);
        assert_eq!(train.count(Membership::Positive), 1000);
        assert_eq!(val.count(Membership::Positive), 111);
        assert_eq!(val.count(Membership::Unlabeled), 4889);

        let (train2, val2) = split(&d, 1000, None, &spec).unwrap();
        assert_eq!(train.membership(), train2.membership());
        assert_eq!(val.membership(), val2.membership());

        let bad = SplitSpec {
            validation_size: 0,
            ..spec
        };
        assert!(split(&d, 1000, None, &bad).is_err());
        let too_big = SplitSpec {
            validation_size: n,
            ..spec
        };
        assert!(split(&d, 1000, None, &too_big).is_err());
    }

    #[test]
    fn unmatched_split_gives_fully_labeled_validation() {
        let d = make_gaussians(400, 0.5, 4.0, 2, 4).unwrap();
        let spec = SplitSpec {
            validation_size: 100,
            labeled_fraction_matched: false,
            seed: 1,
        };
        let (_, val) = split(&d, 20, None, &spec).unwrap();
        let truth = val.evaluation_truth().unwrap();
        let n_pos = truth.iter().filter(|&&t| t == 1).count();
        assert_eq!(val.count(Membership::Positive), n_pos);
    }

    #[test]
    fn revise_rejects_broken_labels() {
        let d = make_gaussians(10, 0.5, 1.0, 1, 0).unwrap();
        let pu = pu_ify(&d, 2, None, 0).unwrap();
        let mut labels = pu.labels().to_vec();
        let p = pu.indices(Membership::Positive)[0];
        labels[p] = 0.5;
        assert!(pu.revise(labels, pu.membership().to_vec()).is_err());
    }
}
