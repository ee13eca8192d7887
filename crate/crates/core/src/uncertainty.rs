//! Ensemble / MC-dropout predictions and the entropy-based uncertainty split.
//!
//! For member probabilities `p_1..p_K` of one sample:
//!
//! * aleatoric = mean of the member entropies,
//! * total     = entropy of the mean probability,
//! * epistemic = total − aleatoric (the mutual-information term, ≥ 0 by
//!   concavity of entropy).
//!
//! Entropies are in nats, so every value lies in `[0, ln 2]`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{PuError, Result};
use crate::network::{sigmoid, Mlp, ParamSnapshot};
use crate::puloss::PROB_CLAMP;

/// Binary entropy in nats, after clamping `p` into `[1e-12, 1 − 1e-12]`.
pub fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Epistemic,
    Aleatoric,
    Total,
}

/// Per-sample uncertainty values and mean predictions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UncertaintyReport {
    pub p_mean: Vec<f64>,
    pub f_mean: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub total: Vec<f64>,
    pub epistemic: Vec<f64>,
}

impl UncertaintyReport {
    pub fn len(&self) -> usize {
        self.p_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_mean.is_empty()
    }

    pub fn values(&self, kind: UncertaintyKind) -> &[f64] {
        match kind {
            UncertaintyKind::Epistemic => &self.epistemic,
            UncertaintyKind::Aleatoric => &self.aleatoric,
            UncertaintyKind::Total => &self.total,
        }
    }

    /// CSV dump: `index,p_mean,ua,ut,ue`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| PuError::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "index,p_mean,ua,ut,ue").map_err(io)?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{i},{},{},{},{}",
                self.p_mean[i], self.aleatoric[i], self.total[i], self.epistemic[i]
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Decompose an `n × K` matrix of member probabilities.
///
/// Each row is sorted before summation, so the result does not depend on the
/// member order. Rows whose K entries are all equal get epistemic exactly 0.
pub fn decompose(probs: ArrayView2<f64>) -> Result<UncertaintyReport> {
    let (n, k) = probs.dim();
    if n == 0 || k == 0 {
        return Err(PuError::Usage(format!("cannot decompose an empty {n}×{k} prediction matrix")));
    }
    let mut report = UncertaintyReport {
        p_mean: Vec::with_capacity(n),
        f_mean: Vec::with_capacity(n),
        aleatoric: Vec::with_capacity(n),
        total: Vec::with_capacity(n),
        epistemic: Vec::with_capacity(n),
    };
    let mut row_buf = vec![0.0; k];
    for row in probs.outer_iter() {
        for (dst, &p) in row_buf.iter_mut().zip(row.iter()) {
            if p.is_nan() {
                return Err(PuError::Numeric("NaN member prediction".into()));
            }
            *dst = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        }
        row_buf.sort_by(f64::total_cmp);
        let (p_mean, ua, ut) = if row_buf[0] == row_buf[k - 1] {
            let h = binary_entropy(row_buf[0]);
            (row_buf[0], h, h)
        } else {
            let p_mean = row_buf.iter().sum::<f64>() / k as f64;
            let ua = row_buf.iter().map(|&p| binary_entropy(p)).sum::<f64>() / k as f64;
            (p_mean, ua, binary_entropy(p_mean))
        };
        report.p_mean.push(p_mean);
        report.f_mean.push((p_mean / (1.0 - p_mean)).ln());
        report.aleatoric.push(ua);
        report.total.push(ut);
        report.epistemic.push((ut - ua).max(0.0));
    }
    Ok(report)
}

/// Decompose an `n × K` matrix of member logits; `f_mean` is the mean logit.
pub fn decompose_logits(logits: ArrayView2<f64>) -> Result<UncertaintyReport> {
    let mut report = decompose(logits.mapv(sigmoid).view())?;
    let k = logits.ncols() as f64;
    for (dst, row) in report.f_mean.iter_mut().zip(logits.outer_iter()) {
        let mut vals = row.to_vec();
        vals.sort_by(f64::total_cmp);
        *dst = vals.iter().sum::<f64>() / k;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// One deterministic pass per ensemble member.
    Ensemble,
    /// K stochastic dropout passes through the first member.
    McDropout,
}

/// Best-so-far parameters and the validation score that earned them.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub members: Vec<ParamSnapshot>,
    pub score: f64,
}

/// K identically shaped networks with their initial snapshot θ⁰ and the best
/// snapshot θ* seen so far.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Mlp>,
    init: Vec<ParamSnapshot>,
    best: Option<BestSnapshot>,
}

impl Ensemble {
    /// `member_seed(k)` seeds the initialization of member `k`.
    pub fn new(k: usize, layer_sizes: &[usize], dropout_p: f64, member_seed: impl Fn(usize) -> u64) -> Result<Self> {
        if k == 0 {
            return Err(PuError::config("puupl.ensemble_size", "must be at least 1"));
        }
        let members = (0..k)
            .map(|i| Mlp::new(layer_sizes, dropout_p, member_seed(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_members(members))
    }

    pub fn from_members(members: Vec<Mlp>) -> Self {
        let init = members.iter().map(Mlp::snapshot).collect();
        Ensemble {
            members,
            init,
            best: None,
        }
    }

    pub fn from_snapshots(snapshots: &[ParamSnapshot]) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(PuError::Usage("no member snapshots".into()));
        }
        let first = &snapshots[0].layer_sizes;
        if snapshots.iter().any(|s| &s.layer_sizes != first) {
            return Err(PuError::Shape("ensemble members must share layer sizes".into()));
        }
        let members = snapshots.iter().map(Mlp::from_snapshot).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_members(members))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Mlp] {
        &mut self.members
    }

    pub fn init_snapshot(&self) -> &[ParamSnapshot] {
        &self.init
    }

    pub fn snapshot(&self) -> Vec<ParamSnapshot> {
        self.members.iter().map(Mlp::snapshot).collect()
    }

    /// Restore every member to θ⁰.
    pub fn restore_init(&mut self) -> Result<()> {
        for (m, s) in self.members.iter_mut().zip(&self.init) {
            m.restore(s)?;
        }
        Ok(())
    }

    pub fn restore(&mut self, snapshots: &[ParamSnapshot]) -> Result<()> {
        if snapshots.len() != self.members.len() {
            return Err(PuError::Shape(format!(
                "{} snapshots for {} members",
                snapshots.len(),
                self.members.len()
            )));
        }
        for (m, s) in self.members.iter_mut().zip(snapshots) {
            m.restore(s)?;
        }
        Ok(())
    }

    /// Replace θ⁰ (used when resuming).
    pub fn set_init(&mut self, init: Vec<ParamSnapshot>) {
        self.init = init;
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    pub fn set_best(&mut self, best: Option<BestSnapshot>) {
        self.best = best;
    }

    /// Record the current parameters as θ* if `score` strictly improves on
    /// the stored best. Returns whether θ* changed.
    pub fn offer_best(&mut self, score: f64) -> bool {
        let improved = match &self.best {
            None => score.is_finite(),
            Some(b) => score > b.score,
        };
        if improved {
            self.best = Some(BestSnapshot {
                members: self.snapshot(),
                score,
            });
        }
        improved
    }

    /// Copy of this ensemble with θ* loaded (or the current weights if no θ*).
    pub fn with_best(&self) -> Result<Ensemble> {
        let mut e = self.clone();
        if let Some(b) = &self.best {
            e.restore(&b.members)?;
        }
        Ok(e)
    }

    /// `n × K` member logits.
    pub fn member_logits(&self, x: ArrayView2<f64>, estimator: EstimatorKind, passes: usize, dropout_seed: u64) -> Result<Array2<f64>> {
        match estimator {
            EstimatorKind::Ensemble => {
                let mut out = Array2::zeros((x.nrows(), self.members.len()));
                for (k, m) in self.members.iter().enumerate() {
                    out.column_mut(k).assign(&m.predict(x, None)?);
                }
                Ok(out)
            }
            EstimatorKind::McDropout => {
                let model = &self.members[0];
                if model.dropout_p() <= 0.0 {
                    return Err(PuError::Usage("MC-dropout needs dropout_p > 0".into()));
                }
                if passes == 0 {
                    return Err(PuError::Usage("MC-dropout needs at least one pass".into()));
                }
                let mut out = Array2::zeros((x.nrows(), passes));
                for k in 0..passes {
                    let seed = dropout_seed.wrapping_add((k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    out.column_mut(k).assign(&model.predict(x, Some(seed))?);
                }
                Ok(out)
            }
        }
    }

    /// Mean probability over members (deterministic passes).
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let logits = self.member_logits(x, EstimatorKind::Ensemble, self.members.len(), 0)?;
        Ok(decompose_logits(logits.view())?.p_mean)
    }
}

/// `n × K` matrix of member probabilities `p̂_ik`.
pub fn predict_members(
    ensemble: &Ensemble,
    x: ArrayView2<f64>,
    estimator: EstimatorKind,
    passes: usize,
    dropout_seed: u64,
) -> Result<Array2<f64>> {
    Ok(ensemble.member_logits(x, estimator, passes, dropout_seed)?.mapv(sigmoid))
}
