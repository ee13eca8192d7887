//! Evaluation metrics: accuracy, PU-AUC, expected calibration error and NLL.

use serde::{Deserialize, Serialize};

use crate::dataset::Membership;
use crate::error::{PuError, Result};
use crate::puloss::pseudo_label_ce;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(PuError::Shape(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(PuError::Usage("metric over an empty set".into()));
    }
    Ok(())
}

/// Fraction of samples where `p ≥ 0.5` agrees with the binary truth.
pub fn accuracy(probs: &[f64], truth: &[u8]) -> Result<f64> {
    check_lengths(probs.len(), truth.len())?;
    let hits = probs
        .iter()
        .zip(truth)
        .filter(|(&p, &y)| u8::from(p >= 0.5) == y)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Mann–Whitney AUC of `scores_p` against `scores_u`: the fraction of pairs
/// `(p, u)` with `p > u`, ties counted one half. Computed from mid-ranks in
/// `O(n log n)`.
pub fn pu_auc(scores_p: &[f64], scores_u: &[f64]) -> Result<f64> {
    if scores_p.is_empty() || scores_u.is_empty() {
        return Err(PuError::Usage("AUC needs at least one score on each side".into()));
    }
    if scores_p.iter().chain(scores_u).any(|s| s.is_nan()) {
        return Err(PuError::Numeric("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_p
        .iter()
        .map(|&s| (s, true))
        .chain(scores_u.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of doubled mid-ranks of the P scores; everything stays integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2.
        let mid_x2 = (i + j + 2) as u128;
        let n_pos = all[i..=j].iter().filter(|e| e.1).count() as u128;
        rank_sum_x2 += n_pos * mid_x2;
        i = j + 1;
    }
    let n_p = scores_p.len() as u128;
    let n_u = scores_u.len() as u128;
    // 2U = 2R − n_p(n_p + 1)
    let u_x2 = rank_sum_x2 - n_p * (n_p + 1);
    Ok(u_x2 as f64 / (2 * n_p * n_u) as f64)
}

/// Equal-width bin of `p` over `[0, 1]`: bin `b` holds `[b/B, (b+1)/B)`, the
/// last bin also holds 1.
pub fn bin_index(p: f64, n_bins: usize) -> usize {
    let nb = n_bins as f64;
    let mut b = ((p * nb).floor().max(0.0) as usize).min(n_bins - 1);
    while b > 0 && p < b as f64 / nb {
        b -= 1;
    }
    while b + 1 < n_bins && p >= (b + 1) as f64 / nb {
        b += 1;
    }
    b
}

/// Expected calibration error over the positive-class probability:
/// `Σ_b (n_b/N)·|positive fraction_b − mean p_b|`, empty bins skipped.
pub fn ece(probs: &[f64], truth: &[u8], n_bins: usize) -> Result<f64> {
    check_lengths(probs.len(), truth.len())?;
    if n_bins == 0 {
        return Err(PuError::config("eval.bins", "must be positive"));
    }
    let mut count = vec![0usize; n_bins];
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    for (&p, &y) in probs.iter().zip(truth) {
        let b = bin_index(p, n_bins);
        count[b] += 1;
        sum_p[b] += p;
        sum_y[b] += f64::from(y);
    }
    let n = probs.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (sum_y[b] / c - sum_p[b] / c).abs()
        })
        .sum())
}

/// Mean binary cross-entropy with the `1e-12` probability clamp. Targets may
/// be soft.
pub fn nll(probs: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(probs.len(), targets.len())?;
    pseudo_label_ce(probs, targets)
}

/// Metrics for one evaluated split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub pu_auc: f64,
    pub ece: f64,
    pub nll: f64,
    /// NLL of stored pseudo-labels against the hidden truth.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pl_nll: Option<f64>,
}

/// Evaluate probabilities against binary truth. With `membership`, the AUC is
/// taken between labeled positives and unlabeled samples; otherwise between
/// true positives and true negatives.
pub fn evaluate(probs: &[f64], truth: &[u8], membership: Option<&[Membership]>, n_bins: usize) -> Result<EvalReport> {
    check_lengths(probs.len(), truth.len())?;
    let (pos, neg): (Vec<f64>, Vec<f64>) = match membership {
        Some(m) => split_scores(probs, |i| m[i] == Membership::Positive, |i| m[i] == Membership::Unlabeled),
        None => split_scores(probs, |i| truth[i] == 1, |i| truth[i] == 0),
    };
    let auc = if pos.is_empty() || neg.is_empty() {
        f64::NAN
    } else {
        pu_auc(&pos, &neg)?
    };
    let targets: Vec<f64> = truth.iter().map(|&t| f64::from(t)).collect();
    Ok(EvalReport {
        accuracy: accuracy(probs, truth)?,
        pu_auc: auc,
        ece: ece(probs, truth, n_bins)?,
        nll: nll(probs, &targets)?,
        pl_nll: None,
    })
}

fn split_scores(probs: &[f64], is_pos: impl Fn(usize) -> bool, is_neg: impl Fn(usize) -> bool) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &p) in probs.iter().enumerate() {
        if is_pos(i) {
            pos.push(p);
        } else if is_neg(i) {
            neg.push(p);
        }
    }
    (pos, neg)
}
