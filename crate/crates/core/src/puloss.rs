//! PU risk estimators and the combined pseudo-label objective.
//!
//! Every loss here is written against raw logits `f` and returns its gradient
//! with respect to those logits, ready to feed [`crate::network::Mlp::backward`].

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::Membership;
use crate::error::{PuError, Result};
use crate::network::sigmoid;

/// Probability clamp used before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Label sign `y ∈ {−1, +1}` in the sigmoid loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

/// Mean sigmoid loss `1/|S| Σ 1/(1 + exp(y·f_i))` over logits `f`.
pub fn sigmoid_loss(scores: &[f64], y: Sign) -> Result<f64> {
    if scores.is_empty() {
        return Err(PuError::Usage("sigmoid loss over an empty set".into()));
    }
    let y = y.value();
    Ok(scores.iter().map(|&f| sigmoid(-y * f)).sum::<f64>() / scores.len() as f64)
}

/// Gradient of [`sigmoid_loss`] with respect to each score.
pub fn sigmoid_loss_grad(scores: &[f64], y: Sign) -> Vec<f64> {
    let n = scores.len() as f64;
    let y = y.value();
    scores
        .iter()
        .map(|&f| {
            let s = sigmoid(-y * f);
            -y * s * (1.0 - s) / n
        })
        .collect()
}

/// The three sigmoid-loss terms every PU risk is assembled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PuTerms {
    /// ℓ(P, +1)
    pub positive_as_positive: f64,
    /// ℓ(P, −1)
    pub positive_as_negative: f64,
    /// ℓ(U, −1)
    pub unlabeled_as_negative: f64,
}

impl PuTerms {
    /// P must be non-empty; an empty U contributes ℓ(U,−1) = 0.
    pub fn compute(pred_p: &[f64], pred_u: &[f64]) -> Result<Self> {
        Ok(PuTerms {
            positive_as_positive: sigmoid_loss(pred_p, Sign::Positive)?,
            positive_as_negative: sigmoid_loss(pred_p, Sign::Negative)?,
            unlabeled_as_negative: if pred_u.is_empty() {
                0.0
            } else {
                sigmoid_loss(pred_u, Sign::Negative)?
            },
        })
    }

    /// Estimated negative-class risk `ℓ(U,−1) − π·ℓ(P,−1)`.
    pub fn negative_risk(&self, prior: f64) -> f64 {
        self.unlabeled_as_negative - prior * self.positive_as_negative
    }
}

/// Risk value plus gradients w.r.t. the P and U logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskGrad {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_u: Vec<f64>,
    /// True when the non-negative correction zeroed the negative-risk term.
    pub clamped: bool,
}

/// Pluggable PU risk. Implement this to add other estimators.
pub trait PuRisk {
    fn name(&self) -> &'static str;
    fn prior(&self) -> f64;
    fn risk_grad(&self, pred_p: &[f64], pred_u: &[f64]) -> Result<RiskGrad>;

    fn risk(&self, pred_p: &[f64], pred_u: &[f64]) -> Result<f64> {
        Ok(self.risk_grad(pred_p, pred_u)?.value)
    }
}

fn risk_grad_impl(pred_p: &[f64], pred_u: &[f64], prior: f64, non_negative: bool) -> Result<RiskGrad> {
    let terms = PuTerms::compute(pred_p, pred_u)?;
    let neg = terms.negative_risk(prior);
    let clamped = non_negative && neg < 0.0;
    let value = prior * terms.positive_as_positive + if clamped { 0.0 } else { neg };

    let gp_pos = sigmoid_loss_grad(pred_p, Sign::Positive);
    let mut grad_p: Vec<f64> = gp_pos.iter().map(|g| prior * g).collect();
    let grad_u = if clamped {
        vec![0.0; pred_u.len()]
    } else {
        let gp_neg = sigmoid_loss_grad(pred_p, Sign::Negative);
        for (g, n) in grad_p.iter_mut().zip(gp_neg) {
            *g -= prior * n;
        }
        sigmoid_loss_grad(pred_u, Sign::Negative)
    };
    Ok(RiskGrad {
        value,
        grad_p,
        grad_u,
        clamped,
    })
}

/// Unbiased PU risk `π·ℓ(P,1) + ℓ(U,−1) − π·ℓ(P,−1)`; can go negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Upu {
    pub prior: f64,
}

impl PuRisk for Upu {
    fn name(&self) -> &'static str {
        "upu"
    }

    fn prior(&self) -> f64 {
        self.prior
    }

    fn risk_grad(&self, pred_p: &[f64], pred_u: &[f64]) -> Result<RiskGrad> {
        risk_grad_impl(pred_p, pred_u, self.prior, false)
    }
}

/// Non-negative PU risk `π·ℓ(P,1) + max{0, ℓ(U,−1) − π·ℓ(P,−1)}`.
///
/// When the bracket is negative the max term contributes neither value nor
/// gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nnpu {
    pub prior: f64,
}

impl PuRisk for Nnpu {
    fn name(&self) -> &'static str {
        "nnpu"
    }

    fn prior(&self) -> f64 {
        self.prior
    }

    fn risk_grad(&self, pred_p: &[f64], pred_u: &[f64]) -> Result<RiskGrad> {
        risk_grad_impl(pred_p, pred_u, self.prior, true)
    }
}

pub fn upu_risk(pred_p: &[f64], pred_u: &[f64], prior: f64) -> Result<f64> {
    Upu { prior }.risk(pred_p, pred_u)
}

pub fn nnpu_risk(pred_p: &[f64], pred_u: &[f64], prior: f64) -> Result<f64> {
    Nnpu { prior }.risk(pred_p, pred_u)
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy of probabilities `pred` against soft targets.
/// Zero for an empty set.
pub fn pseudo_label_ce(pred: &[f64], targets: &[f64]) -> Result<f64> {
    if pred.len() != targets.len() {
        return Err(PuError::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            targets.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(targets).map(|(&p, &y)| bce(p, y)).sum::<f64>() / pred.len() as f64)
}

/// `λ·ℒ_L + (1−λ)·ℒ_PU`; with no pseudo-labeled samples λ acts as 0.
pub fn combined_loss(pseudo_label_loss: f64, pu_loss: f64, lambda: f64, has_pseudo_labels: bool) -> f64 {
    if has_pseudo_labels {
        lambda * pseudo_label_loss + (1.0 - lambda) * pu_loss
    } else {
        pu_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuLossKind {
    Upu,
    Nnpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuLossConfig {
    pub prior: f64,
    pub kind: PuLossKind,
    pub lambda: f64,
}

impl PuLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(PuError::config("puupl.prior", format!("must lie in (0,1), got {}", self.prior)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(PuError::config("puupl.lambda", format!("must lie in (0,1), got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn risk(&self) -> Box<dyn PuRisk> {
        match self.kind {
            PuLossKind::Upu => Box::new(Upu { prior: self.prior }),
            PuLossKind::Nnpu => Box::new(Nnpu { prior: self.prior }),
        }
    }
}

/// Loss components of one minibatch and the gradient w.r.t. its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub pu: f64,
    /// `None` when the batch has no pseudo-labeled samples.
    pub pseudo: Option<f64>,
    pub clamped: bool,
    pub grad: Array1<f64>,
}

/// Evaluate the combined objective on one batch.
///
/// `membership[i]` and `targets[i]` describe `logits[i]`; targets are only
/// read for pseudo-labeled samples. The batch must contain at least one
/// labeled positive; an empty U part contributes nothing to ℓ(U,−1).
pub fn objective(
    logits: &[f64],
    membership: &[Membership],
    targets: &[f64],
    config: &PuLossConfig,
) -> Result<LossBreakdown> {
    objective_with(logits, membership, targets, config.lambda, config.risk().as_ref())
}

pub fn objective_with(
    logits: &[f64],
    membership: &[Membership],
    targets: &[f64],
    lambda: f64,
    risk: &dyn PuRisk,
) -> Result<LossBreakdown> {
    if logits.len() != membership.len() || logits.len() != targets.len() {
        return Err(PuError::Shape("logits, membership and targets differ in length".into()));
    }
    let mut p_idx = Vec::new();
    let mut u_idx = Vec::new();
    let mut l_idx = Vec::new();
    for (i, m) in membership.iter().enumerate() {
        match m {
            Membership::Positive => p_idx.push(i),
            Membership::Unlabeled => u_idx.push(i),
            Membership::PseudoLabeled => l_idx.push(i),
        }
    }
    if p_idx.is_empty() {
        return Err(PuError::Usage("batch contains no labeled positives".into()));
    }
    let f_p: Vec<f64> = p_idx.iter().map(|&i| logits[i]).collect();
    let f_u: Vec<f64> = u_idx.iter().map(|&i| logits[i]).collect();

    let mut grad = Array1::zeros(logits.len());
    let rg = risk.risk_grad(&f_p, &f_u)?;

    let has_l = !l_idx.is_empty();
    let w_pu = if has_l { 1.0 - lambda } else { 1.0 };
    for (&i, g) in p_idx.iter().zip(&rg.grad_p) {
        grad[i] = w_pu * g;
    }
    for (&i, g) in u_idx.iter().zip(&rg.grad_u) {
        grad[i] = w_pu * g;
    }

    let pseudo = if has_l {
        let n = l_idx.len() as f64;
        let probs: Vec<f64> = l_idx.iter().map(|&i| sigmoid(logits[i])).collect();
        let ys: Vec<f64> = l_idx.iter().map(|&i| targets[i]).collect();
        for (k, &i) in l_idx.iter().enumerate() {
            grad[i] = lambda * (probs[k] - ys[k]) / n;
        }
        Some(pseudo_label_ce(&probs, &ys)?)
    } else {
        None
    };

    let total = combined_loss(pseudo.unwrap_or(0.0), rg.value, lambda, has_l);
    if !total.is_finite() {
        return Err(PuError::Numeric(format!("non-finite batch loss {total}")));
    }
    Ok(LossBreakdown {
        total,
        pu: rg.value,
        pseudo,
        clamped: rg.clamped,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_loss_examples() {
        assert_eq!(sigmoid_loss(&[0.0], Sign::Positive).unwrap(), 0.5);
        // 1/(1+e^10) = 4.5397868702434395e-5
        assert_abs_diff_eq!(
            sigmoid_loss(&[10.0], Sign::Positive).unwrap(),
            4.539_786_870_243_439_5e-5,
            epsilon = 1e-18
        );
        assert!(sigmoid_loss(&[], Sign::Positive).is_err());
    }

    #[test]
    fn upu_and_nnpu_arithmetic_from_terms() {
        let t = PuTerms {
            positive_as_positive: 0.1,
            positive_as_negative: 0.4,
            unlabeled_as_negative: 0.3,
        };
        let prior = 0.5;
        let upu = prior * t.positive_as_positive + t.negative_risk(prior);
        assert_abs_diff_eq!(upu, 0.15, epsilon = 1e-15);
        let nn = prior * t.positive_as_positive + t.negative_risk(prior).max(0.0);
        assert_abs_diff_eq!(nn, 0.15, epsilon = 1e-15);

        let clamped = PuTerms {
            unlabeled_as_negative: 0.1,
            ..t
        };
        assert_abs_diff_eq!(
            prior * clamped.positive_as_positive + clamped.negative_risk(prior).max(0.0),
            0.05,
            epsilon = 1e-15
        );
    }

    #[test]
    fn separated_scores_drive_upu_negative() {
        let p = [10.0; 5];
        let u = [-10.0; 5];
        let prior = 0.5;
        let upu = upu_risk(&p, &u, prior).unwrap();
        assert!(upu < 0.0, "uPU = {upu}");
        let nn = Nnpu { prior }.risk_grad(&p, &u).unwrap();
        assert!(nn.clamped);
        assert_abs_diff_eq!(nn.value, prior * sigmoid_loss(&p, Sign::Positive).unwrap(), epsilon = 1e-18);
        assert!(nn.grad_u.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pseudo_label_ce_examples() {
        assert_abs_diff_eq!(pseudo_label_ce(&[0.5], &[0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        // H(0.8) = −0.8 ln 0.8 − 0.2 ln 0.2 = 0.500402423538188
        let h = pseudo_label_ce(&[0.8], &[0.8]).unwrap();
        assert_abs_diff_eq!(h, 0.500_402_423_538_188, epsilon = 1e-12);
        for p in [0.7, 0.79, 0.81, 0.9] {
            assert!(pseudo_label_ce(&[p], &[0.8]).unwrap() > h);
        }
        assert_eq!(pseudo_label_ce(&[], &[]).unwrap(), 0.0);
        assert!(pseudo_label_ce(&[0.0, 1.0], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn combined_loss_examples() {
        assert_abs_diff_eq!(combined_loss(1.0, 0.5, 0.1, true), 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(combined_loss(1.0, 0.5, 1e-6, true), 0.5, epsilon = 1e-6);
        assert_eq!(combined_loss(1.0, 0.5, 0.1, false), 0.5);
    }

    #[test]
    fn objective_without_l_equals_pu_loss() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let m = [
            Membership::Positive,
            Membership::Unlabeled,
            Membership::Unlabeled,
            Membership::Positive,
        ];
        let cfg = PuLossConfig {
            prior: 0.4,
            kind: PuLossKind::Nnpu,
            lambda: 0.1,
        };
        let out = objective(&logits, &m, &[1.0, 0.0, 0.0, 1.0], &cfg).unwrap();
        let expected = nnpu_risk(&[0.3, 0.1], &[-1.2, 2.0], 0.4).unwrap();
        assert_eq!(out.total, expected);
        assert_eq!(out.pseudo, None);
    }

    #[test]
    fn objective_requires_a_positive() {
        let cfg = PuLossConfig {
            prior: 0.4,
            kind: PuLossKind::Nnpu,
            lambda: 0.1,
        };
        let r = objective(&[0.0], &[Membership::Unlabeled], &[0.0], &cfg);
        assert!(matches!(r, Err(PuError::Usage(_))));
    }

    fn fd_check(kind: PuLossKind, logits: &[f64], m: &[Membership], targets: &[f64]) {
        let cfg = PuLossConfig {
            prior: 0.45,
            kind,
            lambda: 0.3,
        };
        let out = objective(logits, m, targets, &cfg).unwrap();
        let eps = 1e-4;
        for j in 0..logits.len() {
            let mut a = logits.to_vec();
            a[j] += eps;
            let mut b = logits.to_vec();
            b[j] -= eps;
            let fd = (objective(&a, m, targets, &cfg).unwrap().total - objective(&b, m, targets, &cfg).unwrap().total)
                / (2.0 * eps);
            let g = out.grad[j];
            let scale = fd.abs().max(g.abs()).max(1e-6);
            assert!((fd - g).abs() / scale < 1e-5, "{kind:?} logit {j}: {g} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn logit_gradients_match_finite_differences(
            logits in prop::collection::vec(-4.0f64..4.0, 30),
            roles in prop::collection::vec(0u8..3, 30),
            targets in prop::collection::vec(0.05f64..0.95, 30),
        ) {
            let mut m: Vec<Membership> = roles.iter().map(|r| match r {
                0 => Membership::Positive,
                1 => Membership::Unlabeled,
                _ => Membership::PseudoLabeled,
            }).collect();
            m[0] = Membership::Positive;
            m[1] = Membership::Unlabeled;
            // Skip points sitting on the nnPU kink.
            let cfg = PuLossConfig { prior: 0.45, kind: PuLossKind::Nnpu, lambda: 0.3 };
            let f_p: Vec<f64> = logits.iter().zip(&m).filter(|(_, r)| **r == Membership::Positive).map(|(f, _)| *f).collect();
            let f_u: Vec<f64> = logits.iter().zip(&m).filter(|(_, r)| **r == Membership::Unlabeled).map(|(f, _)| *f).collect();
            let bracket = PuTerms::compute(&f_p, &f_u).unwrap().negative_risk(cfg.prior);
            prop_assume!(bracket.abs() > 1e-4);
            fd_check(PuLossKind::Nnpu, &logits, &m, &targets);
            fd_check(PuLossKind::Upu, &logits, &m, &targets);
        }

        #[test]
        fn nnpu_dominates_upu(
            p in prop::collection::vec(-8.0f64..8.0, 1..20),
            u in prop::collection::vec(-8.0f64..8.0, 1..20),
            prior in 0.05f64..0.95,
        ) {
            let nn = nnpu_risk(&p, &u, prior).unwrap();
            let up = upu_risk(&p, &u, prior).unwrap();
            prop_assert!(nn >= 0.0);
            prop_assert!(nn >= up);
            let bracket = PuTerms::compute(&p, &u).unwrap().negative_risk(prior);
            prop_assert_eq!(nn == up, bracket >= 0.0);
        }

        #[test]
        fn sigmoid_loss_symmetry_and_monotonicity(f in -20.0f64..20.0, d in 0.01f64..5.0) {
            let pos = sigmoid_loss(&[f], Sign::Positive).unwrap();
            let neg = sigmoid_loss(&[f], Sign::Negative).unwrap();
            prop_assert!((pos + neg - 1.0).abs() < 1e-15);
            prop_assert!(sigmoid_loss(&[f + d], Sign::Positive).unwrap() < pos || pos < 1e-300);
        }

        #[test]
        fn combined_loss_is_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0, d in 0.001f64..1.0, lambda in 0.01f64..0.99) {
            prop_assert!(combined_loss(a + d, b, lambda, true) > combined_loss(a, b, lambda, true));
            prop_assert!(combined_loss(a, b + d, lambda, true) > combined_loss(a, b, lambda, true));
        }
    }
}
