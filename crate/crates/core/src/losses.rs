//! Training objectives with values and `d(loss)/d(logit)` gradients.
//!
//! Ranking losses (pairwise, ListNet) act on one query group at a time.
//! The self-boosted pairwise loss and the multi-boost blend act on a single
//! sample and read the rest of its query from the dumped context, so the
//! batch needs no peers from the same query.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::math::{neg_log_sigmoid, sigmoid, softmax};

/// Per-query vectors logged by the Server: deployed-model logits, feedback
/// labels and the version of the deployed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedContext {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub model_version: u64,
}

impl DumpedContext {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, model_version: u64) -> Result<Self> {
        let ctx = DumpedContext { scores, labels, model_version };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(shape(format!(
                "dumped scores ({}) and labels ({}) differ in length",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if self.scores.is_empty() {
            return Err(shape("dumped context is empty"));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Data("dumped labels must be binary".into()));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("dumped scores must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    /// One entry per contributing logit.
    pub grad: Vec<f64>,
}

impl LossValueGrad {
    fn zero(n: usize) -> Self {
        LossValueGrad { value: 0.0, grad: vec![0.0; n] }
    }

    fn scalar(value: f64, grad: f64) -> Self {
        LossValueGrad { value, grad: vec![grad] }
    }

    /// `a * self + b * other`; both must cover the same logits.
    pub fn blend(&self, a: f64, other: &LossValueGrad, b: f64) -> LossValueGrad {
        LossValueGrad {
            value: a * self.value + b * other.value,
            grad: self.grad.iter().zip(&other.grad).map(|(x, y)| a * x + b * y).collect(),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_group(logits: &[f64], labels: &[u8]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(shape(format!("{} logits but {} labels", logits.len(), labels.len())));
    }
    if logits.len() < 2 {
        return Err(shape("ranking losses need at least two items"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Data("labels must be binary".into()));
    }
    Ok(())
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("{what} must lie strictly inside (0, 1), got {p}")));
    }
    Ok(())
}

/// Binary cross-entropy on a prediction; gradient is with respect to the logit.
pub fn pointwise_loss(prediction: f64, label: u8) -> Result<LossValueGrad> {
    check_probability(prediction, "prediction")?;
    let y = f64::from(label);
    let value = -(y * prediction.ln() + (1.0 - y) * (1.0 - prediction).ln());
    Ok(LossValueGrad::scalar(value, prediction - y))
}

/// Binary cross-entropy evaluated from the logit, stable for any finite logit.
pub fn pointwise_loss_from_logit(logit: f64, label: u8) -> LossValueGrad {
    let value = if label == 1 { neg_log_sigmoid(logit) } else { neg_log_sigmoid(-logit) };
    LossValueGrad::scalar(value, sigmoid(logit) - f64::from(label))
}

/// Mean of `-ln σ(s_i - s_j)` over all positive/negative pairs of one query.
pub fn pairwise_loss(logits: &[f64], labels: &[u8]) -> Result<LossValueGrad> {
    check_group(logits, labels)?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(LossValueGrad::zero(logits.len()));
    }
    let norm = 1.0 / (pos.len() * neg.len()) as f64;
    let mut out = LossValueGrad::zero(logits.len());
    for &i in &pos {
        for &j in &neg {
            let margin = logits[i] - logits[j];
            out.value += neg_log_sigmoid(margin);
            let g = sigmoid(-margin);
            out.grad[i] -= g;
            out.grad[j] += g;
        }
    }
    out.value *= norm;
    out.grad.iter_mut().for_each(|g| *g *= norm);
    Ok(out)
}

/// Top-one ListNet: cross-entropy between `y / Σy` and `softmax(logits)`.
pub fn listnet_loss(logits: &[f64], labels: &[u8]) -> Result<LossValueGrad> {
    check_group(logits, labels)?;
    let positives: f64 = labels.iter().map(|&y| f64::from(y)).sum();
    if positives == 0.0 {
        return Ok(LossValueGrad::zero(logits.len()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + logits.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    let probs = softmax(logits);
    let mut out = LossValueGrad::zero(logits.len());
    for (i, &y) in labels.iter().enumerate() {
        let target = f64::from(y) / positives;
        if target > 0.0 {
            out.value -= target * (logits[i] - log_norm);
        }
        out.grad[i] = probs[i] - target;
    }
    Ok(out)
}

/// `α · mean pointwise + (1 − α) · pairwise` over one query.
pub fn multi_objective_loss(logits: &[f64], labels: &[u8], alpha: f64) -> Result<LossValueGrad> {
    check_alpha(alpha)?;
    let pair = pairwise_loss(logits, labels)?;
    let point = mean_pointwise(logits, labels);
    Ok(point.blend(alpha, &pair, 1.0 - alpha))
}

/// `α · mean pointwise + (1 − α) · ListNet` over one query.
pub fn point_listnet_loss(logits: &[f64], labels: &[u8], alpha: f64) -> Result<LossValueGrad> {
    check_alpha(alpha)?;
    let list = listnet_loss(logits, labels)?;
    let point = mean_pointwise(logits, labels);
    Ok(point.blend(alpha, &list, 1.0 - alpha))
}

fn mean_pointwise(logits: &[f64], labels: &[u8]) -> LossValueGrad {
    let n = logits.len() as f64;
    let mut out = LossValueGrad::zero(logits.len());
    for (i, (&s, &y)) in logits.iter().zip(labels).enumerate() {
        let l = pointwise_loss_from_logit(s, y);
        out.value += l.value / n;
        out.grad[i] = l.grad[0] / n;
    }
    out
}

/// Single-sample pairwise loss against the dumped scores of its query.
///
/// The live logit is compared with every dumped entry whose label differs
/// strictly; ties (including the sample's own dumped entry) never pair.
/// Dumped scores are constants, so the only gradient is for the live logit.
pub fn self_boost_pair_loss(logit: f64, label: u8, dumped: &DumpedContext) -> Result<LossValueGrad> {
    dumped.validate()?;
    if label > 1 {
        return Err(Error::Data("label must be binary".into()));
    }
    let mut value = 0.0;
    let mut grad = 0.0;
    for (&s_tilde, &y_tilde) in dumped.scores.iter().zip(&dumped.labels) {
        if label > y_tilde {
            value += neg_log_sigmoid(logit - s_tilde);
            grad -= sigmoid(s_tilde - logit);
        } else if y_tilde > label {
            value += neg_log_sigmoid(s_tilde - logit);
            grad += sigmoid(logit - s_tilde);
        }
    }
    Ok(LossValueGrad::scalar(value, grad))
}

/// `α · pointwise + (1 − α) · self-boosted pairwise` for one sample.
pub fn multi_boost_loss(logit: f64, label: u8, dumped: Option<&DumpedContext>, alpha: f64) -> Result<LossValueGrad> {
    check_alpha(alpha)?;
    let dumped = dumped.ok_or_else(|| Error::Data("sample has no dumped context".into()))?;
    let boost = self_boost_pair_loss(logit, label, dumped)?;
    let point = pointwise_loss_from_logit(logit, label);
    Ok(point.blend(alpha, &boost, 1.0 - alpha))
}

/// Binary cross-entropy on a calibrated prediction; the gradient is with
/// respect to the calibrated prediction itself (it flows to the calibrator
/// heights, never back into the scorer).
pub fn calibration_loss(calibrated: f64, label: u8) -> Result<LossValueGrad> {
    check_probability(calibrated, "calibrated prediction")?;
    let y = f64::from(label);
    let value = -(y * calibrated.ln() + (1.0 - y) * (1.0 - calibrated).ln());
    let grad = (calibrated - y) / (calibrated * (1.0 - calibrated));
    Ok(LossValueGrad::scalar(value, grad))
}
