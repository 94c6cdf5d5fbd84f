//! Exact two-item optimum of the pairwise objective versus the pointwise
//! optimum, for independent Bernoulli labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logit, neg_log_sigmoid, sigmoid};

/// Gaps closer than this are reported as coinciding.
pub const COINCIDE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOptimum {
    pub p1: f64,
    pub p2: f64,
    pub include_ties: bool,
    /// `logit(p1)` and `logit(p2)`.
    pub pointwise_logits: [f64; 2],
    pub pointwise_gap: f64,
    /// Minimizer of the expected pairwise objective over `s1 - s2`.
    pub pair_gap: f64,
    /// `σ(pair_gap)`.
    pub pair_probability: f64,
    pub expected_loss: f64,
    pub newton_iterations: usize,
    pub distinct: bool,
}

/// Label outcomes of the two items as `(probability, target)` terms of the
/// expected loss `Σ w · BCE(σ(Δ), target)`.
///
/// With ties included, every outcome contributes and the target is
/// `1[y1 > y2]`. Without ties, only discordant outcomes form a pair.
fn outcome_terms(p1: f64, p2: f64, include_ties: bool) -> Vec<(f64, f64)> {
    let mut terms = Vec::with_capacity(4);
    for (y1, q1) in [(1u8, p1), (0, 1.0 - p1)] {
        for (y2, q2) in [(1u8, p2), (0, 1.0 - p2)] {
            let w = q1 * q2;
            match (y1, y2) {
                (1, 0) => terms.push((w, 1.0)),
                (0, 1) => terms.push((w, 0.0)),
                _ if include_ties => terms.push((w, 0.0)),
                _ => {}
            }
        }
    }
    terms
}

fn expected_loss(terms: &[(f64, f64)], gap: f64) -> f64 {
    terms
        .iter()
        .map(|&(w, t)| w * (t * neg_log_sigmoid(gap) + (1.0 - t) * neg_log_sigmoid(-gap)))
        .sum()
}

/// Solves for the optimal score gap by Newton's method on the enumerated
/// expected loss.
pub fn pair_optimum(p1: f64, p2: f64, include_ties: bool) -> Result<PairOptimum> {
    for p in [p1, p2] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("probabilities must lie in (0, 1), got {p}")));
        }
    }
    let terms = outcome_terms(p1, p2, include_ties);
    let mass: f64 = terms.iter().map(|t| t.0).sum();
    let mut gap = 0.0;
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let s = sigmoid(gap);
        let grad: f64 = terms.iter().map(|&(w, t)| w * (s - t)).sum();
        let hess = mass * s * (1.0 - s);
        let step = grad / hess;
        gap -= step.clamp(-5.0, 5.0);
        if step.abs() < 1e-15 {
            break;
        }
    }
    let pointwise_logits = [logit(p1), logit(p2)];
    let pointwise_gap = pointwise_logits[0] - pointwise_logits[1];
    Ok(PairOptimum {
        p1,
        p2,
        include_ties,
        pointwise_logits,
        pointwise_gap,
        pair_gap: gap,
        pair_probability: sigmoid(gap),
        expected_loss: expected_loss(&terms, gap),
        newton_iterations: iterations,
        distinct: (gap - pointwise_gap).abs() > COINCIDE_TOLERANCE,
    })
}
