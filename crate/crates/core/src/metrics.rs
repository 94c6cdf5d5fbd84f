//! Ranking and calibration metrics: AUC, GAUC, NDCG@k, LogLoss, ECE, PCOC.
//!
//! Per-query AUC is undefined when a query has a single class; such queries
//! are skipped (and counted) by GAUC rather than imputed. ECE uses the same
//! 100 half-open bins as the calibrator.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ECE_BINS: usize = 100;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // Mann-Whitney U with midranks for tied scores.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Some(u / (p * negatives as f64))
}

/// Candidate-count-weighted mean of per-query AUC. Returns the value and the
/// number of skipped queries.
pub fn gauc<'a, I>(groups: I) -> Result<(f64, usize)>
where
    I: IntoIterator<Item = (&'a [f64], &'a [u8])>,
{
    let mut weighted = 0.0;
    let mut weight = 0.0;
    let mut skipped = 0;
    for (scores, labels) in groups {
        check_lengths(scores, labels)?;
        match auc(scores, labels) {
            Some(a) => {
                weighted += scores.len() as f64 * a;
                weight += scores.len() as f64;
            }
            None => skipped += 1,
        }
    }
    if weight == 0.0 {
        return Err(Error::UndefinedMetric("GAUC: no query has both classes".into()));
    }
    Ok((weighted / weight, skipped))
}

/// Ranking by descending score with ties broken by ascending item index.
pub fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Binary-gain NDCG@k. `None` for queries without positives.
pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = ranking_order(scores)
        .into_iter()
        .take(k)
        .enumerate()
        .filter(|&(_, idx)| labels[idx] == 1)
        .map(|(rank, _)| discount(rank))
        .sum();
    let ideal: f64 = (0..positives.min(k)).map(discount).sum();
    if ideal == 0.0 {
        return None;
    }
    Some(dcg / ideal)
}

fn check_predictions(predictions: &[f64]) -> Result<()> {
    if let Some(p) = predictions.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Domain(format!("prediction {p} outside (0, 1)")));
    }
    Ok(())
}

pub fn logloss(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    check_predictions(predictions)?;
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("LogLoss of an empty set".into()));
    }
    let total: f64 = predictions.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum();
    Ok(total / predictions.len() as f64)
}

fn bce(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn ece_bin(prediction: f64) -> usize {
    ((prediction * ECE_BINS as f64).floor() as usize).min(ECE_BINS - 1)
}

/// Sum over bins of `|Σ (y − ŷ)|`, divided by the sample count.
pub fn ece(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    check_predictions(predictions)?;
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("ECE of an empty set".into()));
    }
    let mut residual = [0.0; ECE_BINS];
    for (&p, &y) in predictions.iter().zip(labels) {
        residual[ece_bin(p)] += f64::from(y) - p;
    }
    Ok(residual.iter().map(|r| r.abs()).sum::<f64>() / predictions.len() as f64)
}

/// Sum of predictions over sum of labels.
pub fn pcoc(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let positives: f64 = labels.iter().map(|&y| f64::from(y)).sum();
    if positives == 0.0 {
        return Err(Error::UndefinedMetric("PCOC without positive labels".into()));
    }
    Ok(predictions.iter().sum::<f64>() / positives)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    /// Queries with a defined AUC.
    pub evaluated: usize,
    /// Single-class queries excluded from GAUC.
    pub skipped: usize,
    pub samples: usize,
}

/// One evaluation pass. NaN marks a metric that was undefined on the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gauc: f64,
    pub ndcg_at_10: f64,
    pub logloss: f64,
    pub ece: f64,
    pub pcoc: f64,
    pub counts: MetricCounts,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "gauc,ndcg10,logloss,pcoc,ece,n_queries,n_skipped,n_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.gauc,
            self.ndcg_at_10,
            self.logloss,
            self.pcoc,
            self.ece,
            self.counts.evaluated + self.counts.skipped,
            self.counts.skipped,
            self.counts.samples
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        let num = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
        serde_json::json!({
            "gauc": num(self.gauc),
            "ndcg10": num(self.ndcg_at_10),
            "logloss": num(self.logloss),
            "pcoc": num(self.pcoc),
            "ece": num(self.ece),
            "n_queries": self.counts.evaluated + self.counts.skipped,
            "n_skipped": self.counts.skipped,
            "n_samples": self.counts.samples,
        })
    }
}

/// Streaming accumulator over query groups. Ranking metrics read `scores`;
/// calibration metrics read `probabilities`. Partial accumulators merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    auc_weighted: f64,
    auc_weight: f64,
    evaluated: usize,
    skipped: usize,
    ndcg_sum: f64,
    ndcg_queries: usize,
    logloss_sum: f64,
    prediction_sum: f64,
    label_sum: f64,
    residual: Vec<f64>,
    samples: usize,
}

impl Default for MetricAccumulator {
    fn default() -> Self {
        MetricAccumulator {
            auc_weighted: 0.0,
            auc_weight: 0.0,
            evaluated: 0,
            skipped: 0,
            ndcg_sum: 0.0,
            ndcg_queries: 0,
            logloss_sum: 0.0,
            prediction_sum: 0.0,
            label_sum: 0.0,
            residual: vec![0.0; ECE_BINS],
            samples: 0,
        }
    }
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, scores: &[f64], probabilities: &[f64], labels: &[u8]) -> Result<()> {
        check_lengths(scores, labels)?;
        check_lengths(probabilities, labels)?;
        check_predictions(probabilities)?;
        match auc(scores, labels) {
            Some(a) => {
                self.auc_weighted += scores.len() as f64 * a;
                self.auc_weight += scores.len() as f64;
                self.evaluated += 1;
            }
            None => self.skipped += 1,
        }
        if let Some(n) = ndcg_at_k(scores, labels, 10) {
            self.ndcg_sum += n;
            self.ndcg_queries += 1;
        }
        for (&p, &y) in probabilities.iter().zip(labels) {
            self.logloss_sum += bce(p, y);
            self.prediction_sum += p;
            self.label_sum += f64::from(y);
            self.residual[ece_bin(p)] += f64::from(y) - p;
        }
        self.samples += labels.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.auc_weighted += other.auc_weighted;
        self.auc_weight += other.auc_weight;
        self.evaluated += other.evaluated;
        self.skipped += other.skipped;
        self.ndcg_sum += other.ndcg_sum;
        self.ndcg_queries += other.ndcg_queries;
        self.logloss_sum += other.logloss_sum;
        self.prediction_sum += other.prediction_sum;
        self.label_sum += other.label_sum;
        for (a, b) in self.residual.iter_mut().zip(&other.residual) {
            *a += b;
        }
        self.samples += other.samples;
    }

    pub fn report(&self) -> MetricReport {
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };
        MetricReport {
            gauc: ratio(self.auc_weighted, self.auc_weight),
            ndcg_at_10: ratio(self.ndcg_sum, self.ndcg_queries as f64),
            logloss: ratio(self.logloss_sum, self.samples as f64),
            ece: ratio(self.residual.iter().map(|r| r.abs()).sum(), self.samples as f64),
            pcoc: ratio(self.prediction_sum, self.label_sum),
            counts: MetricCounts { evaluated: self.evaluated, skipped: self.skipped, samples: self.samples },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_reference_values() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 0, 1]), Some(0.5));
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 1, 0]), Some(1.0));
        assert_eq!(auc(&[0.4; 5], &[1, 0, 1, 0, 0]), Some(0.5));
        assert_eq!(auc(&[0.4, 0.2], &[1, 1]), None);
    }

    #[test]
    fn gauc_reference_values() {
        let groups: Vec<(Vec<f64>, Vec<u8>)> = vec![
            (vec![0.9, 0.1], vec![1, 0]),
            (vec![0.9, 0.8, 0.3], vec![1, 0, 1]),
            (vec![0.5, 0.4], vec![0, 0]),
        ];
        let (g, skipped) = gauc(groups.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))).unwrap();
        assert!((g - 0.7).abs() < 1e-15);
        assert_eq!(skipped, 1);
        let one = [(vec![0.9, 0.8, 0.3], vec![1u8, 0, 1])];
        let (g, _) = gauc(one.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))).unwrap();
        assert_eq!(g, 0.5);
        let none = [(vec![0.9, 0.8], vec![0u8, 0])];
        assert!(matches!(
            gauc(none.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ndcg_reference_values() {
        let v = ndcg_at_k(&[0.9, 0.1], &[0, 1], 10).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.630_930).abs() < 1e-6);
        assert_eq!(ndcg_at_k(&[0.9, 0.5, 0.1], &[1, 1, 0], 10), Some(1.0));
        assert_eq!(ndcg_at_k(&[0.9, 0.5], &[0, 0], 10), None);
        let s = [0.3, 0.7, 0.1, 0.5];
        let y = [1, 0, 1, 0];
        assert_eq!(ndcg_at_k(&s, &y, 4), ndcg_at_k(&s, &y, 100));
        // Equal scores fall back to index order.
        assert_eq!(ndcg_at_k(&[0.5, 0.5], &[1, 0], 1), Some(1.0));
        assert_eq!(ndcg_at_k(&[0.5, 0.5], &[0, 1], 1), Some(0.0));
    }

    #[test]
    fn logloss_reference_values() {
        assert!((logloss(&[0.5, 0.5], &[1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(logloss(&[1.0], &[1]), Err(Error::Domain(_))));
    }

    #[test]
    fn ece_reference_values() {
        assert!((ece(&[0.205, 0.209], &[0, 1]).unwrap() - 0.293).abs() < 1e-12);
        assert!((ece(&[0.3], &[1]).unwrap() - 0.7).abs() < 1e-12);
        // Bin-wise means: bin 25 holds 0.25 x4 with one positive.
        assert_eq!(ece(&[0.25, 0.25, 0.25, 0.25], &[1, 0, 0, 0]).unwrap(), 0.0);
        assert!(ece(&[0.0], &[0]).is_err());
    }

    #[test]
    fn pcoc_reference_values() {
        assert!((pcoc(&[0.2, 0.6], &[0, 1]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(pcoc(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(pcoc(&[0.25; 8], &[1, 0, 0, 1, 0, 0, 0, 0]).unwrap(), 1.0);
        assert!(matches!(pcoc(&[0.2], &[0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accumulator_matches_free_functions_and_merges() {
        let groups: Vec<(Vec<f64>, Vec<u8>)> = vec![
            (vec![0.9, 0.1, 0.4], vec![1, 0, 0]),
            (vec![0.2, 0.8, 0.3, 0.31], vec![1, 0, 1, 0]),
            (vec![0.5, 0.4], vec![0, 0]),
        ];
        let mut acc = MetricAccumulator::new();
        for (s, y) in &groups {
            acc.add_group(s, s, y).unwrap();
        }
        let r = acc.report();
        let (g, skipped) = gauc(groups.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))).unwrap();
        assert!((r.gauc - g).abs() < 1e-15);
        assert_eq!(r.counts.skipped, skipped);
        assert_eq!(r.counts.evaluated + r.counts.skipped, groups.len());
        let all_p: Vec<f64> = groups.iter().flat_map(|(s, _)| s.clone()).collect();
        let all_y: Vec<u8> = groups.iter().flat_map(|(_, y)| y.clone()).collect();
        assert!((r.ece - ece(&all_p, &all_y).unwrap()).abs() < 1e-15);
        assert!((r.logloss - logloss(&all_p, &all_y).unwrap()).abs() < 1e-15);
        assert!((r.pcoc - pcoc(&all_p, &all_y).unwrap()).abs() < 1e-15);

        let mut left = MetricAccumulator::new();
        let mut right = MetricAccumulator::new();
        left.add_group(&groups[0].0, &groups[0].0, &groups[0].1).unwrap();
        for (s, y) in &groups[1..] {
            right.add_group(s, s, y).unwrap();
        }
        left.merge(&right);
        assert_eq!(left.report().counts, r.counts);
        assert!((left.report().gauc - r.gauc).abs() < 1e-15);
    }

    #[test]
    fn report_serialisation_uses_fixed_names() {
        let mut acc = MetricAccumulator::new();
        acc.add_group(&[0.9, 0.1], &[0.9, 0.1], &[1, 0]).unwrap();
        let r = acc.report();
        let json = r.to_json();
        for key in ["gauc", "ndcg10", "logloss", "pcoc", "ece", "n_queries", "n_skipped", "n_samples"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(MetricReport::CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    }
}
