//! Replicated experiment suite and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::calibrator::platt_fit;
use crate::error::{config, Error, Result};
use crate::metrics::MetricReport;
use crate::pipeline::{
    evaluate, group_outputs, oracle_report, run_experiment, EVAL_FIRST_ID, EvalCalibration, LossMode, PipelineConfig, RunOptions, RunOutput,
    ShuffleMode, TimePoint,
};
use crate::rng;
use crate::world::{generate_world, QueryStream, SyntheticWorld, WorldConfig};

/// First query id of the Platt fitting stream, far from training and
/// evaluation ids.
const CALIBRATION_FIRST_ID: u64 = 2 << 40;

/// Everything one command needs. Serialized as one JSON document; missing
/// fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub world: WorldConfig,
    pub pipeline: PipelineConfig,
    /// Training queries streamed per run.
    pub num_queries: usize,
    /// Held-out queries per evaluation.
    pub eval_queries: usize,
    /// Evaluate every this many steps (0: start and end only).
    pub eval_every: u64,
    /// Queries used to fit the Platt baseline.
    pub calibration_queries: usize,
    /// Replication seeds. Each seed drives both the world and the pipeline.
    pub seeds: Vec<u64>,
    /// Relative ranking weights `(1 - α) / α` for the α sweep.
    pub weights: Vec<f64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            world: WorldConfig::default(),
            pipeline: PipelineConfig::default(),
            num_queries: 10_000,
            eval_queries: 2_000,
            eval_every: 0,
            calibration_queries: 2_000,
            seeds: vec![1, 2, 3, 4, 5],
            weights: vec![0.01, 0.1, 1.0, 10.0, 100.0],
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config("seeds must not be empty"));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(config("weights must be positive and finite"));
        }
        if self.eval_queries == 0 {
            return Err(config("eval_queries must be at least 1"));
        }
        self.world.validate()?;
        self.pipeline.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config(format!("experiment spec: {e}")))
    }

    /// Applies a `key=value` override. Keys are dotted paths
    /// (`pipeline.batch_size`); a bare key is looked up at top level first,
    /// then inside `world` and `pipeline`. Values parse as JSON, falling back
    /// to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let path: Vec<&str> = if key.contains('.') {
            key.split('.').collect()
        } else if doc.get(key).is_some() {
            vec![key]
        } else if doc["world"].get(key).is_some() {
            vec!["world", key]
        } else if doc["pipeline"].get(key).is_some() {
            vec!["pipeline", key]
        } else {
            return Err(config(format!("unknown spec key `{key}`")));
        };
        let mut slot = &mut doc;
        for part in &path {
            slot = slot
                .get_mut(*part)
                .ok_or_else(|| config(format!("unknown spec key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            num_queries: self.num_queries,
            eval_every: self.eval_every,
            eval_queries: self.eval_queries,
            retain_snapshots: false,
            checkpoint_dir: None,
        }
    }

    /// The world for one replication seed.
    pub fn world_for_seed(&self, seed: u64) -> Result<SyntheticWorld> {
        generate_world(&WorldConfig { seed, ..self.world.clone() })
    }
}

/// The six compared training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pointwise,
    RankNet,
    ListNet,
    PointRankNet,
    PointListNet,
    Sbcr,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Pointwise, Method::RankNet, Method::ListNet, Method::PointRankNet, Method::PointListNet, Method::Sbcr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pointwise => "pointwise",
            Method::RankNet => "ranknet",
            Method::ListNet => "listnet",
            Method::PointRankNet => "point_ranknet",
            Method::PointListNet => "point_listnet",
            Method::Sbcr => "sbcr",
        }
    }

    /// Pipeline settings for this method on top of `base`. Only SBCR trains
    /// the calibration module; ranking losses that need whole queries use
    /// query-level shuffling.
    pub fn pipeline(self, base: &PipelineConfig) -> PipelineConfig {
        let (loss_mode, shuffle_mode, calibrator) = match self {
            Method::Pointwise => (LossMode::Point, ShuffleMode::ItemLevel, false),
            Method::RankNet => (LossMode::Pair, ShuffleMode::QueryLevel, false),
            Method::ListNet => (LossMode::Listnet, ShuffleMode::QueryLevel, false),
            Method::PointRankNet => (LossMode::PointPairAggregated, ShuffleMode::QueryLevel, false),
            Method::PointListNet => (LossMode::PointListnet, ShuffleMode::QueryLevel, false),
            Method::Sbcr => (LossMode::Sbcr, ShuffleMode::ItemLevel, true),
        };
        PipelineConfig { loss_mode, shuffle_mode, calibrator, ..base.clone() }
    }
}

/// `α = 1 / (1 + w)` for a relative ranking weight `w = (1 - α) / α`.
pub fn alpha_for_weight(weight: f64) -> f64 {
    1.0 / (1.0 + weight)
}

/// One metric row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: String,
    pub seed: u64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesRow {
    pub cell: String,
    pub seed: u64,
    pub point: TimePoint,
}

/// Paired comparison across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub cell: String,
    pub baseline: String,
    pub metric: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value over non-tied seeds.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandReport {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub timeseries: Vec<TimeseriesRow>,
    /// `(cell, baseline)` pairs compared by sign tests.
    pub comparisons: Vec<(String, String)>,
    pub extra: Value,
}

impl CommandReport {
    fn new(command: &str, spec: &ExperimentSpec) -> Self {
        CommandReport {
            command: command.to_string(),
            config_hash: spec.config_hash(),
            seeds: spec.seeds.clone(),
            rows: Vec::new(),
            timeseries: Vec::new(),
            comparisons: Vec::new(),
            extra: Value::Null,
        }
    }

    fn push_run(&mut self, cell: &str, seed: u64, report: MetricReport, series: &[TimePoint]) {
        self.rows.push(ReportRow { cell: cell.to_string(), seed, report });
        self.timeseries
            .extend(series.iter().map(|p| TimeseriesRow { cell: cell.to_string(), seed, point: p.clone() }));
    }

    /// Cells in first-seen order.
    pub fn cells(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.cell) {
                out.push(r.cell.clone());
            }
        }
        out
    }

    pub fn rows_for<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.cell == cell)
    }

    /// Metric of `cell` at `seed`.
    pub fn get(&self, cell: &str, seed: u64) -> Option<&MetricReport> {
        self.rows.iter().find(|r| r.cell == cell && r.seed == seed).map(|r| &r.report)
    }

    pub fn report_csv(&self) -> String {
        let mut s = format!("cell,seed,{}\n", MetricReport::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.cell, r.seed, r.report.csv_row());
        }
        s
    }

    pub fn timeseries_csv(&self) -> String {
        let mut s = format!("cell,seed,step,records_trained,{}\n", MetricReport::CSV_HEADER);
        for t in &self.timeseries {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                t.cell,
                t.seed,
                t.point.step,
                t.point.records_trained,
                t.point.report.csv_row()
            );
        }
        s
    }

    pub fn sign_tests(&self) -> Vec<SignTest> {
        let mut out = Vec::new();
        for (cell, baseline) in &self.comparisons {
            for metric in ["gauc", "logloss", "ece"] {
                let higher_is_better = metric == "gauc";
                let (mut wins, mut losses, mut ties) = (0, 0, 0);
                for seed in &self.seeds {
                    let (Some(a), Some(b)) = (self.get(cell, *seed), self.get(baseline, *seed)) else { continue };
                    let (x, y) = (metric_value(a, metric), metric_value(b, metric));
                    if x == y || !x.is_finite() || !y.is_finite() {
                        ties += 1;
                    } else if (x > y) == higher_is_better {
                        wins += 1;
                    } else {
                        losses += 1;
                    }
                }
                out.push(SignTest {
                    cell: cell.clone(),
                    baseline: baseline.clone(),
                    metric: metric.to_string(),
                    wins,
                    losses,
                    ties,
                    p_value: sign_test_p_value(wins, losses),
                });
            }
        }
        out
    }

    pub fn summary_json(&self) -> Value {
        let cells: Vec<Value> = self
            .cells()
            .iter()
            .map(|cell| {
                let reports: Vec<&MetricReport> = self.rows_for(cell).map(|r| &r.report).collect();
                let mut mean = serde_json::Map::new();
                let mut spread = serde_json::Map::new();
                for metric in METRIC_NAMES {
                    let values: Vec<f64> = reports.iter().map(|r| metric_value(r, metric)).collect();
                    let (m, s) = mean_and_std(&values);
                    mean.insert(metric.to_string(), finite_or_null(m));
                    spread.insert(metric.to_string(), finite_or_null(s));
                }
                json!({ "cell": cell, "runs": reports.len(), "mean": mean, "std": spread })
            })
            .collect();
        json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "cells": cells,
            "significance": {
                "method": "two-sided exact sign test across seeds",
                "note": "substitute for an unspecified significance test",
                "tests": self.sign_tests(),
            },
            "extra": self.extra,
        })
    }

    /// Writes `report.csv`, `summary.json` and `timeseries.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.report_csv())?;
        std::fs::write(dir.join("timeseries.csv"), self.timeseries_csv())?;
        let mut summary = serde_json::to_string_pretty(&self.summary_json())?;
        summary.push('\n');
        std::fs::write(dir.join("summary.json"), summary)?;
        Ok(())
    }
}

const METRIC_NAMES: [&str; 5] = ["gauc", "ndcg10", "logloss", "pcoc", "ece"];

pub fn metric_value(r: &MetricReport, metric: &str) -> f64 {
    match metric {
        "gauc" => r.gauc,
        "ndcg10" => r.ndcg_at_10,
        "logloss" => r.logloss,
        "pcoc" => r.pcoc,
        "ece" => r.ece,
        _ => f64::NAN,
    }
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided exact sign test: `min(1, 2 · P(X ≤ min(wins, losses)))` for
/// `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test_p_value(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    let mut coef = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            coef = coef * (n - i + 1) as f64 / i as f64;
        }
        tail += coef;
    }
    (2.0 * tail * 0.5f64.powi(n as i32)).min(1.0)
}

fn tag<T>(label: &str, seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Run { label: label.to_string(), seed, source: Box::new(e) })
}

/// One training run of `pipeline` in the world of `seed`.
pub fn run_cell(spec: &ExperimentSpec, world: &SyntheticWorld, pipeline: &PipelineConfig, seed: u64) -> Result<RunOutput> {
    let cfg = PipelineConfig { seed, ..pipeline.clone() };
    run_experiment(world, &cfg, &spec.run_options(), None)
}

fn worlds(spec: &ExperimentSpec) -> Result<Vec<(u64, SyntheticWorld)>> {
    spec.seeds.iter().map(|&s| tag("world", s, spec.world_for_seed(s)).map(|w| (s, w))).collect()
}

/// Trains every method in `methods` for every seed.
pub fn compare_methods(spec: &ExperimentSpec, methods: &[Method]) -> Result<CommandReport> {
    spec.validate()?;
    let mut report = CommandReport::new("compare", spec);
    let mut oracle = BTreeMap::new();
    for (seed, world) in worlds(spec)? {
        let held_out = QueryStream::new(&world, seed, rng::STREAM_EVAL_QUERIES, EVAL_FIRST_ID).take_groups(spec.eval_queries)?;
        oracle.insert(seed.to_string(), oracle_report(&held_out)?.to_json());
        for &m in methods {
            let out = tag(m.name(), seed, run_cell(spec, &world, &m.pipeline(&spec.pipeline), seed))?;
            report.push_run(m.name(), seed, out.final_report, &out.timeseries);
        }
    }
    if methods.contains(&Method::Pointwise) {
        report.comparisons = methods
            .iter()
            .filter(|&&m| m != Method::Pointwise)
            .map(|m| (m.name().to_string(), Method::Pointwise.name().to_string()))
            .collect();
    }
    report.extra = json!({
        "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "oracle": oracle,
    });
    Ok(report)
}

pub fn cmd_compare(spec: &ExperimentSpec) -> Result<CommandReport> {
    compare_methods(spec, &Method::ALL)
}

/// The four shuffle-ablation cells as `(label, loss, shuffle)`.
pub const SHUFFLE_CELLS: [(&str, LossMode, ShuffleMode); 4] = [
    ("point/shuffle", LossMode::Point, ShuffleMode::ItemLevel),
    ("point/aggregate", LossMode::Point, ShuffleMode::QueryLevel),
    ("point_pair/shuffle", LossMode::Sbcr, ShuffleMode::ItemLevel),
    ("point_pair/aggregate", LossMode::PointPairAggregated, ShuffleMode::QueryLevel),
];

/// Runs the shuffle-ablation cells whose labels are in `cells` (all when empty).
pub fn shuffle_ablation(spec: &ExperimentSpec, cells: &[&str]) -> Result<CommandReport> {
    spec.validate()?;
    let mut report = CommandReport::new("shuffle-ablation", spec);
    let chosen: Vec<_> = SHUFFLE_CELLS.iter().filter(|c| cells.is_empty() || cells.contains(&c.0)).collect();
    for (seed, world) in worlds(spec)? {
        for &&(label, loss_mode, shuffle_mode) in &chosen {
            let cfg = PipelineConfig { loss_mode, shuffle_mode, calibrator: false, ..spec.pipeline.clone() };
            let out = tag(label, seed, run_cell(spec, &world, &cfg, seed))?;
            report.push_run(label, seed, out.final_report, &out.timeseries);
        }
    }
    for (shuf, aggr) in [("point/shuffle", "point/aggregate"), ("point_pair/shuffle", "point_pair/aggregate")] {
        if chosen.iter().any(|c| c.0 == shuf) && chosen.iter().any(|c| c.0 == aggr) {
            report.comparisons.push((shuf.to_string(), aggr.to_string()));
        }
    }
    Ok(report)
}

pub fn cmd_shuffle_ablation(spec: &ExperimentSpec) -> Result<CommandReport> {
    shuffle_ablation(spec, &[])
}

pub fn alpha_cell(weight: f64, calibrator: bool) -> String {
    format!("w={weight}/calibrator={}", if calibrator { "on" } else { "off" })
}

/// SBCR for every weight, with and without the calibration module.
pub fn cmd_alpha_sweep(spec: &ExperimentSpec, weights: &[f64]) -> Result<CommandReport> {
    spec.validate()?;
    if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(config("alpha sweep weights must be positive and finite"));
    }
    let mut report = CommandReport::new("alpha-sweep", spec);
    for (seed, world) in worlds(spec)? {
        for &w in weights {
            for calibrator in [true, false] {
                let label = alpha_cell(w, calibrator);
                let cfg = PipelineConfig {
                    loss_mode: LossMode::Sbcr,
                    shuffle_mode: ShuffleMode::ItemLevel,
                    alpha: alpha_for_weight(w),
                    calibrator,
                    ..spec.pipeline.clone()
                };
                let out = tag(&label, seed, run_cell(spec, &world, &cfg, seed))?;
                report.push_run(&label, seed, out.final_report, &out.timeseries);
            }
        }
    }
    report.comparisons = weights.iter().map(|&w| (alpha_cell(w, true), alpha_cell(w, false))).collect();
    report.extra = json!({
        "weights": weights,
        "alphas": weights.iter().map(|&w| alpha_for_weight(w)).collect::<Vec<_>>(),
    });
    Ok(report)
}

pub const CALIBRATION_MODELS: [(&str, LossMode, ShuffleMode); 2] =
    [("listnet", LossMode::Listnet, ShuffleMode::QueryLevel), ("sbr", LossMode::Sbcr, ShuffleMode::ItemLevel)];

pub const CALIBRATION_KINDS: [&str; 3] = ["none", "platt", "calib"];

/// Fits Platt scaling on the calibration stream with the trained scorer.
fn fit_platt(spec: &ExperimentSpec, world: &SyntheticWorld, out: &RunOutput, seed: u64) -> Result<crate::calibrator::PlattParams> {
    let groups =
        QueryStream::new(world, seed, rng::STREAM_CALIBRATION_QUERIES, CALIBRATION_FIRST_ID).take_groups(spec.calibration_queries)?;
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for g in &groups {
        let (s, _) = group_outputs(&out.trainer.scorer, EvalCalibration::None, g)?;
        logits.extend(s);
        labels.extend_from_slice(&g.labels);
    }
    platt_fit(&logits, &labels)
}

/// `{ListNet, SBR} × {none, Platt, Calib}`. Each ranking model is trained
/// once with the calibration module attached; the stop-gradient leaves its
/// scorer identical to a run without it, so all three rows share one scorer.
/// Fails if GAUC differs between calibrators of the same model.
pub fn cmd_calibration_ablation(spec: &ExperimentSpec) -> Result<CommandReport> {
    spec.validate()?;
    let mut report = CommandReport::new("calibration-ablation", spec);
    let mut platt = BTreeMap::new();
    for (seed, world) in worlds(spec)? {
        for (model, loss_mode, shuffle_mode) in CALIBRATION_MODELS {
            let cfg = PipelineConfig { loss_mode, shuffle_mode, calibrator: true, ..spec.pipeline.clone() };
            let out = tag(model, seed, run_cell(spec, &world, &cfg, seed))?;
            let params = tag(model, seed, fit_platt(spec, &world, &out, seed))?;
            platt.insert(format!("{model}/{seed}"), json!({ "scale": params.scale, "offset": params.offset }));
            let net = out.trainer.cali_net().expect("calibrator enabled");
            let scorer = &out.trainer.scorer;
            let reports = [
                evaluate(scorer, EvalCalibration::None, &out.eval_groups)?,
                evaluate(scorer, EvalCalibration::Platt(params), &out.eval_groups)?,
                evaluate(scorer, EvalCalibration::Net(net), &out.eval_groups)?,
            ];
            for r in &reports[1..] {
                if r.gauc.to_bits() != reports[0].gauc.to_bits() || r.ndcg_at_10.to_bits() != reports[0].ndcg_at_10.to_bits() {
                    return Err(Error::Run {
                        label: model.to_string(),
                        seed,
                        source: Box::new(Error::Numeric(format!(
                            "ranking metrics changed under calibration: {} vs {}",
                            r.gauc, reports[0].gauc
                        ))),
                    });
                }
            }
            for (kind, r) in CALIBRATION_KINDS.iter().zip(reports) {
                let label = format!("{model}/{kind}");
                let series = if *kind == "calib" { out.timeseries.as_slice() } else { &[] };
                report.push_run(&label, seed, r, series);
            }
        }
    }
    for (model, _, _) in CALIBRATION_MODELS {
        for kind in ["platt", "calib"] {
            report.comparisons.push((format!("{model}/{kind}"), format!("{model}/none")));
        }
    }
    report.extra = json!({ "platt": platt, "gauc_invariant": true });
    Ok(report)
}

pub use crate::oracle::{pair_optimum as cmd_theorem1_oracle, PairOptimum};
