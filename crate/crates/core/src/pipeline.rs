//! Deterministic Server/Trainer simulation.
//!
//! The Server scores each incoming query with its deployed snapshot, collects
//! the sampled feedback and logs one record per item carrying the full dumped
//! `(scores, labels)` vectors of the query. Records pass through a shuffle
//! buffer into mini-batches; the Trainer takes one optimizer step per batch
//! and every `sync_every_steps` steps the Server reloads a fresh snapshot.
//!
//! Wall-clock refresh is replaced by a step cadence. A query served while the
//! trainer is at step `t` uses a snapshot taken at some step in
//! `(t - sync_every_steps, t]`.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibrator::CalibratorKnots;
use crate::checkpoint;
use crate::error::{config, Error, Result};
use crate::losses::{
    calibration_loss, listnet_loss, multi_boost_loss, pairwise_loss, pointwise_loss_from_logit, DumpedContext,
};
use crate::math::sigmoid;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::rng::{self, StreamRng};
use crate::scorer::{adam_step, AdamConfig, AdamState, CaliNetParams, GradientTape, ScorerParams, Snapshot, SnapshotCounter, Trace};
use crate::world::{QueryGroup, QueryStream, SyntheticWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    /// Records from different queries interleave freely.
    ItemLevel,
    /// Queries stay whole and contiguous inside one batch.
    QueryLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Pointwise cross-entropy.
    Point,
    /// RankNet pairwise loss only.
    Pair,
    /// `α · point + (1 − α) · pairwise`, computed over whole queries.
    PointPairAggregated,
    /// ListNet only.
    Listnet,
    /// `α · point + (1 − α) · ListNet`, computed over whole queries.
    PointListnet,
    /// `α · point + (1 − α) · self-boosted pairwise`, per sample.
    Sbcr,
}

impl LossMode {
    /// Modes whose ranking term needs every record of a query in one batch.
    pub fn needs_whole_queries(self) -> bool {
        matches!(self, LossMode::Pair | LossMode::PointPairAggregated | LossMode::Listnet | LossMode::PointListnet)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Point => "point",
            LossMode::Pair => "pair",
            LossMode::PointPairAggregated => "point_pair_aggregated",
            LossMode::Listnet => "listnet",
            LossMode::PointListnet => "point_listnet",
            LossMode::Sbcr => "sbcr",
        }
    }
}

/// Policy serving the queries routed away by `traffic_split`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternatePolicy {
    /// The frozen initial checkpoint.
    Initial,
    /// Every candidate scores 0.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sync_every_steps: u64,
    pub shuffle_mode: ShuffleMode,
    /// Records held by the shuffle buffer before it starts emitting.
    pub shuffle_buffer_capacity: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub loss_mode: LossMode,
    /// Train the query-conditioned calibration module alongside the scorer.
    pub calibrator: bool,
    /// Weight of the calibration loss relative to the scorer loss.
    pub cali_weight: f64,
    /// Fraction of queries served and dumped by the alternate policy.
    pub traffic_split: f64,
    pub alternate_policy: AlternatePolicy,
    pub scorer_hidden: Vec<usize>,
    pub cali_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub cali_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Inverse-time decay: the learning rate at step `t` is
    /// `lr / (1 + t / lr_decay_steps)`. 0 keeps it constant.
    pub lr_decay_steps: u64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sync_every_steps: 20,
            shuffle_mode: ShuffleMode::ItemLevel,
            shuffle_buffer_capacity: 4096,
            batch_size: 512,
            alpha: 0.5,
            loss_mode: LossMode::Sbcr,
            calibrator: true,
            cali_weight: 1.0,
            traffic_split: 0.0,
            alternate_policy: AlternatePolicy::Initial,
            scorer_hidden: vec![64, 32],
            cali_hidden: vec![64, 32],
            learning_rate: 1e-3,
            cali_learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_decay_steps: 0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sync_every_steps < 1 {
            return Err(config("sync_every_steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(config("batch_size must be at least 1"));
        }
        if self.shuffle_buffer_capacity < self.batch_size {
            return Err(config("shuffle_buffer_capacity must be >= batch_size"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.traffic_split) {
            return Err(config("traffic_split must lie in [0, 1]"));
        }
        if !(self.cali_weight >= 0.0 && self.cali_weight.is_finite()) {
            return Err(config("cali_weight must be finite and >= 0"));
        }
        if self.loss_mode.needs_whole_queries() && self.shuffle_mode == ShuffleMode::ItemLevel {
            return Err(config(format!(
                "loss mode {} aggregates whole queries and cannot train on an item-level shuffled stream",
                self.loss_mode.name()
            )));
        }
        for lr in [self.learning_rate, self.cali_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config("learning rates must be positive"));
            }
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig { learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

/// One logged (query, item) sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub query_id: u64,
    pub user_id: usize,
    pub item_index: usize,
    pub item_id: usize,
    pub group_size: usize,
    pub query_features: Arc<Vec<f64>>,
    pub item_features: Vec<f64>,
    pub label: u8,
    /// Shared by all records of the query; `None` for logs without dumps.
    pub dumped: Option<Arc<DumpedContext>>,
    pub model_version: u64,
    /// Trainer step at serving time.
    pub served_at_step: u64,
}

/// Scoring policy that produces dumped scores.
#[derive(Debug, Clone)]
pub enum ServingPolicy {
    Model(Arc<ScorerParams>),
    Zero,
}

impl ServingPolicy {
    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        match self {
            ServingPolicy::Model(p) => p.score(query, item),
            ServingPolicy::Zero => Ok(0.0),
        }
    }
}

/// First query id of the held-out evaluation stream.
pub const EVAL_FIRST_ID: u64 = 1 << 40;

/// Version id reserved for the alternate policy.
pub const ALTERNATE_VERSION: u64 = 0;

/// Scores every candidate with `policy` and emits one record per item, each
/// carrying the full dumped vectors of the query.
pub fn serve_query(policy: &ServingPolicy, version: u64, group: &QueryGroup, served_at_step: u64) -> Result<Vec<LogRecord>> {
    let scores = group
        .item_features
        .iter()
        .map(|x| policy.score(&group.query_features, x))
        .collect::<Result<Vec<f64>>>()?;
    let dumped = Arc::new(DumpedContext::new(scores, group.labels.clone(), version)?);
    let query_features = Arc::new(group.query_features.clone());
    Ok((0..group.len())
        .map(|i| LogRecord {
            query_id: group.query_id,
            user_id: group.user_id,
            item_index: i,
            item_id: group.item_ids[i],
            group_size: group.len(),
            query_features: Arc::clone(&query_features),
            item_features: group.item_features[i].clone(),
            label: group.labels[i],
            dumped: Some(Arc::clone(&dumped)),
            model_version: version,
            served_at_step,
        })
        .collect())
}

/// The online Server: a lagged deployed snapshot plus optional traffic split.
pub struct Server {
    deployed: Snapshot,
    alternate: ServingPolicy,
    traffic_split: f64,
    traffic_rng: StreamRng,
    counter: SnapshotCounter,
    /// Trainer step of every deployed version.
    version_steps: BTreeMap<u64, u64>,
    retained: Option<BTreeMap<u64, Arc<ScorerParams>>>,
}

impl Server {
    pub fn new(initial: &ScorerParams, config: &PipelineConfig, retain_snapshots: bool) -> Self {
        let mut counter = SnapshotCounter::default();
        let deployed = counter.snapshot(initial, 0);
        let alternate = match config.alternate_policy {
            AlternatePolicy::Initial => ServingPolicy::Model(Arc::clone(&deployed.params)),
            AlternatePolicy::Zero => ServingPolicy::Zero,
        };
        let mut server = Server {
            alternate,
            traffic_split: config.traffic_split,
            traffic_rng: rng::stream(config.seed, rng::STREAM_TRAFFIC),
            counter,
            version_steps: BTreeMap::new(),
            retained: retain_snapshots.then(BTreeMap::new),
            deployed: deployed.clone(),
        };
        server.record(&deployed);
        server
    }

    fn record(&mut self, snap: &Snapshot) {
        self.version_steps.insert(snap.version, snap.step);
        if let Some(r) = &mut self.retained {
            r.insert(snap.version, Arc::clone(&snap.params));
        }
    }

    pub fn deployed(&self) -> &Snapshot {
        &self.deployed
    }

    pub fn deploy(&mut self, params: &ScorerParams, step: u64) -> &Snapshot {
        let snap = self.counter.snapshot(params, step);
        self.record(&snap);
        self.deployed = snap;
        &self.deployed
    }

    /// Routes the query to the deployed model or the alternate policy and
    /// logs the result.
    pub fn serve(&mut self, group: &QueryGroup, trainer_step: u64) -> Result<Vec<LogRecord>> {
        let alternate = self.traffic_split > 0.0 && self.traffic_rng.random::<f64>() < self.traffic_split;
        if alternate {
            serve_query(&self.alternate, ALTERNATE_VERSION, group, trainer_step)
        } else {
            let policy = ServingPolicy::Model(Arc::clone(&self.deployed.params));
            serve_query(&policy, self.deployed.version, group, trainer_step)
        }
    }

    pub fn version_step(&self, version: u64) -> Option<u64> {
        self.version_steps.get(&version).copied()
    }

    pub fn retained_snapshots(&self) -> Option<&BTreeMap<u64, Arc<ScorerParams>>> {
        self.retained.as_ref()
    }

    pub fn alternate_policy(&self) -> &ServingPolicy {
        &self.alternate
    }
}

/// Reloads the Server snapshot when `step` hits the sync cadence.
pub fn maybe_sync(trainer: &Trainer, server: &mut Server, sync_every_steps: u64) -> Option<u64> {
    let step = trainer.step();
    if step > 0 && step % sync_every_steps == 0 {
        Some(server.deploy(&trainer.scorer, step).version)
    } else {
        None
    }
}

/// Streaming shuffle buffer that assembles mini-batches.
///
/// Item-level mode keeps up to `capacity` records and emits a uniformly
/// random one each time it is full. Query-level mode does the same with
/// whole queries (capacity still counted in records) and never splits a
/// query across batches.
pub struct ShuffleBuffer {
    mode: ShuffleMode,
    capacity: usize,
    batch_size: usize,
    records: Vec<LogRecord>,
    groups: Vec<Vec<LogRecord>>,
    pending: usize,
    current: Vec<LogRecord>,
    ready: VecDeque<Vec<LogRecord>>,
    rng: StreamRng,
}

impl ShuffleBuffer {
    pub fn new(mode: ShuffleMode, capacity: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || capacity < batch_size {
            return Err(config("shuffle buffer needs batch_size >= 1 and capacity >= batch_size"));
        }
        Ok(ShuffleBuffer {
            mode,
            capacity,
            batch_size,
            records: Vec::new(),
            groups: Vec::new(),
            pending: 0,
            current: Vec::new(),
            ready: VecDeque::new(),
            rng: rng::stream(seed, rng::STREAM_SHUFFLE),
        })
    }

    pub fn push_group(&mut self, records: Vec<LogRecord>) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        match self.mode {
            ShuffleMode::ItemLevel => {
                for r in records {
                    self.records.push(r);
                    if self.records.len() >= self.capacity {
                        self.emit_record();
                    }
                }
            }
            ShuffleMode::QueryLevel => {
                if records.len() > self.batch_size {
                    return Err(config(format!(
                        "query of {} records exceeds batch_size {} under query-level shuffling",
                        records.len(),
                        self.batch_size
                    )));
                }
                self.pending += records.len();
                self.groups.push(records);
                while self.pending >= self.capacity {
                    self.emit_group();
                }
            }
        }
        Ok(())
    }

    fn emit_record(&mut self) {
        let i = self.rng.random_range(0..self.records.len());
        let r = self.records.swap_remove(i);
        self.current.push(r);
        if self.current.len() == self.batch_size {
            self.ready.push_back(std::mem::take(&mut self.current));
        }
    }

    fn emit_group(&mut self) {
        let i = self.rng.random_range(0..self.groups.len());
        let g = self.groups.swap_remove(i);
        self.pending -= g.len();
        if self.current.len() + g.len() > self.batch_size {
            self.ready.push_back(std::mem::take(&mut self.current));
        }
        self.current.extend(g);
        if self.current.len() == self.batch_size {
            self.ready.push_back(std::mem::take(&mut self.current));
        }
    }

    pub fn pop_batch(&mut self) -> Option<Vec<LogRecord>> {
        self.ready.pop_front()
    }

    /// Drains everything still buffered, in random order, and flushes the
    /// last partial batch.
    pub fn finish(&mut self) {
        while !self.records.is_empty() {
            self.emit_record();
        }
        while !self.groups.is_empty() {
            self.emit_group();
        }
        if !self.current.is_empty() {
            self.ready.push_back(std::mem::take(&mut self.current));
        }
    }

    pub fn buffered(&self) -> usize {
        self.records.len() + self.pending + self.current.len()
    }
}

/// Convenience: shuffle a finite stream of query groups into batches.
pub fn shuffle_and_batch(buffer: &mut ShuffleBuffer, groups: Vec<Vec<LogRecord>>) -> Result<Vec<Vec<LogRecord>>> {
    let mut out = Vec::new();
    for g in groups {
        buffer.push_group(g)?;
        while let Some(b) = buffer.pop_batch() {
            out.push(b);
        }
    }
    buffer.finish();
    while let Some(b) = buffer.pop_batch() {
        out.push(b);
    }
    Ok(out)
}

struct CaliHead {
    net: CaliNetParams,
    tape: GradientTape,
    opt: AdamState,
}

/// What one optimizer step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub samples: usize,
    pub queries: usize,
    pub loss: f64,
    pub cali_loss: Option<f64>,
    pub scorer_grad_norm: f64,
    pub cali_grad_norm: Option<f64>,
}

/// The near-line Trainer: scorer, optional calibration net, optimizers.
pub struct Trainer {
    pub scorer: ScorerParams,
    scorer_tape: GradientTape,
    scorer_opt: AdamState,
    cali: Option<CaliHead>,
    loss_mode: LossMode,
    alpha: f64,
    cali_weight: f64,
    learning_rate: f64,
    cali_learning_rate: f64,
    lr_decay_steps: u64,
    step: u64,
    missing_context: u64,
}

/// Smallest calibrated prediction fed to the calibration loss.
const CALI_FLOOR: f64 = 1e-12;

impl Trainer {
    pub fn new(config: &PipelineConfig, query_dim: usize, item_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut init = rng::stream(config.seed, rng::STREAM_INIT);
        let scorer = ScorerParams::new(query_dim, item_dim, &config.scorer_hidden, &mut init)?;
        let cali = if config.calibrator {
            let net = CaliNetParams::new(query_dim, &config.cali_hidden, &mut init)?;
            Some(CaliHead {
                tape: GradientTape::for_network(net.network()),
                opt: AdamState::new(net.network(), config.adam(config.cali_learning_rate)),
                net,
            })
        } else {
            None
        };
        Ok(Trainer {
            scorer_tape: GradientTape::for_network(scorer.network()),
            scorer_opt: AdamState::new(scorer.network(), config.adam(config.learning_rate)),
            scorer,
            cali,
            loss_mode: config.loss_mode,
            alpha: config.alpha,
            cali_weight: config.cali_weight,
            learning_rate: config.learning_rate,
            cali_learning_rate: config.cali_learning_rate,
            lr_decay_steps: config.lr_decay_steps,
            step: 0,
            missing_context: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Multiplier applied to both learning rates at the current step.
    pub fn lr_factor(&self) -> f64 {
        if self.lr_decay_steps == 0 {
            1.0
        } else {
            1.0 / (1.0 + self.step as f64 / self.lr_decay_steps as f64)
        }
    }

    pub fn cali_net(&self) -> Option<&CaliNetParams> {
        self.cali.as_ref().map(|c| &c.net)
    }

    /// Samples trained pointwise-only because they carried no dumped context.
    pub fn missing_context(&self) -> u64 {
        self.missing_context
    }

    pub fn loss_mode(&self) -> LossMode {
        self.loss_mode
    }

    /// Scorer loss and per-sample `d(loss)/d(logit)` for a batch, without
    /// touching any parameters.
    pub fn batch_loss(&self, batch: &[LogRecord], logits: &[f64]) -> Result<(f64, Vec<f64>, usize, u64)> {
        let n = batch.len() as f64;
        let alpha = self.alpha;
        let mut upstream = vec![0.0; batch.len()];
        let mut loss = 0.0;
        let mut missing = 0;
        let spans = query_spans(batch);
        let q = spans.len() as f64;
        match self.loss_mode {
            LossMode::Point => {
                for (i, r) in batch.iter().enumerate() {
                    let l = pointwise_loss_from_logit(logits[i], r.label);
                    loss += l.value / n;
                    upstream[i] = l.grad[0] / n;
                }
            }
            LossMode::Sbcr => {
                for (i, r) in batch.iter().enumerate() {
                    match r.dumped.as_deref() {
                        Some(d) => {
                            let l = multi_boost_loss(logits[i], r.label, Some(d), alpha)?;
                            loss += l.value / n;
                            upstream[i] = l.grad[0] / n;
                        }
                        None => {
                            missing += 1;
                            let l = pointwise_loss_from_logit(logits[i], r.label);
                            loss += alpha * l.value / n;
                            upstream[i] = alpha * l.grad[0] / n;
                        }
                    }
                }
            }
            mode => {
                let (point_weight, rank_weight) = match mode {
                    LossMode::Pair | LossMode::Listnet => (0.0, 1.0),
                    _ => (alpha, 1.0 - alpha),
                };
                for &(start, end) in &spans {
                    if end - start != batch[start].group_size {
                        return Err(config(format!(
                            "query {} is split across batches; loss mode {} needs whole queries",
                            batch[start].query_id,
                            mode.name()
                        )));
                    }
                    let labels: Vec<u8> = batch[start..end].iter().map(|r| r.label).collect();
                    let group_logits = &logits[start..end];
                    let rank = match mode {
                        LossMode::Pair | LossMode::PointPairAggregated => pairwise_loss(group_logits, &labels)?,
                        _ => listnet_loss(group_logits, &labels)?,
                    };
                    loss += rank_weight * rank.value / q;
                    for (k, g) in rank.grad.iter().enumerate() {
                        upstream[start + k] += rank_weight * g / q;
                    }
                    if point_weight > 0.0 {
                        for (k, (&s, &y)) in group_logits.iter().zip(&labels).enumerate() {
                            let l = pointwise_loss_from_logit(s, y);
                            loss += point_weight * l.value / n;
                            upstream[start + k] += point_weight * l.grad[0] / n;
                        }
                    }
                }
            }
        }
        Ok((loss, upstream, spans.len(), missing))
    }

    /// One optimizer step on each network. The scorer receives only the
    /// ranking/point loss; the calibration net receives only the calibration
    /// loss, with the scorer prediction treated as a constant input.
    pub fn train_step(&mut self, batch: &[LogRecord]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let traces: Vec<Trace> = batch
            .iter()
            .map(|r| self.scorer.score_trace(&r.query_features, &r.item_features))
            .collect::<Result<_>>()?;
        let logits: Vec<f64> = traces.iter().map(|t| t.output()[0]).collect();
        let (loss, upstream, queries, missing) = self.batch_loss(batch, &logits)?;
        self.missing_context += missing;
        for (trace, &g) in traces.iter().zip(&upstream) {
            self.scorer.network().backward(trace, &[g], self.scorer_tape.grad_mut())?;
        }
        let scorer_grad_norm = self.scorer_tape.norm();
        let factor = self.lr_factor();
        self.scorer_opt.config.learning_rate = self.learning_rate * factor;
        adam_step(self.scorer.network_mut(), &mut self.scorer_tape, &mut self.scorer_opt, self.step)?;

        let mut cali_loss = None;
        let mut cali_grad_norm = None;
        if let Some(head) = &mut self.cali {
            let n = batch.len() as f64;
            let mut total = 0.0;
            for (r, &s) in batch.iter().zip(&logits) {
                let prediction = sigmoid(s);
                let trace = head.net.heights_trace(&r.query_features)?;
                let knots = CalibratorKnots::from_raw(trace.output())?;
                let place = CalibratorKnots::place(prediction)?;
                let raw_value = knots.interval_value(place.interval, place.fraction);
                let value = raw_value.clamp(CALI_FLOOR, 1.0 - CALI_FLOOR);
                let l = calibration_loss(value, r.label)?;
                total += l.value / n;
                // The clamp has zero derivative outside its range.
                let dvalue = if value == raw_value { l.grad[0] } else { 0.0 };
                let raw_grad = knots.raw_gradient(place, self.cali_weight * dvalue / n);
                head.net.network().backward(&trace, &raw_grad, head.tape.grad_mut())?;
            }
            cali_grad_norm = Some(head.tape.norm());
            head.opt.config.learning_rate = self.cali_learning_rate * factor;
            adam_step(head.net.network_mut(), &mut head.tape, &mut head.opt, self.step)?;
            cali_loss = Some(total);
        }
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            samples: batch.len(),
            queries,
            loss,
            cali_loss,
            scorer_grad_norm,
            cali_grad_norm,
        })
    }

    /// Calibration-only update: trains the calibration net on `batch` and
    /// leaves the scorer untouched.
    pub fn calibration_step(&mut self, batch: &[LogRecord]) -> Result<f64> {
        let head = self.cali.as_mut().ok_or_else(|| config("trainer has no calibration module"))?;
        let n = batch.len() as f64;
        let mut total = 0.0;
        for r in batch {
            let prediction = self.scorer.predict(&r.query_features, &r.item_features)?;
            let trace = head.net.heights_trace(&r.query_features)?;
            let knots = CalibratorKnots::from_raw(trace.output())?;
            let place = CalibratorKnots::place(prediction)?;
            let raw_value = knots.interval_value(place.interval, place.fraction);
            let value = raw_value.clamp(CALI_FLOOR, 1.0 - CALI_FLOOR);
            let l = calibration_loss(value, r.label)?;
            total += l.value / n;
            let dvalue = if value == raw_value { l.grad[0] } else { 0.0 };
            let raw_grad = knots.raw_gradient(place, dvalue / n);
            head.net.network().backward(&trace, &raw_grad, head.tape.grad_mut())?;
        }
        adam_step(head.net.network_mut(), &mut head.tape, &mut head.opt, self.step)?;
        Ok(total)
    }
}

/// Contiguous `[start, end)` runs of equal `query_id`.
fn query_spans(batch: &[LogRecord]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 1..=batch.len() {
        if i == batch.len() || batch[i].query_id != batch[start].query_id {
            spans.push((start, i));
            start = i;
        }
    }
    spans
}

/// How evaluation turns logits into probabilities.
#[derive(Debug, Clone, Copy)]
pub enum EvalCalibration<'a> {
    None,
    Net(&'a CaliNetParams),
    Platt(crate::calibrator::PlattParams),
}

/// Ranking metrics read the raw logits; calibration metrics read the
/// (optionally calibrated) probabilities.
pub fn evaluate(scorer: &ScorerParams, calibration: EvalCalibration<'_>, groups: &[QueryGroup]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for g in groups {
        let (logits, probs) = group_outputs(scorer, calibration, g)?;
        acc.add_group(&logits, &probs, &g.labels)?;
    }
    Ok(acc.report())
}

/// Metrics of the ground-truth CTRs themselves: the ceiling any scorer can reach.
pub fn oracle_report(groups: &[QueryGroup]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for g in groups {
        acc.add_group(&g.true_ctrs, &g.true_ctrs, &g.labels)?;
    }
    Ok(acc.report())
}

/// Logits and (calibrated) probabilities for one query.
pub fn group_outputs(scorer: &ScorerParams, calibration: EvalCalibration<'_>, g: &QueryGroup) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits = g
        .item_features
        .iter()
        .map(|x| scorer.score(&g.query_features, x))
        .collect::<Result<Vec<f64>>>()?;
    let probs = match calibration {
        EvalCalibration::None => logits.iter().map(|&s| sigmoid(s)).collect(),
        EvalCalibration::Platt(p) => logits.iter().map(|&s| p.apply(s)).collect(),
        EvalCalibration::Net(net) => {
            let knots = CalibratorKnots::from_raw(&net.cali_heights(&g.query_features)?)?;
            logits
                .iter()
                .map(|&s| knots.calibrate(sigmoid(s)).map(|v| v.clamp(CALI_FLOOR, 1.0 - CALI_FLOOR)))
                .collect::<Result<Vec<f64>>>()?
        }
    };
    Ok((logits, probs))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub num_queries: usize,
    /// Evaluate every this many steps; 0 evaluates only at the start and end.
    pub eval_every: u64,
    pub eval_queries: usize,
    /// Keep every deployed snapshot in memory for provenance checks.
    pub retain_snapshots: bool,
    /// Write a scorer checkpoint at every sync.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { num_queries: 10_000, eval_every: 0, eval_queries: 2_000, retain_snapshots: false, checkpoint_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub step: u64,
    pub records_trained: u64,
    pub report: MetricReport,
}

pub struct RunOutput {
    pub timeseries: Vec<TimePoint>,
    pub final_report: MetricReport,
    pub trainer: Trainer,
    /// `None` for replayed runs.
    pub server: Option<Server>,
    pub records_served: u64,
    pub records_trained: u64,
    pub steps: u64,
    /// Largest `served_at_step - deployed_step` over model-served records.
    pub max_dump_age: u64,
    pub eval_groups: Vec<QueryGroup>,
}

struct Driver<'a> {
    config: &'a PipelineConfig,
    options: &'a RunOptions,
    trainer: Trainer,
    buffer: ShuffleBuffer,
    eval_groups: Vec<QueryGroup>,
    timeseries: Vec<TimePoint>,
    records_trained: u64,
}

impl<'a> Driver<'a> {
    fn new(world: &SyntheticWorld, config: &'a PipelineConfig, options: &'a RunOptions) -> Result<Self> {
        config.validate()?;
        let trainer = Trainer::new(config, world.config.query_dim, world.config.item_dim)?;
        let buffer = ShuffleBuffer::new(config.shuffle_mode, config.shuffle_buffer_capacity, config.batch_size, config.seed)?;
        let eval_groups =
            QueryStream::new(world, config.seed, rng::STREAM_EVAL_QUERIES, EVAL_FIRST_ID).take_groups(options.eval_queries)?;
        let mut d = Driver { config, options, trainer, buffer, eval_groups, timeseries: Vec::new(), records_trained: 0 };
        d.evaluate_now()?;
        Ok(d)
    }

    fn evaluate_now(&mut self) -> Result<()> {
        let calibration = match self.trainer.cali_net() {
            Some(net) => EvalCalibration::Net(net),
            None => EvalCalibration::None,
        };
        let report = evaluate(&self.trainer.scorer, calibration, &self.eval_groups)?;
        self.timeseries.push(TimePoint { step: self.trainer.step(), records_trained: self.records_trained, report });
        Ok(())
    }

    /// Trains on every ready batch; `after_step` runs after each step.
    fn drain(&mut self, server: &mut Option<&mut Server>) -> Result<()> {
        while let Some(batch) = self.buffer.pop_batch() {
            self.trainer.train_step(&batch)?;
            self.records_trained += batch.len() as u64;
            if let Some(server) = server.as_deref_mut() {
                if let Some(version) = maybe_sync(&self.trainer, server, self.config.sync_every_steps) {
                    if let Some(dir) = &self.options.checkpoint_dir {
                        let path = dir.join(format!("scorer_v{version:06}.ckpt"));
                        checkpoint::write_scorer(&path, &self.trainer.scorer, version, self.trainer.step())?;
                    }
                }
            }
            if self.options.eval_every > 0 && self.trainer.step() % self.options.eval_every == 0 {
                self.evaluate_now()?;
            }
        }
        Ok(())
    }

    fn finish(mut self, server: Option<Server>, records_served: u64, max_dump_age: u64) -> Result<RunOutput> {
        let mut s = server;
        self.buffer.finish();
        {
            let mut sref = s.as_mut();
            self.drain(&mut sref)?;
        }
        let last_step = self.timeseries.last().map(|t| t.step);
        if last_step != Some(self.trainer.step()) || self.timeseries.len() == 1 && self.trainer.step() > 0 {
            self.evaluate_now()?;
        }
        let final_report = self.timeseries.last().unwrap().report;
        Ok(RunOutput {
            timeseries: self.timeseries,
            final_report,
            steps: self.trainer.step(),
            trainer: self.trainer,
            server: s,
            records_served,
            records_trained: self.records_trained,
            max_dump_age,
            eval_groups: self.eval_groups,
        })
    }
}

/// Streams `num_queries` training queries through serve, log, shuffle and
/// train, evaluating on a fixed held-out stream. Every served record is
/// written to `log` as one NDJSON line when a sink is given.
pub fn run_experiment(
    world: &SyntheticWorld,
    config: &PipelineConfig,
    options: &RunOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<RunOutput> {
    let mut driver = Driver::new(world, config, options)?;
    let mut server = Server::new(&driver.trainer.scorer, config, options.retain_snapshots);
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let snap = server.deployed();
        checkpoint::write_scorer(&dir.join(format!("scorer_v{:06}.ckpt", snap.version)), &snap.params, snap.version, 0)?;
    }
    let mut stream = QueryStream::new(world, config.seed, rng::STREAM_TRAIN_QUERIES, 0);
    let mut served = 0u64;
    let mut max_age = 0u64;
    for _ in 0..options.num_queries {
        let group = stream.next_group()?;
        let step = driver.trainer.step();
        let records = server.serve(&group, step)?;
        if records[0].model_version != ALTERNATE_VERSION {
            let deployed_step = server.version_step(records[0].model_version).unwrap_or(0);
            max_age = max_age.max(step - deployed_step);
        }
        if let Some(sink) = log.as_deref_mut() {
            for r in &records {
                serde_json::to_writer(&mut *sink, r)?;
                sink.write_all(b"\n")?;
            }
        }
        served += records.len() as u64;
        driver.buffer.push_group(records)?;
        driver.drain(&mut Some(&mut server))?;
    }
    driver.finish(Some(server), served, max_age)
}

/// Re-runs training from a persisted log instead of live serving.
pub fn replay_experiment<I>(world: &SyntheticWorld, config: &PipelineConfig, options: &RunOptions, records: I) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<LogRecord>>,
{
    let mut driver = Driver::new(world, config, options)?;
    let mut served = 0u64;
    let mut group: Vec<LogRecord> = Vec::new();
    for r in records {
        let r = r?;
        if group.first().is_some_and(|g| g.query_id != r.query_id) {
            served += group.len() as u64;
            driver.buffer.push_group(std::mem::take(&mut group))?;
            driver.drain(&mut None)?;
        }
        group.push(r);
    }
    if !group.is_empty() {
        served += group.len() as u64;
        driver.buffer.push_group(group)?;
        driver.drain(&mut None)?;
    }
    driver.finish(None, served, 0)
}

/// Reads an NDJSON record log.
pub fn read_log<R: BufRead>(reader: R) -> impl Iterator<Item = Result<LogRecord>> {
    reader.lines().filter_map(|line| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(Error::from)),
        Err(e) => Some(Err(Error::from(e))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    fn record(query_id: u64, item_index: usize, group_size: usize) -> LogRecord {
        LogRecord {
            query_id,
            user_id: 0,
            item_index,
            item_id: item_index,
            group_size,
            query_features: Arc::new(vec![0.1, 0.2]),
            item_features: vec![item_index as f64 * 0.1, -0.3],
            label: (item_index % 2) as u8,
            dumped: None,
            model_version: 1,
            served_at_step: 0,
        }
    }

    fn group(query_id: u64, n: usize) -> Vec<LogRecord> {
        (0..n).map(|i| record(query_id, i, n)).collect()
    }

    #[test]
    fn capacity_one_keeps_arrival_order() {
        let mut buf = ShuffleBuffer::new(ShuffleMode::ItemLevel, 1, 1, 3).unwrap();
        let groups: Vec<_> = (0..5).map(|q| group(q, 3)).collect();
        let batches = shuffle_and_batch(&mut buf, groups).unwrap();
        let order: Vec<(u64, usize)> = batches.iter().flatten().map(|r| (r.query_id, r.item_index)).collect();
        let expected: Vec<(u64, usize)> = (0..5).flat_map(|q| (0..3).map(move |i| (q, i))).collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn query_level_batches_hold_whole_queries() {
        let mut buf = ShuffleBuffer::new(ShuffleMode::QueryLevel, 40, 10, 3).unwrap();
        let groups: Vec<_> = (0..50).map(|q| group(q, 2 + (q as usize % 5))).collect();
        let batches = shuffle_and_batch(&mut buf, groups).unwrap();
        let mut seen = 0;
        for b in &batches {
            assert!(b.len() <= 10);
            for (s, e) in query_spans(b) {
                assert_eq!(e - s, b[s].group_size);
            }
            seen += b.len();
        }
        assert_eq!(seen, (0..50).map(|q| 2 + (q % 5)).sum::<usize>());
    }

    #[test]
    fn oversized_query_is_rejected_under_query_level() {
        let mut buf = ShuffleBuffer::new(ShuffleMode::QueryLevel, 8, 4, 0).unwrap();
        assert!(matches!(buf.push_group(group(0, 5)), Err(Error::Config(_))));
    }

    #[test]
    fn every_record_is_emitted_once() {
        let mut buf = ShuffleBuffer::new(ShuffleMode::ItemLevel, 64, 16, 9).unwrap();
        let groups: Vec<_> = (0..100).map(|q| group(q, 7)).collect();
        let batches = shuffle_and_batch(&mut buf, groups).unwrap();
        let mut ids: Vec<(u64, usize)> = batches.iter().flatten().map(|r| (r.query_id, r.item_index)).collect();
        ids.sort_unstable();
        let expected: Vec<(u64, usize)> = (0..100).flat_map(|q| (0..7).map(move |i| (q, i))).collect();
        assert_eq!(ids, expected);
        assert_eq!(buf.buffered(), 0);
    }

    #[test]
    fn aggregated_loss_rejects_item_level_config() {
        let cfg = PipelineConfig { loss_mode: LossMode::PointPairAggregated, ..PipelineConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let ok = PipelineConfig { shuffle_mode: ShuffleMode::QueryLevel, ..cfg };
        ok.validate().unwrap();
    }

    #[test]
    fn aggregated_loss_rejects_split_queries() {
        let cfg = PipelineConfig {
            loss_mode: LossMode::Pair,
            shuffle_mode: ShuffleMode::QueryLevel,
            calibrator: false,
            batch_size: 4,
            shuffle_buffer_capacity: 4,
            scorer_hidden: vec![3],
            ..PipelineConfig::default()
        };
        let mut t = Trainer::new(&cfg, 2, 2).unwrap();
        let mut g = group(0, 4);
        g.truncate(3);
        assert!(matches!(t.train_step(&g), Err(Error::Config(_))));
    }

    #[test]
    fn sbcr_trains_on_a_single_sample() {
        let cfg = PipelineConfig { scorer_hidden: vec![3], cali_hidden: vec![4], ..PipelineConfig::default() };
        let mut t = Trainer::new(&cfg, 2, 2).unwrap();
        let mut r = record(0, 1, 3);
        r.dumped = Some(Arc::new(DumpedContext::new(vec![0.5, 0.2, -0.1], vec![0, 1, 0], 1).unwrap()));
        let stats = t.train_step(&[r]).unwrap();
        assert_eq!(stats.samples, 1);
        assert!(stats.loss > 0.0);
        assert_eq!(t.missing_context(), 0);
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn sbcr_without_context_falls_back_and_counts() {
        let cfg = PipelineConfig { calibrator: false, scorer_hidden: vec![3], ..PipelineConfig::default() };
        let mut t = Trainer::new(&cfg, 2, 2).unwrap();
        t.train_step(&group(0, 3)).unwrap();
        assert_eq!(t.missing_context(), 3);
    }

    fn tiny_world() -> SyntheticWorld {
        generate_world(&WorldConfig {
            num_users: 30,
            num_items: 40,
            candidates_per_query: (3, 6),
            seed: 2,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_lag_dumps_equal_live_scores() {
        let w = tiny_world();
        let cfg = PipelineConfig { scorer_hidden: vec![4], ..PipelineConfig::default() };
        let t = Trainer::new(&cfg, w.config.query_dim, w.config.item_dim).unwrap();
        let server = Server::new(&t.scorer, &cfg, false);
        let g = QueryStream::new(&w, 0, rng::STREAM_TRAIN_QUERIES, 0).next_group().unwrap();
        let policy = ServingPolicy::Model(Arc::clone(&server.deployed().params));
        let recs = serve_query(&policy, server.deployed().version, &g, 0).unwrap();
        assert_eq!(recs.len(), g.len());
        let d = recs[0].dumped.as_ref().unwrap();
        for (i, x) in g.item_features.iter().enumerate() {
            assert_eq!(d.scores[i], t.scorer.score(&g.query_features, x).unwrap());
        }
    }

    #[test]
    fn full_traffic_split_to_zero_policy_dumps_zeros() {
        let w = tiny_world();
        let cfg = PipelineConfig {
            traffic_split: 1.0,
            alternate_policy: AlternatePolicy::Zero,
            scorer_hidden: vec![4],
            ..PipelineConfig::default()
        };
        let t = Trainer::new(&cfg, w.config.query_dim, w.config.item_dim).unwrap();
        let mut server = Server::new(&t.scorer, &cfg, false);
        let mut stream = QueryStream::new(&w, 0, rng::STREAM_TRAIN_QUERIES, 0);
        for _ in 0..20 {
            let recs = server.serve(&stream.next_group().unwrap(), 0).unwrap();
            let d = recs[0].dumped.as_ref().unwrap();
            assert!(d.scores.iter().all(|&s| s == 0.0));
            assert_eq!(d.model_version, ALTERNATE_VERSION);
        }
    }

    #[test]
    fn sync_cadence_and_versions() {
        let cfg = PipelineConfig {
            sync_every_steps: 3,
            calibrator: false,
            scorer_hidden: vec![2],
            batch_size: 2,
            shuffle_buffer_capacity: 2,
            loss_mode: LossMode::Point,
            ..PipelineConfig::default()
        };
        let mut t = Trainer::new(&cfg, 2, 2).unwrap();
        let mut server = Server::new(&t.scorer, &cfg, true);
        let mut versions = vec![server.deployed().version];
        for _ in 0..10 {
            t.train_step(&group(0, 2)).unwrap();
            if let Some(v) = maybe_sync(&t, &mut server, cfg.sync_every_steps) {
                assert_eq!(t.step() % 3, 0);
                versions.push(v);
            }
        }
        assert_eq!(versions, vec![1, 2, 3, 4]);
        assert_eq!(server.version_step(4), Some(9));
    }

    #[test]
    fn no_queries_means_initial_evaluation_only() {
        let w = tiny_world();
        let cfg = PipelineConfig { scorer_hidden: vec![4], cali_hidden: vec![4], ..PipelineConfig::default() };
        let opts = RunOptions { num_queries: 0, eval_queries: 50, ..RunOptions::default() };
        let out = run_experiment(&w, &cfg, &opts, None).unwrap();
        assert_eq!(out.timeseries.len(), 1);
        assert_eq!(out.steps, 0);
    }
}
