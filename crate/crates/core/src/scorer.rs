//! Dense networks for the ranking score and the calibration heights, with
//! explicit backpropagation and an Adam optimizer.
//!
//! Hidden layers use `tanh`; the output layer is linear. Weights start
//! uniform in `±1/sqrt(fan_in)`, biases at zero.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape, Error, Result};
use crate::math::sigmoid;
use crate::rng::StreamRng;

/// Number of calibrator intervals, and therefore the calibration-net output width.
pub const CALI_INTERVALS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs x inputs]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Multilayer perceptron. Also serves as its own gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by a forward pass; `values[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().unwrap()
    }
}

impl Mlp {
    /// `widths` lists input, hidden and output widths.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(shape(format!("invalid layer widths {widths:?}")));
        }
        Ok(Mlp { layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() })
    }

    pub fn init(widths: &[usize], rng: &mut StreamRng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape("network needs at least one layer"));
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(shape("layer parameter lengths do not match its widths"));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(shape("layer widths do not chain"));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn zeros_like(&self) -> Self {
        Mlp { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in checkpoint order: per layer, weights then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(shape(format!("network expects {} inputs, got {}", self.input_dim(), input.len())));
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(values.last().unwrap(), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            values.push(out);
        }
        if values.last().unwrap().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(Trace { values })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.values.pop().unwrap())
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grad: &mut Mlp) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(shape(format!("upstream gradient has {} entries, expected {}", upstream.len(), self.output_dim())));
        }
        if grad.widths() != self.widths() {
            return Err(shape("gradient tape does not match network shape"));
        }
        if upstream.iter().all(|&g| g == 0.0) {
            return Ok(());
        }
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.values[l];
            let g = &mut grad.layers[l];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // tanh'(z) = 1 - tanh(z)^2, with tanh(z) stored in the trace.
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.params_mut().for_each(|p| *p = 0.0);
    }

    pub fn l2_norm(&self) -> f64 {
        self.params().map(|p| p * p).sum::<f64>().sqrt()
    }

    fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_params() * 8);
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }
}

/// Per-parameter gradient accumulators for one mini-batch.
#[derive(Debug, Clone)]
pub struct GradientTape {
    grad: Mlp,
}

impl GradientTape {
    pub fn for_network(net: &Mlp) -> Self {
        GradientTape { grad: net.zeros_like() }
    }

    pub fn grad(&self) -> &Mlp {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Mlp {
        &mut self.grad
    }

    pub fn zero(&mut self) {
        self.grad.fill_zero();
    }

    pub fn is_zero(&self) -> bool {
        self.grad.params().all(|&g| g == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.grad.l2_norm()
    }
}

/// The scoring function `s(q, x)`: a dense net over `concat(query, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    net: Mlp,
    query_dim: usize,
    item_dim: usize,
}

impl ScorerParams {
    pub fn new(query_dim: usize, item_dim: usize, hidden: &[usize], rng: &mut StreamRng) -> Result<Self> {
        let widths = Self::widths_for(query_dim, item_dim, hidden);
        Ok(ScorerParams { net: Mlp::init(&widths, rng)?, query_dim, item_dim })
    }

    pub fn zeros(query_dim: usize, item_dim: usize, hidden: &[usize]) -> Result<Self> {
        let widths = Self::widths_for(query_dim, item_dim, hidden);
        Ok(ScorerParams { net: Mlp::zeros(&widths)?, query_dim, item_dim })
    }

    pub fn from_network(net: Mlp, query_dim: usize, item_dim: usize) -> Result<Self> {
        if net.input_dim() != query_dim + item_dim || net.output_dim() != 1 {
            return Err(shape("scorer network must map query+item features to one logit"));
        }
        Ok(ScorerParams { net, query_dim, item_dim })
    }

    fn widths_for(query_dim: usize, item_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut w = vec![query_dim + item_dim];
        w.extend_from_slice(hidden);
        w.push(1);
        w
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn query_dim(&self) -> usize {
        self.query_dim
    }

    pub fn item_dim(&self) -> usize {
        self.item_dim
    }

    fn input(&self, query: &[f64], item: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.query_dim || item.len() != self.item_dim {
            return Err(shape(format!(
                "scorer expects query/item dims {}/{}, got {}/{}",
                self.query_dim,
                self.item_dim,
                query.len(),
                item.len()
            )));
        }
        let mut z = Vec::with_capacity(self.query_dim + self.item_dim);
        z.extend_from_slice(query);
        z.extend_from_slice(item);
        Ok(z)
    }

    pub fn score_trace(&self, query: &[f64], item: &[f64]) -> Result<Trace> {
        self.net.forward_trace(&self.input(query, item)?)
    }

    pub fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        Ok(self.score_trace(query, item)?.output()[0])
    }

    pub fn predict(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(query, item)?))
    }

    /// Accumulates gradients for a batch of `(query, item)` inputs with one
    /// upstream `d(loss)/d(logit)` per sample.
    pub fn backward(&self, tape: &mut GradientTape, batch: &[(&[f64], &[f64])], upstream: &[f64]) -> Result<()> {
        if batch.len() != upstream.len() {
            return Err(shape("one upstream gradient per sample required"));
        }
        for ((q, x), &g) in batch.iter().zip(upstream) {
            let trace = self.score_trace(q, x)?;
            self.net.backward(&trace, &[g], &mut tape.grad)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ScorerParams {
        self.clone()
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.net.param_bytes()))
    }
}

/// The calibration-height network: query features to 100 raw heights.
#[derive(Debug, Clone, PartialEq)]
pub struct CaliNetParams {
    net: Mlp,
}

impl CaliNetParams {
    /// The output layer starts at zero so the calibrator starts as the identity.
    pub fn new(query_dim: usize, hidden: &[usize], rng: &mut StreamRng) -> Result<Self> {
        let mut widths = vec![query_dim];
        widths.extend_from_slice(hidden);
        widths.push(CALI_INTERVALS);
        let mut net = Mlp::init(&widths, rng)?;
        let out = net.layers.last_mut().unwrap();
        out.weights.iter_mut().for_each(|w| *w = 0.0);
        Ok(CaliNetParams { net })
    }

    pub fn from_network(net: Mlp) -> Result<Self> {
        if net.output_dim() != CALI_INTERVALS {
            return Err(shape(format!("calibration net must output {CALI_INTERVALS} heights")));
        }
        Ok(CaliNetParams { net })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn heights_trace(&self, query: &[f64]) -> Result<Trace> {
        self.net.forward_trace(query)
    }

    /// Raw (pre-softmax) interval heights for a query.
    pub fn cali_heights(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(query)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.net.param_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let n = net.num_params();
        AdamState { config, step: 0, first: vec![0.0; n], second: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update; zeroes the tape.
pub fn adam_step(params: &mut Mlp, tape: &mut GradientTape, state: &mut AdamState, batch_id: u64) -> Result<()> {
    if params.num_params() != state.first.len() || tape.grad.widths() != params.widths() {
        return Err(shape("optimizer state does not match parameters"));
    }
    if tape.grad.params().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient in batch {batch_id}")));
    }
    state.step += 1;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .params_mut()
        .zip(tape.grad.params())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    tape.zero();
    Ok(())
}

/// An immutable scorer snapshot as loaded by the Server.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub version: u64,
    /// Trainer step at which the snapshot was taken.
    pub step: u64,
    pub params: Arc<ScorerParams>,
}

/// Hands out monotonically increasing snapshot versions, starting at 1.
#[derive(Debug, Clone, Default)]
pub struct SnapshotCounter {
    last: u64,
}

impl SnapshotCounter {
    pub fn snapshot(&mut self, params: &ScorerParams, step: u64) -> Snapshot {
        self.last += 1;
        Snapshot { version: self.last, step, params: Arc::new(params.snapshot()) }
    }

    pub fn last_version(&self) -> u64 {
        self.last
    }
}
