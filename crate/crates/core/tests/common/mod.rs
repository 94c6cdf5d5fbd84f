//! Shared oracles for the integration and acceptance suites.
#![allow(dead_code)]

use calrank::calibrator::CalibratorKnots;
use calrank::losses::{
    calibration_loss, listnet_loss, multi_boost_loss, multi_objective_loss, pairwise_loss, point_listnet_loss,
    pointwise_loss_from_logit, self_boost_pair_loss, DumpedContext, LossValueGrad,
};
use calrank::rng::{self, StreamRng};
use calrank::scorer::{Mlp, CALI_INTERVALS};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Point,
    Pair,
    ListNet,
    PointPair,
    PointListNet,
    SelfBoost,
    MultiBoost,
    Calibration,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Point,
        LossKind::Pair,
        LossKind::ListNet,
        LossKind::PointPair,
        LossKind::PointListNet,
        LossKind::SelfBoost,
        LossKind::MultiBoost,
        LossKind::Calibration,
    ];
}

/// One random problem: a network, a batch and whatever the loss needs.
pub struct Problem {
    pub kind: LossKind,
    pub net: Mlp,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub dumped: DumpedContext,
    pub alpha: f64,
    /// Scorer predictions fed to the calibrator (constants).
    pub predictions: Vec<f64>,
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn random_problem(kind: LossKind, rng: &mut StreamRng) -> Problem {
    let n = rng.random_range(2..=8);
    let input_dim = rng.random_range(2..=6);
    let hidden_layers = rng.random_range(0..=2);
    let mut widths = vec![input_dim];
    for _ in 0..hidden_layers {
        widths.push(rng.random_range(2..=6));
    }
    widths.push(if kind == LossKind::Calibration { CALI_INTERVALS } else { 1 });
    let mut net = Mlp::init(&widths, rng).unwrap();
    // Non-zero biases so their gradients are exercised too.
    for layer in net.layers_mut() {
        for b in &mut layer.bias {
            *b = 0.3 * gaussian(rng);
        }
    }
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..input_dim).map(|_| gaussian(rng)).collect()).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
    labels[0] = 1;
    labels[1] = 0;
    let m = rng.random_range(1..=8);
    let dumped = DumpedContext::new(
        (0..m).map(|_| 1.5 * gaussian(rng)).collect(),
        (0..m).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect(),
        1,
    )
    .unwrap();
    let predictions = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
    Problem { kind, net, inputs, labels, dumped, alpha: rng.random_range(0.05..0.95), predictions }
}

fn logits(net: &Mlp, inputs: &[Vec<f64>]) -> Vec<f64> {
    inputs.iter().map(|x| net.forward(x).unwrap()[0]).collect()
}

fn logit_loss(p: &Problem, s: &[f64]) -> LossValueGrad {
    let y = &p.labels;
    match p.kind {
        LossKind::Point => {
            let n = s.len() as f64;
            let mut out = LossValueGrad { value: 0.0, grad: vec![0.0; s.len()] };
            for (i, (&si, &yi)) in s.iter().zip(y).enumerate() {
                let l = pointwise_loss_from_logit(si, yi);
                out.value += l.value / n;
                out.grad[i] = l.grad[0] / n;
            }
            out
        }
        LossKind::Pair => pairwise_loss(s, y).unwrap(),
        LossKind::ListNet => listnet_loss(s, y).unwrap(),
        LossKind::PointPair => multi_objective_loss(s, y, p.alpha).unwrap(),
        LossKind::PointListNet => point_listnet_loss(s, y, p.alpha).unwrap(),
        LossKind::SelfBoost | LossKind::MultiBoost => {
            let mut out = LossValueGrad { value: 0.0, grad: vec![0.0; s.len()] };
            for (i, (&si, &yi)) in s.iter().zip(y).enumerate() {
                let l = if p.kind == LossKind::SelfBoost {
                    self_boost_pair_loss(si, yi, &p.dumped).unwrap()
                } else {
                    multi_boost_loss(si, yi, Some(&p.dumped), p.alpha).unwrap()
                };
                out.value += l.value;
                out.grad[i] = l.grad[0];
            }
            out
        }
        LossKind::Calibration => unreachable!(),
    }
}

/// Loss value and the analytic gradient with respect to every parameter.
pub fn objective(p: &Problem, net: &Mlp) -> (f64, Mlp) {
    let mut grad = net.zeros_like();
    if p.kind == LossKind::Calibration {
        let mut value = 0.0;
        for ((x, &pred), &y) in p.inputs.iter().zip(&p.predictions).zip(&p.labels) {
            let trace = net.forward_trace(x).unwrap();
            let knots = CalibratorKnots::from_raw(trace.output()).unwrap();
            let place = CalibratorKnots::place(pred).unwrap();
            let l = calibration_loss(knots.interval_value(place.interval, place.fraction), y).unwrap();
            value += l.value;
            net.backward(&trace, &knots.raw_gradient(place, l.grad[0]), &mut grad).unwrap();
        }
        return (value, grad);
    }
    let s = logits(net, &p.inputs);
    let l = logit_loss(p, &s);
    for (x, g) in p.inputs.iter().zip(&l.grad) {
        let trace = net.forward_trace(x).unwrap();
        net.backward(&trace, &[*g], &mut grad).unwrap();
    }
    (l.value, grad)
}

fn value_only(p: &Problem, net: &Mlp) -> f64 {
    if p.kind == LossKind::Calibration {
        return objective(p, net).0;
    }
    logit_loss(p, &logits(net, &p.inputs)).value
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub params: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

/// `true` when `a` and `b` agree within the relative tolerance or the
/// absolute floor.
pub fn grad_close(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * a.abs().max(b.abs())
}

/// Central finite differences over every parameter.
pub fn check_gradients(p: &Problem) -> GradCheck {
    let (_, analytic) = objective(p, &p.net);
    let analytic: Vec<f64> = analytic.params().copied().collect();
    let mut net = p.net.clone();
    let mut failures = 0;
    let mut worst_rel: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *net.params().nth(i).unwrap();
        *net.params_mut().nth(i).unwrap() = orig + FD_STEP;
        let up = value_only(p, &net);
        *net.params_mut().nth(i).unwrap() = orig - FD_STEP;
        let down = value_only(p, &net);
        *net.params_mut().nth(i).unwrap() = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !grad_close(a, numeric) {
            failures += 1;
        }
        let diff = (a - numeric).abs();
        if diff > ABS_FLOOR {
            worst_rel = worst_rel.max(diff / a.abs().max(numeric.abs()));
        }
    }
    GradCheck { params: analytic.len(), failures, worst_rel }
}

pub fn trial_rng(seed: u64) -> StreamRng {
    rng::stream(seed, 1000)
}
