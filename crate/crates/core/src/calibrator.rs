//! Query-conditioned monotone piecewise-linear calibration, plus a Platt
//! scaling baseline.
//!
//! The domain `(0, 1)` is split into [`CALI_INTERVALS`] equal-width intervals.
//! Interval `k` covers `[k/100, (k+1)/100)` and maps linearly onto
//! `[b_k, b_{k+1}]`, where `b` is the running sum of softmax-normalised
//! heights. Heights are strictly positive, so the map is strictly increasing
//! and preserves the order of predictions within a query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softmax, softplus};

pub use crate::scorer::CALI_INTERVALS;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorKnots {
    heights: Vec<f64>,
    knots: Vec<f64>,
}

/// Position of a prediction on the calibrator domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub interval: usize,
    /// Fraction of the interval covered, in `[0, 1]`.
    pub fraction: f64,
}

impl CalibratorKnots {
    /// Softmax the raw heights and accumulate them into knot values.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.len() != CALI_INTERVALS {
            return Err(Error::Shape(format!("expected {CALI_INTERVALS} raw heights, got {}", raw.len())));
        }
        if raw.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("raw calibrator heights must be finite".into()));
        }
        Ok(Self::from_heights(softmax(raw)))
    }

    fn from_heights(heights: Vec<f64>) -> Self {
        let mut knots = Vec::with_capacity(heights.len() + 1);
        knots.push(0.0);
        let mut acc = 0.0;
        for &a in &heights[..heights.len() - 1] {
            acc += a;
            knots.push(acc);
        }
        knots.push(1.0);
        CalibratorKnots { heights, knots }
    }

    pub fn identity() -> Self {
        Self::from_heights(vec![1.0 / CALI_INTERVALS as f64; CALI_INTERVALS])
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn place(prediction: f64) -> Result<Placement> {
        if !(prediction > 0.0 && prediction < 1.0) {
            return Err(Error::Domain(format!("prediction must lie inside (0, 1), got {prediction}")));
        }
        let scaled = prediction * CALI_INTERVALS as f64;
        let interval = (scaled.floor() as usize).min(CALI_INTERVALS - 1);
        let fraction = (scaled - interval as f64).clamp(0.0, 1.0);
        Ok(Placement { interval, fraction })
    }

    /// Evaluates the linear piece of `interval` at `fraction` of its width.
    pub fn interval_value(&self, interval: usize, fraction: f64) -> f64 {
        let lo = self.knots[interval];
        let hi = self.knots[interval + 1];
        (lo + fraction * (hi - lo)).min(hi)
    }

    /// Calibrated prediction. No derivative with respect to `prediction` is
    /// ever produced: the input is a stop-gradient.
    pub fn calibrate(&self, prediction: f64) -> Result<f64> {
        let p = Self::place(prediction)?;
        Ok(self.interval_value(p.interval, p.fraction))
    }

    /// `d(calibrated)/d(raw)` scaled by `upstream`, for backpropagation into
    /// the calibration network.
    ///
    /// `calibrated = Σ_{j<k} a_j + fraction · a_k`, so `d/d a_j` is 1 below the
    /// interval, `fraction` on it and 0 above; the softmax Jacobian then gives
    /// `d/d raw_i = a_i (w_i − Σ_j a_j w_j)`.
    pub fn raw_gradient(&self, placement: Placement, upstream: f64) -> Vec<f64> {
        let k = placement.interval;
        let weight = |j: usize| {
            if j < k {
                1.0
            } else if j == k {
                placement.fraction
            } else {
                0.0
            }
        };
        let mean: f64 = self.heights.iter().enumerate().map(|(j, &a)| a * weight(j)).sum();
        self.heights.iter().enumerate().map(|(i, &a)| upstream * a * (weight(i) - mean)).collect()
    }
}

pub fn knots_from_raw(raw: &[f64]) -> Result<CalibratorKnots> {
    CalibratorKnots::from_raw(raw)
}

pub fn calibrate(prediction: f64, knots: &CalibratorKnots) -> Result<f64> {
    knots.calibrate(prediction)
}

/// `calibrated = σ(w · logit + c)` with `w = softplus(rho) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub scale: f64,
    pub offset: f64,
}

impl PlattParams {
    pub const IDENTITY: PlattParams = PlattParams { scale: 1.0, offset: 0.0 };

    pub fn apply(&self, logit: f64) -> f64 {
        sigmoid(self.scale * logit + self.offset)
    }
}

pub fn platt_apply(params: &PlattParams, logit: f64) -> f64 {
    params.apply(logit)
}

const PLATT_ITERATIONS: usize = 200;

/// Mean BCE of `σ(softplus(rho)·s + c)` and its gradient/Hessian in `(rho, c)`.
fn platt_objective(logits: &[f64], labels: &[u8], rho: f64, c: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let w = softplus(rho);
    let dw = sigmoid(rho);
    let d2w = dw * (1.0 - dw);
    let n = logits.len() as f64;
    let (mut f, mut gw, mut gc, mut hww, mut hwc, mut hcc) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (&s, &y) in logits.iter().zip(labels) {
        let z = w * s + c;
        let yf = f64::from(y);
        f += softplus(z) - yf * z;
        let p = sigmoid(z);
        let r = p - yf;
        let curv = p * (1.0 - p);
        gw += r * s;
        gc += r;
        hww += curv * s * s;
        hwc += curv * s;
        hcc += curv;
    }
    let grad = [gw * dw / n, gc / n];
    let hess = [
        [(hww * dw * dw + gw * d2w) / n, hwc * dw / n],
        [hwc * dw / n, hcc / n],
    ];
    (f / n, grad, hess)
}

/// Fits Platt scaling by damped Newton steps on mean BCE with a fixed
/// iteration budget. Deterministic for a given input.
pub fn platt_fit(logits: &[f64], labels: &[u8]) -> Result<PlattParams> {
    if logits.len() != labels.len() {
        return Err(Error::Shape("logits and labels differ in length".into()));
    }
    if logits.len() < 2 {
        return Err(Error::Fit("Platt scaling needs at least two samples".into()));
    }
    if labels.iter().any(|&y| y > 1) || logits.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("Platt scaling needs binary labels and finite logits".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Fit("Platt scaling needs both classes".into()));
    }
    // Start from w = 1 (rho = ln(e - 1)) and the base-rate offset.
    let base = positives as f64 / labels.len() as f64;
    let mut rho = (std::f64::consts::E - 1.0).ln();
    let mut c = crate::math::logit(base);
    let (mut f, mut g, mut h) = platt_objective(logits, labels, rho, c);
    for _ in 0..PLATT_ITERATIONS {
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let newton = if h[0][0] > 0.0 && det > 1e-300 {
            [-(h[1][1] * g[0] - h[0][1] * g[1]) / det, -(h[0][0] * g[1] - h[1][0] * g[0]) / det]
        } else {
            [-g[0], -g[1]]
        };
        // Backtracking line search on the objective.
        let slope = newton[0] * g[0] + newton[1] * g[1];
        let direction = if slope < 0.0 { newton } else { [-g[0], -g[1]] };
        let slope = direction[0] * g[0] + direction[1] * g[1];
        let mut t = 1.0;
        let mut accepted = false;
        let previous = f;
        for _ in 0..40 {
            let (r2, c2) = (rho + t * direction[0], c + t * direction[1]);
            let (f2, g2, h2) = platt_objective(logits, labels, r2, c2);
            if f2.is_finite() && f2 <= f + 1e-4 * t * slope {
                rho = r2;
                c = c2;
                f = f2;
                g = g2;
                h = h2;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let stalled = previous - f <= 1e-15 * previous.abs();
        if !accepted || stalled || (g[0].abs() < 1e-12 && g[1].abs() < 1e-12) {
            break;
        }
    }
    let params = PlattParams { scale: softplus(rho), offset: c };
    if !params.scale.is_finite() || !params.offset.is_finite() {
        return Err(Error::Fit("Platt scaling diverged".into()));
    }
    Ok(params)
}
