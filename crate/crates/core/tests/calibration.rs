use calrank::calibrator::{knots_from_raw, platt_fit, CalibratorKnots, PlattParams};
use calrank::math::sigmoid;
use calrank::metrics::{ece, logloss};
use rand::Rng;
use rand_distr::StandardNormal;

fn sample(n: usize, seed: u64, label_logit: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = calrank::rng::stream(seed, 1000);
    let mut logits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let s = 2.0 * z;
        let u: f64 = rng.random();
        logits.push(s);
        labels.push(u8::from(u < sigmoid(label_logit(s))));
    }
    (logits, labels)
}

#[test]
fn platt_recovers_identity_on_calibrated_logits() {
    let (s, y) = sample(100_000, 1, |s| s);
    let p = platt_fit(&s, &y).unwrap();
    assert!((p.scale - 1.0).abs() < 0.05 && p.offset.abs() < 0.05, "{p:?}");
}

#[test]
fn platt_absorbs_a_logit_shift() {
    let (s, y) = sample(100_000, 2, |s| s);
    let base = platt_fit(&s, &y).unwrap();
    let shifted: Vec<f64> = s.iter().map(|v| v + 2.0).collect();
    let p = platt_fit(&shifted, &y).unwrap();
    assert!((p.scale - base.scale).abs() < 1e-6);
    assert!((p.offset - (base.offset - 2.0 * base.scale)).abs() < 1e-6, "{p:?} vs {base:?}");
}

#[test]
fn platt_on_uninformative_logits_returns_the_base_rate() {
    let (s, _) = sample(100_000, 3, |s| s);
    let (_, y) = sample(100_000, 4, |_| -1.0);
    let p = platt_fit(&s, &y).unwrap();
    let rate = y.iter().map(|&v| f64::from(v)).sum::<f64>() / y.len() as f64;
    assert!(p.scale < 0.02, "{p:?}");
    assert!((sigmoid(p.offset) - rate).abs() < 0.01);
}

#[test]
fn platt_repairs_a_miscalibrated_scorer() {
    let (s, y) = sample(50_000, 5, |s| 0.5 * s - 1.0);
    let raw: Vec<f64> = s.iter().map(|&v| sigmoid(v)).collect();
    let p = platt_fit(&s, &y).unwrap();
    let fixed: Vec<f64> = s.iter().map(|&v| p.apply(v)).collect();
    assert!(ece(&fixed, &y).unwrap() < 0.2 * ece(&raw, &y).unwrap());
    assert!(logloss(&fixed, &y).unwrap() < logloss(&raw, &y).unwrap());
    assert!((p.scale - 0.5).abs() < 0.05 && (p.offset + 1.0).abs() < 0.05);
}

#[test]
fn platt_apply_hand_value() {
    let p = PlattParams { scale: 0.5, offset: 0.2 };
    assert!((p.apply(1.0) - 1.0 / (1.0 + (-0.7f64).exp())).abs() < 1e-15);
}

#[test]
fn knots_are_continuous_at_every_interior_boundary() {
    let mut rng = calrank::rng::stream(7, 1000);
    for _ in 0..1000 {
        let raw: Vec<f64> = (0..100).map(|_| 4.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let k = knots_from_raw(&raw).unwrap();
        for i in 1..100 {
            let left = k.interval_value(i - 1, 1.0);
            let right = k.interval_value(i, 0.0);
            assert!((left - right).abs() < 1e-12);
            let at = k.calibrate(i as f64 / 100.0).unwrap();
            assert!((at - right).abs() < 1e-12);
        }
    }
}

#[test]
fn dominant_height_concentrates_the_jump() {
    let mut raw = vec![0.0; 100];
    raw[30] = 40.0;
    let k = knots_from_raw(&raw).unwrap();
    assert!(k.calibrate(0.29).unwrap() < 1e-12);
    assert!((k.calibrate(0.305).unwrap() - 0.5).abs() < 1e-9);
    assert!(k.calibrate(0.32).unwrap() > 1.0 - 1e-12);
    assert!((CalibratorKnots::identity().calibrate(0.305).unwrap() - 0.305).abs() < 1e-15);
}
