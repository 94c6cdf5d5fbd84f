mod common;

use calrank::calibrator::CalibratorKnots;
use calrank::rng;
use calrank::scorer::{adam_step, AdamConfig, AdamState, GradientTape, Mlp, ScorerParams};
use common::{check_gradients, random_problem, trial_rng, LossKind};

#[test]
fn every_loss_matches_finite_differences() {
    let mut rng = trial_rng(11);
    for kind in LossKind::ALL {
        for _ in 0..15 {
            let p = random_problem(kind, &mut rng);
            let c = check_gradients(&p);
            assert_eq!(c.failures, 0, "{kind:?}: {c:?}");
        }
    }
}

#[test]
fn softmax_knot_jacobian_matches_finite_differences() {
    let mut r = rng::stream(4, 9);
    for _ in 0..20 {
        let raw: Vec<f64> = (0..100).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
        let pred = rand::Rng::random_range(&mut r, 0.001..0.999);
        let k = CalibratorKnots::from_raw(&raw).unwrap();
        let place = CalibratorKnots::place(pred).unwrap();
        let analytic = k.raw_gradient(place, 1.0);
        for j in (0..100).step_by(7) {
            let mut up = raw.clone();
            up[j] += 1e-5;
            let mut down = raw.clone();
            down[j] -= 1e-5;
            let f = |v: &[f64]| {
                let k = CalibratorKnots::from_raw(v).unwrap();
                k.interval_value(place.interval, place.fraction)
            };
            let numeric = (f(&up) - f(&down)) / 2e-5;
            assert!(common::grad_close(analytic[j], numeric), "{j}: {} vs {numeric}", analytic[j]);
        }
    }
}

#[test]
fn batch_gradient_is_sum_of_sample_gradients() {
    let s = ScorerParams::new(2, 3, &[4], &mut rng::stream(2, rng::STREAM_INIT)).unwrap();
    let (q, a, b) = ([0.1, -0.4], [0.3, 0.2, -1.0], [1.5, 0.0, 0.7]);
    let mut both = GradientTape::for_network(s.network());
    s.backward(&mut both, &[(&q, &a), (&q, &b)], &[0.4, -1.2]).unwrap();
    let mut one = GradientTape::for_network(s.network());
    s.backward(&mut one, &[(&q, &a)], &[0.4]).unwrap();
    s.backward(&mut one, &[(&q, &b)], &[-1.2]).unwrap();
    for (x, y) in both.grad().params().zip(one.grad().params()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn zero_upstream_gives_zero_tape_and_no_update() {
    let mut s = ScorerParams::new(2, 2, &[3], &mut rng::stream(3, rng::STREAM_INIT)).unwrap();
    let before = s.clone();
    let mut tape = GradientTape::for_network(s.network());
    s.backward(&mut tape, &[(&[1.0, 2.0], &[0.5, -0.5])], &[0.0]).unwrap();
    assert!(tape.is_zero());
    let mut state = AdamState::new(s.network(), AdamConfig::default());
    adam_step(s.network_mut(), &mut tape, &mut state, 0).unwrap();
    assert_eq!(s, before);
}

#[test]
fn adam_first_step_hand_trace() {
    // One scalar parameter: m = 0.1 g, v = 0.001 g², bias corrected to g and
    // g², so the step is lr · g / (|g| + ε).
    let mut net = Mlp::zeros(&[1, 1]).unwrap();
    let mut tape = GradientTape::for_network(&net);
    *tape.grad_mut().params_mut().next().unwrap() = 0.25;
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(&net, cfg);
    adam_step(&mut net, &mut tape, &mut state, 0).unwrap();
    let w = *net.params().next().unwrap();
    let expected = -cfg.learning_rate * 0.25 / (0.25 + cfg.epsilon);
    assert!((w - expected).abs() < 1e-18, "{w} vs {expected}");
    assert!(tape.is_zero());
}
