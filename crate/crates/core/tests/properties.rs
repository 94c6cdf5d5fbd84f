use calrank::calibrator::{knots_from_raw, CalibratorKnots};
use calrank::losses::{listnet_loss, pairwise_loss, pointwise_loss_from_logit, self_boost_pair_loss, DumpedContext};
use calrank::metrics::{auc, gauc, ndcg_at_k};
use proptest::prelude::*;

fn group() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=10).prop_flat_map(|n| (prop::collection::vec(-8.0f64..8.0, n), prop::collection::vec(0u8..=1, n)))
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

proptest! {
    #[test]
    fn ranking_losses_ignore_constant_shifts((s, y) in group(), c in -10.0f64..10.0) {
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let a = pairwise_loss(&s, &y).unwrap().value;
        let b = pairwise_loss(&shifted, &y).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
        let a = listnet_loss(&s, &y).unwrap().value;
        let b = listnet_loss(&shifted, &y).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn pointwise_loss_changes_under_shift(s in -8.0f64..8.0, y in 0u8..=1, c in prop_oneof![-10.0f64..-0.01, 0.01f64..10.0]) {
        prop_assert_ne!(pointwise_loss_from_logit(s, y).value, pointwise_loss_from_logit(s + c, y).value);
    }

    #[test]
    fn self_boost_sums_to_scaled_pairwise((s, y) in group()) {
        let pos = y.iter().filter(|&&l| l == 1).count() as f64;
        let neg = y.len() as f64 - pos;
        let d = DumpedContext::new(s.clone(), y.clone(), 1).unwrap();
        let total: f64 = s.iter().zip(&y).map(|(&si, &yi)| self_boost_pair_loss(si, yi, &d).unwrap().value).sum();
        let pair = pairwise_loss(&s, &y).unwrap().value;
        prop_assert!((total - 2.0 * pos * neg * pair).abs() <= 1e-10 * (1.0 + total.abs()));
    }

    #[test]
    fn self_boost_positive_grows_with_dumped_negative(
        s in -5.0f64..5.0, base in prop::collection::vec(-5.0f64..5.0, 1..8), k in 0usize..8, bump in 0.01f64..3.0,
    ) {
        let n = base.len();
        let k = k % n;
        let mut labels = vec![1u8; n];
        labels[k] = 0;
        let lo = DumpedContext::new(base.clone(), labels.clone(), 1).unwrap();
        let mut higher = base.clone();
        higher[k] += bump;
        let hi = DumpedContext::new(higher, labels, 1).unwrap();
        let a = self_boost_pair_loss(s, 1, &lo).unwrap().value;
        let b = self_boost_pair_loss(s, 1, &hi).unwrap().value;
        prop_assert!(b > a, "{a} -> {b}");
    }

    #[test]
    fn losses_are_nonnegative_with_finite_gradients((s, y) in group()) {
        let s: Vec<f64> = s.iter().map(|v| v * 3.75).collect();
        for l in [pairwise_loss(&s, &y).unwrap(), listnet_loss(&s, &y).unwrap()] {
            prop_assert!(l.value >= 0.0);
            prop_assert!(l.grad.iter().all(|g| g.is_finite()));
        }
        let d = DumpedContext::new(s.clone(), y.clone(), 1).unwrap();
        for (&si, &yi) in s.iter().zip(&y) {
            let l = self_boost_pair_loss(si, yi, &d).unwrap();
            prop_assert!(l.value >= 0.0 && l.grad[0].is_finite());
        }
    }

    #[test]
    fn calibrator_is_monotone(raw in prop::collection::vec(-6.0f64..6.0, 100), mut xs in prop::collection::vec(0.0001f64..0.9999, 2..50)) {
        let k = knots_from_raw(&raw).unwrap();
        xs.sort_by(f64::total_cmp);
        let ys: Vec<f64> = xs.iter().map(|&x| k.calibrate(x).unwrap()).collect();
        for w in xs.windows(2).zip(ys.windows(2)) {
            prop_assert!(w.1[0] <= w.1[1]);
            if w.0[1] - w.0[0] > 1e-9 {
                prop_assert!(w.1[0] < w.1[1]);
            }
        }
        prop_assert!(ys.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn calibration_keeps_order_metrics((s, y) in group(), raw in prop::collection::vec(-6.0f64..6.0, 100)) {
        let k = knots_from_raw(&raw).unwrap();
        let probs: Vec<f64> = s.iter().map(|&v| calrank::math::sigmoid(v / 4.0)).collect();
        let cal: Vec<f64> = probs.iter().map(|&p| k.calibrate(p).unwrap()).collect();
        prop_assert_eq!(auc(&probs, &y), auc(&cal, &y));
        prop_assert_eq!(ndcg_at_k(&probs, &y, 10), ndcg_at_k(&cal, &y, 10));
    }

    #[test]
    fn auc_matches_brute_force((s, y) in group()) {
        // Coarse scores make ties common.
        let s: Vec<f64> = s.iter().map(|v| v.round()).collect();
        prop_assert_eq!(auc(&s, &y), brute_auc(&s, &y));
    }

    #[test]
    fn gauc_is_invariant_to_increasing_maps(groups in prop::collection::vec(group(), 1..10)) {
        let raw: Vec<(Vec<f64>, Vec<u8>)> = groups;
        let mapped: Vec<(Vec<f64>, Vec<u8>)> =
            raw.iter().map(|(s, y)| (s.iter().map(|v| v.exp() * 3.0 + 1.0).collect(), y.clone())).collect();
        let a = gauc(raw.iter().map(|(s, y)| (s.as_slice(), y.as_slice())));
        let b = gauc(mapped.iter().map(|(s, y)| (s.as_slice(), y.as_slice())));
        match (a, b) {
            (Ok(a), Ok(b)) => { prop_assert_eq!(a, b); prop_assert!((0.0..=1.0).contains(&a.0)); }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "defined-ness differs"),
        }
    }

    #[test]
    fn ndcg_is_one_exactly_when_positives_lead((s, y) in group()) {
        if let Some(v) = ndcg_at_k(&s, &y, s.len()) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let order = calrank::metrics::ranking_order(&s);
            let pos = y.iter().filter(|&&l| l == 1).count();
            let leading = order[..pos].iter().all(|&i| y[i] == 1);
            prop_assert_eq!(leading, (v - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_calibrator_on_fine_grid() {
    let k = CalibratorKnots::identity();
    for i in 1..10_000 {
        let x = i as f64 / 10_000.0;
        assert!((k.calibrate(x).unwrap() - x).abs() < 1e-12);
    }
}
