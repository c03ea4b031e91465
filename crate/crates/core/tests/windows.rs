use ldlmoe_core::series::{make_windows, mae, mape, rmse, time_split, Scaler, SplitSpec, TimeSeries};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_slice_the_series(y in prop::collection::vec(-50.0f64..50.0, 10..120), w in 1usize..8, h in 1usize..6) {
        prop_assume!(y.len() >= w + h);
        let s = TimeSeries::univariate("s", y.clone()).unwrap();
        let ds = make_windows(&s, w, h).unwrap();
        prop_assert_eq!(ds.len(), y.len() - w - h + 1);
        for k in 0..ds.len() {
            prop_assert_eq!(&ds.inputs[k][..], &y[k..k + w]);
            prop_assert_eq!(&ds.targets[k][..], &y[k + w..k + w + h]);
            prop_assert_eq!(ds.target_start(k), k + w);
        }
    }

    #[test]
    fn split_is_chronological_and_disjoint(n in 80usize..300, w in 2usize..10, h in 1usize..8, frac in 0.05f64..0.5) {
        let s = TimeSeries::univariate("s", (0..n).map(|t| t as f64).collect()).unwrap();
        let ds = make_windows(&s, w, h).unwrap();
        let spec = SplitSpec { test_len: h + 3, val_fraction: frac };
        let (tr, va, te) = time_split(&ds, &spec).unwrap();
        prop_assert!(!tr.is_empty() && !va.is_empty() && !te.is_empty());
        prop_assert!(tr.starts.last().unwrap() < va.starts.first().unwrap());
        prop_assert!(va.starts.last().unwrap() < te.starts.first().unwrap());
        // Only test pairs may reach into the held-out tail.
        let tail = n - spec.test_len;
        for k in 0..va.len() {
            prop_assert!(va.target_start(k) + h <= tail);
        }
        prop_assert_eq!(te.target_start(te.len() - 1) + h, n);
    }

    #[test]
    fn scaler_round_trips(y in prop::collection::vec(-1e3f64..1e3, 30..80)) {
        let s = TimeSeries::univariate("s", y).unwrap();
        let ds = make_windows(&s, 5, 3).unwrap();
        let sc = Scaler::fit(&ds).unwrap();
        let t = sc.transform(&ds);
        for (a, b) in ds.targets.iter().flatten().zip(t.targets.iter().flatten()) {
            prop_assert!((sc.unscale_target(*b) - a).abs() < 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn metric_relations(p in prop::collection::vec(-10.0f64..10.0, 1..50), shift in -5.0f64..5.0) {
        let t: Vec<f64> = p.iter().map(|v| v + shift).collect();
        let r = rmse(&p, &t).unwrap();
        let a = mae(&p, &t).unwrap();
        prop_assert!((r - shift.abs()).abs() < 1e-12);
        prop_assert!((a - shift.abs()).abs() < 1e-12);
        prop_assert!(rmse(&p, &p).unwrap() == 0.0);
        prop_assert!(mape(&p, &p).unwrap() == 0.0);
    }

    #[test]
    fn rmse_bounds_mae(p in prop::collection::vec(-10.0f64..10.0, 1..50), seed in 0u64..1000) {
        let t: Vec<f64> = p.iter().enumerate().map(|(i, v)| v + ((i as u64 * 31 + seed) % 7) as f64 - 3.0).collect();
        prop_assert!(rmse(&p, &t).unwrap() + 1e-12 >= mae(&p, &t).unwrap());
    }
}

#[test]
fn metrics_reject_bad_input() {
    assert!(rmse(&[], &[]).is_err());
    assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    assert!((mape(&[110.0], &[100.0]).unwrap() - 10.0).abs() < 1e-12);
}
