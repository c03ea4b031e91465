use ldlmoe_core::dist::{
    bandwidth_or_default, kl_categorical, median_bandwidth, mmd2_closed, mmd2_rff, sample_mixture, CategoricalDist,
    GaussianMixture1D, RffMap, DEFAULT_BANDWIDTH,
};
use proptest::prelude::*;

fn mixture() -> impl Strategy<Value = GaussianMixture1D> {
    (1usize..5).prop_flat_map(|n| {
        (
            prop::collection::vec(0.05f64..1.0, n),
            prop::collection::vec(-4.0f64..4.0, n),
            prop::collection::vec(0.01f64..4.0, n),
        )
            .prop_map(|(w, m, v)| {
                let s: f64 = w.iter().sum();
                GaussianMixture1D::new(w.iter().map(|x| x / s).collect(), m, v).unwrap()
            })
    })
}

fn categorical(k: usize) -> impl Strategy<Value = CategoricalDist> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-3).then(|| CategoricalDist::new(w.iter().map(|x| x / s).collect()).unwrap())
    })
}

fn density(p: &GaussianMixture1D, x: f64) -> f64 {
    p.weights()
        .iter()
        .zip(p.means().iter().zip(p.variances()))
        .map(|(w, (m, v))| w * (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
        .sum()
}

/// Double trapezoid over the density difference with the RBF kernel
/// normalised so that `k(x, x) = 1`.
fn mmd2_quadrature(p: &GaussianMixture1D, q: &GaussianMixture1D, kappa: f64) -> f64 {
    let (lo, hi, n) = (-14.0, 14.0, 1400);
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let d: Vec<f64> = xs.iter().map(|&x| density(p, x) - density(q, x)).collect();
    let w = |i: usize| if i == 0 || i == n { 0.5 } else { 1.0 };
    let mut acc = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            let r = xs[i] - xs[j];
            acc += w(i) * w(j) * d[i] * d[j] * (-r * r / (2.0 * kappa * kappa)).exp();
        }
    }
    acc * h * h
}

#[test]
fn closed_form_matches_quadrature() {
    let p = GaussianMixture1D::new(vec![0.3, 0.7], vec![-1.0, 1.5], vec![0.4, 0.9]).unwrap();
    let q = GaussianMixture1D::gaussian(0.5, 1.2).unwrap();
    for kappa in [0.5, 1.0, 2.3] {
        let a = mmd2_closed(&p, &q, kappa).unwrap();
        let b = mmd2_quadrature(&p, &q, kappa);
        assert!((a - b).abs() < 1e-8, "kappa {kappa}: {a} vs {b}");
    }
}

#[test]
fn hand_computed_gaussian_pair() {
    // N(0,1) vs N(1,1), κ = 1: 2(1/√3)(1 - e^{-1/6}).
    let p = GaussianMixture1D::gaussian(0.0, 1.0).unwrap();
    let q = GaussianMixture1D::gaussian(1.0, 1.0).unwrap();
    let want = 2.0 / 3f64.sqrt() * (1.0 - (-1.0f64 / 6.0).exp());
    assert!((mmd2_closed(&p, &q, 1.0).unwrap() - want).abs() < 1e-12);
}

#[test]
fn median_heuristic_fallback() {
    assert_eq!(median_bandwidth(&[1.0, 3.0, 4.0]).unwrap(), 2.0);
    assert!(median_bandwidth(&[2.0, 2.0, 2.0]).is_err());
    assert_eq!(bandwidth_or_default(&[2.0, 2.0]), DEFAULT_BANDWIDTH);
    assert_eq!(bandwidth_or_default(&[5.0]), DEFAULT_BANDWIDTH);
}

#[test]
fn rff_estimate_tracks_exact_value() {
    let p = GaussianMixture1D::gaussian(0.0, 1.0).unwrap();
    let q = GaussianMixture1D::gaussian(1.0, 1.0).unwrap();
    let xs = sample_mixture(&p, 4000, 1);
    let ys = sample_mixture(&q, 4000, 2);
    let map = RffMap::new(2048, 1.0, 3).unwrap();
    let est = mmd2_rff(&xs, &ys, &map).unwrap();
    let exact = mmd2_closed(&p, &q, 1.0).unwrap();
    assert!((est - exact).abs() < 0.03, "{est} vs {exact}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn mmd_symmetric_and_nonnegative(p in mixture(), q in mixture(), kappa in 0.1f64..5.0) {
        let a = mmd2_closed(&p, &q, kappa).unwrap();
        let b = mmd2_closed(&q, &p, kappa).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, b);
        prop_assert!(mmd2_closed(&p, &p, kappa).unwrap() < 1e-12);
    }

    #[test]
    fn mmd_invariant_to_component_order(p in mixture(), q in mixture(), kappa in 0.1f64..5.0) {
        let rev = GaussianMixture1D::new(
            p.weights().iter().rev().copied().collect(),
            p.means().iter().rev().copied().collect(),
            p.variances().iter().rev().copied().collect(),
        ).unwrap();
        let a = mmd2_closed(&p, &q, kappa).unwrap();
        let b = mmd2_closed(&rev, &q, kappa).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mixture_moments(p in mixture()) {
        // Law of total variance against a direct second moment.
        let second: f64 = p.weights().iter().zip(p.means().iter().zip(p.variances()))
            .map(|(w, (m, v))| w * (v + m * m)).sum();
        let mean = p.mean();
        prop_assert!((p.variance() - (second - mean * mean)).abs() < 1e-10 * second.max(1.0));
        for q in [0.05, 0.5, 0.95] {
            let x = p.quantile(q);
            prop_assert!((p.cdf(x) - q).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(p in categorical(6), q in categorical(6)) {
        prop_assert!(kl_categorical(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_categorical(&p, &p).unwrap() < 1e-8);
    }

    #[test]
    fn median_matches_pairwise_sort(x in prop::collection::vec(-100.0f64..100.0, 2..60)) {
        let mut d = Vec::new();
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                d.push((x[i] - x[j]).abs());
            }
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let want = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        match median_bandwidth(&x) {
            Ok(v) => prop_assert_eq!(v, want),
            Err(_) => prop_assert_eq!(want, 0.0),
        }
    }
}
