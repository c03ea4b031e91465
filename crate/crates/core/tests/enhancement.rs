use ldlmoe_core::enhance::{
    base_variance, build_adjacency, detect_period, gaussian_bin_masses, knn_weights, similarity, smooth_variance,
    variance_profile, AdjacencyGraph, Bins, EnhanceConfig, Period, VARIANCE_FLOOR,
};
use ldlmoe_core::linalg::DenseMatrix;
use proptest::prelude::*;

fn random_graph(n: usize, edges: &[(usize, usize, f64)]) -> AdjacencyGraph {
    let mut g = AdjacencyGraph::new(n);
    for &(i, j, w) in edges {
        g.add_edge(i % n, j % n, w);
    }
    g
}

fn graph_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<(usize, usize, f64)>, f64)> {
    (2usize..25).prop_flat_map(|n| {
        (
            prop::collection::vec(0.01f64..5.0, n),
            prop::collection::vec((0..n, 0..n, 0.01f64..3.0), 0..3 * n),
            0.0f64..10.0,
        )
    })
}

/// Plain Gauss-Jordan on a dense copy, as an independent solver.
fn dense_solve(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a.get(i, j)).collect();
            row.push(b[i]);
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

#[test]
fn three_node_smoothing_matches_dense_solve() {
    let mut g = AdjacencyGraph::new(3);
    g.add_edge(0, 1, 1.0);
    g.add_edge(1, 2, 0.5);
    g.add_edge(0, 2, 0.25);
    let v = [1.0, 4.0, 2.0];
    let lambda = 0.7;
    // I + λL written out by hand.
    let mut a = DenseMatrix::identity(3);
    let l = [[1.25, -1.0, -0.25], [-1.0, 1.5, -0.5], [-0.25, -0.5, 0.75]];
    for i in 0..3 {
        for j in 0..3 {
            a.set(i, j, a.get(i, j) + lambda * l[i][j]);
        }
    }
    let want = dense_solve(&a, &v);
    let got = smooth_variance(&v, &g, lambda).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10, "{got:?} vs {want:?}");
    }
}

#[test]
fn laplacian_rows_sum_to_zero() {
    let g = build_adjacency(30, Some(Period { lag: 7, acf: 0.6 }), &[(2, 20, 0.4)]).unwrap();
    let l = g.laplacian();
    for i in 0..30 {
        let s: f64 = (0..30).map(|j| l.get(i, j)).sum();
        assert!(s.abs() < 1e-12);
        for j in 0..30 {
            assert_eq!(l.get(i, j), l.get(j, i));
        }
    }
    assert_eq!(g.weight(0, 7), 0.6);
    assert_eq!(g.weight(2, 20), 0.4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoothing_properties((v, edges, lambda) in graph_strategy()) {
        let n = v.len();
        let g = random_graph(n, &edges);
        let s = smooth_variance(&v, &g, lambda).unwrap();
        prop_assert!(s.iter().all(|x| *x >= VARIANCE_FLOOR));
        // Never increases the Dirichlet energy.
        prop_assert!(g.dirichlet_energy(&s) <= g.dirichlet_energy(&v) * (1.0 + 1e-9) + 1e-12);
        // Total mass is preserved by (I + λL)^{-1}, since 1 is in L's null space.
        let sv: f64 = v.iter().sum();
        let ss: f64 = s.iter().sum();
        prop_assert!((sv - ss).abs() < 1e-8 * sv.max(1.0));
        // Agrees with a dense solve.
        let mut a = g.laplacian();
        for x in a.data.iter_mut() {
            *x *= lambda;
        }
        for i in 0..n {
            let d = a.get(i, i);
            a.set(i, i, d + 1.0);
        }
        let want = dense_solve(&a, &v);
        for (x, w) in s.iter().zip(&want) {
            prop_assert!((x - w).abs() < 1e-9 * w.abs().max(1.0));
        }
    }

    #[test]
    fn smoothing_identities(c in 0.01f64..10.0, n in 2usize..30, lambda in 0.0f64..5.0) {
        let g = build_adjacency(n, None, &[]).unwrap();
        let flat = vec![c; n];
        let s = smooth_variance(&flat, &g, lambda).unwrap();
        prop_assert!(s.iter().all(|x| (x - c).abs() < 1e-10 * c.max(1.0)));
        let v: Vec<f64> = (0..n).map(|i| 0.1 + i as f64).collect();
        prop_assert_eq!(smooth_variance(&v, &g, 0.0).unwrap(), v);
    }

    #[test]
    fn knn_graph_matches_brute_force(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..40),
        k in 1usize..4,
    ) {
        let cfg = EnhanceConfig { k_neighbors: k, kernel_sigma: 1.3, ..EnhanceConfig::default() };
        let w = knn_weights(&pts, &cfg).unwrap();
        let n = pts.len();
        let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut want = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| d2(&pts[i], &pts[a]).total_cmp(&d2(&pts[i], &pts[b])).then(a.cmp(&b)));
            for &j in &order[..k] {
                let s = similarity(d2(&pts[i], &pts[j]), 1.3);
                want[i][j] = s;
                want[j][i] = s;
            }
        }
        for i in 0..n {
            for j in 0..n {
                prop_assert!((w.get(i, j) - want[i][j]).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn bin_masses_are_a_distribution(mean in -10.0f64..10.0, var in 1e-4f64..25.0, k in 2usize..40) {
        let bins = Bins { low: -3.0, high: 4.0, count: k };
        let m = gaussian_bin_masses(mean, var, &bins);
        prop_assert_eq!(m.len(), k);
        prop_assert!(m.iter().all(|p| *p >= 0.0));
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn base_variance_is_floored(y in prop::collection::vec(-5.0f64..5.0, 3..50), w in 2usize..8) {
        let v = base_variance(&y, w).unwrap();
        prop_assert_eq!(v.len(), y.len());
        prop_assert!(v.iter().all(|x| *x >= VARIANCE_FLOOR));
    }
}

#[test]
fn bin_masses_match_frozen_reference() {
    // 40-digit evaluations of the normal CDF differences.
    let cases: [(f64, f64, f64, f64, usize, &[f64]); 3] = [
        (
            0.3,
            0.5,
            -2.0,
            2.0,
            5,
            &[
                0.016947426762344637127,
                0.14415197631894613022,
                0.39513205492785168495,
                0.34222264820227361474,
                0.10154589378858393295,
            ],
        ),
        (
            1.7,
            0.04,
            -1.0,
            3.0,
            8,
            &[
                1.9106595744986828417e-28,
                9.4795348220122777541e-18,
                9.8658763555816504705e-10,
                0.00023262809244788022422,
                0.1584226248524215824,
                0.77453754479968485307,
                0.066775530027024919371,
                0.000031671241833119897109,
            ],
        ),
        (
            -4.0,
            0.25,
            -3.0,
            3.0,
            4,
            &[
                0.99999971334842812081,
                2.8665157125709785425e-7,
                6.2209605742698734639e-16,
                1.9106595744986297123e-28,
            ],
        ),
    ];
    for (mean, var, low, high, count, want) in cases {
        let got = gaussian_bin_masses(mean, var, &Bins { low, high, count });
        for (g, w) in got.iter().zip(want) {
            assert!(((g - w) / w).abs() < 1e-9, "{g:e} vs {w:e}");
        }
    }
}

#[test]
fn period_found_on_clean_sinusoid() {
    for p in [7usize, 12, 24] {
        let y: Vec<f64> = (0..10 * p)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / p as f64).sin())
            .collect();
        assert_eq!(detect_period(&y, 2 * p).unwrap().lag, p);
    }
}

#[test]
fn profile_uses_periodic_and_window_edges() {
    let y: Vec<f64> = (0..120)
        .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 12.0).sin() + 0.01 * (t % 5) as f64)
        .collect();
    let windows: Vec<Vec<f64>> = (0..100).map(|k| y[k..k + 10].to_vec()).collect();
    let nodes: Vec<usize> = (0..100).map(|k| k + 10).collect();
    let cfg = EnhanceConfig {
        max_lag: 30,
        ..EnhanceConfig::default()
    };
    let plain = variance_profile(&y, None, &cfg).unwrap();
    let with = variance_profile(&y, Some((&windows, &nodes)), &cfg).unwrap();
    assert_eq!(plain.period.map(|p| p.lag), Some(12));
    assert!(with.graph_edges > plain.graph_edges);
    assert_eq!(plain.variance.len(), 120);
}
