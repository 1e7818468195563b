mod common;

use common::{neumann, rng};
use contravirt::diffusion::{
    build_diffusion, influence_stats, plain_operator, ppr, reweight, sparsify_topk, transition, type_weight, DiffusionParams,
};
use contravirt::geo_graph::{knn_adjacency_points, Adjacency, GeoPoint, NodeKind};
use proptest::prelude::*;
use rand::Rng;

const GAMMA: f64 = 3.0;
const DELTA: f64 = 0.3;

struct RandomGraph {
    adj: Adjacency,
    kinds: Vec<NodeKind>,
}

fn random_graph(seed: u64) -> RandomGraph {
    let mut r = rng(seed);
    let n = r.gen_range(2..=50);
    let points: Vec<GeoPoint> = (0..n)
        .map(|_| GeoPoint::new(r.gen_range(50.5..53.5), r.gen_range(3.0..7.5)).unwrap())
        .collect();
    let k = r.gen_range(1..=(n - 1).min(5));
    let mut kinds: Vec<NodeKind> = (0..n).map(|_| if r.gen_bool(0.4) { NodeKind::Real } else { NodeKind::Virtual }).collect();
    kinds[0] = NodeKind::Real;
    RandomGraph { adj: knn_adjacency_points(&points, k).unwrap(), kinds }
}

#[test]
fn ppr_matches_neumann_series() {
    let mut worst: f64 = 0.0;
    for g in 0..20u64 {
        let graph = random_graph(100 + g);
        let alpha = [0.05, 0.15, 0.5][g as usize % 3];
        let t = transition::<f64>(&graph.adj);
        let n = graph.adj.n();
        let dense: Vec<Vec<f64>> = (0..n).map(|i| t.t.row(i).to_vec()).collect();
        let oracle = neumann(&dense, alpha, 1000);
        let d = ppr(&t, alpha).unwrap();
        for i in 0..n {
            for j in 0..n {
                let err = (d.get(i, j) - oracle[i][j]).abs();
                worst = worst.max(err);
                assert!(err <= 1e-10, "graph {g} (N={n}, alpha={alpha}) entry ({i},{j}) off by {err:e}");
            }
        }
    }
    println!("worst PPR deviation from the Neumann series: {worst:.3e}");
}

#[test]
fn reweighting_is_exact_and_rows_are_sparse() {
    for g in 0..20u64 {
        let graph = random_graph(200 + g);
        let n = graph.adj.n();
        let d = ppr(&transition::<f64>(&graph.adj), 0.15).unwrap();
        let w = reweight(&d, &graph.kinds, GAMMA, DELTA).unwrap();
        for i in 0..n {
            for j in 0..n {
                let factor = match (graph.kinds[i], graph.kinds[j]) {
                    (NodeKind::Real, NodeKind::Real) => 1.0,
                    (NodeKind::Virtual, NodeKind::Virtual) => 0.3,
                    _ => 3.0,
                };
                assert_eq!(type_weight(graph.kinds[i], graph.kinds[j], GAMMA, DELTA), factor);
                assert_eq!(w.get(i, j).to_bits(), (d.get(i, j) * factor).to_bits(), "graph {g} entry ({i},{j})");
            }
        }
        let s = build_diffusion::<f64>(&graph.adj, &graph.kinds, &DiffusionParams::default()).unwrap();
        assert!(s.max_row_entries() <= 8);
        for row in s.matrix.iter_rows() {
            assert!(!row.is_empty() && row.len() <= n.min(8));
            let sum: f64 = row.iter().map(|&(_, v)| v).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn plain_operator_is_row_stochastic() {
    let graph = random_graph(300);
    let s = plain_operator::<f64>(&graph.adj);
    for (i, row) in s.matrix.iter_rows().enumerate() {
        let sum: f64 = row.iter().map(|&(_, v)| v).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(row.len(), graph.adj.degree(i) + 1);
    }
}

fn virtual_real_fraction(graph: &RandomGraph, gamma: f64, delta: f64, top_k: usize) -> Vec<f64> {
    let d = ppr(&transition::<f64>(&graph.adj), 0.15).unwrap();
    let w = reweight(&d, &graph.kinds, gamma, delta).unwrap();
    let s = sparsify_topk(&w, top_k, true).unwrap();
    influence_stats(&s, &graph.kinds).into_iter().map(|r| r.real_fraction).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn real_fraction_grows_with_gamma(seed in 0u64..10_000, g1 in 0.2f64..5.0, step in 0.01f64..5.0, top_k in prop_oneof![Just(8usize), Just(64usize)]) {
        let graph = random_graph(seed);
        let low = virtual_real_fraction(&graph, g1, DELTA, top_k);
        let high = virtual_real_fraction(&graph, g1 + step, DELTA, top_k);
        for (a, b) in low.iter().zip(&high) {
            prop_assert!(b + 1e-12 >= *a, "gamma {} -> {}: {} -> {}", g1, g1 + step, a, b);
        }
    }

    #[test]
    fn real_fraction_shrinks_with_delta(seed in 0u64..10_000, d1 in 0.05f64..3.0, step in 0.01f64..3.0) {
        let graph = random_graph(seed);
        let low = virtual_real_fraction(&graph, GAMMA, d1, 8);
        let high = virtual_real_fraction(&graph, GAMMA, d1 + step, 8);
        for (a, b) in low.iter().zip(&high) {
            prop_assert!(*b <= a + 1e-12);
        }
    }

    #[test]
    fn real_fraction_is_a_share(seed in 0u64..10_000) {
        let graph = random_graph(seed);
        for f in virtual_real_fraction(&graph, GAMMA, DELTA, 8) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&f));
        }
    }
}
