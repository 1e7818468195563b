#![allow(dead_code)]

use std::sync::Arc;

use contravirt::diffusion::build_diffusion;
use contravirt::diffusion::DiffusionParams;
use contravirt::encoder::{Encoder, GraphContext, WindowInput};
use contravirt::features::FeatureLayout;
use contravirt::geo_graph::{knn_adjacency_points, GeoPoint, NodeKind};
use contravirt::numerics::{Matrix, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Small instance: 6 nodes, the last two virtual, on a kNN graph with the
/// default diffusion operator.
pub struct Toy {
    pub layout: FeatureLayout,
    pub graph: GraphContext<f64>,
    pub kinds: Vec<NodeKind>,
    pub encoder: Encoder,
    pub params: ParamStore<f64>,
    pub embed_dim: usize,
}

pub fn toy_layout() -> FeatureLayout {
    FeatureLayout { type_embed_dim: 2, t_in: 3, t_out: 2, ..FeatureLayout::default() }
}

pub fn toy(seed: u64) -> Toy {
    let points: Vec<GeoPoint> = [(52.0, 4.0), (52.3, 4.6), (51.8, 5.1), (52.6, 5.4), (52.1, 4.9), (52.4, 4.2)]
        .iter()
        .map(|&(lat, lon)| GeoPoint::new(lat, lon).unwrap())
        .collect();
    let kinds = vec![NodeKind::Real, NodeKind::Real, NodeKind::Real, NodeKind::Real, NodeKind::Virtual, NodeKind::Virtual];
    let adj = knn_adjacency_points(&points, 2).unwrap();
    let s = build_diffusion::<f64>(&adj, &kinds, &DiffusionParams::default()).unwrap();
    let graph = GraphContext {
        s: Arc::new(s.matrix),
        kind_index: kinds.iter().map(|k| usize::from(!k.is_real())).collect(),
        real: Arc::from(vec![0, 1, 2, 3]),
        virtual_nodes: Arc::from(vec![4, 5]),
    };
    let layout = toy_layout();
    let embed_dim = 4;
    let mut params = ParamStore::new();
    let mut r = rng(seed);
    let encoder = Encoder::init(&mut params, layout, embed_dim, 2, &mut r).unwrap();
    // Non-zero virtual lags and biases so every parameter carries gradient.
    for p in params.iter_mut() {
        if p.name.ends_with(".b") || p.name == "lag.virtual" {
            let (rows, cols) = p.value.shape();
            p.value = random_matrix(&mut r, rows, cols, 0.3);
        }
    }
    Toy { layout, graph, kinds, encoder, params, embed_dim }
}

pub fn toy_input(toy: &Toy, rng: &mut ChaCha8Rng) -> WindowInput<f64> {
    let n = toy.graph.n();
    let l = toy.layout;
    let propagated = random_matrix(rng, l.t_in * n, l.step_width(), 1.0);
    WindowInput { propagated, lag: random_matrix(rng, n, l.lag_channels, 1.0), static_mask: None }
}

/// Reference log-softmax loss `mean_i [log Σ_j exp(l_ij) − l_i0]` with
/// column 0 the positive logit.
pub fn brute_force_nce(q: &Matrix<f64>, k: &Matrix<f64>, negatives: &[Vec<f64>], tau: f64) -> f64 {
    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    let mut total = 0.0;
    for i in 0..q.rows() {
        let qi = unit(q.row(i));
        let pos = dot(&qi, &unit(k.row(i))) / tau;
        let mut denom = pos.exp();
        for n in negatives {
            denom += (dot(&qi, &unit(n)) / tau).exp();
        }
        total += denom.ln() - pos;
    }
    total / q.rows() as f64
}

use contravirt::datakit::{generate_synthetic, split, Dataset, Split, SplitSpec, SyntheticConfig};
use contravirt::pipeline::{GraphSettings, Prepared};

/// Acceptance generator settings with a shorter record.
pub fn synthetic(n_steps: usize) -> (Dataset, Split) {
    let cfg = SyntheticConfig { n_steps, ..SyntheticConfig::acceptance() };
    let data = generate_synthetic(&cfg).unwrap();
    let split = split(&data.dataset.station_ids(), &SplitSpec::Explicit { withheld: data.withheld.clone() }).unwrap();
    (data.dataset, split)
}

pub fn settings(no_diffusion: bool) -> GraphSettings {
    GraphSettings {
        grid: SyntheticConfig::acceptance().grid,
        k: 3,
        diffusion: DiffusionParams::default(),
        no_diffusion,
    }
}

pub fn prepare(dataset: Dataset, split: Split, no_diffusion: bool, layout: FeatureLayout) -> Prepared {
    Prepared::new(dataset, split, &settings(no_diffusion), layout).unwrap()
}

/// `α Σ_{n<terms} ((1−α)T)^n` with plain nested loops.
pub fn neumann(t: &[Vec<f64>], alpha: f64, terms: usize) -> Vec<Vec<f64>> {
    let n = t.len();
    let mut power: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let mut sum = power.clone();
    for _ in 1..terms {
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for l in 0..n {
                let a = power[i][l] * (1.0 - alpha);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i][j] += a * t[l][j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                sum[i][j] += next[i][j];
            }
        }
        power = next;
    }
    sum.iter().map(|row| row.iter().map(|v| alpha * v).collect()).collect()
}
