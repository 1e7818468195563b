//! GCN encoder: a shared layer applied at every input step, a temporal mean
//! giving the embedding `h`, two further GCN layers and a linear head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::SparseDiffusionMatrix;
use crate::error::{Error, Result};
use crate::features::{FeatureLayout, FeatureStore};
use crate::geo_graph::NodeSet;
use crate::numerics::{Matrix, ParamId, ParamStore, SparseMatrix, Tape, Var};
use crate::scalar::Scalar;

/// Node-level graph context shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext<T> {
    pub s: Arc<SparseMatrix<T>>,
    /// 0 for real, 1 for virtual, per node.
    pub kind_index: Arc<[usize]>,
    pub real: Arc<[usize]>,
    pub virtual_nodes: Arc<[usize]>,
}

impl<T: Scalar> GraphContext<T> {
    pub fn new(s: &SparseDiffusionMatrix<T>, nodes: &NodeSet) -> Result<Self> {
        if s.n() != nodes.len() {
            return Err(Error::dim("graph context", (s.n(), s.n()), (nodes.len(), nodes.len())));
        }
        Ok(Self {
            s: Arc::new(s.matrix.clone()),
            kind_index: nodes.nodes().iter().map(|n| usize::from(!n.kind.is_real())).collect(),
            real: nodes.real_ids().into(),
            virtual_nodes: nodes.virtual_ids().into(),
        })
    }

    pub fn n(&self) -> usize {
        self.kind_index.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderIds {
    pub w_step: ParamId,
    pub w_static: ParamId,
    pub b_shared: ParamId,
    pub w_deep: [ParamId; 2],
    pub b_deep: [ParamId; 2],
    pub w_head: ParamId,
    pub b_head: ParamId,
    pub lag_virtual: ParamId,
    pub type_table: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layout: FeatureLayout,
    pub embed_dim: usize,
    pub n_virtual: usize,
    pub ids: EncoderIds,
}

fn glorot<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, rows: usize, cols: usize) -> Matrix<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::lit(rng.gen_range(-a..a))).collect();
    Matrix::from_vec(rows, cols, data).expect("finite init")
}

impl Encoder {
    /// Registers freshly initialized parameters in `store`.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        layout: FeatureLayout,
        embed_dim: usize,
        n_virtual: usize,
        rng: &mut R,
    ) -> Result<Self> {
        layout.validate()?;
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let (fs, fx, d) = (layout.step_width(), layout.static_width(), embed_dim);
        let f = layout.width();
        let w_step = store.add("shared.w_step", glorot(rng, f, d, fs, d));
        let w_static = store.add("shared.w_static", glorot(rng, f, d, fx, d));
        let b_shared = store.add("shared.b", Matrix::zeros(1, d));
        let w0 = store.add("deep0.w", glorot(rng, d, d, d, d));
        let b0 = store.add("deep0.b", Matrix::zeros(1, d));
        let w1 = store.add("deep1.w", glorot(rng, d, d, d, d));
        let b1 = store.add("deep1.b", Matrix::zeros(1, d));
        let nt = layout.n_targets();
        let w_head = store.add("head.w", glorot(rng, d, nt, d, nt));
        let b_head = store.add("head.b", Matrix::zeros(1, nt));
        let lag_virtual = store.add("lag.virtual", Matrix::zeros(n_virtual, layout.lag_channels));
        let type_table = store.add("type.table", glorot(rng, 2, layout.type_embed_dim, 2, layout.type_embed_dim));
        Ok(Self {
            layout,
            embed_dim,
            n_virtual,
            ids: EncoderIds {
                w_step,
                w_static,
                b_shared,
                w_deep: [w0, w1],
                b_deep: [b0, b1],
                w_head,
                b_head,
                lag_virtual,
                type_table,
            },
        })
    }
}

/// `S · F_t` for every step, stored contiguously so a window is one slice.
#[derive(Clone, Debug)]
pub struct PropagatedFrames<T> {
    n_nodes: usize,
    width: usize,
    t_in: usize,
    data: Vec<T>,
}

impl<T: Scalar> PropagatedFrames<T> {
    pub fn build(s: &SparseMatrix<T>, store: &FeatureStore) -> Result<Self> {
        let (n, w) = (store.n_nodes(), store.layout.step_width());
        if s.n_rows() != n {
            return Err(Error::dim("propagate", (s.n_rows(), s.n_cols()), (n, w)));
        }
        let mut data = vec![T::zero(); store.n_steps() * n * w];
        let mut frame = vec![T::zero(); n * w];
        for t in 0..store.n_steps() {
            for (x, &v) in frame.iter_mut().zip(store.frame(t)) {
                *x = T::lit(v);
            }
            s.mul_dense_into(&frame, w, &mut data[t * n * w..(t + 1) * n * w]);
        }
        Ok(Self { n_nodes: n, width: w, t_in: store.layout.t_in, data })
    }

    /// `(t_in·N) × step_width` inputs of the window anchored at `anchor`.
    pub fn window(&self, anchor: usize) -> Result<Matrix<T>> {
        let steps = self.data.len() / (self.n_nodes * self.width);
        if anchor + 1 < self.t_in || anchor >= steps {
            return Err(Error::Contract(format!("window anchored at {anchor} is out of range")));
        }
        let block = self.n_nodes * self.width;
        let start = (anchor + 1 - self.t_in) * block;
        Ok(Matrix::from_raw(
            self.t_in * self.n_nodes,
            self.width,
            self.data[start..(anchor + 1) * block].to_vec(),
        ))
    }
}

/// Propagated inputs of a window after zeroing masked `(node, channel)`
/// entries, with the same mask on every step. `mask` is `N × width` with
/// entries in {0, 1}.
pub fn masked_window<T: Scalar>(
    s: &SparseMatrix<T>,
    store: &FeatureStore,
    anchor: usize,
    mask: &Matrix<T>,
) -> Result<Matrix<T>> {
    let (n, w, t_in) = (store.n_nodes(), store.layout.step_width(), store.layout.t_in);
    if mask.rows() != n || mask.cols() < w {
        return Err(Error::dim("masked_window", mask.shape(), (n, w)));
    }
    let mut out = vec![T::zero(); t_in * n * w];
    let mut frame = vec![T::zero(); n * w];
    for (k, t) in (anchor + 1 - t_in..=anchor).enumerate() {
        for (i, (dst, src)) in frame.chunks_mut(w).zip(store.frame(t).chunks(w)).enumerate() {
            let m = &mask.row(i)[..w];
            for ((x, &v), &mk) in dst.iter_mut().zip(src).zip(m) {
                *x = T::lit(v) * mk;
            }
        }
        s.mul_dense_into(&frame, w, &mut out[k * n * w..(k + 1) * n * w]);
    }
    Ok(Matrix::from_raw(t_in * n, w, out))
}

/// Everything the encoder reads for one window.
#[derive(Clone, Debug)]
pub struct WindowInput<T> {
    /// `(t_in·N) × step_width`, already multiplied by `S`.
    pub propagated: Matrix<T>,
    /// `N × lag_channels` observed lags; virtual rows are ignored.
    pub lag: Matrix<T>,
    /// Optional `N × static_width` mask on the lag and type channels.
    pub static_mask: Option<Matrix<T>>,
}

pub struct EncoderOutput {
    /// `N × d` contrastive embedding.
    pub h: Var,
    /// `N × (t_out·4)` encoded predictions.
    pub out: Option<Var>,
}

/// `relu(S·H·W + b)`.
pub fn gcn_forward<T: Scalar>(tape: &mut Tape<T>, s: &Arc<SparseMatrix<T>>, h: Var, w: Var, b: Var) -> Result<Var> {
    let sh = tape.sparse_matmul(s, h)?;
    let z = tape.matmul(sh, w)?;
    let z = tape.add_row(z, b)?;
    Ok(tape.relu(z))
}

impl Encoder {
    fn check_store<T: Scalar>(&self, store: &ParamStore<T>, g: &GraphContext<T>) -> Result<()> {
        let id = self.ids.type_table.0;
        if id >= store.len() {
            return Err(Error::Contract("parameter store does not match encoder".into()));
        }
        if g.virtual_nodes.len() != self.n_virtual {
            return Err(Error::Contract(format!(
                "encoder expects {} virtual nodes, graph has {}",
                self.n_virtual,
                g.virtual_nodes.len()
            )));
        }
        Ok(())
    }

    /// Shared layer and temporal mean; also runs the deep layers and head
    /// when `predict` is set.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g: &GraphContext<T>,
        input: &WindowInput<T>,
        predict: bool,
    ) -> Result<EncoderOutput> {
        self.check_store(store, g)?;
        let n = g.n();
        let ids = &self.ids;
        if input.lag.shape() != (n, self.layout.lag_channels) {
            return Err(Error::dim("encoder lag", input.lag.shape(), (n, self.layout.lag_channels)));
        }
        let mut observed = input.lag.clone();
        for &v in g.virtual_nodes.iter() {
            observed.row_mut(v).fill(T::zero());
        }
        let observed = tape.constant(observed);
        let lag_v = tape.param(store, ids.lag_virtual);
        let lag_v = tape.scatter_rows(lag_v, &g.virtual_nodes, n)?;
        let lag = tape.add(observed, lag_v)?;
        let table = tape.param(store, ids.type_table);
        let types = tape.gather_rows(table, &g.kind_index)?;
        let mut stat = tape.concat_cols(lag, types)?;
        if let Some(mask) = &input.static_mask {
            let m = tape.constant(mask.clone());
            stat = tape.mul(stat, m)?;
        }
        let s_stat = tape.sparse_matmul(&g.s, stat)?;
        let w_static = tape.param(store, ids.w_static);
        let b = tape.param(store, ids.b_shared);
        let z_static = tape.matmul(s_stat, w_static)?;
        let z_static = tape.add_row(z_static, b)?;

        let c = tape.constant(input.propagated.clone());
        let w_step = tape.param(store, ids.w_step);
        let z = tape.matmul(c, w_step)?;
        let z = tape.add_tiled(z, z_static)?;
        let z = tape.relu(z);
        let h = tape.block_mean(z, self.layout.t_in)?;
        if !predict {
            return Ok(EncoderOutput { h, out: None });
        }
        let mut x = h;
        for k in 0..2 {
            let w = tape.param(store, ids.w_deep[k]);
            let b = tape.param(store, ids.b_deep[k]);
            x = gcn_forward(tape, &g.s, x, w, b)?;
        }
        let wh = tape.param(store, ids.w_head);
        let bh = tape.param(store, ids.b_head);
        let out = tape.matmul(x, wh)?;
        let out = tape.add_row(out, bh)?;
        Ok(EncoderOutput { h, out: Some(out) })
    }

    /// Embeddings without recording gradients (key-encoder side).
    pub fn embed_constant<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &GraphContext<T>,
        input: &WindowInput<T>,
    ) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, g, input, false)?;
        Ok(tape.value(out.h).clone())
    }

    /// Encoded predictions for all nodes without recording gradients.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &GraphContext<T>,
        input: &WindowInput<T>,
    ) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, g, input, true)?;
        Ok(tape.value(out.out.expect("predict")).clone())
    }
}

/// `key ← m·key + (1−m)·query` for every parameter.
pub fn momentum_update<T: Scalar>(query: &ParamStore<T>, key: &mut ParamStore<T>, m: T) -> Result<()> {
    if query.len() != key.len() {
        return Err(Error::Contract(format!(
            "momentum update between stores of {} and {} parameters",
            query.len(),
            key.len()
        )));
    }
    for (q, k) in query.iter().zip(key.iter()) {
        if q.value.shape() != k.value.shape() {
            return Err(Error::Contract(format!("parameter {} changed shape", q.name)));
        }
    }
    let one_m = T::one() - m;
    for (q, k) in query.iter().zip(key.iter_mut()) {
        for (kv, &qv) in k.value.as_mut_slice().iter_mut().zip(q.value.as_slice()) {
            *kv = m * *kv + one_m * qv;
        }
    }
    Ok(())
}
