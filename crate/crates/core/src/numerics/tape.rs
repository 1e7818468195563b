//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value and the handles of its operands. Because operands are
//! always recorded before their consumers, the node list is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves are either constants (no gradient) or views of a [`Parameter`]
//! in a [`ParamStore`]. The same parameter may be placed on a tape any
//! number of times; gradients from every use are summed when they are
//! accumulated back into the store.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::matrix::{dot, gemm_nt, gemm_tn};
use super::{Matrix, SparseMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stable identifier of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A learnable matrix and its accumulated gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Parameter<T> {
    pub name: String,
    pub value: Matrix<T>,
    #[serde(skip)]
    grad: Option<Matrix<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Gradient with the same shape as the value; zero until accumulated.
    pub fn grad(&self) -> Matrix<T> {
        self.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }

    pub fn grad_ref(&self) -> Option<&Matrix<T>> {
        self.grad.as_ref()
    }
}

/// Ordered collection of parameters.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `g` to the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Matrix<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.axpy(T::one(), g),
            None => {
                if g.shape() != p.value.shape() {
                    return Err(Error::dim("accumulate_grad", p.value.shape(), g.shape()));
                }
                p.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn scale_grads(&mut self, alpha: T) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.scale_in_place(alpha);
            }
        }
    }

    /// Total number of scalar entries.
    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Exp(Var),
    Log(Var),
    Relu(Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    BlockMean(Var, usize),
    Sparse(Arc<SparseMatrix<T>>, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>),
    ConcatCols(Var, Var),
    Transpose(Var),
    RowNormalize(Var),
    RowDot(Var, Var),
    LogSumExpRows(Var),
    Sum(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Floor applied to row norms in [`Tape::row_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Recorder for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a free leaf that receives a gradient but is not tied to a store.
    pub fn variable(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a, c), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let value = self.value(a).map(T::ln);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Log(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// `a + 1·row` where `row` is `1 × cols(a)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim("add_row", (r, c), self.shape(row)));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `big + tile(small)` where `big` stacks `k` blocks shaped like `small`.
    pub fn add_tiled(&mut self, big: Var, small: Var) -> Result<Var> {
        let (br, bc) = self.shape(big);
        let (sr, sc) = self.shape(small);
        if sc != bc || sr == 0 || br % sr != 0 {
            return Err(Error::dim("add_tiled", (br, bc), (sr, sc)));
        }
        let mut value = self.value(big).clone();
        let block = sr * sc;
        let s = self.value(small).as_slice().to_vec();
        for chunk in value.as_mut_slice().chunks_mut(block) {
            for (v, &x) in chunk.iter_mut().zip(&s) {
                *v += x;
            }
        }
        let ng = self.ng(big) || self.ng(small);
        Ok(self.push(value, Op::AddTiled(big, small), ng))
    }

    /// Mean over `blocks` equally sized row blocks.
    pub fn block_mean(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if blocks == 0 || r % blocks != 0 {
            return Err(Error::Contract(format!(
                "block_mean: {r} rows not divisible into {blocks} blocks"
            )));
        }
        let n = r / blocks;
        let mut out = vec![T::zero(); n * c];
        for chunk in self.value(a).as_slice().chunks(n * c) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        let inv = T::one() / T::lit(blocks as f64);
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.ng(a);
        Ok(self.push(Matrix::from_raw(n, c, out), Op::BlockMean(a, blocks), ng))
    }

    /// `S · X` for a constant row-indexed sparse `S`.
    pub fn sparse_matmul(&mut self, s: &Arc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let value = s.mul_dense(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Sparse(Arc::clone(s), x), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::dim("slice_rows", (r, c), (start, end)));
        }
        let value = self.value(a).slice_rows(start, end);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::dim("slice_cols", (r, c), (start, end)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let ng = self.ng(a);
        Ok(self.push(Matrix::from_raw(r, end - start, data), Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.iter().any(|&i| i >= r) {
            return Err(Error::dim("gather_rows", (r, c), (idx.len(), c)));
        }
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, Arc::clone(idx)), ng))
    }

    /// Places row `k` of `a` at row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &Arc<[usize]>, n: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("scatter_rows", (r, c), (n, c)));
        }
        let mut value = Matrix::zeros(n, c);
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(self.value(a).row(k));
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::ScatterRows(a, Arc::clone(idx)), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::dim("concat_cols", (ra, ca), (rb, cb)));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Matrix::from_raw(ra, ca + cb, data), Op::ConcatCols(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Scales every row to unit L2 norm (norm floored at [`NORM_EPS`]).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.shape();
        let eps = T::lit(NORM_EPS);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = src.row(i);
            let norm = dot(row, row).sqrt().max(eps);
            data.extend(row.iter().map(|&x| x / norm));
        }
        let ng = self.ng(a);
        self.push(Matrix::from_raw(r, c, data), Op::RowNormalize(a), ng)
    }

    /// Per-row inner products, shape `rows × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (r, _) = self.shape(a);
        let data = (0..r)
            .map(|i| dot(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Matrix::from_raw(r, 1, data), Op::RowDot(a, b), ng))
    }

    /// Numerically stable `log Σ_j exp(a_ij)` per row, shape `rows × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows())
            .map(|i| logsumexp(src.row(i)))
            .collect();
        let ng = self.ng(a);
        self.push(Matrix::from_raw(src.rows(), 1, data), Op::LogSumExpRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm_nt(g, val(*b), &mut ga);
                    accumulate(grads, *a, ga)?;
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm_tn(val(*a), g, &mut gb);
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.map(|x| -x))?;
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), "mul", |x, y| x * y)?)?;
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), "mul", |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c))?;
            }
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone())?,
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, "exp", |x, y| x * y)?)?,
            Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), "log", |x, y| x / y)?)?,
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), "relu", |x, y| if y > T::zero() { x } else { T::zero() })?,
            )?,
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.ng(*row) {
                    let mut gr = vec![T::zero(); g.cols()];
                    for i in 0..g.rows() {
                        for (o, &x) in gr.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *row, Matrix::row_vector(gr))?;
                }
            }
            Op::AddTiled(big, small) => {
                if self.ng(*big) {
                    accumulate(grads, *big, g.clone())?;
                }
                if self.ng(*small) {
                    let (sr, sc) = val(*small).shape();
                    let mut gs = vec![T::zero(); sr * sc];
                    for chunk in g.as_slice().chunks(sr * sc) {
                        for (o, &x) in gs.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *small, Matrix::from_raw(sr, sc, gs))?;
                }
            }
            Op::BlockMean(a, blocks) => {
                let inv = T::one() / T::lit(*blocks as f64);
                let block: Vec<T> = g.as_slice().iter().map(|&x| x * inv).collect();
                let (r, c) = val(*a).shape();
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..*blocks {
                    data.extend_from_slice(&block);
                }
                accumulate(grads, *a, Matrix::from_raw(r, c, data))?;
            }
            Op::Sparse(s, x) => accumulate(grads, *x, s.t_mul_dense(g)?)?,
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                let off = start * c;
                ga.as_mut_slice()[off..off + g.len()].copy_from_slice(g.as_slice());
                accumulate(grads, *a, ga)?;
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let w = g.cols();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga)?;
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::ScatterRows(a, idx) => accumulate(grads, *a, g.select_rows(idx))?,
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let r = g.rows();
                if self.ng(*a) {
                    let data = (0..r).flat_map(|i| g.row(i)[..ca].to_vec()).collect();
                    accumulate(grads, *a, Matrix::from_raw(r, ca, data))?;
                }
                if self.ng(*b) {
                    let cb = val(*b).cols();
                    let data = (0..r).flat_map(|i| g.row(i)[ca..].to_vec()).collect();
                    accumulate(grads, *b, Matrix::from_raw(r, cb, data))?;
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose())?,
            Op::RowNormalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let eps = T::lit(NORM_EPS);
                let (r, c) = x.shape();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let norm = dot(x.row(i), x.row(i)).sqrt();
                    if norm <= eps {
                        // Below the floor the op is a plain scaling by 1/eps.
                        data.extend(g.row(i).iter().map(|&gv| gv / eps));
                        continue;
                    }
                    let yg = dot(y.row(i), g.row(i));
                    data.extend(
                        g.row(i)
                            .iter()
                            .zip(y.row(i))
                            .map(|(&gv, &yv)| (gv - yv * yg) / norm),
                    );
                }
                accumulate(grads, *a, Matrix::from_raw(r, c, data))?;
            }
            Op::RowDot(a, b) => {
                let (r, c) = val(*a).shape();
                for (src, dst) in [(*b, *a), (*a, *b)] {
                    if !self.ng(dst) {
                        continue;
                    }
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        data.extend(val(src).row(i).iter().map(|&x| x * gi));
                    }
                    accumulate(grads, dst, Matrix::from_raw(r, c, data))?;
                }
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let (r, c) = x.shape();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let lse = node.value.get(i, 0);
                    let gi = g.get(i, 0);
                    data.extend(x.row(i).iter().map(|&v| gi * (v - lse).exp()));
                }
                accumulate(grads, *a, Matrix::from_raw(r, c, data))?;
            }
            Op::Sum(a) => {
                let gv = g.get(0, 0);
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, gv))?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(T::one(), &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds the gradient of every parameter leaf into its store entry.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn relu_values_and_derivative() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::row_vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).as_slice(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Matrix::scalar(0.0));
        let y = t.exp(x);
        assert_eq!(t.value(y).item().unwrap(), 1.0);
    }

    #[test]
    fn log_domain_error() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Matrix::row_vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.variable(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_used_twice_sums_paths() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(2.0));
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        let a3 = t.scale(a, 3.0);
        let b5 = t.scale(b, 5.0);
        let s = t.add(a3, b5).unwrap();
        t.backward(s).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.get(id).grad().item().unwrap(), 8.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let x = t.variable(Matrix::scalar(1.5));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 2.0);
    }
}
