use std::sync::{Arc, OnceLock};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, pairwise_sum, pairwise_sum_by, sigmoid};
use super::{GroupSet, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    MeanCols(Var),
    SumAll(Var),
    Mse(Var, Var),
    Gather(Var, Vec<usize>),
    Transpose(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

fn empty_store() -> &'static ParamStore {
    static EMPTY: OnceLock<ParamStore> = OnceLock::new();
    EMPTY.get_or_init(ParamStore::new)
}

/// Operation record for one forward computation.
///
/// Parameters are bound from a [`ParamStore`] on first use and shared by
/// reference; only parameters in the tape's gradient groups are marked as
/// requiring gradients.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    grad_groups: GroupSet,
}

impl<'s> Tape<'s> {
    /// Tape whose parameters all require gradients.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_grad_groups(store, GroupSet::ALL)
    }

    pub fn with_grad_groups(store: &'s ParamStore, grad_groups: GroupSet) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: Vec::new(),
            grad_groups,
        }
    }

    /// Inference tape: nothing requires gradients.
    pub fn no_grad(store: &'s ParamStore) -> Self {
        Self::with_grad_groups(store, GroupSet::NONE)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn shared_constant(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter, reusing the existing node if already bound.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        let requires_grad = self.grad_groups.contains(self.store.group(id));
        self.nodes.push(Node {
            value: self.store.shared(id),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `x[m×n] + b[1×n]` with `b` added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (br, bn) = self.dims(b);
        if br != 1 || bn != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(x, b), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(tx.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
            }
            let z = pairwise_sum(dst);
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let t = Tensor::new(&[m, n], out).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Per-row layer normalization with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        for p in [gamma, beta] {
            let (pr, pn) = self.dims(p);
            if pr != 1 || pn != n {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = pairwise_sum(row) / n as f64;
            let var = pairwise_sum_by(n, &|j| (row[j] - mean) * (row[j] - mean)) / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            data.extend_from_slice(self.value(x).data());
            m += r;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_cols", &[], &[]))?;
        let m = self.dims(first).0;
        let mut n = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
            n += c;
        }
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for &x in xs {
            let (_, c) = self.dims(x);
            let src = self.value(x).data();
            for i in 0..m {
                data[i * n + off..i * n + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Concatenation along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        match axis {
            0 => self.concat_rows(xs),
            1 => self.concat_cols(xs),
            _ => Err(Error::Config(format!("concat axis {axis} out of range"))),
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[len, n], data)?, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], data)?, Op::SliceCols(x, start), rg))
    }

    /// Mean over rows (axis 0): `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let data = (0..n)
            .map(|j| pairwise_sum_by(m, &|i| src[i * n + j]) / m as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[1, n], data).unwrap(), Op::MeanRows(x), rg)
    }

    /// Mean over columns (axis 1): `m×n → m×1`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let data = src.chunks(n).map(|r| pairwise_sum(r) / n as f64).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[m, 1], data).unwrap(), Op::MeanCols(x), rg)
    }

    /// Mean pooling along `axis`.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            0 => Ok(self.mean_rows(x)),
            1 => Ok(self.mean_cols(x)),
            _ => Err(Error::Config(format!("mean_pool axis {axis} out of range"))),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Mean squared error over all elements, as a `1×1` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let (da, db) = (ta.data(), tb.data());
        let n = da.len();
        let s = pairwise_sum_by(n, &|i| (da[i] - db[i]) * (da[i] - db[i])) / n as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Row lookup: output row `r` is `table[indices[r]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", self.shape(table), &[0]));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::shape("gather_rows", &[m, n], &[i]));
            }
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[indices.len(), n], data)?,
            Op::Gather(table, indices.to_vec()),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, m], data).unwrap(), Op::Transpose(x), rg)
    }

    /// Single-head scaled dot-product attention:
    /// `softmax_rows(q·kᵀ / sqrt(d_h)) · v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, dq) = self.dims(q);
        let (sk, dk) = self.dims(k);
        let (sv, _) = self.dims(v);
        if dq != dk {
            return Err(Error::shape("attention q/k", self.shape(q), self.shape(k)));
        }
        if sk != sv {
            return Err(Error::shape("attention k/v", self.shape(k), self.shape(v)));
        }
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (dq as f64).sqrt());
        let weights = self.softmax_rows(scaled);
        self.matmul(weights, v)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a `1×1` scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::shape("backward", t.shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (m, n) = node.value.dims2();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a·bᵀ, a: m×k, b: n×k
                let (_, k) = self.dims(*a);
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm_nn(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    gemm_tn(g, av, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        axpy(self.grad_buf(grads, v), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    axpy(self.grad_buf(grads, *a), g, 1.0);
                }
                if self.rg(*b) {
                    axpy(self.grad_buf(grads, *b), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    axpy(self.grad_buf(grads, *a), g, *s);
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    axpy(self.grad_buf(grads, *x), g, 1.0);
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for j in 0..n {
                        gb[j] += pairwise_sum_by(m, &|i| g[i * n + j]);
                    }
                }
            }
            Op::Silu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let gx = self.grad_buf(grads, *x);
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *o += gi * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot = pairwise_sum_by(n, &|j| yr[j] * gr[j]);
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.rg(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for j in 0..n {
                        gg[j] += pairwise_sum_by(m, &|i| g[i * n + j] * xhat[i * n + j]);
                    }
                }
                if self.rg(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for j in 0..n {
                        gb[j] += pairwise_sum_by(m, &|i| g[i * n + j]);
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let gx = self.grad_buf(grads, *x);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gam[j];
                        }
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mean_d = pairwise_sum(&dxhat) / n as f64;
                        let mean_dx = pairwise_sum_by(n, &|j| dxhat[j] * xh[j]) / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if self.rg(x) {
                        axpy(self.grad_buf(grads, x), &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let c = self.dims(x).1;
                    if self.rg(x) {
                        let gx = self.grad_buf(grads, x);
                        for i in 0..m {
                            axpy(&mut gx[i * c..(i + 1) * c], &g[i * n + off..i * n + off + c], 1.0);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let gx = self.grad_buf(grads, *x);
                    axpy(&mut gx[start * n..(start + m) * n], g, 1.0);
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let src_n = self.dims(*x).1;
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..m {
                        let dst = &mut gx[i * src_n + start..i * src_n + start + n];
                        axpy(dst, &g[i * n..(i + 1) * n], 1.0);
                    }
                }
            }
            Op::MeanRows(x) => {
                if self.rg(*x) {
                    let rows = self.dims(*x).0;
                    let gx = self.grad_buf(grads, *x);
                    for row in gx.chunks_mut(n) {
                        axpy(row, g, 1.0 / rows as f64);
                    }
                }
            }
            Op::MeanCols(x) => {
                if self.rg(*x) {
                    let cols = self.dims(*x).1;
                    let gx = self.grad_buf(grads, *x);
                    for (row, gi) in gx.chunks_mut(cols).zip(g) {
                        for o in row {
                            *o += gi / cols as f64;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = 2.0 * g[0] / av.len() as f64;
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += c * (x - y);
                    }
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= c * (x - y);
                    }
                }
            }
            Op::Gather(table, indices) => {
                if self.rg(*table) {
                    let gt = self.grad_buf(grads, *table);
                    for (r, &i) in indices.iter().enumerate() {
                        axpy(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    // x: n×m, output: m×n
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

impl Tape<'static> {
    /// Tape without a parameter store, for standalone computations.
    pub fn detached() -> Self {
        Self::new(empty_store())
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zeros if none reached it.
    pub fn wrt_or_zero(&self, tape: &Tape<'_>, v: Var) -> Vec<f64> {
        self.wrt(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    }

    /// Per-parameter gradients for every parameter bound on `tape` that
    /// requires gradients; aligned with the store's parameter order.
    pub fn param_grads(&self, tape: &Tape<'_>) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; tape.store().len()];
        for (id, v) in tape.bound_params() {
            if tape.requires_grad(v) {
                out[id.0] = Some(self.wrt_or_zero(tape, v));
            }
        }
        out
    }
}
