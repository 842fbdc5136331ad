//! The computation record: eager forward evaluation, reverse-mode backward.

use super::{Diagnostics, ParamStore, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-8;
const EXP_MAX: f64 = 700.0;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize, usize),
    CalibratedSoftmax(usize, usize),
    LayerNorm(usize, usize, usize),
    Lookup(usize, Vec<usize>),
    SumAxis(usize, usize),
    SumAll(usize),
    LogMeanExp(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Option<usize>,
    },
}

pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    n_params: usize,
    grad_enabled: bool,
    pub diagnostics: Diagnostics,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            n_params: 0,
            grad_enabled,
            diagnostics: Diagnostics::default(),
        }
    }

    /// Copy every parameter onto the tape as leading leaf nodes.
    /// Node `i` corresponds to `store.tensor(i)`.
    pub fn bind(&mut self, store: &ParamStore) -> Vec<TensorId> {
        assert!(self.nodes.is_empty(), "bind on a non-empty tape");
        let mut ids = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            let p = store.tensor(i);
            let mut t = Tensor::new(p.shape.clone(), p.data.clone());
            t.requires_grad = self.grad_enabled;
            t.tape_id = Some(self.nodes.len());
            ids.push(TensorId(self.nodes.len()));
            self.nodes.push(t);
            self.ops.push(Op::Leaf);
            self.grads.push(None);
        }
        self.n_params = store.len();
        ids
    }

    /// Refresh bound leaf values after an optimizer step and drop everything
    /// else, including accumulated gradients.
    pub fn rebind(&mut self, store: &ParamStore) {
        assert_eq!(self.n_params, store.len());
        self.truncate_to_params();
        self.clear_param_grads();
        for i in 0..store.len() {
            self.nodes[i].data.copy_from_slice(&store.tensor(i).data);
        }
    }

    /// Drop every node appended after the bound parameters. Parameter
    /// gradients are kept so per-sample backward passes accumulate.
    pub fn truncate_to_params(&mut self) {
        self.nodes.truncate(self.n_params);
        self.ops.truncate(self.n_params);
        self.grads.truncate(self.n_params);
    }

    pub fn clear_param_grads(&mut self) {
        for g in self.grads.iter_mut().take(self.n_params) {
            *g = None;
        }
    }

    /// Gradient of each bound parameter, zeros where unreached.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        (0..self.n_params)
            .map(|i| match &self.grads[i] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[i].numel()],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(shape, data, false, Op::Leaf)
    }

    /// Leaf that participates in differentiation (inputs under test, etc.).
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        let rg = self.grad_enabled;
        self.push(shape, data, rg, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            tape_id: Some(id),
        });
        self.ops.push(op);
        self.grads.push(None);
        TensorId(id)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[b.0].data.iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let n: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        if sa == sb {
            out.extend(da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)));
        } else if db.len() == 1 {
            let y = db[0];
            out.extend(da.iter().map(|&x| f(x, y)));
        } else if da.len() == 1 {
            let x = da[0];
            out.extend(db.iter().map(|&y| f(x, y)));
        } else {
            let ia = BroadcastIndexer::new(sa, &out_shape);
            let ib = BroadcastIndexer::new(sb, &out_shape);
            for i in 0..n {
                out.push(f(da[ia.map(i)], db[ib.map(i)]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, rg, op))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, data, rg, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, data, rg, Op::MulScalar(a.0, c))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].data.iter().any(|&v| v > EXP_MAX) {
            return Err(TensorError::Domain {
                op: "exp",
                msg: format!("input exceeds {EXP_MAX}; result would overflow"),
            });
        }
        Ok(self.unary(a, f64::exp, |x_out| Op::Exp(x_out)))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].data.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: "input must be strictly positive".into(),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].data.iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: "input must be non-negative".into(),
            });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt))
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, data, rg, op(a.0))
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    /// `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]`, or `[b,m,k]·[k,n]` (shared rhs).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let dims = matmul_dims(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let MatDims {
            batch,
            m,
            k,
            n,
            rhs_batched,
        } = dims;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let asl = &da[bi * m * k..(bi + 1) * m * k];
            let bsl = if rhs_batched {
                &db[bi * k * n..(bi + 1) * k * n]
            } else {
                &db[..]
            };
            mat_mul_acc(asl, bsl, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let out_shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, rg, Op::MatMul(a.0, b.0)))
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if perm.len() != shape.len() || {
            let mut p = perm.to_vec();
            p.sort_unstable();
            p.iter().enumerate().any(|(i, &v)| i != v)
        } {
            return Err(TensorError::InvalidAxis {
                axis: perm.iter().copied().max().unwrap_or(0),
                rank: shape.len(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(&self.nodes[a.0].data, &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(out_shape, data, rg, Op::Permute(a.0, perm.to_vec())))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, data, rg, Op::Reshape(a.0)))
    }

    // ── Softmax family ─────────────────────────────────────────────────

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        let mut row = vec![0.0; len];
        let mut res = vec![0.0; len];
        let mut degenerate = 0usize;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    row[j] = src[base + j * inner];
                }
                weighted_softmax_row(&row, None, &mut res, &mut degenerate);
                for j in 0..len {
                    out[base + j * inner] = res[j];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Softmax(a.0, axis)))
    }

    /// Softmax over the last axis reweighted by a per-column keep mass
    /// `w[j]` (`1 - P[j]`): `out[.., j] = w[j]·e[j] / Σ_k w[k]·e[k]`.
    ///
    /// Rows whose total keep mass is zero fall back to a uniform
    /// distribution and bump `diagnostics.degenerate_rows`.
    pub fn calibrated_softmax(
        &mut self,
        scores: TensorId,
        keep: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[scores.0].shape.clone();
        let len = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        if self.nodes[keep.0].numel() != len {
            return Err(TensorError::ShapeMismatch {
                op: "calibrated_softmax",
                lhs: shape,
                rhs: self.nodes[keep.0].shape.clone(),
            });
        }
        let src = &self.nodes[scores.0].data;
        let w = &self.nodes[keep.0].data;
        let mut out = vec![0.0; src.len()];
        let mut degenerate = 0usize;
        for (r, o) in src.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            weighted_softmax_row(r, Some(w), o, &mut degenerate);
        }
        self.diagnostics.degenerate_rows += degenerate;
        let rg = self.rg(scores) || self.rg(keep);
        Ok(self.push(shape, out, rg, Op::CalibratedSoftmax(scores.0, keep.0)))
    }

    // ── Normalization / lookup / reductions ────────────────────────────

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        for aux in [gain, bias] {
            if self.nodes[aux.0].numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[aux.0].shape.clone(),
                });
            }
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; src.len()];
        for (r, o) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let (mean, inv) = row_moments(r);
            for j in 0..n {
                o[j] = (r[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, out, rg, Op::LayerNorm(x.0, gain.0, bias.0)))
    }

    /// Gather rows of a 2-D tensor. Gradient scatter-adds into the source,
    /// accumulating across repeated indices.
    pub fn lookup(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::InvalidAxis {
                axis: 1,
                rank: shape.len(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(indices.len() * cols);
        let src = &self.nodes[table.0].data;
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::IndexOutOfRange { index: ix, rows });
            }
            out.extend_from_slice(&src[ix * cols..(ix + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), cols],
            out,
            rg,
            Op::Lookup(table.0, indices.to_vec()),
        ))
    }

    /// Sum over `axis`, keeping it as size 1.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, rg, Op::SumAxis(a.0, axis)))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].numel() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// `log(mean(exp(x)))` over all elements, max-stabilized.
    pub fn log_mean_exp(&mut self, a: TensorId) -> TensorId {
        let src = &self.nodes[a.0].data;
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = src.iter().map(|&x| (x - m).exp()).sum();
        let y = m + (s / src.len() as f64).ln();
        let rg = self.rg(a);
        self.push(vec![1], vec![y], rg, Op::LogMeanExp(a.0))
    }

    // ── Concatenation / slicing ────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let sh = &self.nodes[p.0].shape;
            if sh.len() != 2 || sh[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: sh.clone(),
                });
            }
            rows += sh[0];
            data.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.rg(p);
        }
        Ok(self.push(
            vec![rows, cols],
            data,
            rg,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].shape[0];
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let sh = &self.nodes[p.0].shape;
            if sh.len() != 2 || sh[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: sh.clone(),
                });
            }
            cols += sh[1];
            rg |= self.rg(p);
        }
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let w = self.nodes[p.0].shape[1];
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                data[r * cols + off..r * cols + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            vec![rows, cols],
            data,
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 || start + len > sh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                lhs: sh,
                rhs: vec![start, len],
            });
        }
        let cols = sh[1];
        let data = self.nodes[a.0].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, cols], data, rg, Op::SliceRows(a.0, start, len)))
    }

    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 || start + len > sh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: sh,
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (sh[0], sh[1]);
        let mut data = Vec::with_capacity(rows * len);
        let src = &self.nodes[a.0].data;
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, len], data, rg, Op::SliceCols(a.0, start, len)))
    }

    // ── Losses ─────────────────────────────────────────────────────────

    /// Mean negative log-likelihood over target positions, skipping
    /// positions whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<TensorId, TensorError> {
        let sh = self.nodes[logits.0].shape.clone();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sh,
                rhs: vec![targets.len()],
            });
        }
        let vocab = sh[1];
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        let mut count = 0usize;
        for (t, &y) in targets.iter().enumerate() {
            if Some(y) == ignore {
                continue;
            }
            if y >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: y,
                    rows: vocab,
                });
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::AllIgnored);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
            },
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss, accumulating into node gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let mut grads = std::mem::take(&mut self.grads);
        grads.resize(self.nodes.len(), None);
        let r = self.backward_into(loss, &mut grads);
        self.grads = grads;
        r
    }

    /// Reverse pass into a scratch buffer, leaving tape gradients untouched.
    pub fn backward_scratch(
        &mut self,
        loss: TensorId,
    ) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    fn backward_into(
        &self,
        loss: TensorId,
        grads: &mut Vec<Option<Vec<f64>>>,
    ) -> Result<(), TensorError> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads.resize(self.nodes.len(), None);
        match &mut grads[loss.0] {
            Some(g) => g[0] += 1.0,
            slot => *slot = Some(vec![1.0]),
        }
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.op_backward(id, &g, grads);
            grads[id] = Some(g);
        }
        Ok(())
    }

    fn op_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target].requires_grad {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].numel()]);
            f(buf);
        };
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let so = &self.nodes[id].shape;
                acc(grads, *a, &mut |buf| add_reduced(buf, g, so, sa, 1.0));
                acc(grads, *b, &mut |buf| add_reduced(buf, g, so, sb, 1.0));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let so = &self.nodes[id].shape;
                acc(grads, *a, &mut |buf| add_reduced(buf, g, so, sa, 1.0));
                acc(grads, *b, &mut |buf| add_reduced(buf, g, so, sb, -1.0));
            }
            Op::Mul(a, b) => {
                let so = self.nodes[id].shape.clone();
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let ib = BroadcastIndexer::new(sb, &so);
                let ia = BroadcastIndexer::new(sa, &so);
                acc(grads, *a, &mut |buf| {
                    let tmp: Vec<f64> = (0..g.len()).map(|i| g[i] * db[ib.map(i)]).collect();
                    add_reduced(buf, &tmp, &so, sa, 1.0);
                });
                acc(grads, *b, &mut |buf| {
                    let tmp: Vec<f64> = (0..g.len()).map(|i| g[i] * da[ia.map(i)]).collect();
                    add_reduced(buf, &tmp, &so, sb, 1.0);
                });
            }
            Op::Div(a, b) => {
                let so = self.nodes[id].shape.clone();
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let ia = BroadcastIndexer::new(sa, &so);
                let ib = BroadcastIndexer::new(sb, &so);
                acc(grads, *a, &mut |buf| {
                    let tmp: Vec<f64> = (0..g.len()).map(|i| g[i] / db[ib.map(i)]).collect();
                    add_reduced(buf, &tmp, &so, sa, 1.0);
                });
                acc(grads, *b, &mut |buf| {
                    let tmp: Vec<f64> = (0..g.len())
                        .map(|i| {
                            let bv = db[ib.map(i)];
                            -g[i] * da[ia.map(i)] / (bv * bv)
                        })
                        .collect();
                    add_reduced(buf, &tmp, &so, sb, 1.0);
                });
            }
            Op::AddScalar(a) => acc(grads, *a, &mut |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            }),
            Op::MulScalar(a, c) => acc(grads, *a, &mut |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o += gi * c;
                }
            }),
            Op::Exp(a) => {
                let y = &self.nodes[id].data;
                acc(grads, *a, &mut |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].data;
                acc(grads, *a, &mut |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] / x[i];
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].data;
                acc(grads, *a, &mut |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].data;
                acc(grads, *a, &mut |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].data;
                acc(grads, *a, &mut |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].data;
                let (lo, hi) = (*lo, *hi);
                acc(grads, *a, &mut |buf| {
                    for i in 0..g.len() {
                        if x[i] > lo && x[i] < hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let dims =
                    matmul_dims(&self.nodes[*a].shape, &self.nodes[*b].shape).expect("checked");
                let MatDims {
                    batch,
                    m,
                    k,
                    n,
                    rhs_batched,
                } = dims;
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                acc(grads, *a, &mut |buf| {
                    for bi in 0..batch {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let bsl = if rhs_batched {
                            &db[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &db[..]
                        };
                        let asl = &mut buf[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                let grow = &gsl[i * n..(i + 1) * n];
                                let brow = &bsl[p * n..(p + 1) * n];
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                asl[i * k + p] += s;
                            }
                        }
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for bi in 0..batch {
                        let gsl = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &da[bi * m * k..(bi + 1) * m * k];
                        let boff = if rhs_batched { bi * k * n } else { 0 };
                        for i in 0..m {
                            let grow = &gsl[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = asl[i * k + p];
                                let brow = &mut buf[boff + p * n..boff + (p + 1) * n];
                                for j in 0..n {
                                    brow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Permute(a, perm) => {
                let out_shape = self.nodes[id].shape.clone();
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &out_shape, &inv);
                acc(grads, *a, &mut |buf| {
                    for i in 0..back.len() {
                        buf[i] += back[i];
                    }
                });
            }
            Op::Reshape(a) => acc(grads, *a, &mut |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i];
                }
            }),
            Op::Softmax(a, axis) => {
                let shape = &self.nodes[id].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let y = &self.nodes[id].data;
                acc(grads, *a, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let ix = base + j * inner;
                                dot += g[ix] * y[ix];
                            }
                            for j in 0..len {
                                let ix = base + j * inner;
                                buf[ix] += y[ix] * (g[ix] - dot);
                            }
                        }
                    }
                });
            }
            Op::CalibratedSoftmax(s, w) => {
                let shape = &self.nodes[id].shape;
                let len = *shape.last().unwrap();
                let rows = self.nodes[id].numel() / len;
                let y = &self.nodes[id].data;
                let sv = &self.nodes[*s].data;
                let wv = &self.nodes[*w].data;
                // Recompute per-row exp terms; rows with zero keep mass were
                // uniform fallbacks and propagate no gradient.
                let mut escratch = vec![0.0; len];
                for r in 0..rows {
                    let base = r * len;
                    let srow = &sv[base..base + len];
                    let m = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..len {
                        escratch[j] = (srow[j] - m).exp();
                        denom += wv[j] * escratch[j];
                    }
                    if denom == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for j in 0..len {
                        dot += g[base + j] * y[base + j];
                    }
                    acc(grads, *s, &mut |buf| {
                        for j in 0..len {
                            buf[base + j] += y[base + j] * (g[base + j] - dot);
                        }
                    });
                    acc(grads, *w, &mut |buf| {
                        for j in 0..len {
                            buf[j] += escratch[j] / denom * (g[base + j] - dot);
                        }
                    });
                }
            }
            Op::LayerNorm(x, gain, bias) => {
                let n = *self.nodes[id].shape.last().unwrap();
                let xv = &self.nodes[*x].data;
                let gv = &self.nodes[*gain].data;
                let rows = xv.len() / n;
                for r in 0..rows {
                    let base = r * n;
                    let xr = &xv[base..base + n];
                    let gr = &g[base..base + n];
                    let (mean, inv) = row_moments(xr);
                    acc(grads, *x, &mut |buf| {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * inv;
                            let dxhat = gr[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * inv;
                            let dxhat = gr[j] * gv[j];
                            buf[base + j] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    });
                    acc(grads, *gain, &mut |buf| {
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * inv;
                            buf[j] += gr[j] * xhat;
                        }
                    });
                    acc(grads, *bias, &mut |buf| {
                        for j in 0..n {
                            buf[j] += gr[j];
                        }
                    });
                }
            }
            Op::Lookup(table, indices) => {
                let cols = self.nodes[id].shape[1];
                acc(grads, *table, &mut |buf| {
                    for (r, &ix) in indices.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        let dst = &mut buf[ix * cols..(ix + 1) * cols];
                        for j in 0..cols {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let in_shape = &self.nodes[*a].shape;
                let (outer, len, inner) = split_axis(in_shape, *axis);
                acc(grads, *a, &mut |buf| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = o * len * inner + j * inner;
                            for i in 0..inner {
                                buf[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(grads, *a, &mut |buf| {
                for v in buf.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::LogMeanExp(a) => {
                let x = &self.nodes[*a].data;
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
                acc(grads, *a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[0] * (x[i] - m).exp() / s;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let cols = self.nodes[id].shape[1];
                let mut row = 0usize;
                for &p in parts {
                    let r = self.nodes[p].shape[0];
                    let lo = row * cols;
                    let hi = (row + r) * cols;
                    acc(grads, p, &mut |buf| {
                        for (o, &gi) in buf.iter_mut().zip(&g[lo..hi]) {
                            *o += gi;
                        }
                    });
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[id].shape[0];
                let cols = self.nodes[id].shape[1];
                let mut off = 0usize;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    acc(grads, p, &mut |buf| {
                        for r in 0..rows {
                            for j in 0..w {
                                buf[r * w + j] += g[r * cols + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start, len) => {
                let cols = self.nodes[id].shape[1];
                acc(grads, *a, &mut |buf| {
                    let dst = &mut buf[start * cols..(start + len) * cols];
                    for (o, &gi) in dst.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let rows = self.nodes[id].shape[0];
                let src_cols = self.nodes[*a].shape[1];
                acc(grads, *a, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..*len {
                            buf[r * src_cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
            } => {
                let vocab = self.nodes[*logits].shape[1];
                let src = &self.nodes[*logits].data;
                let count = targets.iter().filter(|&&y| Some(y) != *ignore).count() as f64;
                let coeff = g[0] / count;
                acc(grads, *logits, &mut |buf| {
                    for (t, &y) in targets.iter().enumerate() {
                        if Some(y) == *ignore {
                            continue;
                        }
                        let row = &src[t * vocab..(t + 1) * vocab];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        let out = &mut buf[t * vocab..(t + 1) * vocab];
                        for j in 0..vocab {
                            let soft = (row[j] - m).exp() / s;
                            out[j] += coeff * (soft - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
        }
    }
}

// ── Kernels and shape helpers ──────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shared softmax kernel. `keep == Some(w)` reweights the exponentials by
/// `w[j]`; multiplying by 1.0 is exact, so a keep mass of all ones is
/// bitwise-identical to the unweighted path.
fn weighted_softmax_row(xs: &[f64], keep: Option<&[f64]>, out: &mut [f64], degenerate: &mut usize) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    match keep {
        Some(w) => {
            for j in 0..xs.len() {
                let t = w[j] * (xs[j] - m).exp();
                out[j] = t;
                sum += t;
            }
        }
        None => {
            for j in 0..xs.len() {
                let t = (xs[j] - m).exp();
                out[j] = t;
                sum += t;
            }
        }
    }
    if sum == 0.0 {
        let u = 1.0 / xs.len() as f64;
        out.fill(u);
        *degenerate += 1;
        return;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn mat_mul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<MatDims> {
    match (sa.len(), sb.len()) {
        (2, 2) => (sa[1] == sb[0]).then(|| MatDims {
            batch: 1,
            m: sa[0],
            k: sa[1],
            n: sb[1],
            rhs_batched: false,
        }),
        (3, 3) => (sa[0] == sb[0] && sa[2] == sb[1]).then(|| MatDims {
            batch: sa[0],
            m: sa[1],
            k: sa[2],
            n: sb[2],
            rhs_batched: true,
        }),
        (3, 2) => (sa[2] == sb[0]).then(|| MatDims {
            batch: sa[0],
            m: sa[1],
            k: sa[2],
            n: sb[1],
            rhs_batched: false,
        }),
        _ => None,
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for (flat, &v) in data.iter().enumerate() {
        let mut rem = flat;
        for d in 0..rank {
            idx[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        let mut of = 0;
        for d in 0..rank {
            of += idx[perm[d]] * out_strides[d];
        }
        out[of] = v;
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// numpy-style broadcast of `a` and `b`; `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Maps a flat index in the broadcast output to a flat index in the input.
struct BroadcastIndexer {
    out_strides: Vec<usize>,
    in_strides: Vec<usize>,
    trivial: bool,
}

impl BroadcastIndexer {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        if in_shape == out_shape {
            return BroadcastIndexer {
                out_strides: Vec::new(),
                in_strides: Vec::new(),
                trivial: true,
            };
        }
        let rank = out_shape.len();
        let mut padded = vec![1usize; rank];
        let off = rank - in_shape.len();
        padded[off..].copy_from_slice(in_shape);
        let raw = strides_of(&padded);
        let in_strides: Vec<usize> = padded
            .iter()
            .zip(&raw)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        BroadcastIndexer {
            out_strides: strides_of(out_shape),
            in_strides,
            trivial: false,
        }
    }

    fn map(&self, flat: usize) -> usize {
        if self.trivial {
            return flat;
        }
        let mut rem = flat;
        let mut of = 0;
        for d in 0..self.out_strides.len() {
            let ix = rem / self.out_strides[d];
            rem %= self.out_strides[d];
            of += ix * self.in_strides[d];
        }
        of
    }
}

/// Accumulate `scale * grad` (shaped `from`) into `buf` (shaped `to`),
/// summing over broadcast axes.
fn add_reduced(buf: &mut [f64], grad: &[f64], from: &[usize], to: &[usize], scale: f64) {
    if from == to {
        for (o, &g) in buf.iter_mut().zip(grad) {
            *o += scale * g;
        }
        return;
    }
    if buf.len() == 1 {
        buf[0] += scale * grad.iter().sum::<f64>();
        return;
    }
    let ix = BroadcastIndexer::new(to, from);
    for (flat, &g) in grad.iter().enumerate() {
        buf[ix.map(flat)] += scale * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_of(tape: &mut Tape, shape: &[usize], data: &[f64]) -> TensorId {
        tape.variable(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new(false);
        let a = tensor_of(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = tensor_of(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut t = Tape::new(false);
        let a = tensor_of(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor_of(&mut t, &[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new(false);
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.constant(vec![4, 5], vec![0.0; 20]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a: Vec<f64> = (0..25).map(|_| next()).collect();
        let b: Vec<f64> = (0..25).map(|_| next()).collect();
        let mut expect = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a[i * 5 + p] * b[p * 5 + j];
                }
                expect[i * 5 + j] = s;
            }
        }
        let mut t = Tape::new(false);
        let ta = tensor_of(&mut t, &[5, 5], &a);
        let tb = tensor_of(&mut t, &[5, 5], &b);
        let c = t.matmul(ta, tb).unwrap();
        for (got, want) in t.value(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_normalization() {
        let mut t = Tape::new(false);
        let x = tensor_of(&mut t, &[2], &[0.0, 0.0]);
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);

        let x2 = tensor_of(&mut t, &[3], &[0.3, -1.2, 2.4]);
        let y2 = t.softmax(x2, 0).unwrap();
        let s: f64 = t.value(y2).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.value(y2).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_no_overflow() {
        let mut t = Tape::new(false);
        let x = tensor_of(&mut t, &[2], &[1000.0, 0.0]);
        let y = t.softmax(x, 0).unwrap();
        let v = t.value(y);
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut t = Tape::new(false);
        let x = t.constant(vec![2], vec![0.0, 0.0]);
        assert!(matches!(
            t.softmax(x, 1),
            Err(TensorError::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new(false);
        let x = tensor_of(&mut t, &[3], &[1.0, -2.0, 0.5]);
        let y = t.add_scalar(x, 0.0);
        assert_eq!(t.value(y), t.value(x));

        let z = tensor_of(&mut t, &[1], &[0.0]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s), &[0.5]);

        let v = tensor_of(&mut t, &[1], &[2.5]);
        let lg = t.log(v).unwrap();
        let back = t.exp(lg).unwrap();
        assert!((t.value(back)[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn elementwise_domain_errors() {
        let mut t = Tape::new(false);
        let x = t.constant(vec![2], vec![1.0, -1.0]);
        assert!(t.log(x).is_err());
        let zero = t.constant(vec![1], vec![0.0]);
        let one = t.constant(vec![1], vec![1.0]);
        assert!(t.div(one, zero).is_err());
        let big = t.constant(vec![1], vec![800.0]);
        assert!(t.exp(big).is_err());
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut t = Tape::new(false);
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.constant(vec![2, 4], vec![0.0; 8]);
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn layer_norm_definition() {
        let mut t = Tape::new(false);
        let gain = t.constant(vec![3], vec![1.0; 3]);
        let bias = t.constant(vec![3], vec![0.0; 3]);

        let c = tensor_of(&mut t, &[1, 3], &[4.0, 4.0, 4.0]);
        let y = t.layer_norm(c, gain, bias).unwrap();
        assert!(t.value(y).iter().all(|&v| v.abs() < 1e-6));

        let x = tensor_of(&mut t, &[1, 3], &[1.0, 2.0, 3.0]);
        let y2 = t.layer_norm(x, gain, bias).unwrap();
        let v = t.value(y2);
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lookup_rows_and_accumulation() {
        let mut t = Tape::new(true);
        let table = tensor_of(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = t.lookup(table, &[0]).unwrap();
        assert_eq!(t.value(out), &[1.0, 2.0]);

        let rep = t.lookup(table, &[1, 1]).unwrap();
        let s = t.sum_all(rep);
        t.backward(s).unwrap();
        let g = t.grad(table).unwrap();
        assert_eq!(g, &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn lookup_out_of_range() {
        let mut t = Tape::new(false);
        let table = t.constant(vec![2, 2], vec![0.0; 4]);
        assert!(matches!(
            t.lookup(table, &[5]),
            Err(TensorError::IndexOutOfRange { index: 5, rows: 2 })
        ));
    }

    #[test]
    fn lookup_equals_one_hot_matmul() {
        let mut t = Tape::new(false);
        let data: Vec<f64> = (0..15).map(|i| i as f64 * 0.7 - 3.0).collect();
        let table = tensor_of(&mut t, &[5, 3], &data);
        for i in 0..5 {
            let via_lookup = t.lookup(table, &[i]).unwrap();
            let mut onehot = vec![0.0; 5];
            onehot[i] = 1.0;
            let oh = t.constant(vec![1, 5], onehot);
            let via_mm = t.matmul(oh, table).unwrap();
            assert_eq!(t.value(via_lookup), t.value(via_mm));
        }
    }

    #[test]
    fn backward_square_and_unreachable() {
        let mut t = Tape::new(true);
        let x = tensor_of(&mut t, &[1], &[3.0]);
        let p = tensor_of(&mut t, &[1], &[7.0]); // unreachable from loss
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        assert!(t.grad(p).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new(true);
        let x = tensor_of(&mut t, &[2], &[1.0, 2.0]);
        let y = t.mul(x, x).unwrap();
        assert!(matches!(
            t.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn calibrated_softmax_identity_is_bitwise() {
        let mut t = Tape::new(false);
        let scores = tensor_of(&mut t, &[2, 4], &[0.3, -1.0, 2.2, 0.0, 1.0, 1.0, -0.5, 0.7]);
        let ones = t.constant(vec![4], vec![1.0; 4]);
        let plain = t.softmax(scores, 1).unwrap();
        let calib = t.calibrated_softmax(scores, ones).unwrap();
        assert_eq!(t.value(plain), t.value(calib));
    }

    #[test]
    fn calibrated_softmax_suppression_and_renorm() {
        let mut t = Tape::new(false);
        // Uniform scores so A rows are uniform; keep = 1-P with P=[0,0.5,0].
        let scores = t.constant(vec![3, 3], vec![0.0; 9]);
        let keep = t.constant(vec![3], vec![1.0, 0.5, 1.0]);
        let out = t.calibrated_softmax(scores, keep).unwrap();
        for row in t.value(out).chunks_exact(3) {
            assert!((row[0] - 0.4).abs() < 1e-12);
            assert!((row[1] - 0.2).abs() < 1e-12);
            assert!((row[2] - 0.4).abs() < 1e-12);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn calibrated_softmax_degenerate_falls_back_to_uniform() {
        let mut t = Tape::new(false);
        let scores = t.constant(vec![1, 2], vec![1.0, 2.0]);
        let keep = t.constant(vec![2], vec![0.0, 0.0]);
        let out = t.calibrated_softmax(scores, keep).unwrap();
        assert_eq!(t.value(out), &[0.5, 0.5]);
        assert_eq!(t.diagnostics.degenerate_rows, 1);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut t = Tape::new(false);
        // Uniform logits over V=7: loss = ln 7.
        let logits = t.constant(vec![3, 7], vec![0.0; 21]);
        let l = t.cross_entropy(logits, &[1, 2, 3], None).unwrap();
        assert!((t.value(l)[0] - (7.0f64).ln()).abs() < 1e-12);

        // Sharp correct logits drive the loss toward zero.
        let mut data = vec![0.0; 10];
        data[3] = 50.0;
        let sharp = t.constant(vec![1, 10], data);
        let l2 = t.cross_entropy(sharp, &[3], None).unwrap();
        assert!(t.value(l2)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let mut t = Tape::new(false);
        let logits = t.constant(vec![2, 4], vec![0.0; 8]);
        assert!(matches!(
            t.cross_entropy(logits, &[0, 0], Some(0)),
            Err(TensorError::AllIgnored)
        ));
    }

    #[test]
    fn permute_round_trip() {
        let mut t = Tape::new(false);
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tensor_of(&mut t, &[2, 3, 4], &data);
        let p = t.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(t.shape(p), &[3, 2, 4]);
        let back = t.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut t = Tape::new(false);
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = tensor_of(&mut t, &[3, 4], &data);
        let a = t.slice_cols(x, 0, 2).unwrap();
        let b = t.slice_cols(x, 2, 2).unwrap();
        let joined = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(joined), t.value(x));

        let r0 = t.slice_rows(x, 0, 1).unwrap();
        let r12 = t.slice_rows(x, 1, 2).unwrap();
        let rejoined = t.concat_rows(&[r0, r12]).unwrap();
        assert_eq!(t.value(rejoined), t.value(x));
    }
}
