//! Dense row-major `f64` matrices and a tape-based reverse-mode autodiff graph.
//!
//! Every value in the graph is a 2-D matrix. Parameters live in a [`Params`]
//! store that the graph borrows immutably; gradients for them are accumulated
//! into a separate [`Grads`] buffer so several graphs (one per utterance) can be
//! built from the same parameters and reduced in a fixed order.

use std::collections::HashMap;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self { rows: 1, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        Tensor::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Column-wise mean over all rows, as a plain vector.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` is selected through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the slices cover every element addressed by the given dimensions and
    // strides, which is checked by the callers' shape assertions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, 1.0, &a.data, a.cols, 1, &b.data, b.cols, 1, 0.0, &mut out.data, b.cols);
    out
}

/// `alpha · a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    gemm(a.rows, a.cols, b.rows, alpha, &a.data, a.cols, 1, &b.data, 1, b.cols, 0.0, &mut out.data, b.rows);
    out
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads { slots: vec![None; self.tensors.len()] }
    }
}

/// Per-parameter gradient accumulators, allocated lazily.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params] }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.slots.get(id).and_then(Option::as_ref)
    }

    fn slot(&mut self, id: usize, shape: (usize, usize)) -> &mut Tensor {
        if self.slots.len() <= id {
            self.slots.resize(id + 1, None);
        }
        self.slots[id].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    /// Adds `other` slot by slot.
    pub fn merge(&mut self, other: Grads) {
        for (id, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                let shape = g.shape();
                self.slot(id, shape).add_assign(&g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Drops the gradient for every parameter not accepted by `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(usize) -> bool) {
        for (id, g) in self.slots.iter_mut().enumerate() {
            if !keep(id) {
                *g = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row reduction used by [`Graph::pool_rows`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Max,
    Sum,
}

enum Op {
    Param(usize),
    Const,
    MatMul(Var, Var),
    MatMulNT(Var, Var, f64),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mask(Var, Vec<f64>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    Pool { x: Var, start: usize, end: usize, kind: PoolKind, argmax: Vec<usize> },
    Loss(Vec<(Var, Tensor)>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// A single forward computation recorded for reverse-mode differentiation.
pub struct Graph<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `alpha · a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: f64) -> Var {
        let out = matmul_nt(self.value(a), self.value(b), alpha);
        self.push(out, Op::MatMulNT(a, b, alpha))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, self.value(a).cols);
        let bias = bias.data.clone();
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(mask.len(), out.data.len());
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Mask(a, mask))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data.clone();
        let b = self.value(bias).data.clone();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.data[r * cols + c] * g[c] + b[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let row = &xv.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.row_mut(r)[..limit];
            let mut sum = 0.0;
            for (o, v) in o.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols);
        let mut out = Tensor::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "gather index {id} out of range {}", tv.rows);
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// Sliding-window unfolding for strided 1-D convolution over rows.
    ///
    /// Output row `t` holds input rows `t*stride - pad .. t*stride - pad + kernel`
    /// concatenated, with zeros outside the input.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let n_out = (n + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros(n_out, kernel * c);
        for t in 0..n_out {
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    out.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        self.push(out, Op::Unfold { x, kernel, stride, pad })
    }

    /// Reduces rows `start..end` (half-open) of `x` to a `1 × cols` row.
    pub fn pool_rows(&mut self, x: Var, start: usize, end: usize, kind: PoolKind) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.rows, "empty or out-of-range pooling window");
        let cols = xv.cols;
        let mut out = vec![0.0; cols];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Sum | PoolKind::Mean => {
                for r in start..end {
                    for (o, v) in out.iter_mut().zip(xv.row(r)) {
                        *o += v;
                    }
                }
                if kind == PoolKind::Mean {
                    let n = (end - start) as f64;
                    out.iter_mut().for_each(|v| *v /= n);
                }
            }
            PoolKind::Max => {
                argmax = vec![start; cols];
                out.copy_from_slice(xv.row(start));
                for r in start + 1..end {
                    for (c, v) in xv.row(r).iter().enumerate() {
                        if *v > out[c] {
                            out[c] = *v;
                            argmax[c] = r;
                        }
                    }
                }
            }
        }
        self.push(Tensor::row_vector(out), Op::Pool { x, start, end, kind, argmax })
    }

    /// Records a scalar whose gradients with respect to `inputs` were computed
    /// analytically by the caller.
    pub fn scalar_loss(&mut self, value: f64, local_grads: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &local_grads {
            assert_eq!(self.value(*v).shape(), g.shape());
        }
        self.push(Tensor::scalar(value), Op::Loss(local_grads))
    }

    /// Back-propagates the given output gradients and accumulates parameter
    /// gradients into `grads`.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>, grads: &mut Grads) {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else { return };
        let mut node_grads: Vec<Option<Tensor>> = (0..=top).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(v).shape(), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut node_grads, v, g);
        }
        for i in (0..=top).rev() {
            let Some(gout) = node_grads[i].take() else { continue };
            self.backward_node(i, gout, &mut node_grads, grads);
        }
    }

    fn backward_node(&self, i: usize, gout: Tensor, ng: &mut [Option<Tensor>], grads: &mut Grads) {
        match &self.nodes[i].op {
            Op::Param(id) => {
                let shape = gout.shape();
                grads.slot(*id, shape).add_assign(&gout);
            }
            Op::Const => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                let ga = grad_slot(ng, *a, av.shape());
                gemm(av.rows, bv.cols, av.cols, 1.0, &gout.data, gout.cols, 1, &bv.data, 1, bv.cols, 1.0, &mut ga.data, av.cols);
                let gb = grad_slot(ng, *b, bv.shape());
                gemm(bv.rows, av.rows, bv.cols, 1.0, &av.data, 1, av.cols, &gout.data, gout.cols, 1, 1.0, &mut gb.data, bv.cols);
            }
            Op::MatMulNT(a, b, alpha) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // C = α A Bᵀ: dA = α dC · B, dB = α dCᵀ · A
                let ga = grad_slot(ng, *a, av.shape());
                gemm(av.rows, bv.rows, av.cols, *alpha, &gout.data, gout.cols, 1, &bv.data, bv.cols, 1, 1.0, &mut ga.data, av.cols);
                let gb = grad_slot(ng, *b, bv.shape());
                gemm(bv.rows, av.rows, bv.cols, *alpha, &gout.data, 1, gout.cols, &av.data, av.cols, 1, 1.0, &mut gb.data, bv.cols);
            }
            Op::Add(a, b) => {
                grad_slot(ng, *a, gout.shape()).add_assign(&gout);
                accumulate(ng, *b, gout);
            }
            Op::AddRow(a, b) => {
                let cols = gout.cols;
                let gb = grad_slot(ng, *b, (1, cols));
                for r in 0..gout.rows {
                    for (acc, g) in gb.data.iter_mut().zip(gout.row(r)) {
                        *acc += g;
                    }
                }
                accumulate(ng, *a, gout);
            }
            Op::Scale(a, s) => {
                let mut g = gout;
                g.scale_in_place(*s);
                accumulate(ng, *a, g);
            }
            Op::Relu(a) => {
                let out = self.value(Var(i));
                let mut g = gout;
                for (g, o) in g.data.iter_mut().zip(&out.data) {
                    if *o <= 0.0 {
                        *g = 0.0;
                    }
                }
                accumulate(ng, *a, g);
            }
            Op::Mask(a, mask) => {
                let mut g = gout;
                for (g, m) in g.data.iter_mut().zip(mask) {
                    *g *= m;
                }
                accumulate(ng, *a, g);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).data.clone();
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = Tensor::zeros(rows, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let go = gout.row(r);
                    let xh = xhat.row(r);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dgain[c] += go[c] * xh[c];
                        dbias[c] += go[c];
                        dxhat[c] = go[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xh[c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        out[c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                accumulate(ng, *gain, Tensor::row_vector(dgain));
                accumulate(ng, *bias, Tensor::row_vector(dbias));
                accumulate(ng, *x, dx);
            }
            Op::Softmax(x) => {
                let p = self.value(Var(i));
                let mut g = gout;
                for r in 0..p.rows {
                    let pr = p.row(r);
                    let gr = g.row_mut(r);
                    let dot: f64 = pr.iter().zip(gr.iter()).map(|(p, g)| p * g).sum();
                    for (g, p) in gr.iter_mut().zip(pr) {
                        *g = p * (*g - dot);
                    }
                }
                accumulate(ng, *x, g);
            }
            Op::SliceCols(x, start) => {
                let xs = self.value(*x).shape();
                let gx = grad_slot(ng, *x, xs);
                for r in 0..gout.rows {
                    for (acc, g) in gx.row_mut(r)[*start..*start + gout.cols].iter_mut().zip(gout.row(r)) {
                        *acc += g;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(*p).shape();
                    let gp = grad_slot(ng, *p, ps);
                    for r in 0..gout.rows {
                        for (acc, g) in gp.row_mut(r).iter_mut().zip(&gout.row(r)[offset..offset + ps.1]) {
                            *acc += g;
                        }
                    }
                    offset += ps.1;
                }
            }
            Op::Gather(table, ids) => {
                let ts = self.value(*table).shape();
                let gt = grad_slot(ng, *table, ts);
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, g) in gt.row_mut(id).iter_mut().zip(gout.row(r)) {
                        *acc += g;
                    }
                }
            }
            Op::Unfold { x, kernel, stride, pad } => {
                let (n, c) = self.value(*x).shape();
                let gx = grad_slot(ng, *x, (n, c));
                for t in 0..gout.rows {
                    for j in 0..*kernel {
                        let src = (t * stride + j) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < n {
                            let g = &gout.row(t)[j * c..(j + 1) * c];
                            for (acc, g) in gx.row_mut(src as usize).iter_mut().zip(g) {
                                *acc += g;
                            }
                        }
                    }
                }
            }
            Op::Pool { x, start, end, kind, argmax } => {
                let xs = self.value(*x).shape();
                let gx = grad_slot(ng, *x, xs);
                let g = gout.row(0);
                match kind {
                    PoolKind::Sum | PoolKind::Mean => {
                        let w = if *kind == PoolKind::Mean { 1.0 / (end - start) as f64 } else { 1.0 };
                        for r in *start..*end {
                            for (acc, g) in gx.row_mut(r).iter_mut().zip(g) {
                                *acc += w * g;
                            }
                        }
                    }
                    PoolKind::Max => {
                        for (c, &r) in argmax.iter().enumerate() {
                            gx.data[r * xs.1 + c] += g[c];
                        }
                    }
                }
            }
            Op::Loss(local) => {
                let s = gout.item();
                for (v, g) in local {
                    let mut g = g.clone();
                    g.scale_in_place(s);
                    accumulate(ng, *v, g);
                }
            }
        }
    }
}

fn accumulate(ng: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut ng[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn grad_slot(ng: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    ng[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}
