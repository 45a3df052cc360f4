use super::tensor::axis_geometry;
use super::{kernels, NumericsError, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Linear record of a differentiable computation.
///
/// Nodes are appended in evaluation order, so reverse order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; `None` when no gradient was ever allocated.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---- forward operations -------------------------------------------------

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[m×k] · [n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(bias).numel() != n {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    /// `x · w + b` with `w: [in×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map_value(a, |x| x * c)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.map_value(a, kernels::gelu)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Gelu(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.map_value(a, f64::ln)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.map_value(a, f64::exp)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Exp(a), rg))
    }

    /// Elementwise `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.map_value(a, kernels::softplus)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softplus(a), rg))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` over the positions where `keep` is true.
    ///
    /// `keep` has one flag per element of `x`. Masked entries are exactly zero;
    /// a lane with every entry masked is all-zero.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_geometry(&shape, axis)?;
        if n == 0 {
            return Err(NumericsError::EmptyAxis { op: "softmax" });
        }
        if let Some(k) = keep {
            if k.len() != self.value(x).numel() {
                return Err(NumericsError::Shape {
                    op: "softmax_mask",
                    lhs: shape,
                    rhs: vec![k.len()],
                });
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        let mut mask = vec![true; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    let idx = (o * n + j) * inner + i;
                    buf[j] = src[idx];
                    if let Some(k) = keep {
                        mask[j] = k[idx];
                    }
                }
                kernels::masked_softmax_in_place(&mut buf, &mask);
                for j in 0..n {
                    out[(o * n + j) * inner + i] = buf[j];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        if n == 0 {
            return Err(NumericsError::EmptyAxis { op: "log_softmax" });
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x), rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.chunks(n).zip(out.chunks_mut(n)) {
            kernels::layer_norm_row(row, g, b, o);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }, rg))
    }

    /// Gathers rows of an `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::Index {
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(NumericsError::EmptyAxis { op: "mean" });
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::EmptyAxis { op: "concat" })?;
        let (_, cols) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::EmptyAxis { op: "concat" })?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > rows {
            return Err(NumericsError::Index {
                index: start + len,
                extent: rows,
            });
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![len, cols], data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > cols {
            return Err(NumericsError::Index {
                index: start + len,
                extent: cols,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Picks elements by flat index into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(*src.get(i).ok_or(NumericsError::Index {
                index: i,
                extent: src.len(),
            })?);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Accumulates `d loss / d node` into every reachable node that requires a
    /// gradient. Calling twice without [`Tape::zero_grads`] doubles the buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(NumericsError::NoGradient);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(buf) => buf
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(b, v)| *b += v),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    kernels::matmul_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    kernels::matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · B
                    kernels::matmul_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = dCᵀ · A
                    kernels::matmul_tn_acc(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = self.value(*b).data();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = self.value(*a).data();
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len().max(1);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let x = self.value(*a).data();
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                }
            }
            Op::Log(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let x = self.value(*a).data();
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                }
            }
            Op::Softplus(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let x = self.value(*a).data();
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::sigmoid(x[i]);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let s: f64 = (0..*n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..*n {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = *node.value.shape().last().unwrap_or(&1);
                    for ((grow, orow), xrow) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let s: f64 = grow.iter().sum();
                        for j in 0..n {
                            xrow[j] += grow[j] - orow[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let n = gv.len();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; xv.len()];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..xv.len() / n {
                    let row = &xv[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + kernels::LAYER_NORM_EPS).sqrt();
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = rstd / n as f64
                            * (n as f64 * dxhat[j] - sum_d - xhat[j] * sum_dx);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, &dx);
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    add_into(gg, &dgain);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    add_into(gb, &dbias);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = self.value(*table).dims2().unwrap().1;
                    for (t, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let scale = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += scale);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = self.value(*x).dims2().unwrap().1;
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = self.value(*x).dims2().unwrap().1;
                    let (rows, len) = node.value.dims2().unwrap();
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let (r, c) = self.value(*x).dims2().unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Gather { x, indices } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &i) in indices.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
        }
    }

    /// Gradient slot for `v`, allocated on first use; `None` for constants.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_grad_buffer() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]), true);
        let y = tape.gelu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap().clone();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert_eq!(
            tape.backward(x),
            Err(NumericsError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn masked_softmax_rows_are_normalized() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 3.0, 0.0, 0.5]).unwrap(), true);
        let keep = [true, false, true, true, true, false];
        let s = tape.softmax_masked(x, 1, Some(&keep)).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }
}
