use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
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
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Log(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    MaskCols {
        x: usize,
        keep: Vec<bool>,
    },
    Pick {
        x: usize,
        at: Vec<usize>,
    },
    Sum(usize),
    /// Scalar output whose local gradient with respect to each input was
    /// computed during the forward pass.
    ScalarFn {
        inputs: Vec<(usize, Vec<f64>)>,
    },
}

pub const OP_NAMES: [&str; 24] = [
    "matmul", "matmul_nt", "transpose", "add", "sub", "mul", "add_bias", "scale", "sigmoid", "tanh", "gelu",
    "log", "softmax_rows", "log_softmax_rows", "layer_norm", "gather_rows", "slice_cols", "concat_cols",
    "slice_rows", "concat_rows", "mask_cols", "pick", "sum", "scalar_fn",
];

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Log(_) => "log",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::MaskCols { .. } => "mask_cols",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

/// Ordered record of executed primitives.
///
/// Nodes are appended in execution order, so every input index is smaller
/// than the index of the node consuming it. Gradients of leaves accumulate
/// across `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    corrupt: Option<&'static str>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of `v`; `None` if `v` does not require grad or
    /// no backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.values[v.0].shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.requires[i])
    }

    // ---- forward primitives ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if !va.is_matrix() || !vb.is_matrix() || va.shape[1] != vb.shape[0] {
            return Err(Error::shape("matmul", &va.shape, &vb.shape));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&va.data, &vb.data, &mut out, m, k, n);
        let requires = self.req(&[a.0, b.0]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a.0, b.0), requires))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if !va.is_matrix() || !vb.is_matrix() || va.shape[1] != vb.shape[1] {
            return Err(Error::shape("matmul_nt", &va.shape, &vb.shape));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(&va.data, &vb.data, &mut out, m, k, n);
        let requires = self.req(&[a.0, b.0]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulNt(a.0, b.0), requires))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.values[a.0];
        if !va.is_matrix() {
            return Err(Error::contract(format!("transpose needs a matrix, got {:?}", va.shape)));
        }
        let (m, n) = (va.shape[0], va.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data[i * n + j];
            }
        }
        let requires = self.requires[a.0];
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a.0), requires))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape != vb.shape {
            return Err(Error::shape(op, &va.shape, &vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: va.shape.clone(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let requires = self.req(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), requires))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let requires = self.req(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), requires))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let requires = self.req(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), requires))
    }

    /// Adds the vector `bias: [n]` to every row of `a: [.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[bias.0]);
        if vb.shape.len() != 1 || va.shape.is_empty() || va.cols() != vb.shape[0] {
            return Err(Error::shape("add_bias", &va.shape, &vb.shape));
        }
        let n = vb.shape[0];
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let out = Tensor { shape: va.shape.clone(), data };
        let requires = self.req(&[a.0, bias.0]);
        Ok(self.push(out, Op::AddBias(a.0, bias.0), requires))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = &self.values[a.0];
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let requires = self.requires[a.0];
        self.push(out, op, requires)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a.0, c), |x| c * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.0), f64::tanh)
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a.0), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a.0), f64::ln)
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let n = va.cols();
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor { shape: va.shape.clone(), data };
        let requires = self.requires[a.0];
        self.push(out, Op::SoftmaxRows(a.0), requires)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let n = va.cols();
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor { shape: va.shape.clone(), data };
        let requires = self.requires[a.0];
        self.push(out, Op::LogSoftmaxRows(a.0), requires)
    }

    /// Normalizes every slice along the last axis to zero mean and unit
    /// population variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (&self.values[x.0], &self.values[gain.0], &self.values[bias.0]);
        let d = vx.cols();
        if vg.shape != [d] || vb.shape != [d] || d == 0 {
            return Err(Error::shape("layer_norm", &vx.shape, &vg.shape));
        }
        let rows = vx.data.len() / d;
        let mut xhat = vec![0.0; vx.data.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.data.len()];
        for r in 0..rows {
            let slice = &vx.data[r * d..(r + 1) * d];
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (slice[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data[c] + vb.data[c];
            }
        }
        let out = Tensor { shape: vx.shape.clone(), data: out };
        let requires = self.req(&[x.0, gain.0, bias.0]);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, requires))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.values[table.0];
        if !vt.is_matrix() {
            return Err(Error::contract(format!("gather_rows needs a matrix, got {:?}", vt.shape)));
        }
        let (rows, n) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { index: id, size: rows });
            }
            data.extend_from_slice(&vt.data[id * n..(id + 1) * n]);
        }
        let out = Tensor { shape: vec![ids.len(), n], data };
        let requires = self.requires[table.0];
        Ok(self.push(out, Op::GatherRows { table: table.0, ids: ids.to_vec() }, requires))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.values[x.0];
        if !vx.is_matrix() || start + len > vx.shape[1] {
            return Err(Error::shape("slice_cols", &vx.shape, &[start, len]));
        }
        let (m, n) = (vx.shape[0], vx.shape[1]);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx.data[r * n + start..r * n + start + len]);
        }
        let out = Tensor { shape: vec![m, len], data };
        let requires = self.requires[x.0];
        Ok(self.push(out, Op::SliceCols { x: x.0, start }, requires))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
        let m = self.values[first.0].shape.first().copied().unwrap_or(0);
        let mut total = 0;
        for p in parts {
            let vp = &self.values[p.0];
            if !vp.is_matrix() || vp.shape[0] != m {
                return Err(Error::shape("concat_cols", &self.values[first.0].shape, &vp.shape));
            }
            total += vp.shape[1];
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for p in parts {
            let vp = &self.values[p.0];
            let w = vp.shape[1];
            for r in 0..m {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&vp.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let requires = self.req(&ids);
        Ok(self.push(Tensor { shape: vec![m, total], data }, Op::ConcatCols(ids), requires))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.values[x.0];
        if !vx.is_matrix() || start + len > vx.shape[0] {
            return Err(Error::shape("slice_rows", &vx.shape, &[start, len]));
        }
        let n = vx.shape[1];
        let data = vx.data[start * n..(start + len) * n].to_vec();
        let requires = self.requires[x.0];
        Ok(self.push(Tensor { shape: vec![len, n], data }, Op::SliceRows { x: x.0, start }, requires))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice_rows(x, r, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of zero tensors"))?;
        let n = self.values[first.0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let vp = &self.values[p.0];
            if !vp.is_matrix() || vp.shape[1] != n {
                return Err(Error::shape("concat_rows", &self.values[first.0].shape, &vp.shape));
            }
            rows += vp.shape[0];
            data.extend_from_slice(&vp.data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let requires = self.req(&ids);
        Ok(self.push(Tensor { shape: vec![rows, n], data }, Op::ConcatRows(ids), requires))
    }

    /// Replaces every entry in a column whose `keep` flag is false by `fill`.
    pub fn mask_cols(&mut self, x: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let vx = &self.values[x.0];
        if !vx.is_matrix() || vx.shape[1] != keep.len() {
            return Err(Error::shape("mask_cols", &vx.shape, &[keep.len()]));
        }
        let n = keep.len();
        let mut data = vx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, &k) in row.iter_mut().zip(keep) {
                if !k {
                    *v = fill;
                }
            }
        }
        let out = Tensor { shape: vx.shape.clone(), data };
        let requires = self.requires[x.0];
        Ok(self.push(out, Op::MaskCols { x: x.0, keep: keep.to_vec() }, requires))
    }

    /// Gathers the entries at `(row, col)` positions into a vector.
    pub fn pick(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let vx = &self.values[x.0];
        let (m, n) = (vx.rows(), vx.cols());
        let mut at = Vec::with_capacity(positions.len());
        for &(r, c) in positions {
            if r >= m || c >= n {
                return Err(Error::shape("pick", &vx.shape, &[r, c]));
            }
            at.push(r * n + c);
        }
        let data = at.iter().map(|&i| vx.data[i]).collect();
        let out = Tensor { shape: vec![at.len()], data };
        let requires = self.requires[x.0];
        Ok(self.push(out, Op::Pick { x: x.0, at }, requires))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data.iter().sum();
        let requires = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x.0), requires)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.values[x.0].numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Records a scalar-valued function whose gradient with respect to each
    /// input was computed alongside its value.
    pub fn scalar_fn(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if self.values[v.0].numel() != g.len() {
                return Err(Error::shape("scalar_fn", &self.values[v.0].shape, &[g.len()]));
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|(v, _)| v.0).collect();
        let requires = self.req(&ids);
        let op = Op::ScalarFn {
            inputs: inputs.into_iter().map(|(v, g)| (v.0, g)).collect(),
        };
        Ok(self.push(Tensor::scalar(value), op, requires))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-mode sweep from the scalar `loss`.
    ///
    /// Intermediate gradients are recomputed on every call; leaf gradients
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape
            )));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        for (g, op) in self.grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *g = None;
            }
        }
        accumulate(&mut self.grads, &self.values, loss.0, |g| g[0] += 1.0);

        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if self.corrupt == Some(self.ops[i].name()) {
                let bent: Vec<f64> = g.iter().map(|x| 1.01 * x + 1e-3).collect();
                self.backprop_node(i, &bent);
            } else {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Test hook: perturbs the backward pass of every node of kind `op`
    /// (see [`OP_NAMES`]) so gradient checks can be shown to catch it.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str) {
        self.corrupt = Some(op);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let requires = &self.requires;
        let out = &values[i];
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, j: usize, f: &dyn Fn(&mut [f64])| {
            if requires[j] {
                accumulate(grads, values, j, f);
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&values[*a], &values[*b]);
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(grads, *a, &|da| gemm_nt(g, &vb.data, da, m, n, k));
                acc(grads, *b, &|db| gemm_tn(&va.data, g, db, k, m, n));
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (&values[*a], &values[*b]);
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[0]);
                // out = A · Bᵀ: dA = G · B, dB = Gᵀ · A
                acc(grads, *a, &|da| gemm(g, &vb.data, da, m, n, k));
                acc(grads, *b, &|db| gemm_tn(g, &va.data, db, n, m, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (values[*a].shape[0], values[*a].shape[1]);
                acc(grads, *a, &|da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|da| add_into(da, g));
                acc(grads, *b, &|db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|da| add_into(da, g));
                acc(grads, *b, &|db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&values[*a].data, &values[*b].data);
                acc(grads, *a, &|da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                acc(grads, *b, &|db| {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::AddBias(a, b) => {
                let n = values[*b].numel();
                acc(grads, *a, &|da| add_into(da, g));
                acc(grads, *b, &|db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(grads, *a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x));
            }
            Op::Sigmoid(a) => {
                acc(grads, *a, &|da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(&out.data) {
                        *d += x * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                acc(grads, *a, &|da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(&out.data) {
                        *d += x * (1.0 - y * y);
                    }
                });
            }
            Op::Gelu(a) => {
                let va = &values[*a].data;
                acc(grads, *a, &|da| {
                    for ((d, gx), &x) in da.iter_mut().zip(g).zip(va) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d += gx * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Log(a) => {
                let va = &values[*a].data;
                acc(grads, *a, &|da| {
                    for ((d, gx), x) in da.iter_mut().zip(g).zip(va) {
                        *d += gx / x;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                acc(grads, *a, &|da| {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (x - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                acc(grads, *a, &|da| {
                    for ((drow, grow), lrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, x), l) in drow.iter_mut().zip(grow).zip(lrow) {
                            *d += x - l.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let vg = &values[*gain].data;
                acc(grads, *x, &|dx| {
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * vg[c];
                            mean_gh += gh;
                            mean_ghx += gh * hr[c];
                        }
                        mean_gh /= d as f64;
                        mean_ghx /= d as f64;
                        for c in 0..d {
                            let gh = gr[c] * vg[c];
                            dx[r * d + c] += s * (gh - mean_gh - hr[c] * mean_ghx);
                        }
                    }
                });
                acc(grads, *gain, &|dg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((d, x), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += x * h;
                        }
                    }
                });
                acc(grads, *bias, &|db| {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let n = values[*table].cols();
                acc(grads, *table, &|dt| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * n..(id + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = values[*x].shape[1];
                let w = out.shape[1];
                acc(grads, *x, &|dx| {
                    for r in 0..out.shape[0] {
                        add_into(&mut dx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape[1];
                let m = out.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = values[p].shape[1];
                    acc(grads, p, &|dp| {
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                let len = out.numel();
                acc(grads, *x, &|dx| add_into(&mut dx[start * n..start * n + len], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = values[p].numel();
                    acc(grads, p, &|dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::MaskCols { x, keep } => {
                let n = keep.len();
                acc(grads, *x, &|dx| {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, x), &k) in drow.iter_mut().zip(grow).zip(keep) {
                            if k {
                                *d += x;
                            }
                        }
                    }
                });
            }
            Op::Pick { x, at } => {
                acc(grads, *x, &|dx| {
                    for (k, &i) in at.iter().enumerate() {
                        dx[i] += g[k];
                    }
                });
            }
            Op::Sum(x) => {
                acc(grads, *x, &|dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::ScalarFn { inputs } => {
                for (j, local) in inputs {
                    acc(grads, *j, &|dj| {
                        for (d, l) in dj.iter_mut().zip(local) {
                            *d += g[0] * l;
                        }
                    });
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], values: &[Tensor], j: usize, f: impl FnOnce(&mut [f64])) {
    let buf = grads[j].get_or_insert_with(|| vec![0.0; values[j].numel()]);
    f(buf);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// `out += a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`, giving `[k×n]`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
