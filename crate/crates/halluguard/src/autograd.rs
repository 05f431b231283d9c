//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! Eager tape: every operation computes its value immediately and records
//! enough to run the chain rule backward. Construction order is topological
//! by definition (an input must exist before it is used), so backward is a
//! single reverse sweep over the node list.
//!
//! The op set is exactly what an encoder-decoder transformer, its losses,
//! and the dual-encoder ranking loss need; nothing speculative.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// A·B
    MatMul(Var, Var),
    Transpose(Var),
    /// Elementwise sum, same shape.
    Add(Var, Var),
    /// (m×n) + broadcast (1×n) row.
    AddRow(Var, Var),
    /// Elementwise product, same shape.
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    /// Row softmax; `allowed` flags (row-major, same shape) restrict the
    /// support, None means every position participates.
    MaskedSoftmax { x: Var },
    /// Row log-softmax.
    LogSoftmax(Var),
    /// Per-row layer norm with affine parameters; records (mean, var).
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        stats: Vec<(f64, f64)>,
    },
    /// Gather rows of an embedding table.
    Embed { table: Var, ids: Vec<u32> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Column means: (m×n) → (1×n).
    MeanRows(Var),
    /// Scalar sum of all entries: → (1×1).
    SumAll(Var),
    /// Each row divided by its ℓ2 norm.
    NormalizeRows(Var),
    /// Mean over rows of label-smoothed negative log-likelihood; input is
    /// row log-probabilities. q = (1−ε)·one_hot + ε·uniform.
    Nll {
        logp: Var,
        targets: Vec<u32>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Gradient of the last backward() with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, context: &str) -> Result<Var> {
        kernels::ensure_finite(value.data(), context)?;
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // -- construction ---------------------------------------------------

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if value.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "graph tensors are 2-D, got shape {:?}",
                value.shape()
            )));
        }
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            m,
            k,
            self.nodes[b.0].value.data(),
            n,
        );
        self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Tensor::matrix(m, n, data)?, Op::Add(a, b), "add")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (rm, rn) = self.dims(row);
        if rm != 1 || rn != n {
            return Err(Error::Shape(format!("add_row {m}x{n} + {rm}x{rn}")));
        }
        let r = self.nodes[row.0].value.data().to_vec();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a, row), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Tensor::matrix(m, n, data)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        self.push(Tensor::matrix(m, n, data)?, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.push(Tensor::matrix(m, n, data)?, Op::Relu(a), "relu")
    }

    pub fn masked_softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mask) = allowed {
            if mask.len() != m * n {
                return Err(Error::Shape(format!(
                    "softmax mask length {} vs {}x{}",
                    mask.len(),
                    m,
                    n
                )));
            }
            for i in 0..m {
                if !mask[i * n..(i + 1) * n].iter().any(|&a| a) {
                    return Err(Error::invalid(format!("softmax row {i} fully masked")));
                }
            }
        }
        let mut data = self.nodes[x.0].value.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            match allowed {
                Some(mask) => kernels::masked_softmax_row(row, &mask[i * n..(i + 1) * n]),
                None => kernels::softmax_row(row),
            }
        }
        // Backward needs only the output probabilities: masked entries are
        // exactly zero, so the softmax Jacobian zeroes their gradients.
        self.push(Tensor::matrix(m, n, data)?, Op::MaskedSoftmax { x }, "masked_softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            kernels::log_softmax_row(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        self.push(Tensor::matrix(m, n, data)?, Op::LogSoftmax(x), "log_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.dims(x);
        let (gm, gn) = self.dims(gain);
        let (bm, bn) = self.dims(bias);
        if gm != 1 || bm != 1 || gn != n || bn != n {
            return Err(Error::Shape(format!(
                "layer_norm width {n} with gain {gm}x{gn}, bias {bm}x{bn}"
            )));
        }
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let (mean, var) = kernels::layer_norm_row(
                &src[i * n..(i + 1) * n],
                &g,
                &b,
                eps,
                &mut data[i * n..(i + 1) * n],
            );
            stats.push((mean, var));
        }
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                stats,
            },
            "layer_norm",
        )
    }

    /// Recorded (mean, variance) per row of a layer_norm node.
    pub fn layer_norm_stats(&self, v: Var) -> Option<&[(f64, f64)]> {
        match &self.nodes[v.0].op {
            Op::LayerNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::OutOfVocab {
                    token: id,
                    vocab_size: vocab,
                });
            }
            data.extend_from_slice(self.nodes[table.0].value.row(id as usize));
        }
        self.push(
            Tensor::matrix(ids.len(), d, data)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            "embed",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of width {n}",
                start + len
            )));
        }
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(
            Tensor::matrix(m, len, data)?,
            Op::SliceCols { x, start, len },
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero parts"));
        }
        let m = self.dims(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::Shape(format!("concat_cols rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        self.push(
            Tensor::matrix(m, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero parts"));
        }
        let n = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::Shape(format!("concat_rows cols {pn} vs {n}")));
            }
            rows += pm;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        self.push(
            Tensor::matrix(rows, n, data)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        self.push(Tensor::matrix(1, n, data)?, Op::MeanRows(x), "mean_rows")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::matrix(1, 1, vec![total])?, Op::SumAll(x), "sum_all")
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = kernels::l2_norm(row);
            if norm == 0.0 {
                return Err(Error::invalid(format!("normalize_rows: row {i} has zero norm")));
            }
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::NormalizeRows(x),
            "normalize_rows",
        )
    }

    /// Mean label-smoothed negative log-likelihood over rows of
    /// log-probabilities. With eps = 0 this is exactly the mean of
    /// −logp[i, target_i].
    pub fn nll(&mut self, logp: Var, targets: &[u32], eps: f64) -> Result<Var> {
        let (m, v) = self.dims(logp);
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "nll targets {} vs {} rows",
                targets.len(),
                m
            )));
        }
        if !(0.0..=0.3).contains(&eps) {
            return Err(Error::invalid(format!("label smoothing {eps} outside [0, 0.3]")));
        }
        let src = self.nodes[logp.0].value.data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= v {
                return Err(Error::OutOfVocab {
                    token: t,
                    vocab_size: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let uniform: f64 = row.iter().sum::<f64>() / v as f64;
            total += -((1.0 - eps) * row[t as usize] + eps * uniform);
        }
        let loss = total / m as f64;
        self.push(
            Tensor::matrix(1, 1, vec![loss])?,
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                eps,
            },
            "nll",
        )
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss node; gradients accumulate into
    /// every node reachable backward from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            // Split borrows: take the node's grad out, write into earlier nodes.
            let grad = std::mem::take(&mut self.nodes[idx].grad);
            if grad.iter().all(|&g| g == 0.0) {
                self.nodes[idx].grad = grad;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                &Op::MatMul(a, b) => {
                    let (m, k) = self.dims(a);
                    let n = self.dims(b).1;
                    let a_val = self.nodes[a.0].value.data().to_vec();
                    let b_val = self.nodes[b.0].value.data().to_vec();
                    kernels::matmul_nt_acc(&grad, m, n, &b_val, k, &mut self.nodes[a.0].grad);
                    kernels::matmul_tn_acc(&a_val, m, k, &grad, n, &mut self.nodes[b.0].grad);
                }
                &Op::Transpose(a) => {
                    let (m, n) = self.dims(a);
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += grad[j * m + i];
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for (g, &u) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += u;
                    }
                    for (g, &u) in self.nodes[b.0].grad.iter_mut().zip(&grad) {
                        *g += u;
                    }
                }
                &Op::AddRow(a, row) => {
                    let (m, n) = self.dims(a);
                    for (g, &u) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += u;
                    }
                    let gr = &mut self.nodes[row.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += grad[i * n + j];
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    let a_val = self.nodes[a.0].value.data().to_vec();
                    let b_val = self.nodes[b.0].value.data().to_vec();
                    for ((g, &u), &bv) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&b_val) {
                        *g += u * bv;
                    }
                    for ((g, &u), &av) in self.nodes[b.0].grad.iter_mut().zip(&grad).zip(&a_val) {
                        *g += u * av;
                    }
                }
                &Op::Scale(a, c) => {
                    for (g, &u) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += u * c;
                    }
                }
                &Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data().to_vec();
                    for ((g, &u), &xv) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&x) {
                        if xv > 0.0 {
                            *g += u;
                        }
                    }
                }
                Op::MaskedSoftmax { x, .. } => {
                    let x = *x;
                    let (m, n) = self.dims(x);
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let ur = &grad[i * n..(i + 1) * n];
                        let inner = kernels::dot(ur, yr);
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (ur[j] - inner);
                        }
                    }
                }
                &Op::LogSoftmax(x) => {
                    let (m, n) = self.dims(x);
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..m {
                        let gsum: f64 = grad[i * n..(i + 1) * n].iter().sum();
                        for j in 0..n {
                            gx[i * n + j] += grad[i * n + j] - y[i * n + j].exp() * gsum;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    eps,
                    stats,
                } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let stats = stats.clone();
                    let (m, n) = self.dims(x);
                    let x_val = self.nodes[x.0].value.data().to_vec();
                    let g_val = self.nodes[gain.0].value.data().to_vec();
                    for i in 0..m {
                        let (mean, var) = stats[i];
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xr = &x_val[i * n..(i + 1) * n];
                        let ur = &grad[i * n..(i + 1) * n];
                        // h = upstream ∘ gain; dX = inv_std (h − mean(h) − x̂ mean(h∘x̂))
                        let mut h = vec![0.0; n];
                        let mut xhat = vec![0.0; n];
                        for j in 0..n {
                            xhat[j] = (xr[j] - mean) * inv_std;
                            h[j] = ur[j] * g_val[j];
                        }
                        let h_mean: f64 = h.iter().sum::<f64>() / n as f64;
                        let hx_mean: f64 = kernels::dot(&h, &xhat) / n as f64;
                        {
                            let gx = &mut self.nodes[x.0].grad;
                            for j in 0..n {
                                gx[i * n + j] += inv_std * (h[j] - h_mean - xhat[j] * hx_mean);
                            }
                        }
                        {
                            let gg = &mut self.nodes[gain.0].grad;
                            for j in 0..n {
                                gg[j] += ur[j] * xhat[j];
                            }
                        }
                        {
                            let gb = &mut self.nodes[bias.0].grad;
                            for j in 0..n {
                                gb[j] += ur[j];
                            }
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let d = self.dims(table).1;
                    let gt = &mut self.nodes[table.0].grad;
                    for (p, &id) in ids.iter().enumerate() {
                        let base = id as usize * d;
                        for j in 0..d {
                            gt[base + j] += grad[p * d + j];
                        }
                    }
                }
                &Op::SliceCols { x, start, len } => {
                    let (m, n) = self.dims(x);
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += grad[i * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let m = self.dims(parts[0]).0;
                    let mut offset = 0;
                    let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                    for &p in &parts {
                        let pn = self.dims(p).1;
                        let gp = &mut self.nodes[p.0].grad;
                        for i in 0..m {
                            for j in 0..pn {
                                gp[i * pn + j] += grad[i * total + offset + j];
                            }
                        }
                        offset += pn;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for &p in &parts {
                        let count = self.nodes[p.0].value.numel();
                        let gp = &mut self.nodes[p.0].grad;
                        for (g, &u) in gp.iter_mut().zip(&grad[offset..offset + count]) {
                            *g += u;
                        }
                        offset += count;
                    }
                }
                &Op::MeanRows(x) => {
                    let (m, n) = self.dims(x);
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += grad[j] / m as f64;
                        }
                    }
                }
                &Op::SumAll(x) => {
                    let u = grad[0];
                    for g in self.nodes[x.0].grad.iter_mut() {
                        *g += u;
                    }
                }
                &Op::NormalizeRows(x) => {
                    let (m, n) = self.dims(x);
                    let x_val = self.nodes[x.0].value.data().to_vec();
                    let y = self.nodes[idx].value.data().to_vec();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..m {
                        let norm = kernels::l2_norm(&x_val[i * n..(i + 1) * n]);
                        let yr = &y[i * n..(i + 1) * n];
                        let ur = &grad[i * n..(i + 1) * n];
                        let inner = kernels::dot(ur, yr);
                        for j in 0..n {
                            gx[i * n + j] += (ur[j] - yr[j] * inner) / norm;
                        }
                    }
                }
                Op::Nll { logp, targets, eps } => {
                    let (logp, eps) = (*logp, *eps);
                    let targets = targets.clone();
                    let (m, v) = self.dims(logp);
                    let u = grad[0];
                    let gx = &mut self.nodes[logp.0].grad;
                    let base = -u / m as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let q = if j == t as usize { 1.0 - eps } else { 0.0 } + eps / v as f64;
                            gx[i * v + j] += base * q;
                        }
                    }
                }
            }
            self.nodes[idx].grad = grad;
        }
        Ok(())
    }
}

// -- gradient checking ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

const FD_STEP: f64 = 1e-5;

/// Compare autograd against central finite differences at `point`.
/// Relative error uses max(|analytic|, |numeric|, 1e-3) as denominator so
/// finite-difference noise on near-zero coordinates is not amplified.
pub fn check_gradients<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_gradients_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(point), tolerance)
}

/// Multi-input variant; checks the gradient of every entry of every input.
pub fn check_gradients_multi<F>(f: F, points: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::invalid("check_gradients needs a scalar-valued function"));
        }
        let value = g.scalar_value(out);
        g.backward(out)?;
        let grads = vars.iter().map(|&v| g.grad(v).to_vec()).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(points)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        pass: true,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for c in 0..point.numel() {
            let orig = point.data()[c];
            work[pi].data_mut()[c] = orig + FD_STEP;
            let (plus, _) = eval(&work)?;
            work[pi].data_mut()[c] = orig - FD_STEP;
            let (minus, _) = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi][c];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = pi;
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    Ok(report)
}
