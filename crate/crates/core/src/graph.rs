//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so node indices are already a topological order and `backward`
//! is a single reverse sweep. Graphs are rebuilt for every forward pass and
//! are not shared between threads.

use std::sync::Arc;

use crate::attention::{attend_head, attend_head_backward, AttentionPattern, HeadView};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Softmax {
        input: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SparseAttention {
        q: Var,
        k: Var,
        v: Var,
        pattern: Arc<AttentionPattern>,
        heads: usize,
        weights: Vec<f32>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    peak_numel: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest single buffer computed on this graph (an op output or cached
    /// attention weights), in elements. Leaves are not counted.
    pub fn peak_numel(&self) -> usize {
        self.peak_numel
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        if !matches!(op, Op::Leaf) {
            self.peak_numel = self.peak_numel.max(value.numel());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        let t = &mut self.nodes[v.0].value;
        let g = t.grad().map(<[f32]>::to_vec);
        t.set_grad(None).unwrap();
        g
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).expect_2d(op)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(a, "add_row")?;
        if self.value(bias).numel() != c {
            return Err(self.shape_err("add_row", a, bias));
        }
        let b = self.value(bias).data();
        let data = self.value(a).data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a), mask)?;
        Ok(self.push(out, Op::Softmax { input: a }, &[a]))
    }

    /// Row-wise layer normalization with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, c) = self.dims(x, "layer_norm")?;
        if self.value(gain).numel() != c {
            return Err(self.shape_err("layer_norm gain", x, gain));
        }
        if self.value(bias).numel() != c {
            return Err(self.shape_err("layer_norm bias", x, bias));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0f32; m * c];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * c];
        for i in 0..m {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * r) as f32;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new([m, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of a 2-D `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows needs at least one id"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row id {bad} out of range for {rows} rows")));
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::new([ids.len(), c], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, c) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!("column slice {start}..{} of {c}", start + len)));
        }
        let t = self.value(x);
        let data = (0..m).flat_map(|i| t.row(i)[start..start + len].iter().copied()).collect();
        let out = Tensor::new([m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pc) = self.dims(p, "concat_cols")?;
            if pm != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new([m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Multi-head banded attention. `q`, `k`, `v` are `[n × d_model]`; all
    /// heads share `pattern`.
    pub fn sparse_attention(&mut self, q: Var, k: Var, v: Var, pattern: Arc<AttentionPattern>, heads: usize) -> Result<Var> {
        let (n, d) = self.dims(q, "sparse_attention")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(self.shape_err("sparse_attention", q, other));
            }
        }
        if n != pattern.len() {
            return Err(Error::Shape {
                op: "sparse_attention (sequence vs pattern)",
                lhs: vec![n, d],
                rhs: vec![pattern.len()],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("heads ({heads}) must divide d_model ({d})")));
        }
        let d_k = d / heads;
        let nnz = pattern.nnz();
        let mut out = vec![0.0f32; n * d];
        let mut weights = vec![0.0f32; heads * nnz];
        for h in 0..heads {
            let view = HeadView {
                stride: d,
                offset: h * d_k,
                d_k,
            };
            attend_head(
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
                view,
                &pattern,
                &mut out,
                &mut weights[h * nnz..(h + 1) * nnz],
            );
        }
        self.peak_numel = self.peak_numel.max(weights.len());
        let out = Tensor::new([n, d], out)?;
        Ok(self.push(
            out,
            Op::SparseAttention {
                q,
                k,
                v,
                pattern,
                heads,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a]))
    }

    /// `Σ_t mask_t · −log softmax(logits_t)[target_t]`, computed with
    /// log-sum-exp on the raw logits.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, vocab) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m || mask.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy targets",
                lhs: vec![m, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid(format!("target id {bad} >= vocab {vocab}")));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::invalid("cross entropy over zero unmasked steps"));
        }
        let mut probs = vec![0.0f32; m * vocab];
        tensor::softmax_rows_into(self.value(logits).data(), m, vocab, None, &mut probs)?;
        let mut total = 0.0f64;
        for t in 0..m {
            if mask[t] {
                total += neg_log_softmax(self.value(logits).row(t), targets[t]);
            }
        }
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Fills `grad` on every node that requires it and is an ancestor of
    /// `loss`. Calling twice without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; call zero_grad first".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph("loss is detached: no recorded input requires grad".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if node.requires_grad {
                node.value.set_grad(g)?;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None).unwrap();
        }
        self.backward_done = false;
    }

    fn backprop(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if self.nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let out = &self.nodes[idx].value;

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    acc(*a, &mut |da| tensor::matmul_nt_acc(g, val(*b).data(), m, n, k, da));
                }
                if wants(*b) {
                    acc(*b, &mut |db| tensor::matmul_tn_acc(val(*a).data(), g, m, k, n, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let c = out.cols();
                acc(*bias, &mut |d| {
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            Op::Relu(a) => acc(*a, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a).data()) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::Softmax { input } => {
                let n = out.cols();
                let y = out.data();
                acc(*input, &mut |d| {
                    for (i, (y_row, g_row)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let inner = tensor::dot(y_row, g_row);
                        for j in 0..n {
                            d[i * n + j] += (y_row[j] as f64 * (g_row[j] as f64 - inner)) as f32;
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
                let c = out.cols();
                let gv = val(*gain).data();
                acc(*x, &mut |d| {
                    for (i, (g_row, h_row)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..c {
                            let dh = g_row[j] as f64 * gv[j] as f64;
                            mean_dh += dh;
                            mean_dh_h += dh * h_row[j] as f64;
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        let r = rstd[i] as f64;
                        for j in 0..c {
                            let dh = g_row[j] as f64 * gv[j] as f64;
                            d[i * c + j] += (r * (dh - mean_dh - h_row[j] as f64 * mean_dh_h)) as f32;
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (g_row, h_row) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += g_row[j] * h_row[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for g_row in g.chunks(c) {
                        d.iter_mut().zip(g_row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = out.cols();
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[id * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (i, g_row) in g.chunks(len).enumerate() {
                        for (j, gv) in g_row.iter().enumerate() {
                            d[i * c + start + j] += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |d| {
                        for (i, g_row) in g.chunks(total).enumerate() {
                            for j in 0..w {
                                d[i * w + j] += g_row[offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SparseAttention {
                q,
                k,
                v,
                pattern,
                heads,
                weights,
            } => {
                let (n, d) = (out.shape()[0], out.shape()[1]);
                let d_k = d / heads;
                let nnz = pattern.nnz();
                let mut dq = vec![0.0f32; n * d];
                let mut dk = vec![0.0f32; n * d];
                let mut dv = vec![0.0f32; n * d];
                for h in 0..*heads {
                    let view = HeadView {
                        stride: d,
                        offset: h * d_k,
                        d_k,
                    };
                    attend_head_backward(
                        val(*q).data(),
                        val(*k).data(),
                        val(*v).data(),
                        view,
                        pattern,
                        &weights[h * nnz..(h + 1) * nnz],
                        g,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                }
                for (x, dx) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    acc(x, &mut |d| d.iter_mut().zip(dx.iter()).for_each(|(d, g)| *d += g));
                }
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let vocab = val(*logits).cols();
                acc(*logits, &mut |d| {
                    for (t, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
                        if !keep {
                            continue;
                        }
                        let row = &mut d[t * vocab..(t + 1) * vocab];
                        for (j, r) in row.iter_mut().enumerate() {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            *r += g[0] * (probs[t * vocab + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// `−log softmax(row)[target]` via log-sum-exp.
pub fn neg_log_softmax(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - row[target] as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, gradient_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(Σ c ⊙ f(x))/dx against central differences, where `c` is a
    /// fixed random projection so every output element matters.
    fn check<F>(x: Tensor, f: F, tol: f32)
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out_shape = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = f(&mut g, v).unwrap();
            g.value(y).shape().to_vec()
        };
        let proj = random(&mut rng, &out_shape);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = f(&mut g, v).unwrap();
        let c = g.constant(proj.clone());
        let p = g.mul(y, c).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(v).unwrap().to_vec();
        // The projection is applied in f64 outside the tape so that rounding
        // of the scalar objective does not swamp the difference quotient.
        let numeric = finite_difference_grad(
            |t| {
                let mut g = Graph::new();
                let v = g.constant(t.clone());
                let y = f(&mut g, v).unwrap();
                tensor::dot(g.value(y).data(), proj.data())
            },
            &x,
            1e-3,
        );
        for (i, (a, n)) in analytic.iter().zip(numeric.data()).enumerate() {
            assert!(gradient_error(*a, *n) <= tol, "element {i}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_error_paths() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));

        let c = g.constant(Tensor::zeros([2, 2]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));

        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
    }

    #[test]
    fn gradient_checks_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let other = random(&mut rng, &[4, 3]);
        let o = other.clone();
        check(random(&mut rng, &[5, 4]), move |g, x| {
            let b = g.constant(o.clone());
            g.matmul(x, b)
        }, 1e-4);
        let o = random(&mut rng, &[3, 5]);
        check(random(&mut rng, &[5, 4]), move |g, x| {
            let a = g.constant(o.clone());
            g.matmul(a, x)
        }, 1e-4);
        check(random(&mut rng, &[3, 6]), |g, x| g.transpose(x), 1e-4);
        check(random(&mut rng, &[3, 6]), |g, x| g.mul(x, x), 1e-4);
        check(random(&mut rng, &[3, 6]), |g, x| g.relu(x), 1e-4);
        check(random(&mut rng, &[3, 6]), |g, x| g.scale(x, -2.5), 1e-4);
        check(random(&mut rng, &[4, 5]), |g, x| g.softmax_rows(x, None), 1e-4);
        let mask: Vec<bool> = (0..20).map(|i| i % 5 != 3 && i % 7 != 1).collect();
        check(random(&mut rng, &[4, 5]), move |g, x| g.softmax_rows(x, Some(&mask)), 1e-4);
        check(random(&mut rng, &[3, 8]), |g, x| g.slice_cols(x, 2, 3), 1e-4);
        check(random(&mut rng, &[3, 8]), |g, x| {
            let a = g.slice_cols(x, 0, 3)?;
            let b = g.slice_cols(x, 5, 3)?;
            g.concat_cols(&[b, a])
        }, 1e-4);
        check(random(&mut rng, &[6, 4]), |g, x| g.gather_rows(x, &[3, 0, 3, 5]), 1e-4);
        let bias = random(&mut rng, &[5]);
        check(random(&mut rng, &[3, 5]), move |g, x| {
            let b = g.constant(bias.clone());
            g.add_row(x, b)
        }, 1e-4);
        check(random(&mut rng, &[5]), |g, b| {
            let x = g.constant(Tensor::full([3, 5], 0.25));
            g.add_row(x, b)
        }, 1e-4);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = random(&mut rng, &[6]);
        let bias = random(&mut rng, &[6]);
        let (gn, bs) = (gain.clone(), bias.clone());
        check(random(&mut rng, &[4, 6]), move |g, x| {
            let a = g.constant(gn.clone());
            let b = g.constant(bs.clone());
            g.layer_norm(x, a, b)
        }, 1e-4);
        let input = random(&mut rng, &[4, 6]);
        let (inp, bs) = (input.clone(), bias.clone());
        check(gain.clone(), move |g, gn| {
            let x = g.constant(inp.clone());
            let b = g.constant(bs.clone());
            g.layer_norm(x, gn, b)
        }, 1e-4);
        check(bias, move |g, b| {
            let x = g.constant(input.clone());
            let gn = g.constant(gain.clone());
            g.layer_norm(x, gn, b)
        }, 1e-4);
    }

    #[test]
    fn sparse_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let pattern = Arc::new(AttentionPattern::build(n, 1, &[0, 5]).unwrap());
        let q = random(&mut rng, &[n, 4]);
        let k = random(&mut rng, &[n, 4]);
        let v = random(&mut rng, &[n, 4]);
        for which in 0..3 {
            let (q, k, v, p) = (q.clone(), k.clone(), v.clone(), pattern.clone());
            let x = [&q, &k, &v][which].clone();
            check(x, move |g, x| {
                let mut vars = [q.clone(), k.clone(), v.clone()].map(|t| g.constant(t));
                vars[which] = x;
                g.sparse_attention(vars[0], vars[1], vars[2], p.clone(), 2)
            }, 1e-4);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&mut rng, &[3, 5]);
        let targets = [1usize, 4, 0];
        let mask = [true, false, true];
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let ce = g.cross_entropy_sum(x, &targets, &mask).unwrap();
        let probs = tensor::softmax_rows(&logits, None).unwrap();
        let expected = -(probs.at(0, 1) as f64).ln() - (probs.at(2, 0) as f64).ln();
        assert!((g.value(ce).item() as f64 - expected).abs() < 1e-5);

        check(logits, move |g, x| g.cross_entropy_sum(x, &targets, &mask), 1e-4);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, &[4, 4]);
        let gain = Tensor::full([4], 1.0);
        let bias = Tensor::zeros([4]);
        check(random(&mut rng, &[3, 4]), move |g, x| {
            let w = g.constant(w.clone());
            let gn = g.constant(gain.clone());
            let b = g.constant(bias.clone());
            let h = g.layer_norm(x, gn, b)?;
            let h = g.matmul(h, w)?;
            let h = g.relu(h)?;
            let t = g.transpose(h)?;
            let s = g.matmul(h, t)?;
            g.softmax_rows(s, None)
        }, 1e-4);
    }

    #[test]
    fn peak_tracks_largest_buffer() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([4, 8]));
        let b = g.constant(Tensor::zeros([8, 16]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.peak_numel(), 64);
    }
}
