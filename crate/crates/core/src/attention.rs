//! Sliding-window + global-token attention.
//!
//! Each query `i` scores only the keys in its neighborhood `N_i`:
//! the positions within `±w` of `i`, plus every global position. Global
//! positions themselves attend to the whole sequence. Scores are kept in a
//! compressed row layout (`row_ptr` / `cols`), so memory and work scale with
//! `Σ|N_i| ≈ n·(2w+1+|G|)` instead of `n²`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPattern {
    n: usize,
    window: usize,
    globals: Vec<usize>,
    is_global: Vec<bool>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
}

impl AttentionPattern {
    /// Builds the pattern for a length-`n` sequence. `globals` may be given in
    /// any order and with duplicates.
    pub fn build(n: usize, window: usize, globals: &[usize]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Pattern("sequence length must be >= 1".into()));
        }
        if n > u32::MAX as usize {
            return Err(Error::Pattern(format!("sequence length {n} too large")));
        }
        let mut is_global = vec![false; n];
        for &g in globals {
            if g >= n {
                return Err(Error::Pattern(format!(
                    "global index {g} out of range for length {n}"
                )));
            }
            is_global[g] = true;
        }
        let globals: Vec<usize> = (0..n).filter(|&i| is_global[i]).collect();

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n * (2 * window + 1 + globals.len()).min(n));
        row_ptr.push(0);
        for i in 0..n {
            if is_global[i] {
                cols.extend(0..n as u32);
            } else {
                let lo = i.saturating_sub(window);
                let hi = (i + window).min(n - 1);
                let mut g = globals.iter().copied().peekable();
                while let Some(&j) = g.peek() {
                    if j >= lo {
                        break;
                    }
                    cols.push(j as u32);
                    g.next();
                }
                cols.extend(lo as u32..=hi as u32);
                cols.extend(g.filter(|&j| j > hi).map(|j| j as u32));
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            n,
            window,
            globals,
            is_global,
            row_ptr,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn globals(&self) -> &[usize] {
        &self.globals
    }

    pub fn is_global(&self, i: usize) -> bool {
        self.is_global[i]
    }

    /// Whether query `i` may attend to key `j`. O(1).
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.is_global[i] || self.is_global[j] || i.abs_diff(j) <= self.window
    }

    /// Sorted key positions visible from query `i`.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub(crate) fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Total number of stored (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Upper bound on stored pairs: a band of `2w+1+|G|` per ordinary row
    /// plus a full row for each global position.
    pub fn storage_bound(&self) -> usize {
        let band = (2 * self.window + 1 + self.globals.len()).min(self.n);
        (self.n - self.globals.len()) * band + self.globals.len() * self.n
    }

    /// Dense row-major boolean mask. Only meant for tests and small `n`.
    pub fn to_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n * self.n];
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                mask[i * self.n + j as usize] = true;
            }
        }
        mask
    }

    /// `n` lines of `'#'` (allowed) / `'.'` (masked).
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.allowed(i, j) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionHeadConfig {
    d_model: usize,
    heads: usize,
}

impl AttentionHeadConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "heads ({heads}) must divide d_model ({d_model})"
            )));
        }
        Ok(Self { d_model, heads })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Attention weights stored only on the pattern's support.
#[derive(Clone, Debug)]
pub struct SparseWeights {
    pattern: AttentionPattern,
    values: Vec<f32>,
}

impl SparseWeights {
    pub fn pattern(&self) -> &AttentionPattern {
        &self.pattern
    }

    /// `(key, weight)` pairs for query row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let r = self.pattern.row_range(i);
        self.pattern.cols[r.clone()]
            .iter()
            .map(|&j| j as usize)
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        let cols = self.pattern.neighbors(i);
        match cols.binary_search(&(j as u32)) {
            Ok(p) => self.values[self.pattern.row_ptr[i] + p],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.pattern.n;
        let mut t = Tensor::zeros([n, n]);
        let data = t.data_mut();
        for i in 0..n {
            for (j, w) in self.row(i) {
                data[i * n + j] = w;
            }
        }
        t
    }
}

/// One head's view into row-major `[n × stride]` Q/K/V buffers.
#[derive(Clone, Copy)]
pub(crate) struct HeadView {
    pub stride: usize,
    pub offset: usize,
    pub d_k: usize,
}

impl HeadView {
    #[inline]
    fn slice<'a>(&self, buf: &'a [f32], row: usize) -> &'a [f32] {
        let start = row * self.stride + self.offset;
        &buf[start..start + self.d_k]
    }
}

/// Normalized weights for query row `i` written into `w` (length `|N_i|`).
fn row_weights(q: &[f32], k: &[f32], view: HeadView, pattern: &AttentionPattern, i: usize, w: &mut [f32], scratch: &mut Vec<f64>) {
    let scale = 1.0 / (view.d_k as f64).sqrt();
    let q_i = view.slice(q, i);
    scratch.clear();
    let mut max = f64::NEG_INFINITY;
    for &j in pattern.neighbors(i) {
        let s = dot(q_i, view.slice(k, j as usize)) * scale;
        max = max.max(s);
        scratch.push(s);
    }
    let mut denom = 0.0;
    for s in scratch.iter_mut() {
        *s = (*s - max).exp();
        denom += *s;
    }
    for (o, &e) in w.iter_mut().zip(scratch.iter()) {
        *o = (e / denom) as f32;
    }
}

fn row_output(v: &[f32], view: HeadView, pattern: &AttentionPattern, i: usize, w: &[f32], acc: &mut [f64]) {
    acc.iter_mut().for_each(|a| *a = 0.0);
    for (&j, &w_ij) in pattern.neighbors(i).iter().zip(w) {
        let w_ij = w_ij as f64;
        for (a, &x) in acc.iter_mut().zip(view.slice(v, j as usize)) {
            *a += w_ij * x as f64;
        }
    }
}

/// Banded forward for one head. `out` is `[n × stride]` and only this head's
/// columns are written; `weights` has `pattern.nnz()` entries.
pub(crate) fn attend_head(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    view: HeadView,
    pattern: &AttentionPattern,
    out: &mut [f32],
    weights: &mut [f32],
) {
    let mut scratch = Vec::new();
    let mut acc = vec![0.0f64; view.d_k];
    for i in 0..pattern.n {
        let r = pattern.row_range(i);
        let w = &mut weights[r];
        row_weights(q, k, view, pattern, i, w, &mut scratch);
        row_output(v, view, pattern, i, w, &mut acc);
        let start = i * view.stride + view.offset;
        for (o, &a) in out[start..start + view.d_k].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
}

/// Accumulates the vector-Jacobian product of one head into `dq`/`dk`/`dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_head_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    view: HeadView,
    pattern: &AttentionPattern,
    weights: &[f32],
    d_out: &[f32],
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let scale = 1.0 / (view.d_k as f64).sqrt();
    let mut dw: Vec<f64> = Vec::new();
    for i in 0..pattern.n {
        let r = pattern.row_range(i);
        let cols = &pattern.cols[r.clone()];
        let w = &weights[r];
        let do_i = view.slice(d_out, i);
        dw.clear();
        let mut weighted = 0.0;
        for (&j, &w_ij) in cols.iter().zip(w) {
            let g = dot(do_i, view.slice(v, j as usize));
            weighted += w_ij as f64 * g;
            dw.push(g);
        }
        let q_start = i * view.stride + view.offset;
        for ((&j, &w_ij), &g) in cols.iter().zip(w).zip(&dw) {
            let j = j as usize;
            let ds = w_ij as f64 * (g - weighted) * scale;
            let k_start = j * view.stride + view.offset;
            for c in 0..view.d_k {
                dq[q_start + c] += (ds * k[k_start + c] as f64) as f32;
                dk[k_start + c] += (ds * q[q_start + c] as f64) as f32;
                dv[k_start + c] += (w_ij as f64 * d_out[q_start + c] as f64) as f32;
            }
        }
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: Option<&Tensor>, n: usize) -> Result<(usize, usize)> {
    let (nq, d) = q.expect_2d("sparse attention")?;
    if k.shape() != q.shape() {
        return Err(Error::Shape {
            op: "sparse attention (Q vs K)",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if let Some(v) = v {
        if v.shape() != q.shape() {
            return Err(Error::Shape {
                op: "sparse attention (Q vs V)",
                lhs: q.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
    }
    if nq != n {
        return Err(Error::Shape {
            op: "sparse attention (sequence vs pattern)",
            lhs: q.shape().to_vec(),
            rhs: vec![n],
        });
    }
    Ok((nq, d))
}

/// Row-stochastic weights `softmax(Q_i K_jᵀ / √d_k)` over `j ∈ N_i`.
pub fn sparse_attention_weights(q: &Tensor, k: &Tensor, pattern: &AttentionPattern) -> Result<SparseWeights> {
    let (_, d) = check_qkv(q, k, None, pattern.n)?;
    let view = HeadView { stride: d, offset: 0, d_k: d };
    let mut values = vec![0.0; pattern.nnz()];
    let mut scratch = Vec::new();
    for i in 0..pattern.n {
        let r = pattern.row_range(i);
        row_weights(q.data(), k.data(), view, pattern, i, &mut values[r], &mut scratch);
    }
    Ok(SparseWeights {
        pattern: pattern.clone(),
        values,
    })
}

/// Single-head sparse attention: `weights · V` evaluated on the band only.
pub fn sparse_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, pattern: &AttentionPattern) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, Some(v), pattern.n)?;
    let view = HeadView { stride: d, offset: 0, d_k: d };
    let mut out = vec![0.0; n * d];
    let mut weights = vec![0.0; pattern.nnz()];
    attend_head(q.data(), k.data(), v.data(), view, pattern, &mut out, &mut weights);
    Tensor::new([n, d], out)
}

/// Same result as [`sparse_attention_forward`] with query rows spread over
/// the rayon pool.
pub fn sparse_attention_forward_parallel(q: &Tensor, k: &Tensor, v: &Tensor, pattern: &AttentionPattern) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, Some(v), pattern.n)?;
    let view = HeadView { stride: d, offset: 0, d_k: d };
    let mut out = vec![0.0; n * d];
    out.par_chunks_mut(d).enumerate().for_each_init(
        || (Vec::new(), Vec::new(), vec![0.0f64; d]),
        |(scratch, w, acc), (i, row)| {
            w.resize(pattern.neighbors(i).len(), 0.0);
            row_weights(q.data(), k.data(), view, pattern, i, w, scratch);
            row_output(v.data(), view, pattern, i, w, acc);
            for (o, &a) in row.iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
        },
    );
    Tensor::new([n, d], out)
}

/// Full `n×n` masked softmax attention. Quadratic; used as the oracle for the
/// banded path and as the baseline in scaling benchmarks.
pub fn dense_attention_reference(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, Some(v), q.rows())?;
    if mask.len() != n * n {
        return Err(Error::Shape {
            op: "dense attention mask",
            lhs: vec![n, n],
            rhs: vec![mask.len()],
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0f32; n * n];
    for i in 0..n {
        let q_i = q.row(i);
        for j in 0..n {
            scores[i * n + j] = (dot(q_i, k.row(j)) * scale) as f32;
        }
    }
    let mut probs = vec![0.0f32; n * n];
    crate::tensor::softmax_rows_into(&scores, n, n, Some(mask), &mut probs)?;
    let mut out = vec![0.0f32; n * d];
    crate::tensor::matmul_nn(&probs, v.data(), n, n, d, &mut out);
    Tensor::new([n, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new([n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn nbrs(p: &AttentionPattern, i: usize) -> Vec<u32> {
        p.neighbors(i).to_vec()
    }

    #[test]
    fn pattern_examples() {
        let p = AttentionPattern::build(5, 1, &[0]).unwrap();
        assert_eq!(nbrs(&p, 2), vec![0, 1, 2, 3]);

        let p = AttentionPattern::build(4, 0, &[]).unwrap();
        for i in 0..4 {
            assert_eq!(nbrs(&p, i), vec![i as u32]);
        }

        let p = AttentionPattern::build(6, 2, &[5, 0]).unwrap();
        assert_eq!(nbrs(&p, 3), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(p.neighbors(3).len(), 6);
    }

    #[test]
    fn global_rows_see_everything_and_are_seen() {
        let p = AttentionPattern::build(10, 1, &[4]).unwrap();
        assert_eq!(p.neighbors(4).len(), 10);
        for i in 0..10 {
            assert!(p.allowed(i, 4));
        }
        assert!(!p.allowed(0, 9));
        assert_eq!(nbrs(&p, 9), vec![4, 8, 9]);
    }

    #[test]
    fn pattern_rejects_out_of_range_global() {
        assert!(matches!(AttentionPattern::build(3, 1, &[3]), Err(Error::Pattern(_))));
        assert!(AttentionPattern::build(0, 1, &[]).is_err());
    }

    #[test]
    fn allowed_matches_neighbor_lists() {
        let p = AttentionPattern::build(17, 2, &[0, 9, 16]).unwrap();
        for i in 0..17 {
            let listed: Vec<usize> = p.neighbors(i).iter().map(|&j| j as usize).collect();
            let by_rule: Vec<usize> = (0..17).filter(|&j| p.allowed(i, j)).collect();
            assert_eq!(listed, by_rule, "row {i}");
            if !p.is_global(i) {
                assert!(listed.len() <= 2 * 2 + 1 + 3);
            }
        }
        assert!(p.nnz() <= p.storage_bound());
    }

    #[test]
    fn render_grid() {
        let p = AttentionPattern::build(3, 0, &[0]).unwrap();
        assert_eq!(p.render(), "###\n##.\n#.#\n");
    }

    #[test]
    fn equal_scores_give_uniform_weights_on_support() {
        let n = 7;
        let q = Tensor::full([n, 4], 0.3);
        let k = Tensor::full([n, 4], -0.2);
        let p = AttentionPattern::build(n, 1, &[6]).unwrap();
        let w = sparse_attention_weights(&q, &k, &p).unwrap();
        for i in 0..n {
            let size = p.neighbors(i).len() as f32;
            for j in 0..n {
                let expected = if p.allowed(i, j) { 1.0 / size } else { 0.0 };
                assert!((w.get(i, j) - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn full_window_matches_dense_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (9, 4);
        let q = random(&mut rng, n, d);
        let k = random(&mut rng, n, d);
        let p = AttentionPattern::build(n, n - 1, &[]).unwrap();
        let w = sparse_attention_weights(&q, &k, &p).unwrap().to_dense();
        let mut scores = crate::tensor::matmul(&q, &crate::tensor::transpose(&k).unwrap()).unwrap();
        scores.data_mut().iter_mut().for_each(|s| *s /= (d as f32).sqrt());
        let dense = crate::tensor::softmax_rows(&scores, None).unwrap();
        assert!(w.max_abs_diff(&dense) < 1e-6);
    }

    #[test]
    fn diagonal_pattern_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, 3, 2);
        let k = random(&mut rng, 3, 2);
        let v = random(&mut rng, 3, 2);
        let p = AttentionPattern::build(3, 0, &[]).unwrap();
        let w = sparse_attention_weights(&q, &k, &p).unwrap();
        for i in 0..3 {
            assert_eq!(w.get(i, i), 1.0);
        }
        assert_eq!(sparse_attention_forward(&q, &k, &v, &p).unwrap(), v);
    }

    #[test]
    fn identical_value_rows_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let q = random(&mut rng, n, 3);
        let k = random(&mut rng, n, 3);
        let v = Tensor::new([n, 3], [0.5, -1.25, 2.0].repeat(n)).unwrap();
        let p = AttentionPattern::build(n, 2, &[0]).unwrap();
        let out = sparse_attention_forward(&q, &k, &v, &p).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-6);
    }

    #[test]
    fn parallel_rows_match_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100;
        let q = random(&mut rng, n, 8);
        let k = random(&mut rng, n, 8);
        let v = random(&mut rng, n, 8);
        let p = AttentionPattern::build(n, 5, &[0, 50]).unwrap();
        let a = sparse_attention_forward(&q, &k, &v, &p).unwrap();
        let b = sparse_attention_forward_parallel(&q, &k, &v, &p).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let p = AttentionPattern::build(4, 1, &[]).unwrap();
        let q = Tensor::zeros([4, 2]);
        assert!(sparse_attention_forward(&q, &Tensor::zeros([4, 3]), &q, &p).is_err());
        assert!(sparse_attention_forward(&Tensor::zeros([5, 2]), &Tensor::zeros([5, 2]), &Tensor::zeros([5, 2]), &p).is_err());
        assert!(dense_attention_reference(&q, &q, &q, &[true; 4]).is_err());
        let mut mask = vec![true; 16];
        mask[4..8].iter_mut().for_each(|m| *m = false);
        assert!(matches!(dense_attention_reference(&q, &q, &q, &mask), Err(Error::EmptyRow { row: 1 })));
    }

    #[test]
    fn head_config_validation() {
        assert_eq!(AttentionHeadConfig::new(64, 4).unwrap().d_k(), 16);
        assert!(AttentionHeadConfig::new(10, 3).is_err());
        assert!(AttentionHeadConfig::new(8, 0).is_err());
    }

    #[test]
    fn reflection_permutes_output_rows() {
        // Reversal maps the pattern onto itself when the globals are symmetric.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, d) = (11, 3);
        let p = AttentionPattern::build(n, 2, &[0, n - 1]).unwrap();
        let q = random(&mut rng, n, d);
        let k = random(&mut rng, n, d);
        let v = random(&mut rng, n, d);
        let rev = |t: &Tensor| {
            let rows: Vec<&[f32]> = (0..n).rev().map(|i| t.row(i)).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let out = sparse_attention_forward(&q, &k, &v, &p).unwrap();
        let out_rev = sparse_attention_forward(&rev(&q), &rev(&k), &rev(&v), &p).unwrap();
        assert!(rev(&out).max_abs_diff(&out_rev) < 1e-6);
    }
}
