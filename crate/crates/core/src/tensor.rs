//! Dense row-major `f32` tensors and the handful of kernels the rest of the
//! crate is built from.
//!
//! Reductions (matmul inner products, softmax normalizers) accumulate in `f64`
//! and round once on store.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("positive shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new([1], vec![value]).unwrap()
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Shape {
                    op: "set_grad",
                    lhs: self.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor (a 1-D tensor is treated as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul")?;
    let (k2, n) = b.expect_2d("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_nn(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new([m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_2d("transpose")?;
    let mut out = vec![0.0; m * n];
    transpose_into(&a.data, m, n, &mut out);
    Tensor::new([n, m], out)
}

/// Row-wise softmax; masked (`false`) entries are excluded from the
/// normalizer and come out as exactly zero.
pub fn softmax_rows(t: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = t.expect_2d("softmax_rows")?;
    if let Some(mask) = mask {
        if mask.len() != m * n {
            return Err(Error::Shape {
                op: "softmax_rows mask",
                lhs: t.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
    }
    let mut out = vec![0.0; m * n];
    softmax_rows_into(&t.data, m, n, mask, &mut out)?;
    Tensor::new([m, n], out)
}

pub(crate) fn transpose_into(a: &[f32], m: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// `out = a [m×k] · b [k×n]`, overwriting `out`.
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = a_ip as f64;
            let b_row = &b[p * n..(p + 1) * n];
            for (acc_j, &b_pj) in acc.iter_mut().zip(b_row) {
                *acc_j += a_ip * b_pj as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
}

/// `out += a [m×k] · bᵀ` where `b` is `[n×k]`.
pub(crate) fn matmul_nt_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]) as f32;
        }
    }
}

/// `out += aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub(crate) fn matmul_tn_acc(a: &[f32], b: &[f32], k: usize, m: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let a_pi = a_pi as f64;
            for (acc_ij, &b_pj) in acc[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *acc_ij += a_pi * b_pj as f64;
            }
        }
    }
    for (o, v) in out.iter_mut().zip(acc) {
        *o += v as f32;
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn softmax_rows_into(
    x: &[f32],
    m: usize,
    n: usize,
    mask: Option<&[bool]>,
    out: &mut [f32],
) -> Result<()> {
    let mut scratch: Vec<f64> = Vec::with_capacity(n);
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let row_mask = mask.map(|mk| &mk[i * n..(i + 1) * n]);
        let keep = |j: usize| row_mask.is_none_or(|mk| mk[j]);
        let mut max = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            return Err(Error::EmptyRow { row: i });
        }
        scratch.clear();
        scratch.extend(row.iter().enumerate().map(|(j, &v)| {
            if keep(j) {
                (v as f64 - max as f64).exp()
            } else {
                0.0
            }
        }));
        let denom: f64 = scratch.iter().sum();
        for (o, &e) in out[i * n..(i + 1) * n].iter_mut().zip(&scratch) {
            *o = (e / denom) as f32;
        }
    }
    Ok(())
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// The quotient uses the realized (rounded) step `x+ - x-` rather than the
/// nominal `2·eps` so that `f32` representation error in the perturbed input
/// does not leak into the estimate.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, eps: f32) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0f32; x.numel()];
    for i in 0..x.numel() {
        let orig = x.data[i];
        let hi = orig + eps;
        let lo = orig - eps;
        probe.data[i] = hi;
        let f_hi = f(&probe);
        probe.data[i] = lo;
        let f_lo = f(&probe);
        probe.data[i] = orig;
        grad[i] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Tensor::new(x.shape.clone(), grad).unwrap()
}

/// `|a − b| / max(|a|, |b|, 1)`: relative error for gradients of magnitude
/// above one, absolute error below it. Central differences of an `f32`
/// forward pass carry roughly `1e-5` absolute noise at `eps = 1e-3`, which
/// a pure relative measure would amplify without bound near zero.
pub fn gradient_error(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);

        let zero = Tensor::zeros([2, 1]);
        assert_eq!(matmul(&a, &zero).unwrap().data(), &[0.0, 0.0]);

        let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[&[2.5, 2.5, 2.5]]).unwrap();
        let s = softmax_rows(&t, None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        let t = Tensor::from_rows(&[&[0.3, 9.0]]).unwrap();
        let s = softmax_rows(&t, Some(&[true, false])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);

        let t = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let s = softmax_rows(&t, None).unwrap();
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let t = Tensor::zeros([2, 2]);
        let err = softmax_rows(&t, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, Error::EmptyRow { row: 1 }));
    }

    #[test]
    fn finite_difference_examples() {
        let x = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5]).unwrap();
        let g = finite_difference_grad(|t| t.data().iter().map(|&v| v as f64).sum(), &x, 1e-3);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }

        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(|t| (t.item() as f64).powi(2), &x, 1e-3);
        assert!((g.item() - 6.0).abs() < 1e-5);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
        let mut t = Tensor::zeros([2]);
        assert!(t.set_grad(Some(vec![0.0; 3])).is_err());
    }

    #[test]
    fn transposed_kernels_agree_with_plain_matmul() {
        let a = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new([4, 3], (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        let expected = matmul(&a, &transpose(&b).unwrap()).unwrap();
        let mut out = vec![0.0; 8];
        matmul_nt_acc(a.data(), b.data(), 2, 3, 4, &mut out);
        assert_eq!(out, expected.data());

        let at = transpose(&a).unwrap();
        let c = Tensor::new([2, 4], (0..8).map(|v| v as f32).collect()).unwrap();
        let expected = matmul(&at, &c).unwrap();
        let mut out = vec![0.0; 12];
        matmul_tn_acc(a.data(), c.data(), 2, 3, 4, &mut out);
        assert_eq!(out, expected.data());
    }
}
