//! Dense row-major `f64` kernels used by the forward pass.
//!
//! Every kernel is a pure function. Reductions run in a fixed index order so
//! that repeated calls, and calls from different worker threads, produce
//! bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    /// Build a tensor, checking the length and that every entry is finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                op: "Tensor2::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                site: 0,
                position: idx / cols.max(1),
            });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Length {
                    op: "Tensor2::from_rows",
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor2::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row of the first non-finite entry, if any.
    pub(crate) fn first_non_finite_row(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|idx| idx / self.cols.max(1))
    }
}

/// Matrix product with the reduction index `k` walked in ascending order.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    let out = matmul_unchecked(a, b)?;
    if let Some(row) = out.first_non_finite_row() {
        return Err(Error::NonFinite {
            site: 0,
            position: row,
        });
    }
    Ok(out)
}

/// Matrix product without the finiteness check on the output. The forward
/// pass uses this and checks whole sites at once so it can report where the
/// first non-finite value appeared.
pub(crate) fn matmul_unchecked(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix, same summation order as [`matmul`].
pub(crate) fn vecmat(x: &[f64], b: &Tensor2) -> Result<Vec<f64>> {
    if x.len() != b.rows {
        return Err(Error::Shape {
            op: "vecmat",
            left: (1, x.len()),
            right: b.shape(),
        });
    }
    let mut out = vec![0.0; b.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
            *o += xk * bkj;
        }
    }
    Ok(out)
}

/// Numerically stable softmax of a single vector (max subtraction).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&softmax(x.row(r)));
    }
    out
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Length {
            op: "layer_norm",
            expected: x.len(),
            got: if gamma.len() != x.len() {
                gamma.len()
            } else {
                beta.len()
            },
        });
    }
    if x.is_empty() {
        return Err(Error::Empty { op: "layer_norm" });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect())
}

/// Tanh approximation of GELU:
///
/// `gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`
pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + 0.044_715 * v * v * v)).tanh())
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::Empty { op: "argmax" });
    }
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_scalar() {
        let m = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        assert_eq!(matmul(&Tensor2::identity(3), &m).unwrap(), m);

        let m34 = Tensor2::from_vec(3, 4, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(matmul(&Tensor2::zeros(2, 3), &m34).unwrap(), Tensor2::zeros(2, 4));

        assert_eq!(matmul(&t(&[&[2.0]]), &t(&[&[3.0]])).unwrap(), t(&[&[6.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor2::zeros(2, 3), &Tensor2::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn matmul_rejects_overflow() {
        let big = t(&[&[1e200]]);
        assert!(matches!(matmul(&big, &big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn from_vec_validates() {
        assert!(Tensor2::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor2::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0], &[2f64.ln(), 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);

        let x = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        for (a, b) in softmax(&x).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        let out = layer_norm(&[5.0, 5.0, 5.0], &ones, &zeros, 1e-5).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);

        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6 && (out[1] + 1.0).abs() < 1e-6);

        let out = layer_norm(&[3.0, -7.0, 0.5], &zeros, &[2.5; 3], 1e-5).unwrap();
        assert_eq!(out, vec![2.5; 3]);
    }

    #[test]
    fn layer_norm_errors() {
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm(&[1.0], &[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&[0.0]), vec![0.0]);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-10.0).abs() < 1e-4);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(argmax(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(argmax(&[7.0]).unwrap(), 0);
        assert!(argmax(&[]).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor2::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let s = softmax(&row);
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn matmul_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn layer_norm_standardizes(x in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
            let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - x.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let n = x.len();
            let out = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 1e-15).unwrap();
            let mean = out.iter().sum::<f64>() / n as f64;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }

        #[test]
        fn kernels_are_pure(a in matrix(3, 3), b in matrix(3, 3)) {
            prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
            prop_assert_eq!(softmax_rows(&a), softmax_rows(&a));
            prop_assert_eq!(gelu(a.data()), gelu(a.data()));
        }
    }
}
