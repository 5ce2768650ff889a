//! Dense row-major f64 tensors.
//!
//! Every parameter, activation and gradient in this crate lives in a
//! [`Tensor`]. Shapes are dynamic; in practice everything is rank 1 or 2.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} expects {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: column range {start}..{end} out of bounds for {cols} columns")]
    BadColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
}

/// Dense tensor of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external input, rejecting NaN/Inf entries and
    /// shape/data length disagreement.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(TensorError::NonFinite { index, value });
            }
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// One matrix row per entry of `rows`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "from_rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        debug_assert!(self.is_matrix());
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    /// Reinterprets a rank-1 tensor as a single-row matrix.
    pub fn into_row_matrix(mut self) -> Self {
        debug_assert_eq!(self.rank(), 1);
        let n = self.data.len();
        self.shape = vec![1, n];
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// `a [m,k] * b [k,n] -> [m,n]`. Shapes must already be validated.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// `a [m,k] * b^T` where `b` is `[n,k]` -> `[m,n]`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// `a^T * b` where `a` is `[k,m]`, `b` is `[k,n]` -> `[m,n]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a.data[l * m..(l + 1) * m];
        let brow = &b.data[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// Row-stable softmax over the last axis of a `[b, n]` matrix.
pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (b, n) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; b * n];
    for i in 0..b {
        let row = &x.data[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_raw(vec![b, n], out)
}

/// Index of the largest entry; first occurrence wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 4, got: 3, .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
        let err = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 0, .. }));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let b = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let c = matmul(&a, &b);
        // b rebuilt transposed, multiplied via the nt kernel.
        let mut bt = vec![0.0; 12];
        for r in 0..3 {
            for col in 0..4 {
                bt[col * 3 + r] = b.at(r, col);
            }
        }
        let btm = Tensor::matrix(4, 3, bt).unwrap();
        let c2 = matmul_nt(&a, &btm);
        assert_eq!(c.data(), c2.data());

        // a rebuilt transposed, multiplied via the tn kernel.
        let mut at = vec![0.0; 6];
        for r in 0..2 {
            for col in 0..3 {
                at[col * 2 + r] = a.at(r, col);
            }
        }
        let atm = Tensor::matrix(3, 2, at).unwrap();
        let c3 = matmul_tn(&atm, &b);
        assert_eq!(c.data(), c3.data());
    }

    #[test]
    fn argmax_first_tie_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
