use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// Values are shared behind an `Arc`, so cloning is cheap and a tensor can be
/// handed to other threads. Mutation goes through [`Tensor::values_mut`],
/// which copies on write when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Arc::new(values),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: Arc::new(vec![value]),
        }
    }

    /// A `1 x n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            values: Arc::new(values),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("from_rows needs at least one row"));
        };
        let cols = first.len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Tensor::new(&[rows.len(), cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            values: Arc::new(values),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of every axis except the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn into_values(self) -> Vec<f64> {
        Arc::try_unwrap(self.values).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Arc::clone(&self.values),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Arc::new(self.values.iter().map(|&v| f(v)).collect()),
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            values: Arc::new(
                self.values
                    .iter()
                    .zip(other.values.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.values_mut().iter_mut().zip(other.values.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.values_mut().iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            values: Arc::new(out),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.values.iter().take(PREVIEW).collect();
        if self.numel() > PREVIEW {
            write!(f, " {head:?}...")
        } else {
            write!(f, " {head:?}")
        }
    }
}

/// Dense `a (m x k) * b (k x n)` into a fresh buffer.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, a_trans: bool, b_trans: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(a, b, &mut c, m, k, n, a_trans, b_trans, 0.0);
    c
}

/// `c = a * b + beta * c`, with either operand optionally read transposed.
/// `a` is stored `m x k` (or `k x m` when transposed), `b` is `k x n`
/// (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    a_trans: bool,
    b_trans: bool,
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe the row-major buffers whose lengths were
    // checked by the callers against m, k and n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn rows_and_cols_flatten_leading_axes() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.cols(), 4);
        assert_eq!(t.rows(), 6);
    }

    #[test]
    fn gemm_matches_naive_loops_for_all_transpositions() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let at = Tensor::new(&[m, k], a.clone()).unwrap().transpose();
        let bt = Tensor::new(&[k, n], b.clone()).unwrap().transpose();
        for (aa, ta) in [(&a[..], false), (at.values(), true)] {
            for (bb, tb) in [(&b[..], false), (bt.values(), true)] {
                let c = gemm(aa, bb, m, k, n, ta, tb);
                for (x, y) in c.iter().zip(naive.iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn values_mut_copies_shared_buffers() {
        let a = Tensor::row(vec![1.0, 2.0]);
        let mut b = a.clone();
        b.values_mut()[0] = 5.0;
        assert_eq!(a.values(), &[1.0, 2.0]);
        assert_eq!(b.values(), &[5.0, 2.0]);
    }
}
