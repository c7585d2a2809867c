//! Dense row-major tensors, a reverse-mode autodiff graph, AdamW with a
//! warmup/cosine schedule, and the checkpoint container.

mod checkpoint;
mod graph;
pub mod gradcheck;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, CHECKPOINT_FORMAT_VERSION};
pub use graph::{AttnMask, Gradients, Graph, Var};
pub use optim::{clip_global_norm, lr_at, AdamW, AdamWConfig, OptimState};
pub use params::{Param, ParamId, ParamStore};

use thiserror::Error;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("rank {0} exceeds the maximum of 4")]
    RankTooLarge(usize),
    #[error("attention row {0} has no allowed entry")]
    FullyMaskedRow(usize),
    #[error("backward already ran on this graph")]
    BackwardAlreadyRun,
    #[error("{name} = {value} outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
}

pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.len() > MAX_RANK {
            return Err(TensorError::RankTooLarge(shape.len()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(mismatch("new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(mismatch("from_rows", &[cols], &[bad.len()]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch("reshape", &self.shape, &shape));
        }
        if shape.len() > MAX_RANK {
            return Err(TensorError::RankTooLarge(shape.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense kernels shared by the graph and by cache-based inference.
pub mod kernels {
    /// `c = beta * c + op(a) * op(b)` for row-major operands, where
    /// `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_transposed: bool,
        b: &[f64],
        b_transposed: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.iter_mut().for_each(|x| *x *= beta);
            return;
        }
        let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: strides describe exactly the m*k, k*n and m*n element
        // buffers whose lengths are checked above.
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

    pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a, false, b, false, 0.0, &mut c);
        c
    }

    pub const LAYERNORM_EPS: f64 = 1e-5;

    /// Normalizes one row in place into `out`; returns (mean, 1/std).
    pub fn layernorm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for j in 0..x.len() {
            out[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
        }
        (mean, rstd)
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    }

    /// In-place softmax over the allowed entries of one row; disallowed
    /// entries become exactly zero. `allow` of `None` allows everything.
    pub fn softmax_row(row: &mut [f64], allow: Option<&[bool]>) {
        let allowed = |j: usize| allow.is_none_or(|a| a[j]);
        let max = (0..row.len())
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    pub fn log_sum_exp(row: &[f64]) -> f64 {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_check_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]),
            Err(TensorError::RankTooLarge(5))
        ));
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.dims2(), Some((2, 2)));
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn gemm_transpose_flags() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(kernels::matmul(2, 3, 2, &a, &b), vec![4.0, 5.0, 10.0, 11.0]);
        // aᵀ stored as [3,2]
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c = vec![0.0; 4];
        kernels::gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c);
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c = vec![1.0; 4];
        kernels::gemm(2, 3, 2, &a, false, &bt, true, 1.0, &mut c);
        assert_eq!(c, vec![5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn softmax_row_masks() {
        let mut row = [0.0, 3f64.ln(), 7.0];
        kernels::softmax_row(&mut row, Some(&[true, true, false]));
        assert!((row[0] - 0.25).abs() < 1e-15);
        assert!((row[1] - 0.75).abs() < 1e-15);
        assert_eq!(row[2], 0.0);
    }
}
