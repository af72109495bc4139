//! Dense row-major `f64` tensors.
//!
//! All feature matrices in the pipeline live in this type. Storage is a flat
//! `Vec<f64>` plus a shape; matrix products are delegated to `matrixmultiply`'s
//! runtime-dispatched SIMD dgemm. Every allocation and drop is counted by an
//! instrumented byte counter so the benchmark harness can observe peak live
//! allocation without a custom global allocator.

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

// ── Allocation accounting ────────────────────────────────────────────

static LIVE_BYTES: AtomicU64 = AtomicU64::new(0);
static PEAK_BYTES: AtomicU64 = AtomicU64::new(0);

fn track_alloc(bytes: u64) {
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

fn track_free(bytes: u64) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
}

/// Currently live tensor bytes.
pub fn live_tensor_bytes() -> u64 {
    LIVE_BYTES.load(Ordering::Relaxed)
}

/// High-water mark of live tensor bytes since the last reset.
pub fn peak_tensor_bytes() -> u64 {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Reset the peak counter to the current live level.
pub fn reset_peak_tensor_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

// ── Tensor ───────────────────────────────────────────────────────────

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::from_vec(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        track_free((self.data.len() * 8) as u64);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    /// Wrap an existing buffer. Panics if the element count does not match.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} wants {numel} elements, got {}",
            data.len()
        );
        track_alloc((data.len() * 8) as u64);
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![1, 1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar content of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of the leading dimension when viewed as 2-D (rows, cols).
    pub fn rows(&self) -> usize {
        assert!(self.shape.len() == 2, "rows() needs 2-D, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.shape.len() == 2, "cols() needs 2-D, got {:?}", self.shape);
        self.shape[1]
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Boundary check used where the contract forbids NaN/Inf.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }
}

// ── Matrix products ──────────────────────────────────────────────────

/// Which operands of a matrix product are read transposed.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum MatLayout {
    NN,
    NT,
    TN,
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
///
/// `a` is `(m, k)` after `op`, `b` is `(k, n)` after `op`. Transposition is
/// expressed through strides; no operand is materialized.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    layout: MatLayout,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match layout {
        MatLayout::TN => (1isize, m as isize), // a stored (k, m)
        _ => (k as isize, 1),
    };
    let (rsb, csb) = match layout {
        MatLayout::NT => (1isize, k as isize), // b stored (n, k)
        _ => (n as isize, 1),
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// `a (m,k) @ b (k,n)` into a fresh tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(k, b.rows(), "matmul inner dims {k} vs {}", b.rows());
    let mut c = Tensor::zeros(&[m, n]);
    gemm(MatLayout::NN, m, k, n, 1.0, a.data(), b.data(), 0.0, c.data_mut());
    c
}

// ── Small helpers shared across modules ──────────────────────────────

/// Numerically stable softmax over one row, in place.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let id = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &id).data(), a.data());
    }

    #[test]
    fn gemm_transposed_operands() {
        // a (2,3), b (3,2): compare NT/TN against explicit transposes.
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let reference = matmul(&a, &b);

        // NT: pass b^T stored as (2,3) and ask for b transposed.
        let bt = Tensor::from_vec(vec![2, 3], vec![7., 9., 11., 8., 10., 12.]);
        let mut c = vec![0.0; 4];
        gemm(MatLayout::NT, 2, 3, 2, 1.0, a.data(), bt.data(), 0.0, &mut c);
        assert_eq!(c, reference.data());

        // TN: pass a^T stored as (3,2).
        let at = Tensor::from_vec(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]);
        let mut c = vec![0.0; 4];
        gemm(MatLayout::TN, 2, 3, 2, 1.0, at.data(), b.data(), 0.0, &mut c);
        assert_eq!(c, reference.data());
    }

    #[test]
    fn softmax_row_sums_to_one_and_shifts() {
        let mut a = [1.0, 2.0, 3.0];
        let mut b = [101.0, 102.0, 103.0];
        softmax_row(&mut a);
        softmax_row(&mut b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn allocation_counter_tracks_peak() {
        reset_peak_tensor_bytes();
        let base = live_tensor_bytes();
        {
            let _t = Tensor::zeros(&[1024]);
            assert_eq!(live_tensor_bytes() - base, 8192);
        }
        assert_eq!(live_tensor_bytes(), base);
        assert!(peak_tensor_bytes() - base >= 8192);
    }

    #[test]
    fn softplus_extremes() {
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
    }
}
