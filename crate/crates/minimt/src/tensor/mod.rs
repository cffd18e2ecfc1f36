//! N-dimensional float tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major buffer. All
//! differentiable computation goes through a [`Graph`], a define-by-run tape
//! that records one node per operation and replays the tape in reverse to
//! accumulate gradients. Graphs borrow leaf tensors (model parameters,
//! cached activations) instead of copying them, so a decoding step or a
//! training step costs only its own arithmetic.
//!
//! Everything is generic over [`Element`]: `f32` for training runs, `f64`
//! for gradient-check tests against central finite differences.

mod graph;
pub mod gradcheck;

pub use graph::{Graph, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Scalar element of a tensor: `f32` or `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Threads used by the matmul kernels. Output rows are partitioned across
/// threads, which keeps results bitwise identical for every thread count.
static KERNEL_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the kernel thread count (default 1; tests and reproducible runs keep 1).
pub fn set_kernel_threads(n: usize) {
    KERNEL_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn kernel_threads() -> usize {
    KERNEL_THREADS.load(Ordering::Relaxed)
}

/// Dense row-major float tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized axis in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| F::from_f64(x))).collect();
        Tensor { shape: vec![rows.len(), cols], data }
    }

    /// Uniform values in `[lo, hi)`, drawn element by element from `rng`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| F::from_f64(rng.uniform_range(lo, hi))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Dimension(format!("expected rank 2, got shape {other:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            other => Err(Error::Dimension(format!("expected rank 3, got shape {other:?}"))),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[F] {
        let cols = *self.shape.last().expect("row() on rank-0 tensor");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v.as_f64()).collect() }
    }
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

/// `out[i,j] += sum_p a[i,p] * b[p,j]`, accumulated in ascending `p` order
/// per output element so the result is bit-identical to the naive triple
/// loop. Rows of `out` are partitioned across kernel threads; each element
/// is produced by exactly one thread, so threading never changes results.
pub(crate) fn matmul_into<F: Element>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let threads = kernel_threads();
    if threads <= 1 || m < 2 * threads || m * k * n < 1 << 18 {
        matmul_rows(a, b, k, n, out, 0);
        return;
    }
    let chunk_rows = m.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, out_chunk) in out.chunks_mut(chunk_rows * n).enumerate() {
            let row0 = c * chunk_rows;
            scope.spawn(move || matmul_rows(a, b, k, n, out_chunk, row0));
        }
    });
}

fn matmul_rows<F: Element>(a: &[F], b: &[F], k: usize, n: usize, out: &mut [F], row0: usize) {
    for (i, orow) in out.chunks_mut(n).enumerate() {
        let arow = &a[(row0 + i) * k..(row0 + i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[i,j] += sum_p a[i,p] * b[j,p]` — matmul with the second operand
/// transposed, computed as row-by-row dot products.
pub(crate) fn matmul_nt_into<F: Element>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let threads = kernel_threads();
    if threads <= 1 || m < 2 * threads || m * k * n < 1 << 18 {
        matmul_nt_rows(a, b, k, n, out, 0);
        return;
    }
    let chunk_rows = m.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, out_chunk) in out.chunks_mut(chunk_rows * n).enumerate() {
            let row0 = c * chunk_rows;
            scope.spawn(move || matmul_nt_rows(a, b, k, n, out_chunk, row0));
        }
    });
}

fn matmul_nt_rows<F: Element>(a: &[F], b: &[F], k: usize, n: usize, out: &mut [F], row0: usize) {
    for (i, orow) in out.chunks_mut(n).enumerate() {
        let arow = &a[(row0 + i) * k..(row0 + i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = *o;
            for (&av, &bv) in arow.iter().zip(brow) {
                s = s + av * bv;
            }
            *o = s;
        }
    }
}

/// `out[j,i] += sum_p a[p,i] * g[p,j]` is what matmul backward needs for the
/// second operand: `db = a^T · g`. Computed without materializing `a^T`.
pub(crate) fn matmul_tn_into<F: Element>(
    a: &[F],
    g: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    // a is m×k, g is m×n, out is k×n.
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let grow = &g[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub(crate) fn softmax_rows<F: Element>(data: &mut [F], n: usize) {
    for row in data.chunks_mut(n) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}
