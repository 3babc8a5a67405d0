//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value container. Differentiation happens on a
//! [`Tape`](crate::tape::Tape), which borrows tensors as leaves for the
//! duration of one forward/backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Element type used by every tensor in the crate.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Byte width of [`Float`] in serialized containers.
pub const FLOAT_BYTES: usize = std::mem::size_of::<Float>();

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<Float>,
    grad: Option<Vec<Float>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], values: Vec<Float>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Input(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dims("from_vec", shape, &[values.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Samples i.i.d. entries from `normal(0, std)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let values = (0..n).map(|_| normal.sample(rng) as Float).collect();
        Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Float] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Float] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Float> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[Float]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the grad slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[Float]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(slot) => slot.iter_mut().zip(g).for_each(|(s, &x)| *s += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Overwrites the grad slot; used by tests to plant stale gradients.
    pub fn set_grad(&mut self, g: Vec<Float>) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        self.grad = Some(g);
    }

    pub fn take_grad(&mut self) -> Option<Vec<Float>> {
        self.grad.take()
    }

    /// Rows and columns when viewed as a matrix with all leading axes collapsed.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.values.len() / cols.max(1), cols)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `c += alpha * op(a) * op(b)` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Float,
    a: &[Float],
    trans_a: bool,
    b: &[Float],
    trans_b: bool,
    beta: Float,
    c: &mut [Float],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers have the lengths asserted above and the strides describe
    // exactly those row-major layouts; `c` does not alias `a` or `b`.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
