//! Dense 4-D tensors over `f32` or `f64`.
//!
//! Activations are laid out as `(m, c, h, w)` with `m` the batch axis and
//! the innermost index `w` contiguous. Weight tensors reuse the same
//! container with `(c_out, c_in, kh, kw)` in the same field order, so the
//! leading axis is always "rows" for norm and coherence purposes.

use crate::error::{Error, Result};
use std::fmt;

/// Scalar element type for tensors: `f32` or `f64`.
///
/// The trait pins down the float operations the crate needs plus a GEMM
/// hook so numeric code can stay generic over precision. 64-bit is the
/// default for correctness work; 32-bit is selectable for training runs.
pub trait Element:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c <- alpha * a * b + beta * c` for row-major buffers with explicit
    /// row/column strides, so transposed or shifted views need no copy.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides must be
    /// positive and every reachable offset must lie inside the slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn check_gemm_bounds(rows: usize, cols: usize, len: usize, rs: isize, cs: isize, which: &str) {
    assert!(rs > 0 && cs > 0, "{which}: strides must be positive");
    if rows == 0 || cols == 0 {
        return;
    }
    let max = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(max < len, "{which}: stride pattern exceeds buffer");
}

macro_rules! impl_element {
    ($ty:ty) => {
        impl Element for $ty {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_bounds(m, k, a.len(), rsa, csa, "gemm operand a");
                check_gemm_bounds(k, n, b.len(), rsb, csb, "gemm operand b");
                check_gemm_bounds(m, n, c.len(), rsc, csc, "gemm output c");
                if k == 0 {
                    // Empty product: only the beta scaling of c remains.
                    for i in 0..m {
                        for j in 0..n {
                            let idx = (i * rsc as usize) + (j * csc as usize);
                            c[idx] = beta * c[idx];
                        }
                    }
                    return;
                }
                // The backend computes dst := alpha*dst + beta*lhs*rhs, so its
                // coefficient names are swapped relative to this wrapper's.
                unsafe {
                    gemm::gemm(
                        m,
                        n,
                        k,
                        c.as_mut_ptr(),
                        csc,
                        rsc,
                        beta != 0.0,
                        a.as_ptr(),
                        csa,
                        rsa,
                        b.as_ptr(),
                        csb,
                        rsb,
                        beta,
                        alpha,
                        false,
                        false,
                        false,
                        gemm::Parallelism::None,
                    );
                }
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Logical extents of a [`Tensor`]: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub m: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(m: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { m, c, h, w }
    }

    /// Total element count `m * c * h * w`.
    pub fn count(&self) -> usize {
        self.m * self.c * self.h * self.w
    }

    /// Elements per sample, `c * h * w`.
    pub fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements per channel plane, `h * w`.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Flat offset of `(i, j, y, x)`.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        ((i * self.c + j) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.m, self.c, self.h, self.w)
    }
}

/// Dense row-major 4-D array owning its storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f64> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Wraps an existing buffer; the length must match the shape.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot take shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::zero(); shape.count()],
        }
    }

    pub fn filled(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> E {
        self.data[self.shape.offset(i, j, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, y: usize, x: usize) -> &mut E {
        &mut self.data[self.shape.offset(i, j, y, x)]
    }

    /// Contiguous slice holding sample `i`.
    pub fn sample(&self, i: usize) -> &[E] {
        let per = self.shape.per_sample();
        &self.data[i * per..(i + 1) * per]
    }

    /// Contiguous slice holding channel plane `(i, j)`.
    pub fn plane(&self, i: usize, j: usize) -> &[E] {
        let start = self.shape.offset(i, j, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.count() != self.shape.count() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// True when every element is a finite number.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> E) -> Self {
        let data = (0..shape.count()).map(|i| f(i)).collect();
        Tensor { shape, data }
    }

    /// Converts element precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} ", self.shape)?;
        if self.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, {:?}, ...; {}]", self.data[0], self.data[1], self.len())
        }
    }
}
