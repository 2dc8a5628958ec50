//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value type: a shape and a flat buffer. Differentiable
//! computation happens on a [`Tape`], which records every operation applied to
//! [`Var`] handles and replays them backwards in [`Tape::backward`].
//!
//! Everything is generic over [`Real`] so that gradient checks run in `f64`
//! while training runs in `f32`.

mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use kernels::{gemm, Layout};
pub use tape::{Gradients, Tape, Var};

/// Floating point element type.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = a·b (+ c when accumulate)`, strided, see [`kernels::gemm`].
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        la: Layout,
        b: &[Self],
        lb: Layout,
        c: &mut [Self],
        accumulate: bool,
    );
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        la: Layout,
        b: &[Self],
        lb: Layout,
        c: &mut [Self],
        accumulate: bool,
    ) {
        kernels::check_extents(m, k, n, a.len(), la, b.len(), lb, c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        let (rsa, csa) = la.strides(m, k);
        let (rsb, csb) = lb.strides(k, n);
        // SAFETY: extents were checked against the slice lengths above.
        unsafe {
            matrixmultiply::sgemm(
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
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        la: Layout,
        b: &[Self],
        lb: Layout,
        c: &mut [Self],
        accumulate: bool,
    ) {
        kernels::check_extents(m, k, n, a.len(), la, b.len(), lb, c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        let (rsa, csa) = la.strides(m, k);
        let (rsb, csb) = lb.strides(k, n);
        // SAFETY: extents were checked against the slice lengths above.
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
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOWN])
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    /// Converts from `f64` values.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < extent, "index {index:?} out of bounds in axis {i} of {:?}", self.shape);
            flat = flat * extent + ix;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub(crate) fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            numel(&self.shape[1..])
        }
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of the axes of {:?}",
                self.shape
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        if !self.data.is_empty() {
            let mut idx = vec![0usize; rank];
            let mut offset = 0usize;
            let inner_extent = out_shape.last().copied().unwrap_or(1);
            let inner_stride = strides.last().copied().unwrap_or(1);
            loop {
                for j in 0..inner_extent {
                    data.push(self.data[offset + j * inner_stride]);
                }
                // odometer over all but the innermost axis
                let mut axis = rank.saturating_sub(1);
                loop {
                    if axis == 0 {
                        return Tensor::new(out_shape, data);
                    }
                    axis -= 1;
                    idx[axis] += 1;
                    offset += strides[axis];
                    if idx[axis] < out_shape[axis] {
                        break;
                    }
                    offset -= strides[axis] * out_shape[axis];
                    idx[axis] = 0;
                }
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Rows `idx` of the tensor viewed along axis 0.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let rows = *self.shape.first().ok_or_else(|| Error::invalid("gather_rows on a scalar"))?;
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("gather_rows: row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// Places row `i` of `self` at row `idx[i]` of a zero tensor with `rows` rows.
    /// Indices must be distinct.
    pub fn scatter_rows(&self, idx: &[usize], rows: usize) -> Result<Self> {
        let have = *self.shape.first().ok_or_else(|| Error::invalid("scatter_rows on a scalar"))?;
        if have != idx.len() {
            return Err(Error::invalid(format!(
                "scatter_rows: {} indices for {have} rows",
                idx.len()
            )));
        }
        let w = self.row_len();
        let mut taken = vec![false; rows];
        let mut shape = self.shape.clone();
        shape[0] = rows;
        let mut out = Tensor::zeros(&shape);
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= rows || std::mem::replace(&mut taken[dst], true) {
                return Err(Error::invalid(format!(
                    "scatter_rows: index {dst} is out of range or repeated"
                )));
            }
            out.data[dst * w..(dst + 1) * w].copy_from_slice(&self.data[src * w..(src + 1) * w]);
        }
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
