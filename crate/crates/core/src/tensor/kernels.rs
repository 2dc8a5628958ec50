use super::Real;

/// Storage order of a matrix operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Logical `[rows, cols]` stored row-major.
    Normal,
    /// Logical `[rows, cols]` stored as a row-major `[cols, rows]` buffer.
    Transposed,
}

impl Layout {
    pub(crate) fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            Layout::Normal => (cols as isize, 1),
            Layout::Transposed => (1, rows as isize),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn check_extents(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    _la: Layout,
    b_len: usize,
    _lb: Layout,
    c_len: usize,
) {
    assert_eq!(a_len, m * k, "gemm: lhs buffer does not hold {m}x{k}");
    assert_eq!(b_len, k * n, "gemm: rhs buffer does not hold {k}x{n}");
    assert_eq!(c_len, m * n, "gemm: output buffer does not hold {m}x{n}");
}

/// `c[m,n] = op(a)[m,k] · op(b)[k,n]`, adding into `c` when `accumulate`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    T::gemm_raw(m, k, n, a, la, b, lb, c, accumulate)
}
