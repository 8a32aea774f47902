//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Operand layout: a row-major buffer read either as stored or transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    /// Logical rows/cols after the optional transpose.
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// `rows x cols` row-major block, with `ld` elements between row starts.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, ld: usize) -> Self {
        debug_assert!(rows == 0 || cols == 0 || data.len() >= (rows - 1) * ld + cols);
        Self {
            data,
            rows,
            cols,
            row_stride: ld as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c`, where `c` is row-major with leading dim `ldc`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n, "gemm output buffer too small");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    let max_off = |r: &MatRef<'_>| {
        (r.rows as isize - 1) * r.row_stride + (r.cols as isize - 1) * r.col_stride
    };
    assert!((max_off(&a) as usize) < a.data.len(), "gemm lhs out of bounds");
    assert!((max_off(&b) as usize) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
