//! Thin safe wrapper over the strided dgemm kernel.
//!
//! All matrix products in the crate funnel through [`gemm`], which lets the
//! backward pass consume transposed views by swapping strides instead of
//! materializing transposed copies.

/// View of a row-major matrix, possibly transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    /// Row stride in elements.
    pub rs: isize,
    /// Column stride in elements.
    pub cs: isize,
}

impl<'a> MatView<'a> {
    /// Contiguous row-major `rows x cols` view.
    pub fn contiguous(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a contiguous row-major `rows x cols` buffer: the
    /// result is `cols x rows` without moving any data.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatView {
            data,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }

    /// `rows x width` view of columns `off .. off+width` of a contiguous
    /// row-major `rows x cols` buffer.
    pub fn col_block(data: &'a [f64], rows: usize, cols: usize, off: usize, width: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(off + width <= cols);
        MatView {
            data: &data[off..],
            rows,
            cols: width,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transpose of [`MatView::col_block`]: `width x rows`.
    pub fn col_block_t(
        data: &'a [f64],
        rows: usize,
        cols: usize,
        off: usize,
        width: usize,
    ) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(off + width <= cols);
        MatView {
            data: &data[off..],
            rows: width,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a @ b + beta * c` where `c` is contiguous row-major `m x n`.
///
/// Panics (debug) on inconsistent dimensions; callers validate shapes before
/// reaching this point.
///
/// Products with a deep inner dimension go to BLAS (its packing pays off
/// there); thin-k products such as attention scores run measurably faster on
/// the local kernel, which skips packing.
pub(crate) fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), a.rows * b.cols, "gemm output buffer size mismatch");
    let ldc = b.cols;
    gemm_strided(alpha, a, b, beta, c, ldc);
}

/// [`gemm`] writing into a strided output: `c` holds an `m x n` block whose
/// rows are `c_rs` elements apart (columns contiguous), so a column block of
/// a larger row-major matrix can be written in place.
pub(crate) fn gemm_strided(
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
) {
    let (m, k) = (a.rows, a.cols);
    let n = b.cols;
    debug_assert_eq!(b.rows, k, "gemm inner dimensions differ");
    debug_assert!(c_rs >= n, "gemm output row stride narrower than its rows");
    debug_assert!(
        c.len() >= (m - 1) * c_rs + n,
        "gemm output buffer too short for strided block"
    );
    if k >= 32
        && m * n >= 1024
        && crate::autodiff::kernels::blas_gemm(
            m, k, n, alpha, a.data, a.rs, a.cs, b.data, b.rs, b.cs, beta, c, c_rs,
        )
    {
        return;
    }
    // SAFETY: views are constructed from slices whose extents cover the
    // strided index space; dimensions are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_product() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(
            1.0,
            MatView::contiguous(&a, 2, 2),
            MatView::contiguous(&b, 2, 2),
            0.0,
            &mut c,
        );
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_view_matches_explicit_transpose() {
        // a is 2x3; a^T @ a is 3x3 and symmetric.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 9];
        gemm(
            1.0,
            MatView::transposed(&a, 2, 3),
            MatView::contiguous(&a, 2, 3),
            0.0,
            &mut c,
        );
        let expected = [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0];
        assert_eq!(c, expected);
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 0.0, 0.0, 2.0];
        let mut c = [10.0, 0.0, 0.0, 10.0];
        gemm(
            1.0,
            MatView::contiguous(&a, 2, 2),
            MatView::contiguous(&b, 2, 2),
            1.0,
            &mut c,
        );
        assert_eq!(c, [12.0, 0.0, 0.0, 12.0]);
    }
}
