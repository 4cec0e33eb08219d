//! Strided matrix multiply, `c = a·b + beta·c`.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows × cols`.
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }
}

fn span(rows: usize, cols: usize, l: Layout) -> usize {
    (rows - 1) * l.rs + (cols - 1) * l.cs + 1
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= span(m, k, la), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, lb), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, lc), "gemm: output buffer too small");
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product_and_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm(
            2,
            2,
            1,
            &a,
            Layout::row_major(2),
            &b,
            Layout::row_major(1),
            0.0,
            &mut c,
            Layout::row_major(1),
        );
        assert_eq!(c, [17.0, 39.0]);
        // aᵀ·b
        gemm(
            2,
            2,
            1,
            &a,
            Layout::transposed(2),
            &b,
            Layout::row_major(1),
            0.0,
            &mut c,
            Layout::row_major(1),
        );
        assert_eq!(c, [23.0, 34.0]);
    }
}
