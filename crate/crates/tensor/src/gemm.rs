//! Thin safe wrappers over `matrixmultiply::dgemm` for the three transpose
//! combinations the kernels need. All matrices are dense row-major slices.

fn check(len: usize, rows: usize, cols: usize, what: &str) {
    assert!(
        len >= rows * cols,
        "gemm: {what} buffer of {len} elements is smaller than {rows}x{cols}"
    );
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    check(a.len(), m, k, "a");
    check(b.len(), k, n, "b");
    check(c.len(), m, n, "c");
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: buffer sizes are checked above against the row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    check(a.len(), m, k, "a");
    check(b.len(), n, k, "b");
    check(c.len(), m, n, "c");
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: as above; b is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    check(a.len(), k, m, "a");
    check(b.len(), k, n, "b");
    check(c.len(), m, n, "c");
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: as above; a is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
