//! Bounds-checked wrappers over `matrixmultiply::dgemm`.

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` matrix starting at `off` with row stride `ld`.
    pub fn rows(data: &'a [f64], off: usize, ld: usize) -> Self {
        View { data, off, rs: ld, cs: 1 }
    }

    /// Transpose of a row-major matrix with row stride `ld`.
    pub fn t(data: &'a [f64], off: usize, ld: usize) -> Self {
        View { data, off, rs: 1, cs: ld }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` row-major at
/// `c_off` with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_off + (m - 1) * ldc + n <= c.len(), "output view out of bounds");
    // SAFETY: every index touched is within the bounds asserted above and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}

/// `out(m x n) = x(m x k) * w(k x n) + bias`, all row-major.
pub(crate) fn linear(x: &[f64], m: usize, k: usize, w: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    gemm(m, k, n, 1.0, View::rows(x, 0, k), View::rows(w, 0, n), 1.0, &mut out, 0, n);
    out
}

/// Backward of [`linear`]: accumulates `dw += x^T dy`, `db += colsum(dy)`
/// and returns `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    dy: &[f64],
    m: usize,
    k: usize,
    n: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(k, m, n, 1.0, View::t(x, 0, k), View::rows(dy, 0, n), 1.0, dw, 0, n);
    for row in dy.chunks_exact(n) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = vec![0.0; m * k];
    gemm(m, n, k, 1.0, View::rows(dy, 0, n), View::t(w, 0, n), 0.0, &mut dx, 0, k);
    dx
}
