//! Raw slice kernels shared by [`Tensor`](super::Tensor) and the graph.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m×k`, `op(b)` is `k×n`.
///
/// `ta`/`tb` select the transposed interpretation of a row-major buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(c.len(), m * n);
    // SAFETY: `c` holds exactly m·n initialised values.
    unsafe { gemm_raw(m, k, n, a, ta, b, tb, c.as_mut_ptr(), beta) }
}

/// `op(A)·op(B)` into a fresh buffer.
pub(crate) fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; m * n];
    }
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 and k > 0 every one of the m·n entries is written
    // before `set_len` exposes them, and nothing is read from C.
    unsafe {
        gemm_raw(m, k, n, a, ta, b, tb, c.as_mut_ptr(), 0.0);
        c.set_len(m * n);
    }
    c
}

/// # Safety
/// `c` must be valid for m·n writes, and for reads too unless `beta == 0`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: *mut f64, beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m * n {
            *c.add(i) *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // The strides describe exactly the row-major (or transposed row-major)
    // layout of the asserted buffers.
    matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c, n as isize, 1);
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn log_softmax_axis(src: &[f64], shape: &[usize], axis: usize, dst: &mut [f64]) {
    let (outer, len, inner) = axis_extents(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| src[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..len)
                    .map(|j| (src[idx(j)] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..len {
                dst[idx(j)] = src[idx(j)] - lse;
            }
        }
    }
}

/// Log-sum-exp of a slice; `-inf` when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Two-term log-sum-exp without allocation.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
