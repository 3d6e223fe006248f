//! Dense kernels. Matrix products go through `matrixmultiply`'s packed
//! dgemm, which fixes its blocking per shape, so results are bit-stable
//! across reruns on the same machine.

/// A strided view into a flat buffer: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Same storage read as its transpose.
    pub fn transposed(self) -> Self {
        Self {
            offset: self.offset,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn at(self, offset: usize) -> Self {
        Self { offset, ..self }
    }

    fn last_index(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = alpha · a · b + beta · c` on strided views, `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last_index(m, k) < a.len().max(1) || k == 0, "gemm: a view out of bounds");
    assert!(bv.last_index(k, n) < b.len().max(1) || k == 0, "gemm: b view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: c view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above against their
    // buffers; `c` is exclusively borrowed and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Row-major product with optional transposition of either operand.
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
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
    let av = if ta {
        View::row_major(m).transposed()
    } else {
        View::row_major(k)
    };
    let bv = if tb {
        View::row_major(k).transposed()
    } else {
        View::row_major(n)
    };
    gemm(m, k, n, 1.0, a, av, b, bv, beta, c, View::row_major(n));
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable `ln Σ exp(row)`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}
