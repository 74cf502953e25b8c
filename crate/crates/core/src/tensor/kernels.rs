//! Raw numeric kernels over flat row-major buffers.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. `a` is stored `m x k` (or `k x m` when `trans_a`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // describe row-major (or transposed row-major) layouts within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of a 2-D convolution over `[B, H, W, C]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds input patches into rows of length `k*k*C`, ordered `(ky, kx, c)`.
pub(crate) fn im2col(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![0.0; g.out_positions() * pl];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = row + (ky * g.kernel + kx) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im(dcols: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = row + (ky * g.kernel + kx) * g.c;
                        for c in 0..g.c {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// 1-D unfold over `[T, C]` with symmetric zero padding.
pub(crate) fn im2col_1d(x: &[f64], t: usize, c: usize, kernel: usize, pad: usize) -> Vec<f64> {
    let out_t = t + 2 * pad - kernel + 1;
    let pl = kernel * c;
    let mut cols = vec![0.0; out_t * pl];
    for o in 0..out_t {
        for k in 0..kernel {
            let i = (o + k) as isize - pad as isize;
            if i < 0 || i >= t as isize {
                continue;
            }
            let src = i as usize * c;
            let dst = o * pl + k * c;
            cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    cols
}

pub(crate) fn col2im_1d(
    dcols: &[f64],
    t: usize,
    c: usize,
    kernel: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let out_t = t + 2 * pad - kernel + 1;
    let pl = kernel * c;
    for o in 0..out_t {
        for k in 0..kernel {
            let i = (o + k) as isize - pad as isize;
            if i < 0 || i >= t as isize {
                continue;
            }
            let dst = i as usize * c;
            let src = o * pl + k * c;
            for j in 0..c {
                dx[dst + j] += dcols[src + j];
            }
        }
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = Conv2dGeom {
            batch: 2,
            h: 5,
            w: 4,
            c: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let n = g.batch * g.h * g.w * g.c;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut aty = vec![0.0; n];
        col2im(&y, &g, &mut aty);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn lse_handles_neg_infinity() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
