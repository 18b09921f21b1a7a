//! Scalar kernels shared by graph operations.
//!
//! These work on flat slices with explicit geometry so the graph layer stays
//! focused on shape checking and tape bookkeeping.

use super::Scalar;

/// Splits a shape into (outer, len, inner) around one axis.
///
/// Elements along the axis sit `inner` apart; a lane starts every
/// `len * inner` elements within its outer block.
pub fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Safe wrapper around the strided GEMM in [`Scalar::gemm`].
#[allow(clippy::too_many_arguments)]
pub fn gemm<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    a_off: usize,
    (rsa, csa): (isize, isize),
    b: &[E],
    b_off: usize,
    (rsb, csb): (isize, isize),
    beta: E,
    c: &mut [E],
    c_off: usize,
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs.max(0) + (cols as isize - 1) * cs.max(0)
    };
    assert!(a_off as isize + span(m, k, rsa, csa) < a.len() as isize, "gemm: lhs out of bounds");
    assert!(b_off as isize + span(k, n, rsb, csb) < b.len() as isize, "gemm: rhs out of bounds");
    assert!(c_off as isize + span(m, n, rsc, csc) < c.len() as isize, "gemm: out out of bounds");
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc,
            csc,
        );
    }
}

/// Numerically stable softmax along lanes of stride `inner`.
pub fn softmax_forward<E: Scalar>(x: &[E], outer: usize, len: usize, inner: usize, y: &mut [E]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = x[base];
            for j in 1..len {
                let v = x[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                y[base + j * inner] = y[base + j * inner] / sum;
            }
        }
    }
}

/// Softmax gradient: `dx = y * (dy - sum(y * dy))` per lane.
pub fn softmax_backward<E: Scalar>(
    y: &[E],
    dy: &[E],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [E],
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = E::zero();
            for j in 0..len {
                dot += y[base + j * inner] * dy[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] += y[idx] * (dy[idx] - dot);
            }
        }
    }
}

/// Numerically stable softmax over contiguous rows, in place.
pub fn softmax_rows_inplace<E: Scalar>(buf: &mut [E], rows: usize, len: usize) {
    for r in 0..rows {
        let row = &mut buf[r * len..(r + 1) * len];
        let mut max = row[0];
        for &v in row[1..].iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = E::zero();
        for v in row.iter_mut() {
            let e = (*v - max).exp();
            *v = e;
            sum += e;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Softmax gradient over contiguous rows, in place: `dp <- p * (dp - <p, dp>)`.
pub fn softmax_rows_backward_inplace<E: Scalar>(p: &[E], dp: &mut [E], rows: usize, len: usize) {
    for r in 0..rows {
        let o = r * len;
        let mut dot = E::zero();
        for j in 0..len {
            dot += p[o + j] * dp[o + j];
        }
        for j in 0..len {
            dp[o + j] = p[o + j] * (dp[o + j] - dot);
        }
    }
}

/// Layer normalization along lanes; returns per-lane mean and 1/std caches.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_forward<E: Scalar>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    outer: usize,
    len: usize,
    inner: usize,
    eps: E,
    y: &mut [E],
) -> (Vec<E>, Vec<E>) {
    let inv_len = E::one() / E::from_f64(len as f64);
    let mut means = vec![E::zero(); outer * inner];
    let mut rstds = vec![E::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = E::zero();
            for j in 0..len {
                mean += x[base + j * inner];
            }
            mean = mean * inv_len;
            let mut var = E::zero();
            for j in 0..len {
                let d = x[base + j * inner] - mean;
                var += d * d;
            }
            var = var * inv_len;
            let rstd = E::one() / (var + eps).sqrt();
            for j in 0..len {
                let idx = base + j * inner;
                y[idx] = (x[idx] - mean) * rstd * gamma[j] + beta[j];
            }
            means[o * inner + i] = mean;
            rstds[o * inner + i] = rstd;
        }
    }
    (means, rstds)
}

/// Layer normalization gradient using the cached mean and 1/std.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<E: Scalar>(
    x: &[E],
    gamma: &[E],
    means: &[E],
    rstds: &[E],
    dy: &[E],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    let inv_len = E::one() / E::from_f64(len as f64);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mean = means[o * inner + i];
            let rstd = rstds[o * inner + i];
            let mut sum_dxhat = E::zero();
            let mut sum_dxhat_xhat = E::zero();
            for j in 0..len {
                let idx = base + j * inner;
                let xhat = (x[idx] - mean) * rstd;
                let dxhat = dy[idx] * gamma[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma[j] += dy[idx] * xhat;
                dbeta[j] += dy[idx];
            }
            let mean_dxhat = sum_dxhat * inv_len;
            let mean_dxhat_xhat = sum_dxhat_xhat * inv_len;
            for j in 0..len {
                let idx = base + j * inner;
                let xhat = (x[idx] - mean) * rstd;
                let dxhat = dy[idx] * gamma[j];
                dx[idx] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
}

/// Output frame count of a temporal convolution with symmetric zero padding.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (t + 2 * pad - kernel) / stride + 1
}

/// Unfolds `[C, T, N]` into columns `[C*K, T_out*N]` for a kernel over time.
pub fn im2col<E: Scalar>(
    x: &[E],
    c_in: usize,
    t: usize,
    n: usize,
    kernel: usize,
    stride: usize,
    cols: &mut [E],
) {
    let pad = (kernel - 1) / 2;
    let t_out = conv_out_len(t, kernel, stride);
    debug_assert_eq!(cols.len(), c_in * kernel * t_out * n);
    for c in 0..c_in {
        for kk in 0..kernel {
            let row = (c * kernel + kk) * t_out * n;
            for to in 0..t_out {
                let ti = (to * stride + kk) as isize - pad as isize;
                let dst = row + to * n;
                if ti < 0 || ti >= t as isize {
                    cols[dst..dst + n].iter_mut().for_each(|v| *v = E::zero());
                } else {
                    let src = (c * t + ti as usize) * n;
                    cols[dst..dst + n].copy_from_slice(&x[src..src + n]);
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col`]: folds column gradients back to `dx`.
pub fn col2im_add<E: Scalar>(
    dcols: &[E],
    c_in: usize,
    t: usize,
    n: usize,
    kernel: usize,
    stride: usize,
    dx: &mut [E],
) {
    let pad = (kernel - 1) / 2;
    let t_out = conv_out_len(t, kernel, stride);
    for c in 0..c_in {
        for kk in 0..kernel {
            let row = (c * kernel + kk) * t_out * n;
            for to in 0..t_out {
                let ti = (to * stride + kk) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let src = row + to * n;
                let dst = (c * t + ti as usize) * n;
                for j in 0..n {
                    dx[dst + j] += dcols[src + j];
                }
            }
        }
    }
}
