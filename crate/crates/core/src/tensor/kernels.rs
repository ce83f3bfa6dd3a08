//! Raw loops behind the tensor ops. Everything here works on flat slices.

/// `c (+)= op(a) · op(b)` for row-major matrices, where `op` optionally
/// transposes. `a` is m×k after `op`, `b` is k×n after `op`, `c` is m×n.
///
/// When `accumulate` is false `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every slice to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

pub(crate) fn transpose_into(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Geometry of a 2-D convolution over a single C×H×W image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds receptive fields into a (C·k·k) × (H'·W') matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols_grad: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max-subtracted softmax along the middle extent of an (outer, len, inner) view.
pub(crate) fn softmax(x: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| x[at(i)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for i in 0..len {
                let e = (x[at(i)] - max).exp();
                out[at(i)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for i in 0..len {
                out[at(i)] *= inv;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(
    y: &[f32],
    gy: &[f32],
    outer: usize,
    len: usize,
    inner: usize,
    gx: &mut [f32],
) {
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let dot: f32 = (0..len).map(|i| y[at(i)] * gy[at(i)]).sum();
            for i in 0..len {
                gx[at(i)] += y[at(i)] * (gy[at(i)] - dot);
            }
        }
    }
}

pub(crate) const LN_EPS: f32 = 1e-5;

/// Normalizes along the middle extent; returns (output, mean, rstd) with one
/// statistic per (outer, inner) slice.
pub(crate) fn layernorm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    outer: usize,
    len: usize,
    inner: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; outer * inner];
    let mut rstds = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mean = (0..len).map(|i| x[at(i)]).sum::<f32>() / len as f32;
            let var = (0..len).map(|i| (x[at(i)] - mean).powi(2)).sum::<f32>() / len as f32;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..len {
                out[at(i)] = (x[at(i)] - mean) * rstd * gamma[i] + beta[i];
            }
            means[o * inner + j] = mean;
            rstds[o * inner + j] = rstd;
        }
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward(
    x: &[f32],
    gamma: &[f32],
    means: &[f32],
    rstds: &[f32],
    gy: &[f32],
    outer: usize,
    len: usize,
    inner: usize,
    gx: Option<&mut [f32]>,
    ggamma: Option<&mut [f32]>,
    gbeta: Option<&mut [f32]>,
) {
    let n = len as f32;
    let mut ggamma = ggamma;
    let mut gbeta = gbeta;
    let mut gx = gx;
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mean = means[o * inner + j];
            let rstd = rstds[o * inner + j];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..len {
                let xhat = (x[at(i)] - mean) * rstd;
                let g = gy[at(i)] * gamma[i];
                sum_g += g;
                sum_gx += g * xhat;
                if let Some(gg) = ggamma.as_deref_mut() {
                    gg[i] += gy[at(i)] * xhat;
                }
                if let Some(gb) = gbeta.as_deref_mut() {
                    gb[i] += gy[at(i)];
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                for i in 0..len {
                    let xhat = (x[at(i)] - mean) * rstd;
                    let g = gy[at(i)] * gamma[i];
                    gx[at(i)] += rstd * (g - sum_g / n - xhat * sum_gx / n);
                }
            }
        }
    }
}
