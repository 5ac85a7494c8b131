//! Forward and backward numeric kernels on flat row-major buffers.

/// `c = a·b` (or `c += a·b` when `accumulate`), `a` is `m×k`, `b` is `k×n`, `c`
/// is contiguous `m×n`. Strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(
        (m - 1) * rsa + (k - 1) * csa < a.len(),
        "gemm lhs out of bounds"
    );
    assert!(
        (k - 1) * rsb + (n - 1) * csb < b.len(),
        "gemm rhs out of bounds"
    );
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index the kernel touches was bounds-checked above and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Per-row mean and reciprocal standard deviation recorded by the forward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RowStats {
    pub mean: f64,
    pub rstd: f64,
}

pub(crate) fn layernorm_forward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<RowStats>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.push(RowStats { mean, rstd });
    }
    (y, stats)
}

/// Returns `(dx, dgamma, dbeta)`; the parameter gradients are only formed when
/// requested.
pub(crate) fn layernorm_backward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    stats: &[RowStats],
    dy: &[f64],
    want_params: bool,
) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; if want_params { d } else { 0 }];
    let mut dbeta = vec![0.0; if want_params { d } else { 0 }];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (r, st) in stats.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (xr[j] - st.mean) * st.rstd;
            dxhat[j] = dyr[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
            if want_params {
                dgamma[j] += dyr[j] * xhat[j];
                dbeta[j] += dyr[j];
            }
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = st.rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, want_params.then_some((dgamma, dbeta)))
}

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        let inv = 1.0 / total;
        yr.iter_mut().for_each(|o| *o *= inv);
    }
    y
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// Geometry of a depthwise convolution over `[batch, channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DwGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl DwGeometry {
    /// Valid output index range `[lo, hi)` along an axis of extent `len` for a
    /// tap at signed offset `off`.
    fn range(len: usize, off: isize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (len as isize - off.max(0)).max(0) as usize;
        (lo.min(len), hi.max(lo.min(len)))
    }

    fn offset(&self, tap: usize) -> isize {
        let radius = (self.kernel / 2) as isize;
        (tap as isize - radius) * self.dilation as isize
    }

    /// Calls `f(u, v, (row_lo, row_hi), (col_lo, col_hi), row_off, col_off)` for each tap.
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, usize, (usize, usize), (usize, usize), isize, isize),
    ) {
        for u in 0..self.kernel {
            let oi = self.offset(u);
            let rows = Self::range(self.height, oi);
            for v in 0..self.kernel {
                let oj = self.offset(v);
                let cols = Self::range(self.width, oj);
                if rows.0 < rows.1 && cols.0 < cols.1 {
                    f(u, v, rows, cols, oi, oj);
                }
            }
        }
    }
}

pub(crate) fn dwconv_forward(
    g: DwGeometry,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.height * g.width;
    let kk = g.kernel * g.kernel;
    let mut y = vec![0.0; x.len()];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * plane;
            let xp = &x[base..base + plane];
            let yp = &mut y[base..base + plane];
            if let Some(bias) = bias {
                yp.iter_mut().for_each(|v| *v = bias[c]);
            }
            let wc = &weight[c * kk..(c + 1) * kk];
            g.for_each_tap(|u, v, (r0, r1), (c0, c1), oi, oj| {
                let w = wc[u * g.kernel + v];
                for i in r0..r1 {
                    let src = ((i as isize + oi) as usize) * g.width;
                    let yr = &mut yp[i * g.width + c0..i * g.width + c1];
                    let xr = &xp[(src as isize + c0 as isize + oj) as usize
                        ..(src as isize + c1 as isize + oj) as usize];
                    for (o, &xv) in yr.iter_mut().zip(xr) {
                        *o += w * xv;
                    }
                }
            });
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)`, each only when requested.
pub(crate) fn dwconv_backward(
    g: DwGeometry,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.height * g.width;
    let kk = g.kernel * g.kernel;
    let mut dx = want.0.then(|| vec![0.0; x.len()]);
    let mut dw = want.1.then(|| vec![0.0; weight.len()]);
    let mut db = want.2.then(|| vec![0.0; g.channels]);
    for b in 0..g.batch {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * plane;
            let xp = &x[base..base + plane];
            let dyp = &dy[base..base + plane];
            if let Some(db) = db.as_mut() {
                db[c] += dyp.iter().sum::<f64>();
            }
            let wc = &weight[c * kk..(c + 1) * kk];
            g.for_each_tap(|u, v, (r0, r1), (c0, c1), oi, oj| {
                let tap = u * g.kernel + v;
                let mut acc = 0.0;
                for i in r0..r1 {
                    let src = (i as isize + oi) as usize * g.width;
                    let lo = (src as isize + c0 as isize + oj) as usize;
                    let hi = (src as isize + c1 as isize + oj) as usize;
                    let dyr = &dyp[i * g.width + c0..i * g.width + c1];
                    if dw.is_some() {
                        acc += xp[lo..hi].iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let w = wc[tap];
                        let dxr = &mut dx[base + lo..base + hi];
                        for (o, &gv) in dxr.iter_mut().zip(dyr) {
                            *o += w * gv;
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    dw[c * kk + tap] += acc;
                }
            });
        }
    }
    (dx, dw, db)
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    'outer: loop {
        if inner_stride == 1 {
            out.extend_from_slice(&x[offset..offset + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| x[offset + j * inner_stride]));
        }
        // advance the multi-index over all but the last axis
        let mut axis = last;
        loop {
            if axis == 0 {
                break 'outer;
            }
            axis -= 1;
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (y, s) = permute(&x, &shape, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y[(a * 2 + b) * 3 + c], x[(b * 3 + c) * 4 + a]);
                }
            }
        }
        let (back, s2) = permute(&y, &s, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, x);
    }

    #[test]
    fn gemm_transposed_operand() {
        // a = [[1,2],[3,4]], b^T read from [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let bt = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &bt, (1, 2), &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn tap_ranges_clip_at_borders() {
        assert_eq!(DwGeometry::range(5, 0), (0, 5));
        assert_eq!(DwGeometry::range(5, 2), (0, 3));
        assert_eq!(DwGeometry::range(5, -2), (2, 5));
        assert_eq!(DwGeometry::range(3, 6), (0, 0));
        assert_eq!(DwGeometry::range(3, -6), (3, 3));
    }
}
