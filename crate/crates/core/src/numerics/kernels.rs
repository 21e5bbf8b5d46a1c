//! Slice-level forward/backward kernels behind the graph ops.
//!
//! Everything here works on flat row-major buffers; shape validation
//! happens in `graph.rs` before these are called.

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// top, left
    pub pad_before: (usize, usize),
}

impl Conv2dGeometry {
    /// Output columns `ow` whose input column `ow*sw + kw*dw - pl` lies in `[0, in_w)`.
    #[inline]
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let (sw, dw, pl) = (self.stride.1, self.dilation.1, self.pad_before.1);
        let off = kw * dw;
        // iw = ow*sw + off - pl >= 0  <=>  ow >= ceil((pl - off)/sw)
        let lo = if off >= pl { 0 } else { (pl - off).div_ceil(sw) };
        // iw <= in_w - 1  <=>  ow <= (in_w - 1 + pl - off)/sw
        let hi = if self.in_w + pl < off + 1 {
            0
        } else {
            ((self.in_w - 1 + pl - off) / sw + 1).min(self.out_w)
        };
        (lo.min(hi), hi)
    }

    #[inline]
    fn in_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let ih = (oh * self.stride.0 + kh * self.dilation.0) as isize - self.pad_before.0 as isize;
        if ih < 0 || ih as usize >= self.in_h {
            None
        } else {
            Some(ih as usize)
        }
    }
}

pub fn conv2d_forward(g: &Conv2dGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (kh_n, kw_n) = g.kernel;
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut out = vec![0.0; g.batch * g.out_channels * out_plane];
    let sw = g.stride.1;
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let o_base = (b * g.out_channels + co) * out_plane;
            if let Some(bias) = bias {
                out[o_base..o_base + out_plane].fill(bias[co]);
            }
            for ci in 0..g.in_channels {
                let x_base = (b * g.in_channels + ci) * in_plane;
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w[((co * g.in_channels + ci) * kh_n + kh) * kw_n + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = g.valid_cols(kw);
                        if lo >= hi {
                            continue;
                        }
                        let col0 = lo * sw + kw * g.dilation.1 - g.pad_before.1;
                        for oh in 0..g.out_h {
                            let Some(ih) = g.in_row(oh, kh) else { continue };
                            let orow = &mut out[o_base + oh * g.out_w + lo..o_base + oh * g.out_w + hi];
                            let xrow = &x[x_base + ih * g.in_w..x_base + (ih + 1) * g.in_w];
                            if sw == 1 {
                                for (o, xv) in orow.iter_mut().zip(&xrow[col0..col0 + (hi - lo)]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xrow[col0 + j * sw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_x, grad_w, grad_bias); each only computed when requested.
pub fn conv2d_backward(
    g: &Conv2dGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (kh_n, kw_n) = g.kernel;
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let sw = g.stride.1;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; w.len()]);
    let gb = need.2.then(|| {
        let mut gb = vec![0.0; g.out_channels];
        for b in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let base = (b * g.out_channels + co) * out_plane;
                *acc += grad_out[base..base + out_plane].iter().sum::<f64>();
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return (gx, gw, gb);
    }
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let o_base = (b * g.out_channels + co) * out_plane;
            for ci in 0..g.in_channels {
                let x_base = (b * g.in_channels + ci) * in_plane;
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let widx = ((co * g.in_channels + ci) * kh_n + kh) * kw_n + kw;
                        let wv = w[widx];
                        let (lo, hi) = g.valid_cols(kw);
                        if lo >= hi {
                            continue;
                        }
                        let col0 = lo * sw + kw * g.dilation.1 - g.pad_before.1;
                        let mut wacc = 0.0;
                        for oh in 0..g.out_h {
                            let Some(ih) = g.in_row(oh, kh) else { continue };
                            let grow = &grad_out[o_base + oh * g.out_w + lo..o_base + oh * g.out_w + hi];
                            let xr = x_base + ih * g.in_w;
                            if let Some(gx) = gx.as_mut() {
                                if wv != 0.0 {
                                    let xrow = &mut gx[xr..xr + g.in_w];
                                    if sw == 1 {
                                        for (xv, gv) in xrow[col0..col0 + (hi - lo)].iter_mut().zip(grow) {
                                            *xv += wv * gv;
                                        }
                                    } else {
                                        for (j, gv) in grow.iter().enumerate() {
                                            xrow[col0 + j * sw] += wv * gv;
                                        }
                                    }
                                }
                            }
                            if gw.is_some() {
                                let xrow = &x[xr..xr + g.in_w];
                                if sw == 1 {
                                    wacc += xrow[col0..col0 + (hi - lo)]
                                        .iter()
                                        .zip(grow)
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for (j, gv) in grow.iter().enumerate() {
                                        wacc += xrow[col0 + j * sw] * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Geometry of a 2-D transposed convolution with kernel layout `[C_in, C_out, kH, kW]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvTransposeGeometry {
    #[inline]
    fn target(&self, i: usize, k: usize, axis: usize) -> Option<usize> {
        let (s, p, n) = if axis == 0 {
            (self.stride.0, self.padding.0, self.out_h)
        } else {
            (self.stride.1, self.padding.1, self.out_w)
        };
        let o = (i * s + k) as isize - p as isize;
        if o < 0 || o as usize >= n {
            None
        } else {
            Some(o as usize)
        }
    }
}

pub fn conv_transpose2d_forward(
    g: &ConvTransposeGeometry,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (kh_n, kw_n) = g.kernel;
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut out = vec![0.0; g.batch * g.out_channels * out_plane];
    for b in 0..g.batch {
        if let Some(bias) = bias {
            for co in 0..g.out_channels {
                let base = (b * g.out_channels + co) * out_plane;
                out[base..base + out_plane].fill(bias[co]);
            }
        }
        for ci in 0..g.in_channels {
            let x_base = (b * g.in_channels + ci) * in_plane;
            for co in 0..g.out_channels {
                let o_base = (b * g.out_channels + co) * out_plane;
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w[((ci * g.out_channels + co) * kh_n + kh) * kw_n + kw];
                        for ih in 0..g.in_h {
                            let Some(oh) = g.target(ih, kh, 0) else { continue };
                            for iw in 0..g.in_w {
                                let Some(ow) = g.target(iw, kw, 1) else { continue };
                                out[o_base + oh * g.out_w + ow] += wv * x[x_base + ih * g.in_w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    g: &ConvTransposeGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (kh_n, kw_n) = g.kernel;
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; w.len()]);
    let gb = need.2.then(|| {
        let mut gb = vec![0.0; g.out_channels];
        for b in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let base = (b * g.out_channels + co) * out_plane;
                *acc += grad_out[base..base + out_plane].iter().sum::<f64>();
            }
        }
        gb
    });
    for b in 0..g.batch {
        for ci in 0..g.in_channels {
            let x_base = (b * g.in_channels + ci) * in_plane;
            for co in 0..g.out_channels {
                let o_base = (b * g.out_channels + co) * out_plane;
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let widx = ((ci * g.out_channels + co) * kh_n + kh) * kw_n + kw;
                        let wv = w[widx];
                        let mut wacc = 0.0;
                        for ih in 0..g.in_h {
                            let Some(oh) = g.target(ih, kh, 0) else { continue };
                            for iw in 0..g.in_w {
                                let Some(ow) = g.target(iw, kw, 1) else { continue };
                                let gv = grad_out[o_base + oh * g.out_w + ow];
                                let xi = x_base + ih * g.in_w + iw;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += wv * gv;
                                }
                                wacc += x[xi] * gv;
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Depthwise 1-D convolution over the last axis of `[B, C, N]` with
/// "same" zero padding; `w` is `[C, K]`, K odd.
pub fn depthwise_conv1d_forward(
    dims: (usize, usize, usize),
    k: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (b_n, c_n, n) = dims;
    let pad = k / 2;
    let mut out = vec![0.0; x.len()];
    for b in 0..b_n {
        for c in 0..c_n {
            let base = (b * c_n + c) * n;
            let orow = &mut out[base..base + n];
            if let Some(bias) = bias {
                orow.fill(bias[c]);
            }
            let xrow = &x[base..base + n];
            for j in 0..k {
                let wv = w[c * k + j];
                // out[i] += wv * x[i + j - pad]
                let (lo, hi) = shifted_range(n, j, pad);
                if lo >= hi {
                    continue;
                }
                let src = lo + j - pad;
                for (o, xv) in orow[lo..hi].iter_mut().zip(&xrow[src..src + (hi - lo)]) {
                    *o += wv * xv;
                }
            }
        }
    }
    out
}

pub fn depthwise_conv1d_backward(
    dims: (usize, usize, usize),
    k: usize,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (b_n, c_n, n) = dims;
    let pad = k / 2;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; w.len()]);
    let mut gb = need.2.then(|| vec![0.0; c_n]);
    for b in 0..b_n {
        for c in 0..c_n {
            let base = (b * c_n + c) * n;
            let grow = &grad_out[base..base + n];
            if let Some(gb) = gb.as_mut() {
                gb[c] += grow.iter().sum::<f64>();
            }
            for j in 0..k {
                let (lo, hi) = shifted_range(n, j, pad);
                if lo >= hi {
                    continue;
                }
                let src = lo + j - pad;
                if let Some(gx) = gx.as_mut() {
                    let wv = w[c * k + j];
                    for (xv, gv) in gx[base + src..base + src + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                        *xv += wv * gv;
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    gw[c * k + j] += x[base + src..base + src + (hi - lo)]
                        .iter()
                        .zip(&grow[lo..hi])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Output positions `i` in `[lo, hi)` such that `i + j - pad` is in `[0, n)`.
#[inline]
fn shifted_range(n: usize, j: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = if j > pad { n.saturating_sub(j - pad) } else { n };
    (lo.min(hi), hi)
}

/// Batched `[batch, m, k] x [batch, k, n]`; `b_shared` reuses one `[k, n]` for all batches.
pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, b_shared: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if b_shared { 0 } else { bi * k * n };
        for i in 0..m {
            let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
            for p in 0..k {
                let av = a[a_off + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[b_off + p * n..b_off + (p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Row-wise layer normalization over the trailing `d` entries.
/// Returns (output, normalized, inverse std per row).
pub fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, xhat, rstd)
}

/// Gradient of a normalization over groups of `d` contiguous entries.
/// `scale_of(row, j)` gives the affine gain applied to entry `j` of `row`.
pub fn normalize_backward(
    grad_out: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    d: usize,
    scale_of: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let mut gx = vec![0.0; grad_out.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            let i = r * d + j;
            let gh = grad_out[i] * scale_of(r, j);
            mean_g += gh;
            mean_gx += gh * xhat[i];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            let i = r * d + j;
            let gh = grad_out[i] * scale_of(r, j);
            gx[i] = rs * (gh - mean_g - xhat[i] * mean_gx);
        }
    }
    gx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], outer: usize, dim: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * dim + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..dim {
                mx = mx.max(x[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..dim {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..dim {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], g: &[f64], outer: usize, dim: usize, inner: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * dim + j) * inner + i;
            let dot: f64 = (0..dim).map(|j| y[at(j)] * g[at(j)]).sum();
            for j in 0..dim {
                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    gx
}

/// Generic axis permutation; `out.shape[i] = shape[perm[i]]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = super::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    // Odometer over output indices, innermost axis copied in a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..last).map(|a| idx[a] * src_strides[a]).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| x[base + j * inner_stride]));
        }
        let mut a = last;
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
