//! Raw NCHW kernels shared by the forward and backward passes.

#![allow(clippy::needless_range_loop)]

/// Spatial geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output positions `o` in `0..out` with `o*stride + k_off - pad` inside `0..inp`.
#[inline]
fn valid_range(out: usize, inp: usize, stride: usize, k_off: usize, pad: usize) -> (usize, usize) {
    // o*stride + k_off >= pad
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    // o*stride + k_off - pad <= inp - 1
    let hi = if inp + pad > k_off {
        ((inp + pad - k_off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ih, iw, oh, ow, k, s) = (g.in_h, g.in_w, g.out_h, g.out_w, g.k, g.stride);
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let out_plane = &mut out[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            out_plane.fill(bias[o]);
            for c in 0..g.in_ch {
                let in_plane = &x[(b * g.in_ch + c) * ih * iw..][..ih * iw];
                for ky in 0..k {
                    let (y_lo, y_hi) = valid_range(oh, ih, s, ky, g.pad_top);
                    for kx in 0..k {
                        let wv = kernel[((o * g.in_ch + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x_lo, x_hi) = valid_range(ow, iw, s, kx, g.pad_left);
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - g.pad_top;
                            let in_row = &in_plane[iy * iw..][..iw];
                            let out_row = &mut out_plane[oy * ow..][..ow];
                            if s == 1 {
                                let ix0 = x_lo + kx - g.pad_left;
                                for (ov, iv) in out_row[x_lo..x_hi].iter_mut().zip(&in_row[ix0..]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    out_row[ox] += wv * in_row[ox * s + kx - g.pad_left];
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

/// Returns gradients for (input, kernel, bias).
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ih, iw, oh, ow, k, s) = (g.in_h, g.in_w, g.out_h, g.out_w, g.k, g.stride);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let go_plane = &gout[(b * g.out_ch + o) * oh * ow..][..oh * ow];
            gb[o] += go_plane.iter().sum::<f64>();
            for c in 0..g.in_ch {
                let base = (b * g.in_ch + c) * ih * iw;
                for ky in 0..k {
                    let (y_lo, y_hi) = valid_range(oh, ih, s, ky, g.pad_top);
                    for kx in 0..k {
                        let widx = ((o * g.in_ch + c) * k + ky) * k + kx;
                        let wv = kernel[widx];
                        let (x_lo, x_hi) = valid_range(ow, iw, s, kx, g.pad_left);
                        let mut acc = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - g.pad_top;
                            let go_row = &go_plane[oy * ow..][..ow];
                            let in_row = &x[base + iy * iw..][..iw];
                            let gx_row = &mut gx[base + iy * iw..][..iw];
                            if s == 1 {
                                let ix0 = x_lo + kx - g.pad_left;
                                let n = x_hi - x_lo;
                                let go = &go_row[x_lo..x_hi];
                                for ((gxv, iv), gv) in gx_row[ix0..ix0 + n]
                                    .iter_mut()
                                    .zip(&in_row[ix0..ix0 + n])
                                    .zip(go)
                                {
                                    *gxv += wv * gv;
                                    acc += iv * gv;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = ox * s + kx - g.pad_left;
                                    gx_row[ix] += wv * go_row[ox];
                                    acc += in_row[ix] * go_row[ox];
                                }
                            }
                        }
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Geometry of a transposed convolution; kernel layout is (in, out, k, k) and
/// `out = (in - 1) * stride + k - 2 * pad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl TConvGeom {
    /// Input positions `i` with `i*stride + k_off - pad` inside `0..out`.
    #[inline]
    fn range(&self, inp: usize, out: usize, k_off: usize) -> (usize, usize) {
        valid_range(inp, out, self.stride, k_off, self.pad)
    }
}

pub(crate) fn tconv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], g: &TConvGeom) -> Vec<f64> {
    let (ih, iw, oh, ow, k, s, p) = (g.in_h, g.in_w, g.out_h, g.out_w, g.k, g.stride, g.pad);
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            out[(b * g.out_ch + o) * oh * ow..][..oh * ow].fill(bias[o]);
        }
        for c in 0..g.in_ch {
            let in_plane = &x[(b * g.in_ch + c) * ih * iw..][..ih * iw];
            for o in 0..g.out_ch {
                let out_plane = &mut out[(b * g.out_ch + o) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    let (y_lo, y_hi) = g.range(ih, oh, ky);
                    for kx in 0..k {
                        let wv = kernel[((c * g.out_ch + o) * k + ky) * k + kx];
                        let (x_lo, x_hi) = g.range(iw, ow, kx);
                        for iy in y_lo..y_hi {
                            let oy = iy * s + ky - p;
                            for ix in x_lo..x_hi {
                                out_plane[oy * ow + ix * s + kx - p] += wv * in_plane[iy * iw + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn tconv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &TConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ih, iw, oh, ow, k, s, p) = (g.in_h, g.in_w, g.out_h, g.out_w, g.k, g.stride, g.pad);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            gb[o] += gout[(b * g.out_ch + o) * oh * ow..][..oh * ow]
                .iter()
                .sum::<f64>();
        }
        for c in 0..g.in_ch {
            let base = (b * g.in_ch + c) * ih * iw;
            for o in 0..g.out_ch {
                let go_plane = &gout[(b * g.out_ch + o) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    let (y_lo, y_hi) = g.range(ih, oh, ky);
                    for kx in 0..k {
                        let widx = ((c * g.out_ch + o) * k + ky) * k + kx;
                        let wv = kernel[widx];
                        let (x_lo, x_hi) = g.range(iw, ow, kx);
                        let mut acc = 0.0;
                        for iy in y_lo..y_hi {
                            let oy = iy * s + ky - p;
                            for ix in x_lo..x_hi {
                                let gv = go_plane[oy * ow + ix * s + kx - p];
                                gx[base + iy * iw + ix] += wv * gv;
                                acc += x[base + iy * iw + ix] * gv;
                            }
                        }
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Non-overlapping 2x2 max; returns values and the flat input index of each
/// maximum (first in row-major order on ties).
pub(crate) fn max_pool_2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
