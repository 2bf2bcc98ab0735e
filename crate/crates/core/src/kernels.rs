//! Raw loops behind the convolution, pooling and normalization tape ops.

use crate::tensor::matmul_acc;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn pixels_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// One row per output pixel, one column per `(c_in, ky, kx)` tap.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let patch = g.patch();
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let tap = (ci * g.k + ky) * g.k + kx;
                for oy in 0..g.h_out {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            cols[(oy * g.w_out + ox) * patch + tap] = row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_acc(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let patch = g.patch();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let tap = (ci * g.k + ky) * g.k + kx;
                for oy in 0..g.h_out {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += dcols[(oy * g.w_out + ox) * patch + tap];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let pix = g.pixels_out();
    let wt = crate::tensor::transpose_raw(weight, g.c_out, patch);
    let mut cols = vec![0.0; pix * patch];
    let mut out_t = vec![0.0; pix * g.c_out];
    let mut out = vec![0.0; g.batch * g.c_out * pix];
    let in_stride = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        im2col(&x[b * in_stride..(b + 1) * in_stride], g, &mut cols);
        out_t.iter_mut().for_each(|v| *v = 0.0);
        matmul_acc(&cols, &wt, &mut out_t, pix, patch, g.c_out);
        let dst = &mut out[b * g.c_out * pix..(b + 1) * g.c_out * pix];
        for p in 0..pix {
            for co in 0..g.c_out {
                dst[co * pix + p] = out_t[p * g.c_out + co];
            }
        }
    }
    out
}

/// Returns `(dx, dweight)`; either is skipped when not requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let patch = g.patch();
    let pix = g.pixels_out();
    let in_stride = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; pix * patch];
    let mut g_t = vec![0.0; pix * g.c_out];
    let mut dcols = vec![0.0; pix * patch];
    let mut dwt = if want_dw { Some(vec![0.0; patch * g.c_out]) } else { None };
    let mut dx = if want_dx { Some(vec![0.0; x.len()]) } else { None };
    for b in 0..g.batch {
        let gb = &grad[b * g.c_out * pix..(b + 1) * g.c_out * pix];
        for co in 0..g.c_out {
            for p in 0..pix {
                g_t[p * g.c_out + co] = gb[co * pix + p];
            }
        }
        if let Some(dwt) = dwt.as_mut() {
            im2col(&x[b * in_stride..(b + 1) * in_stride], g, &mut cols);
            for p in 0..pix {
                let grow = &g_t[p * g.c_out..(p + 1) * g.c_out];
                for (tap, &c) in cols[p * patch..(p + 1) * patch].iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for (d, &gv) in dwt[tap * g.c_out..(tap + 1) * g.c_out].iter_mut().zip(grow) {
                        *d += c * gv;
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(&g_t, weight, &mut dcols, pix, g.c_out, patch);
            col2im_acc(&dcols, g, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    let dw = dwt.map(|dwt| crate::tensor::transpose_raw(&dwt, patch, g.c_out));
    (dx, dw)
}

/// Per-channel statistics for data laid out as `[batch, channels, inner]`.
pub(crate) struct ChannelStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

pub(crate) fn channel_stats(x: &[f64], batch: usize, channels: usize, inner: usize) -> ChannelStats {
    let m = (batch * inner) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * inner;
            s += x[off..off + inner].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * inner;
            v += x[off..off + inner].iter().map(|t| (t - mu) * (t - mu)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = v / m;
    }
    ChannelStats { mean, var }
}

/// 2×2 max pooling with stride 2; returns output and the flat source index of every output cell.
pub(crate) fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
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
