//! Raw forward/backward kernels on flat row-major buffers.

use super::gemm::{gemm, gemm_nt, gemm_tn};

/// Geometry of one 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Samples processed per GEMM call, sized so the column buffer stays
    /// cache-friendly while the GEMM is wide enough to vectorize.
    fn chunk(&self) -> usize {
        (1024 / self.plane()).clamp(1, self.batch)
    }
}

/// Column matrix with rows `(c, ky, kx)` channel-outer / kernel row-major and
/// columns `(sample, oy, ox)`. Padding positions hold zero.
fn im2col(g: &ConvGeom, input: &[f64], b0: usize, nb: usize) -> Vec<f64> {
    let plane = g.plane();
    let cols = nb * plane;
    let mut col = vec![0.0; g.patch_len() * cols];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut col[r * cols..(r + 1) * cols];
                for s in 0..nb {
                    let src = &input[((b0 + s) * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut row[s * plane + oy * g.ow..s * plane + (oy + 1) * g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(g: &ConvGeom, col: &[f64], b0: usize, nb: usize, out: &mut [f64]) {
    let plane = g.plane();
    let cols = nb * plane;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &col[r * cols..(r + 1) * cols];
                for s in 0..nb {
                    let dst = &mut out[((b0 + s) * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += row[s * plane + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation without bias. Each output element is summed over
/// input channels (outer), then kernel rows, then kernel columns, starting
/// from zero.
pub fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = g.chunk().min(g.batch - b0);
        let col = im2col(g, input, b0, nb);
        let cols = nb * plane;
        let mut prod = vec![0.0; g.out_ch * cols];
        gemm(g.out_ch, g.patch_len(), cols, kernel, &col, &mut prod);
        for s in 0..nb {
            for o in 0..g.out_ch {
                out[((b0 + s) * g.out_ch + o) * plane..][..plane]
                    .copy_from_slice(&prod[o * cols + s * plane..][..plane]);
            }
        }
        b0 += nb;
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    gout: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.plane();
    let r = g.patch_len();
    let mut gin = need_input.then(|| vec![0.0; input.len()]);
    let mut gk = need_kernel.then(|| vec![0.0; kernel.len()]);
    let kt = need_input.then(|| super::gemm::transpose(g.out_ch, r, kernel));
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = g.chunk().min(g.batch - b0);
        let cols = nb * plane;
        let mut gmat = vec![0.0; g.out_ch * cols];
        for s in 0..nb {
            for o in 0..g.out_ch {
                gmat[o * cols + s * plane..][..plane]
                    .copy_from_slice(&gout[((b0 + s) * g.out_ch + o) * plane..][..plane]);
            }
        }
        if let Some(gk) = gk.as_mut() {
            let col = im2col(g, input, b0, nb);
            let part = gemm_nt(g.out_ch, cols, r, &gmat, &col);
            gk.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        if let (Some(gin), Some(kt)) = (gin.as_mut(), kt.as_ref()) {
            let mut gcol = vec![0.0; r * cols];
            gemm(r, g.out_ch, cols, kt, &gmat, &mut gcol);
            col2im_add(g, &gcol, b0, nb, gin);
        }
        b0 += nb;
    }
    (gin, gk)
}

/// Source coordinates for one output index under the half-pixel
/// (align-corners = false) convention: `src = (dst + 0.5)·in/out − 0.5`,
/// clamped at zero, neighbours `i0 = floor(src)`, `i1 = min(i0 + 1, in − 1)`.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

pub fn bilinear_forward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[f64]) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = (1.0 - b.frac) * src[a.i0 * w + b.i0] + b.frac * src[a.i0 * w + b.i1];
                let bot = (1.0 - b.frac) * src[a.i1 * w + b.i0] + b.frac * src[a.i1 * w + b.i1];
                dst[oy * ow + ox] = (1.0 - a.frac) * top + a.frac * bot;
            }
        }
    }
    out
}

pub fn bilinear_backward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, g: &[f64]) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gin[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                let top = (1.0 - a.frac) * v;
                let bot = a.frac * v;
                dst[a.i0 * w + b.i0] += (1.0 - b.frac) * top;
                dst[a.i0 * w + b.i1] += b.frac * top;
                dst[a.i1 * w + b.i0] += (1.0 - b.frac) * bot;
                dst[a.i1 * w + b.i1] += b.frac * bot;
            }
        }
    }
    gin
}

/// `[batch, m, k] · [batch, k, n]`.
pub fn bmm(batch: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for s in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[s * m * k..(s + 1) * m * k],
            &b[s * k * n..(s + 1) * k * n],
            &mut out[s * m * n..(s + 1) * m * n],
        );
    }
    out
}

/// Gradients of `bmm` with respect to both operands.
pub fn bmm_backward(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for s in 0..batch {
        let gs = &g[s * m * n..(s + 1) * m * n];
        ga.extend(gemm_nt(m, n, k, gs, &b[s * k * n..(s + 1) * k * n]));
        gb.extend(gemm_tn(k, m, n, &a[s * m * k..(s + 1) * m * k], gs));
    }
    (ga, gb)
}
