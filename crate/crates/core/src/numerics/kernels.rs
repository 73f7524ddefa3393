//! Forward and backward loops for the spatial operators.
//!
//! Feature maps are stored height × width × channels. Convolution kernels are
//! `[kh, kw, cin, cout]`; transposed-convolution kernels are `[kh, kw, cout, cin]`.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; oh * ow * g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * g.cout;
            let acc = &mut out[o..o + g.cout];
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let px = &input[(iy * g.w + ix) * g.cin..][..g.cin];
                    let tap = &kernel[(ky * g.kw + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &xv) in px.iter().enumerate() {
                        let row = &tap[ci * g.cout..][..g.cout];
                        for (a, &k) in acc.iter_mut().zip(row) {
                            *a += xv * k;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel, grad_bias).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &grad_out[(oy * ow + ox) * g.cout..][..g.cout];
            for (b, &v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let base = (iy * g.w + ix) * g.cin;
                    let toff = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let xv = input[base + ci];
                        let row = &kernel[toff + ci * g.cout..][..g.cout];
                        let grow = &mut gk[toff + ci * g.cout..][..g.cout];
                        let mut s = 0.0;
                        for ((gkv, &k), &gv) in grow.iter_mut().zip(row).zip(go) {
                            *gkv += xv * gv;
                            s += k * gv;
                        }
                        gi[base + ci] += s;
                    }
                }
            }
        }
    }
    (gi, gk, gb)
}

/// Stride-2 transposed convolution with padding `(k - 1) / 2`, cropped to exactly
/// twice the input extent. Input pixel `(iy, ix)` scatters tap `(ky, kx)` to
/// output `(2 iy + ky - pad, 2 ix + kx - pad)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct UpGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
}

impl UpGeom {
    #[inline]
    fn dst(i: usize, k: usize, ksize: usize, extent: usize) -> Option<usize> {
        let pos = (2 * i + k) as isize - ((ksize - 1) / 2) as isize;
        (pos >= 0 && (pos as usize) < 2 * extent).then_some(pos as usize)
    }
}

pub(crate) fn conv_transpose2d_forward(g: &UpGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let ow = 2 * g.w;
    let mut out = vec![0.0; 4 * g.h * g.w * g.cout];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let px = &input[(iy * g.w + ix) * g.cin..][..g.cin];
            for ky in 0..g.kh {
                let Some(oy) = UpGeom::dst(iy, ky, g.kh, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = UpGeom::dst(ix, kx, g.kw, g.w) else { continue };
                    let tap = &kernel[(ky * g.kw + kx) * g.cout * g.cin..][..g.cout * g.cin];
                    let acc = &mut out[(oy * ow + ox) * g.cout..][..g.cout];
                    for (co, a) in acc.iter_mut().enumerate() {
                        let row = &tap[co * g.cin..][..g.cin];
                        *a += row.iter().zip(px).map(|(k, x)| k * x).sum::<f64>();
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    g: &UpGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ow = 2 * g.w;
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let base = (iy * g.w + ix) * g.cin;
            for ky in 0..g.kh {
                let Some(oy) = UpGeom::dst(iy, ky, g.kh, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = UpGeom::dst(ix, kx, g.kw, g.w) else { continue };
                    let toff = (ky * g.kw + kx) * g.cout * g.cin;
                    let go = &grad_out[(oy * ow + ox) * g.cout..][..g.cout];
                    for (co, &gv) in go.iter().enumerate() {
                        let row = &kernel[toff + co * g.cin..][..g.cin];
                        let grow = &mut gk[toff + co * g.cin..][..g.cin];
                        for ci in 0..g.cin {
                            gi[base + ci] += row[ci] * gv;
                            grow[ci] += input[base + ci] * gv;
                        }
                    }
                }
            }
        }
    }
    (gi, gk)
}

/// 2×2 stride-2 max pooling. Returns the pooled values and, per output, the
/// flat input index that won (first in row-major window order on ties).
pub(crate) fn maxpool2d_forward(h: usize, w: usize, c: usize, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..][..m];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&b[p * m..][..m]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
