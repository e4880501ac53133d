//! Forward and backward kernels for the spatial operations.
//!
//! Layout is channels-last: activations are `(n, d, h, w, c)` flattened
//! row-major, convolution kernels are `(3, 3, 3, c_in, c_out)`. All
//! convolutions are stride 1 with zero padding 1, so spatial extents are
//! preserved. Per-sample work parallelizes across the batch; every sum
//! runs in a fixed order within a sample, so results do not depend on
//! thread scheduling.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub co: usize,
}

impl ConvDims {
    fn in_stride(&self) -> usize {
        self.d * self.h * self.w * self.ci
    }
    fn out_stride(&self) -> usize {
        self.d * self.h * self.w * self.co
    }
}

/// Inclusive-exclusive output range for which `pos + offset - 1` stays
/// inside `[0, extent)`.
fn valid_range(extent: usize, offset: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(offset);
    let hi = (extent + 1 - offset).min(extent);
    (lo, hi)
}

pub(crate) fn conv3d_forward(x: &[f64], kernel: &[f64], bias: &[f64], dims: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; dims.n * dims.out_stride()];
    out.par_chunks_mut(dims.out_stride())
        .zip(x.par_chunks(dims.in_stride()))
        .for_each(|(os, xs)| conv3d_forward_sample(xs, kernel, bias, dims, os));
    out
}

fn conv3d_forward_sample(xs: &[f64], kernel: &[f64], bias: &[f64], dims: &ConvDims, os: &mut [f64]) {
    let ConvDims { d, h, w, ci, co, .. } = *dims;
    for row in os.chunks_exact_mut(co) {
        row.copy_from_slice(bias);
    }
    for dz in 0..3 {
        let (z_lo, z_hi) = valid_range(d, dz);
        for dy in 0..3 {
            let (y_lo, y_hi) = valid_range(h, dy);
            for dx in 0..3 {
                let (x_lo, x_hi) = valid_range(w, dx);
                let kmat = &kernel[((dz * 3 + dy) * 3 + dx) * ci * co..][..ci * co];
                for z in z_lo..z_hi {
                    let zin = z + dz - 1;
                    for y in y_lo..y_hi {
                        let yin = y + dy - 1;
                        let in_row = &xs[(zin * h + yin) * w * ci..][..w * ci];
                        let out_row = &mut os[(z * h + y) * w * co..][..w * co];
                        for xo in x_lo..x_hi {
                            let xin = xo + dx - 1;
                            let iv = &in_row[xin * ci..][..ci];
                            let ov = &mut out_row[xo * co..][..co];
                            for (a, krow) in iv.iter().zip(kmat.chunks_exact(co)) {
                                for (o, &kv) in ov.iter_mut().zip(krow) {
                                    *o += a * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients w.r.t. input, kernel and bias.
pub(crate) fn conv3d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    dims: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut grad_x = vec![0.0; x.len()];
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_x
        .par_chunks_mut(dims.in_stride())
        .zip(x.par_chunks(dims.in_stride()))
        .zip(grad_out.par_chunks(dims.out_stride()))
        .map(|((gxs, xs), gs)| conv3d_backward_sample(xs, kernel, gs, dims, gxs))
        .collect();
    let mut grad_k = vec![0.0; kernel.len()];
    let mut grad_b = vec![0.0; dims.co];
    for (pk, pb) in partials {
        for (acc, v) in grad_k.iter_mut().zip(&pk) {
            *acc += v;
        }
        for (acc, v) in grad_b.iter_mut().zip(&pb) {
            *acc += v;
        }
    }
    (grad_x, grad_k, grad_b)
}

fn conv3d_backward_sample(
    xs: &[f64],
    kernel: &[f64],
    gs: &[f64],
    dims: &ConvDims,
    gxs: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let ConvDims { d, h, w, ci, co, .. } = *dims;
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; co];
    for row in gs.chunks_exact(co) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    for dz in 0..3 {
        let (z_lo, z_hi) = valid_range(d, dz);
        for dy in 0..3 {
            let (y_lo, y_hi) = valid_range(h, dy);
            for dx in 0..3 {
                let (x_lo, x_hi) = valid_range(w, dx);
                let koff = ((dz * 3 + dy) * 3 + dx) * ci * co;
                let kmat = &kernel[koff..][..ci * co];
                let gkmat = &mut gk[koff..][..ci * co];
                for z in z_lo..z_hi {
                    let zin = z + dz - 1;
                    for y in y_lo..y_hi {
                        let yin = y + dy - 1;
                        let in_row = &xs[(zin * h + yin) * w * ci..][..w * ci];
                        let gin_row = &mut gxs[(zin * h + yin) * w * ci..][..w * ci];
                        let g_row = &gs[(z * h + y) * w * co..][..w * co];
                        for xo in x_lo..x_hi {
                            let xin = xo + dx - 1;
                            let gv = &g_row[xo * co..][..co];
                            let iv = &in_row[xin * ci..][..ci];
                            let giv = &mut gin_row[xin * ci..][..ci];
                            for c in 0..ci {
                                let krow = &kmat[c * co..][..co];
                                let gkrow = &mut gkmat[c * co..][..co];
                                let a = iv[c];
                                let mut dot = 0.0;
                                for (idx, &g) in gv.iter().enumerate() {
                                    dot += krow[idx] * g;
                                    gkrow[idx] += a * g;
                                }
                                giv[c] += dot;
                            }
                        }
                    }
                }
            }
        }
    }
    (gk, gb)
}

/// 2x2x2 max pooling; returns pooled values and the flat index of each
/// winning element (first maximum wins ties).
pub(crate) fn maxpool3d_forward(
    x: &[f64],
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0; n * d2 * h2 * w2 * c];
    let mut argmax = vec![0usize; out.len()];
    let mut o = 0;
    for s in 0..n {
        for oz in 0..d2 {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for az in 0..2 {
                            for ay in 0..2 {
                                for ax in 0..2 {
                                    let idx = ((((s * d + 2 * oz + az) * h + 2 * oy + ay) * w)
                                        + 2 * ox
                                        + ax)
                                        * c
                                        + ch;
                                    let v = x[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx;
                        o += 1;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool3d_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        gx[idx] += g;
    }
    gx
}

/// Nearest-neighbor 2x upsampling along the three spatial axes.
pub(crate) fn upsample3d_forward(
    x: &[f64],
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    let (d2, h2, w2) = (d * 2, h * 2, w * 2);
    let mut out = vec![0.0; n * d2 * h2 * w2 * c];
    for s in 0..n {
        for z in 0..d2 {
            for y in 0..h2 {
                let src_row = ((s * d + z / 2) * h + y / 2) * w * c;
                let dst_row = ((s * d2 + z) * h2 + y) * w2 * c;
                for xo in 0..w2 {
                    let src = src_row + (xo / 2) * c;
                    let dst = dst_row + xo * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn upsample3d_backward(
    grad_out: &[f64],
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    let (d2, h2, w2) = (d * 2, h * 2, w * 2);
    let mut gx = vec![0.0; n * d * h * w * c];
    for s in 0..n {
        for z in 0..d2 {
            for y in 0..h2 {
                let src_row = ((s * d2 + z) * h2 + y) * w2 * c;
                let dst_row = ((s * d + z / 2) * h + y / 2) * w * c;
                for xo in 0..w2 {
                    let src = src_row + xo * c;
                    let dst = dst_row + (xo / 2) * c;
                    for ch in 0..c {
                        gx[dst + ch] += grad_out[src + ch];
                    }
                }
            }
        }
    }
    gx
}
