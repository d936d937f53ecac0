//! Raw im2col / col2im kernels shared by the convolution ops.
//!
//! Both forward convolution and transposed convolution (and both of their
//! backward passes) reduce to one GEMM plus one of these two data-movement
//! kernels, so correctness here is load-bearing for the whole engine.

use super::Elem;

/// Output spatial size of a convolution along one dimension.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution along one dimension.
pub fn tconv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

/// Gather patches of `x` (layout `[C, H, W]`) into a column matrix.
///
/// Element `((c, kh, kw), (oh, ow))` of the conceptual `[C*k*k, out_h*out_w]`
/// matrix lands at `col[row * row_stride + col_offset + oh * out_w + ow]`,
/// which lets callers fill one block of a batch-wide matrix in place.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [E],
    row_stride: usize,
    col_offset: usize,
) {
    let plane = h * w;
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let base = row * row_stride + col_offset;
                for oh in 0..out_h {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let dst = base + oh * out_w;
                    if ih < 0 || ih >= h as isize {
                        col[dst..dst + out_w].fill(E::zero());
                        continue;
                    }
                    let src = ci * plane + ih as usize * w;
                    if stride == 1 {
                        // iw = ow + kw - pad must lie in [0, w)
                        let lo = pad.saturating_sub(kw);
                        let hi = (w + pad).saturating_sub(kw).min(out_w);
                        col[dst..dst + lo.min(out_w)].fill(E::zero());
                        if hi > lo {
                            let s0 = src + lo + kw - pad;
                            col[dst + lo..dst + hi].copy_from_slice(&x[s0..s0 + (hi - lo)]);
                        }
                        if out_w > hi {
                            col[dst + hi..dst + out_w].fill(E::zero());
                        }
                    } else {
                        for ow in 0..out_w {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            col[dst + ow] = if iw < 0 || iw >= w as isize {
                                E::zero()
                            } else {
                                x[src + iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into an image (adjoint of [`im2col`]).
///
/// `src_h * src_w` is the number of patch positions, `[c, h, w]` the
/// destination image layout. Reads the block of `col` described by
/// `row_stride` / `col_offset` exactly as `im2col` would have written it.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<E: Elem>(
    col: &[E],
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    src_h: usize,
    src_w: usize,
    h: usize,
    w: usize,
    out: &mut [E],
    row_stride: usize,
    col_offset: usize,
) {
    let plane = h * w;
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let base = row * row_stride + col_offset;
                for a in 0..src_h {
                    let ih = (a * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = base + a * src_w;
                    let dst = ci * plane + ih as usize * w;
                    if stride == 1 {
                        let lo = pad.saturating_sub(kw);
                        let hi = (w + pad).saturating_sub(kw).min(src_w);
                        for b in lo..hi {
                            out[dst + b + kw - pad] += col[src + b];
                        }
                    } else {
                        for b in 0..src_w {
                            let iw = (b * stride + kw) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                out[dst + iw as usize] += col[src + b];
                            }
                        }
                    }
                }
            }
        }
    }
}
