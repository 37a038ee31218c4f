//! Patch extraction shared by convolution and transposed convolution.
//!
//! Both operators lower to a single GEMM against a column matrix whose rows
//! are `(channel, ky, kx)` kernel taps and whose columns are
//! `(batch, oy, ox)` output positions.

use crate::scalar::Real;

/// Output length of a strided, zero-padded cross-correlation along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let span = (input + 2 * pad).checked_sub(kernel)?;
    Some(span / stride + 1)
}

/// Output length of a transposed convolution along one axis (no output
/// padding), i.e. the input length whose `conv_output_len` is `input`.
pub fn conv_transpose_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    let out = full.checked_sub(2 * pad)?;
    (out >= 1).then_some(out)
}

/// Image / patch-grid geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    let plane = g.h * g.w;
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + i) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = (b * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.sw + j) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto an image buffer (adjoint of
/// [`im2col`]).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let off = (b * g.channels + c) * plane;
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + i) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.oh + oy) * g.ow;
                        let dst = off + iy as usize * g.w;
                        for ox in 0..g.ow {
                            let ix = (ox * g.sw + j) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[dst + ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[b, c, p]` -> `[c, b * p]`
pub(crate) fn batch_to_channel_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            out[ci * b * p + bi * p..ci * b * p + (bi + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[c, b * p]` -> `[b, c, p]`
pub(crate) fn channel_to_batch_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[ci * b * p + bi * p..ci * b * p + (bi + 1) * p];
            out[(bi * c + ci) * p..(bi * c + ci + 1) * p].copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_lengths_follow_the_standard_formula() {
        assert_eq!(conv_output_len(4, 3, 2, 1), Some(2));
        assert_eq!(conv_output_len(576, 3, 2, 1), Some(288));
        assert_eq!(conv_output_len(1, 3, 1, 1), Some(1));
        assert_eq!(conv_output_len(1, 3, 1, 0), None);
        assert_eq!(conv_transpose_output_len(72, 2, 2, 0), Some(144));
        assert_eq!(conv_transpose_output_len(1, 1, 1, 0), Some(1));
        assert_eq!(conv_transpose_output_len(1, 1, 1, 1), None);
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 2,
            channels: 3,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            sh: 2,
            sw: 1,
            ph: 1,
            pw: 1,
            oh: 3,
            ow: 4,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.7).cos()).collect();
        let cx = im2col(&x, &g);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut aty = vec![0.0; x.len()];
        col2im(&y, &g, &mut aty);
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn layout_swaps_are_inverse() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let y = batch_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_to_batch_major(&y, 2, 3, 4), x);
    }
}
