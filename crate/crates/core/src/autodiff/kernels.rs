//! Forward and backward kernels on raw buffers.
//!
//! Convolutions lower to im2col plus a single-threaded GEMM, so results are
//! deterministic run to run.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `c = alpha * a * b + beta * c` for row-major-with-strides operands.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    rsa: usize,
    csa: usize,
    b: &[Real],
    rsb: usize,
    csb: usize,
    beta: Real,
    c: &mut [Real],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, h, w) = match *input {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be 4-D, got {input:?}"))),
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape(format!("conv2d kernel must be 4-D, got {kernel:?}"))),
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output column range `[lo, hi)` whose input column for tap `kx` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        // ix = ox*s + kx - p must lie in [0, w)
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p > kx {
            ((self.w + p - kx - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[Real], cols: &mut [Real]) {
        let (s, p) = (self.stride, self.pad);
        let hw = self.ho * self.wo;
        cols.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for ox in lo..hi {
                            drow[ox] = src_row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[Real], gx: &mut [Real]) {
        let (s, p) = (self.stride, self.pad);
        let hw = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in lo..hi {
                            dst_row[ox * s + kx - p] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    let hw = g.ho * g.wo;
    let kl = g.patch_len();
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.cout * hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kl * hw] };
    for b in 0..g.batch {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let ob = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        let colsb: &[Real] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        gemm(g.cout, kl, hw, 1.0, kernel.data(), kl, 1, colsb, hw, 1, 0.0, ob, hw, 1);
    }
    Ok((Tensor::new(vec![g.batch, g.cout, g.ho, g.wo], out)?, g))
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &Tensor,
    kernel: &Tensor,
    gout: &[Real],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<Real>>, Option<Vec<Real>>) {
    let hw = g.ho * g.wo;
    let kl = g.patch_len();
    let in_per = g.cin * g.h * g.w;
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gk = need_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kl * hw] };
    let mut gcols = if need_input && !g.is_pointwise() {
        vec![0.0; kl * hw]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let gob = &gout[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(gk) = gk.as_mut() {
            let colsb: &[Real] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            // gk[cout, kl] += gout[cout, hw] * cols^T[hw, kl]
            gemm(g.cout, hw, kl, 1.0, gob, hw, 1, colsb, 1, hw, 1.0, gk, kl, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                // gx[cin, hw] += K^T[cin, cout] * gout[cout, hw]
                gemm(g.cin, g.cout, hw, 1.0, kernel.data(), 1, kl, gob, hw, 1, 1.0, gxb, hw, 1);
            } else {
                gemm(kl, g.cout, hw, 1.0, kernel.data(), 1, kl, gob, hw, 1, 0.0, &mut gcols, hw, 1);
                g.col2im_add(&gcols, gxb);
            }
        }
    }
    (gx, gk)
}

/// Max pooling; returns the output and, per output cell, the flat input
/// index that won (first occurrence on ties).
pub(crate) fn maxpool2d_forward(
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool window and stride must be >= 1"));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "maxpool extents {h}x{w} not divisible by stride {stride}"
        )));
    }
    if h < window || w < window {
        return Err(Error::shape(format!("maxpool window {window} exceeds input {h}x{w}")));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ho, wo], out)?, arg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// One axis of a bilinear (align-corners=false) resampling table: for each
/// output coordinate, two source indices and their weights.
fn bilinear_axis(n_in: usize, factor: usize) -> Vec<(usize, usize, Real, Real)> {
    let n_out = n_in * factor;
    let scale = 1.0 / factor as Real;
    (0..n_out)
        .map(|o| {
            let src = ((o as Real + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            let l1 = src - i0 as Real;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; b * c * ho * wo];
    let xd = x.data();
    match mode {
        UpsampleMode::Nearest => {
            for plane in 0..b * c {
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                for oy in 0..ho {
                    let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
                    for ox in 0..wo {
                        dst[oy * wo + ox] = srow[ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_axis(h, factor);
            let tx = bilinear_axis(w, factor);
            for plane in 0..b * c {
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
                        let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
                        dst[oy * wo + ox] = wy0 * top + wy1 * bot;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub(crate) fn upsample_backward(
    in_shape: &[usize],
    factor: usize,
    mode: UpsampleMode,
    gout: &[Real],
) -> Vec<Real> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut gx = vec![0.0; b * c * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for plane in 0..b * c {
                let g = &gout[plane * ho * wo..(plane + 1) * ho * wo];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[(oy / factor) * w + ox / factor] += g[oy * wo + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_axis(h, factor);
            let tx = bilinear_axis(w, factor);
            for plane in 0..b * c {
                let g = &gout[plane * ho * wo..(plane + 1) * ho * wo];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let v = g[oy * wo + ox];
                        dst[y0 * w + x0] += wy0 * wx0 * v;
                        dst[y0 * w + x1] += wy0 * wx1 * v;
                        dst[y1 * w + x0] += wy1 * wx0 * v;
                        dst[y1 * w + x1] += wy1 * wx1 * v;
                    }
                }
            }
        }
    }
    gx
}

/// Flat indices of the `k` largest entries of `vals`, ties broken by lowest index.
pub(crate) fn topk_indices(vals: &[Real], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_cols_cover_padding_cases() {
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 1, 1).unwrap();
        assert_eq!(g.valid_cols(0), (1, 5));
        assert_eq!(g.valid_cols(1), (0, 5));
        assert_eq!(g.valid_cols(2), (0, 4));
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
        // ix = 2*ox - 1 for kx = 0
        assert_eq!(g.valid_cols(0), (1, 3));
        // ix = 2*ox + 1 for kx = 2, in range for ox <= 1
        assert_eq!(g.valid_cols(2), (0, 2));
    }

    #[test]
    fn topk_prefers_lower_index_on_ties() {
        assert_eq!(topk_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[5.0, 5.0, 5.0], 1), vec![0]);
    }

    #[test]
    fn bilinear_axis_factor_one_is_identity_table() {
        for (o, &(i0, _, w0, w1)) in bilinear_axis(4, 1).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!((w0, w1), (1.0, 0.0));
        }
    }
}
