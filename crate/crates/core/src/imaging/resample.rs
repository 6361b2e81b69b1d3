//! Separable resampling with GSD tracking.
//!
//! Downsampling averages over each output pixel's footprint (box/area filter).
//! Upsampling uses a Keys bicubic kernel (`a = -0.5`) with half-pixel centers
//! and clamped borders. Both kernels have weights summing to one, so constant
//! images stay constant.

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 1-D resampling matrix in sparse row form: output index -> `(source, weight)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWeights {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    /// Picks area averaging when shrinking, bicubic when enlarging.
    pub fn new(in_len: usize, out_len: usize) -> Self {
        use std::cmp::Ordering::*;
        match out_len.cmp(&in_len) {
            Less => Self::area(in_len, out_len),
            Greater => Self::bicubic(in_len, out_len),
            Equal => Self::identity(in_len),
        }
    }

    pub fn identity(len: usize) -> Self {
        Self {
            in_len: len,
            taps: (0..len).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Box filter over the exact (fractional) footprint of each output pixel.
    pub fn area(in_len: usize, out_len: usize) -> Self {
        assert!(out_len >= 1 && in_len >= 1);
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(in_len);
                let mut row = Vec::with_capacity(last - first);
                for s in first..last {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    if overlap > 0.0 {
                        row.push((s, overlap / scale));
                    }
                }
                normalize(&mut row);
                row
            })
            .collect();
        Self { in_len, taps }
    }

    pub fn bicubic(in_len: usize, out_len: usize) -> Self {
        assert!(out_len >= 1 && in_len >= 1);
        let scale = in_len as f64 / out_len as f64;
        let last = in_len as isize - 1;
        let taps = (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let base = src.floor() as isize;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for k in -1..=2 {
                    let s = base + k;
                    let w = keys_cubic(src - s as f64);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = s.clamp(0, last) as usize;
                    match row.iter_mut().find(|(i, _)| *i == idx) {
                        Some(entry) => entry.1 += w,
                        None => row.push((idx, w)),
                    }
                }
                normalize(&mut row);
                row
            })
            .collect();
        Self { in_len, taps }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self, out: usize) -> &[(usize, f64)] {
        &self.taps[out]
    }
}

fn normalize(row: &mut [(usize, f64)]) {
    let total: f64 = row.iter().map(|(_, w)| w).sum();
    for (_, w) in row.iter_mut() {
        *w /= total;
    }
}

fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Applies `wy` along rows and `wx` along columns of an `(h*w) x c` pixel tensor.
pub fn apply_separable<T: Scalar>(
    src: &Tensor<T>,
    h: usize,
    w: usize,
    wy: &AxisWeights,
    wx: &AxisWeights,
) -> Tensor<T> {
    debug_assert_eq!(src.rows(), h * w);
    debug_assert_eq!((wy.in_len(), wx.in_len()), (h, w));
    let c = src.cols();
    let (oh, ow) = (wy.out_len(), wx.out_len());

    // horizontal pass: h x ow
    let mut tmp = Tensor::zeros(h * ow, c);
    for y in 0..h {
        for ox in 0..ow {
            let out = tmp.row_mut(y * ow + ox);
            for &(sx, wt) in wx.taps(ox) {
                let wt = T::from_f64_lossy(wt);
                for (o, &v) in out.iter_mut().zip(src.row(y * w + sx)) {
                    *o += wt * v;
                }
            }
        }
    }
    let mut out = Tensor::zeros(oh * ow, c);
    for oy in 0..oh {
        for &(sy, wt) in wy.taps(oy) {
            let wt = T::from_f64_lossy(wt);
            for ox in 0..ow {
                let dst = out.row_mut(oy * ow + ox);
                for (o, &v) in dst.iter_mut().zip(tmp.row(sy * ow + ox)) {
                    *o += wt * v;
                }
            }
        }
    }
    out
}

/// Adjoint (transpose) of [`apply_separable`]; maps an `(oh*ow) x c` gradient
/// back to `(h*w) x c`.
pub fn apply_separable_adjoint<T: Scalar>(
    grad: &Tensor<T>,
    wy: &AxisWeights,
    wx: &AxisWeights,
) -> Tensor<T> {
    let c = grad.cols();
    let (h, w) = (wy.in_len(), wx.in_len());
    let (oh, ow) = (wy.out_len(), wx.out_len());
    let mut tmp = Tensor::zeros(h * ow, c);
    for oy in 0..oh {
        for &(sy, wt) in wy.taps(oy) {
            let wt = T::from_f64_lossy(wt);
            for ox in 0..ow {
                let g = grad.row(oy * ow + ox);
                let dst = tmp.row_mut(sy * ow + ox);
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += wt * v;
                }
            }
        }
    }
    let mut out = Tensor::zeros(h * w, c);
    for y in 0..h {
        for ox in 0..ow {
            let g = tmp.row(y * ow + ox);
            for &(sx, wt) in wx.taps(ox) {
                let wt = T::from_f64_lossy(wt);
                let dst = out.row_mut(y * w + sx);
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += wt * v;
                }
            }
        }
    }
    out
}

/// Resamples to `out_h x out_w`, scaling the GSD by the linear size ratio.
///
/// Anisotropic resizes are rejected since one GSD cannot describe them.
pub fn resample<T: Scalar>(img: &RasterImage<T>, out_h: usize, out_w: usize) -> Result<RasterImage<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resample target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    let (h, w) = (img.height(), img.width());
    if out_h * w != out_w * h {
        return Err(Error::AnisotropicResample {
            in_h: h,
            in_w: w,
            out_h,
            out_w,
        });
    }
    let wy = AxisWeights::new(h, out_h);
    let wx = AxisWeights::new(w, out_w);
    let pixels = apply_separable(img.pixels(), h, w, &wy, &wx);
    RasterImage::new(out_h, out_w, pixels, img.gsd() * (h as f64 / out_h as f64))
}

/// Resamples to a square side, keeping the aspect check.
pub fn resample_square<T: Scalar>(img: &RasterImage<T>, side: usize) -> Result<RasterImage<T>> {
    resample(img, side, side)
}
