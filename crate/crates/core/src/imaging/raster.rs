use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel array with its ground sample distance (meters per pixel).
///
/// Pixels are stored as an `(H*W) x C` tensor in row-major pixel order. Loaded
/// imagery lives in `[0, 1]`; band-pass residuals may be signed.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage<T> {
    height: usize,
    width: usize,
    pixels: Tensor<T>,
    gsd: f64,
}

impl<T: Scalar> RasterImage<T> {
    pub fn new(height: usize, width: usize, pixels: Tensor<T>, gsd: f64) -> Result<Self> {
        if height == 0 || width == 0 || pixels.cols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster dimensions must be positive, got {height}x{width}x{}",
                pixels.cols()
            )));
        }
        if pixels.rows() != height * width {
            return Err(Error::Shape(format!(
                "pixel tensor has {} rows, expected {height}*{width}",
                pixels.rows()
            )));
        }
        if !(gsd.is_finite() && gsd > 0.0) {
            return Err(Error::InvalidArgument(format!("gsd must be positive, got {gsd}")));
        }
        if !pixels.all_finite() {
            return Err(Error::InvalidArgument("raster contains non-finite pixels".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            gsd,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        gsd: f64,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let pixels = Tensor::from_fn(height * width, channels, |p, c| f(p / width, p % width, c));
        Self::new(height, width, pixels, gsd)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: T, gsd: f64) -> Result<Self> {
        Self::new(height, width, Tensor::filled(height * width, channels, value), gsd)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.pixels.cols()
    }

    #[inline]
    pub fn gsd(&self) -> f64 {
        self.gsd
    }

    #[inline]
    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels.get(y * self.width + x, c)
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Same geometry and GSD, new pixel values.
    pub fn with_pixels(&self, pixels: Tensor<T>) -> Result<Self> {
        Self::new(self.height, self.width, pixels, self.gsd)
    }

    /// Axis-aligned crop. GSD is unchanged.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.pixels.data()[start..start + w * c]);
        }
        Self::new(h, w, Tensor::from_vec(h * w, c, data)?, self.gsd)
    }

    /// Largest centered square crop.
    pub fn center_square(&self) -> Result<Self> {
        let side = self.height.min(self.width);
        self.crop((self.height - side) / 2, (self.width - side) / 2, side, side)
    }

    /// Element-wise `self - other`; geometry must match. Keeps `self`'s GSD.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.pixels.shape() != other.pixels.shape() || self.height != other.height {
            return Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height,
                self.width,
                self.channels(),
                other.height,
                other.width,
                other.channels()
            )));
        }
        let data = self
            .pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        self.with_pixels(Tensor::from_vec(self.pixels.rows(), self.channels(), data)?)
    }

    /// Per-channel affine normalization `(x - mean) / std`.
    pub fn normalized(&self, mean: &[f64], std: &[f64]) -> Result<Self> {
        let c = self.channels();
        if mean.len() != c || std.len() != c {
            return Err(Error::Shape(format!(
                "normalization stats have {}/{} entries for {c} channels",
                mean.len(),
                std.len()
            )));
        }
        let mean: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let inv: Vec<T> = std.iter().map(|&s| T::one() / T::from_f64_lossy(s)).collect();
        let mut px = self.pixels.clone();
        for r in 0..px.rows() {
            for (ch, v) in px.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[ch]) * inv[ch];
            }
        }
        self.with_pixels(px)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.data().iter().map(|v| v.as_f64()).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn cast<U: Scalar>(&self) -> RasterImage<U> {
        RasterImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.cast(),
            gsd: self.gsd,
        }
    }
}
