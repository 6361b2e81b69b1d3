use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::resample::resample_square;
use crate::imaging::RasterImage;
use crate::scalar::Scalar;

/// Reconstruction targets for one high-resolution crop.
#[derive(Clone, Debug)]
pub struct BandpassTargets<T> {
    /// Heavily blurred image at network-input resolution.
    pub low: RasterImage<T>,
    /// Signed residual `hr - blur_hr` at ground-truth resolution.
    pub high: RasterImage<T>,
    /// `hr` pushed through the milder down/up blur.
    pub blur_hr: RasterImage<T>,
}

impl<T: Scalar> BandpassTargets<T> {
    /// `high + blur_hr`, i.e. the original high-resolution image.
    pub fn recombined(&self) -> Result<RasterImage<T>> {
        self.high.add(&self.blur_hr)
    }
}

/// Crop offsets `(top, left)` drawn from a ChaCha8 stream seeded with `seed`.
pub fn crop_offsets(h: usize, w: usize, size: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    (top, left)
}

/// Random `size x size` crop. GSD is unchanged.
pub fn random_scaled_crop<T: Scalar>(img: &RasterImage<T>, size: usize, seed: u64) -> Result<RasterImage<T>> {
    if size == 0 {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    if img.height() < size || img.width() < size {
        return Err(Error::CropTooLarge {
            h: img.height(),
            w: img.width(),
            size,
        });
    }
    let (top, left) = crop_offsets(img.height(), img.width(), size, seed);
    img.crop(top, left, size, size)
}

/// Network input: `hr` downsampled to `input_size x input_size`.
pub fn make_input<T: Scalar>(hr: &RasterImage<T>, input_size: usize) -> Result<RasterImage<T>> {
    if input_size == 0 || hr.height() % input_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "input size {input_size} must divide the high-resolution side {}",
            hr.height()
        )));
    }
    resample_square(hr, input_size)
}

/// Low-frequency target at input resolution and high-frequency residual at
/// the resolution of `hr`.
pub fn build_targets<T: Scalar>(
    hr: &RasterImage<T>,
    input_size: usize,
    r_low: usize,
    r_high_low: usize,
) -> Result<BandpassTargets<T>> {
    if r_low < 1 || r_high_low < 1 {
        return Err(Error::InvalidArgument(format!(
            "band sizes must be at least 1 (r_low={r_low}, r_high_low={r_high_low})"
        )));
    }
    if !hr.is_square() {
        return Err(Error::InvalidArgument(format!(
            "high-resolution image must be square, got {}x{}",
            hr.height(),
            hr.width()
        )));
    }
    let side = hr.height();
    if !(r_low < input_size && input_size < side && r_high_low < side) {
        return Err(Error::InvalidArgument(format!(
            "size chain must satisfy r_low < input < hr and r_high_low < hr \
             (r_low={r_low}, input={input_size}, r_high_low={r_high_low}, hr={side})"
        )));
    }
    let low = resample_square(&resample_square(hr, r_low)?, input_size)?;
    let blur_hr = resample_square(&resample_square(hr, r_high_low)?, side)?;
    let high = hr.sub(&blur_hr)?;
    Ok(BandpassTargets { low, high, blur_hr })
}
