use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loads a raster as RGB with values in `[0, 1]`.
pub fn load_image<T: Scalar>(path: &Path, gsd: f64) -> Result<RasterImage<T>> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    from_dynamic(&dynimg, gsd)
}

pub fn from_dynamic<T: Scalar>(img: &DynamicImage, gsd: f64) -> Result<RasterImage<T>> {
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| T::from_f64_lossy(v as f64)).collect();
    RasterImage::new(h, w, Tensor::from_vec(h * w, 3, data)?, gsd)
}

/// Writes an 8-bit PNG, clamping to `[0, 1]`. One- and three-channel images
/// only.
pub fn save_png<T: Scalar>(img: &RasterImage<T>, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img
        .pixels()
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let wrap = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match img.channels() {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
            .map_err(wrap),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
            .map_err(wrap),
        c => Err(Error::InvalidArgument(format!("cannot encode {c}-channel image as PNG"))),
    }
}
