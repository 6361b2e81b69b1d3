//! Dataset manifests, image loading and procedurally generated scenes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_png, RasterImage};
use crate::pipeline::derive_seed;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub gsd: f64,
    pub label: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a `path,gsd,label` CSV. Relative paths resolve against the
    /// manifest's directory; the dataset name is the file stem.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Manifest(format!("{}: {other:?}", path.display())),
        })?;
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<ManifestEntry>().enumerate() {
            let mut e = row.map_err(|err| Error::Manifest(format!("{} row {}: {err}", path.display(), i + 1)))?;
            if !(e.gsd > 0.0 && e.gsd.is_finite()) {
                return Err(Error::Manifest(format!(
                    "{} row {}: gsd must be positive, got {}",
                    path.display(),
                    i + 1,
                    e.gsd
                )));
            }
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok(Self { name, entries })
    }

    /// Writes the CSV with paths relative to `path`'s directory when possible.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Manifest(format!("{other:?}")),
        })?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path).to_path_buf();
            w.serialize(ManifestEntry {
                path: rel,
                gsd: e.gsd,
                label: e.label,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn labels(&self) -> Vec<Option<u32>> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: RasterImage<T>,
    pub label: Option<u32>,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub name: String,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Loads every entry; images smaller than `min_side` on either axis are
    /// rejected.
    pub fn load(manifest: &DatasetManifest, min_side: usize) -> Result<Self> {
        let samples = manifest
            .entries
            .par_iter()
            .map(|e| {
                if !e.path.exists() {
                    return Err(Error::io(&e.path, std::io::ErrorKind::NotFound.into()));
                }
                let image = load_image::<T>(&e.path, e.gsd)?;
                if image.height() < min_side || image.width() < min_side {
                    return Err(Error::CropTooLarge {
                        h: image.height(),
                        w: image.width(),
                        size: min_side,
                    });
                }
                Ok(Sample {
                    image,
                    label: e.label,
                    path: e.path.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: manifest.name.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One procedurally generated scene of class `class` out of `n_classes`.
///
/// Classes differ in palette hue, in how many rectangles they hold and how
/// large those are, in rectangle orientation, and in the period of an
/// overlaid stripe texture. Higher class ids are busier.
pub fn synth_scene(side: usize, class: u32, n_classes: u32, gsd: f64, seed: u64) -> Result<RasterImage<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frac = class as f64 / n_classes.max(1) as f64;
    let busy = if n_classes > 1 { class as f64 / (n_classes - 1) as f64 } else { 0.0 };
    let hue = frac + rng.gen_range(-0.04..0.04);
    let s = side as f64;

    let c0 = hsv(hue + rng.gen_range(-0.05..0.05), rng.gen_range(0.3..0.5), rng.gen_range(0.4..0.6));
    let c1 = hsv(hue + rng.gen_range(-0.05..0.05), rng.gen_range(0.3..0.5), rng.gen_range(0.6..0.8));
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());

    let orient = busy * std::f64::consts::FRAC_PI_4;
    let n_rects = 4 + (busy * 14.0).round() as usize + rng.gen_range(0..3);
    let (size_lo, size_hi) = (0.25 - 0.18 * busy, 0.45 - 0.3 * busy);
    struct Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        cos: f64,
        sin: f64,
        color: [f64; 3],
    }
    let rects: Vec<Rect> = (0..n_rects)
        .map(|_| {
            let a = orient + rng.gen_range(-0.2..0.2);
            Rect {
                cx: rng.gen_range(0.0..s),
                cy: rng.gen_range(0.0..s),
                hw: 0.5 * s * rng.gen_range(size_lo..size_hi),
                hh: 0.5 * s * rng.gen_range(size_lo..size_hi),
                cos: a.cos(),
                sin: a.sin(),
                color: hsv(hue + rng.gen_range(-0.08..0.08), rng.gen_range(0.5..0.9), rng.gen_range(0.3..0.95)),
            }
        })
        .collect();
    let period = if busy > 0.5 { rng.gen_range(4.0..8.0) } else { rng.gen_range(24.0..40.0) } * (1.0 + 2.0 * (1.0 - busy));
    let stripe_angle = orient + rng.gen_range(-0.3..0.3);
    let (sx, sy) = (stripe_angle.cos(), stripe_angle.sin());
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    RasterImage::from_fn(side, side, 3, gsd, |y, x, c| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = (((fx / s - 0.5) * gx + (fy / s - 0.5) * gy) + 0.5).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for r in &rects {
            let (dx, dy) = (fx - r.cx, fy - r.cy);
            let u = dx * r.cos + dy * r.sin;
            let w = -dx * r.sin + dy * r.cos;
            if u.abs() <= r.hw && w.abs() <= r.hh {
                v = r.color[c];
            }
        }
        let stripe = (std::f64::consts::TAU * (fx * sx + fy * sy) / period + phase).sin();
        (v + 0.06 * stripe).clamp(0.0, 1.0)
    })
}

/// Writes `n_scenes` PNG scenes plus `manifest.csv` into `dir`. Labels cycle
/// through the classes; GSDs are drawn uniformly from `gsd_range`.
pub fn synth_dataset(
    dir: &Path,
    n_scenes: usize,
    n_classes: u32,
    base_size: usize,
    gsd_range: (f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    if n_scenes < 2 || n_classes < 1 || base_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 2 scenes, 1 class and side 8 (got {n_scenes}, {n_classes}, {base_size})"
        )));
    }
    let (lo, hi) = gsd_range;
    if !(0.0 < lo && lo <= hi && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad gsd range [{lo}, {hi}]")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let label = (i % n_classes as usize) as u32;
            let scene_seed = derive_seed(seed, &[i as u64, 0x5CE9E]);
            let gsd = if lo == hi {
                lo
            } else {
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, 0x6_5D])).gen_range(lo..hi)
            };
            let img = synth_scene(base_size, label, n_classes, gsd, scene_seed)?;
            let path = dir.join(format!("scene_{i:05}.png"));
            save_png(&img, &path)?;
            Ok(ManifestEntry {
                path,
                gsd,
                label: Some(label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        name: "manifest".into(),
        entries,
    };
    manifest.write_csv(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Mean absolute difference between horizontally and vertically adjacent
/// pixels of the channel mean.
pub fn edge_density<T: Scalar>(img: &RasterImage<T>) -> f64 {
    let (h, w) = (img.height(), img.width());
    let gray = |y: usize, x: usize| (0..img.channels()).map(|c| img.at(y, x, c).as_f64()).sum::<f64>();
    let mut total = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                total += (gray(y, x + 1) - gray(y, x)).abs();
                n += 1;
            }
            if y + 1 < h {
                total += (gray(y + 1, x) - gray(y, x)).abs();
                n += 1;
            }
        }
    }
    total / (n.max(1) as f64 * img.channels() as f64)
}
