//! Frozen-encoder features and the multiscale kNN probe.
//!
//! Training features are taken at native resolution. Validation images are
//! downsampled to each scale, then resized back to the encoder input, so the
//! probe asks how well a low-resolution view retrieves its class among
//! full-resolution neighbours.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{resample_square, RasterImage};
use crate::model::ScaleMae;
use crate::nn::ParamStore;
use crate::pipeline::config::{EvalConfig, Pooling, TrainConfig};
use crate::pipeline::data::Dataset;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub dataset: String,
    pub scale_pct: f64,
    /// One unit-norm row per image.
    pub features: Tensor<f64>,
    pub labels: Vec<u32>,
}

impl FeatureSet {
    pub fn new(dataset: impl Into<String>, scale_pct: f64, features: Tensor<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            dataset: dataset.into(),
            scale_pct,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let fs: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        Self::new(fs.dataset, fs.scale_pct, fs.features, fs.labels)
    }
}

/// Side length after scaling `side` to `scale_pct` percent, at least 1.
pub fn scaled_side(side: usize, scale_pct: f64) -> usize {
    ((side as f64 * scale_pct / 100.0).round() as usize).max(1)
}

/// Center square of `img` at `scale_pct` of its size, resized to `input_size`.
/// Returns `None` when the scaled image would be smaller than one patch.
pub fn eval_view<T: Scalar>(
    img: &RasterImage<T>,
    scale_pct: f64,
    input_size: usize,
    patch_size: usize,
) -> Result<Option<RasterImage<T>>> {
    if !(scale_pct > 0.0 && scale_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!("scale_pct must be in (0, 100], got {scale_pct}")));
    }
    let sq = img.center_square()?;
    let side = scaled_side(sq.height(), scale_pct);
    if side < patch_size {
        return Ok(None);
    }
    let small = resample_square(&sq, side)?;
    Ok(Some(resample_square(&small, input_size)?))
}

/// Pooled, unit-normalized encoder output for one prepared input.
pub fn embed<T: Scalar>(model: &ScaleMae, params: &ParamStore<T>, input: &RasterImage<T>, pooling: Pooling) -> Result<Vec<f64>> {
    let seq = model.encode_full(params, input)?;
    let d = seq.tokens.cols();
    let mut v = vec![0.0; d];
    match pooling {
        Pooling::Mean => {
            let patches = seq.patch_tokens();
            for r in 0..patches.rows() {
                for (acc, x) in v.iter_mut().zip(patches.row(r)) {
                    *acc += x.as_f64();
                }
            }
            let n = patches.rows() as f64;
            v.iter_mut().for_each(|x| *x /= n);
        }
        Pooling::Cls => {
            if !seq.has_class_token {
                return Err(Error::Config("cls pooling needs encoder.use_class_token = true".into()));
            }
            for (acc, x) in v.iter_mut().zip(seq.tokens.row(0)) {
                *acc = x.as_f64();
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidArgument(format!("feature norm is {norm}; cannot normalize")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Features for every image of `data` at `scale_pct`, or `None` (with a
/// warning) when that scale shrinks images below one patch.
pub fn extract_features<T: Scalar>(
    model: &ScaleMae,
    params: &ParamStore<T>,
    data: &Dataset<T>,
    scale_pct: f64,
    pooling: Pooling,
) -> Result<Option<FeatureSet>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset `{}` is empty", data.name)));
    }
    let enc = &model.cfg.encoder;
    let labels = data
        .samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Manifest(format!("{} has no label", s.path.display())))
        })
        .collect::<Result<Vec<u32>>>()?;
    let rows = data
        .samples
        .par_iter()
        .map(|s| {
            eval_view(&s.image, scale_pct, enc.input_size, enc.patch_size)?
                .map(|v| embed(model, params, &v, pooling))
                .transpose()
        })
        .collect::<Result<Vec<Option<Vec<f64>>>>>()?;
    let rows: Option<Vec<Vec<f64>>> = rows.into_iter().collect();
    let Some(rows) = rows else {
        log::warn!(
            "skipping {scale_pct}% for `{}`: some images fall below the {}px patch size",
            data.name,
            enc.patch_size
        );
        return Ok(None);
    };
    let d = rows[0].len();
    let features = Tensor::from_vec(rows.len(), d, rows.concat())?;
    Ok(Some(FeatureSet::new(data.name.clone(), scale_pct, features, labels)?))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Majority vote over the `k` cosine-nearest training rows for each
/// validation row. Equal distances keep training order; vote ties go to the
/// lowest class id.
pub fn knn_predict(train: &FeatureSet, val: &FeatureSet, k: usize) -> Result<Vec<u32>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("kNN needs non-empty train and validation sets".into()));
    }
    if train.features.cols() != val.features.cols() {
        return Err(Error::Shape(format!(
            "train features have {} dims, validation {}",
            train.features.cols(),
            val.features.cols()
        )));
    }
    if k == 0 || k > train.len() {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={}", train.len())));
    }
    let n_classes = *train.labels.iter().max().unwrap() as usize + 1;
    Ok((0..val.len())
        .into_par_iter()
        .map(|i| {
            let q = val.features.row(i);
            let mut order: Vec<(f64, usize)> = (0..train.len())
                .map(|j| (cosine_distance(q, train.features.row(j)), j))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut votes = vec![0usize; n_classes];
            for &(_, j) in &order[..k] {
                votes[train.labels[j] as usize] += 1;
            }
            let best = *votes.iter().max().unwrap();
            votes.iter().position(|&v| v == best).unwrap() as u32
        })
        .collect())
}

pub fn knn_classify(train: &FeatureSet, val: &FeatureSet, k: usize) -> Result<f64> {
    let pred = knn_predict(train, val, k)?;
    let correct = pred.iter().zip(&val.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / val.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnRow {
    pub dataset: String,
    pub scale_pct: f64,
    pub k: usize,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub rows: Vec<KnnRow>,
    /// `(dataset, scale_pct)` pairs dropped because images got too small.
    pub skipped: Vec<(String, f64)>,
    pub config_hash: String,
}

impl KnnReport {
    pub fn accuracy(&self, dataset: &str, scale_pct: f64, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.scale_pct == scale_pct && r.k == k)
            .map(|r| r.accuracy)
    }

    /// `dataset,scale_pct,k,accuracy,n_train,n_val,checkpoint`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<KnnRow>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<KnnRow>, _>>()?)
    }

    /// One row per (series, scale) with `series = "<dataset> k=<k>"`, ready
    /// for an accuracy-vs-scale line plot.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["series", "dataset", "k", "scale_pct", "accuracy"])?;
        for r in &self.rows {
            w.write_record([
                format!("{} k={}", r.dataset, r.k),
                r.dataset.clone(),
                r.k.to_string(),
                r.scale_pct.to_string(),
                r.accuracy.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// First 16 hex digits of the SHA-256 of the serialized config.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_toml_string()?.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Named train/validation pair.
pub struct EvalSplit<'a, T> {
    pub train: &'a Dataset<T>,
    pub val: &'a Dataset<T>,
}

/// kNN accuracy for every split × scale × k. Rows are ordered by split,
/// then scale as listed in `cfg.scales`, then k.
pub fn multiscale_eval<T: Scalar>(
    model: &ScaleMae,
    params: &ParamStore<T>,
    splits: &[EvalSplit<'_, T>],
    cfg: &EvalConfig,
    checkpoint: &str,
    config_hash: &str,
) -> Result<KnnReport> {
    let mut report = KnnReport {
        config_hash: config_hash.to_string(),
        ..Default::default()
    };
    for split in splits {
        let name = &split.val.name;
        let train = extract_features(model, params, split.train, 100.0, cfg.pooling)?
            .ok_or_else(|| Error::InvalidArgument(format!("training images of `{}` are below patch size", split.train.name)))?;
        for &scale in &cfg.scales {
            let Some(val) = extract_features(model, params, split.val, scale, cfg.pooling)? else {
                report.skipped.push((name.clone(), scale));
                continue;
            };
            for &k in &cfg.ks {
                report.rows.push(KnnRow {
                    dataset: name.clone(),
                    scale_pct: scale,
                    k,
                    accuracy: knn_classify(&train, &val, k)?,
                    n_train: train.len(),
                    n_val: val.len(),
                    checkpoint: checkpoint.to_string(),
                });
            }
        }
    }
    Ok(report)
}
