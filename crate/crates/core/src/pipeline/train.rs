//! The pretraining loop.
//!
//! Every random draw is keyed by `(seed, step, slot)`, so a run's trajectory
//! depends only on the seed, the config and the dataset order, and a resumed
//! run replays exactly the draws the uninterrupted run would have made.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads};
use crate::error::{Error, Result};
use crate::imaging::{build_targets, make_input, random_scaled_crop, BandpassTargets, RasterImage};
use crate::model::ScaleMae;
use crate::nn::ParamStore;
use crate::objective::{loss_graph, masked_pixel_weights, LossBreakdown};
use crate::optim::{lr_at, AdamW};
use crate::patching::{sample_mask, MaskPlan};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::Dataset;
use crate::pipeline::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STREAM_ORDER: u64 = 1;
const STREAM_CROP: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_FLIP: u64 = 4;

/// One line of the training log; `step` counts completed updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_low: Option<f64>,
    pub loss_high: Option<f64>,
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?)
}

/// Mean of `pick(row)` over the `window` rows ending at `step` (1-based).
pub fn smoothed(log: &[LogRow], step: usize, window: usize, pick: impl Fn(&LogRow) -> Option<f64>) -> Option<f64> {
    let end = log.iter().position(|r| r.step == step)? + 1;
    let start = end.saturating_sub(window);
    let vals: Option<Vec<f64>> = log[start..end].iter().map(pick).collect();
    let vals = vals?;
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Everything the loss needs for one training image.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub input: RasterImage<T>,
    pub targets: BandpassTargets<T>,
    pub plan: MaskPlan,
}

pub fn flip_horizontal<T: Scalar>(img: &RasterImage<T>) -> RasterImage<T> {
    let w = img.width();
    RasterImage::from_fn(img.height(), w, img.channels(), img.gsd(), |y, x, c| img.at(y, w - 1 - x, c))
        .expect("same shape")
}

pub fn normalize<T: Scalar>(img: &RasterImage<T>, cfg: &TrainConfig) -> Result<RasterImage<T>> {
    let c = img.channels();
    img.normalized(&vec![cfg.pixel_mean; c], &vec![cfg.pixel_std; c])
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: ScaleMae,
    pub params: ParamStore<T>,
    pub opt: AdamW<T>,
    /// Completed updates.
    pub step: usize,
    pub total_steps: usize,
    pub n_data: usize,
    pub log: Vec<LogRow>,
    /// Where a diagnostic dump goes if the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model for a dataset of `n_data` images. Parameters are seeded
    /// from `cfg.seed`.
    pub fn new(cfg: TrainConfig, n_data: usize) -> Result<Self> {
        cfg.validate()?;
        if n_data == 0 {
            return Err(Error::InvalidArgument("training needs at least one image".into()));
        }
        let model = ScaleMae::new(&cfg.model_config())?;
        let params = model.init_params(derive_seed(cfg.seed, &[0x1_417]));
        let opt = AdamW::new(cfg.optim.clone(), &params);
        Ok(Self {
            total_steps: cfg.total_steps(n_data),
            cfg,
            model,
            params,
            opt,
            step: 0,
            n_data,
            log: Vec::new(),
            dump_dir: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.step * self.cfg.batch_size / self.n_data
    }

    /// Dataset indices for update `step`: consecutive slices of a per-epoch
    /// permutation.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let n = self.n_data;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let epoch = pos / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                        self.cfg.seed,
                        &[STREAM_ORDER, epoch as u64],
                    )));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[pos % n]
            })
            .collect()
    }

    /// Crop, flip, normalize, build targets and draw the mask for batch slot
    /// `slot` of update `step`.
    pub fn prepare(&self, img: &RasterImage<T>, step: usize, slot: usize) -> Result<PreparedSample<T>> {
        let cfg = &self.cfg;
        let key = |stream: u64| derive_seed(cfg.seed, &[stream, step as u64, slot as u64]);
        let mut hr = random_scaled_crop(img, cfg.hr_crop, key(STREAM_CROP))?;
        if cfg.hflip && key(STREAM_FLIP) & 1 == 1 {
            hr = flip_horizontal(&hr);
        }
        let hr = normalize(&hr, cfg)?;
        let input = make_input(&hr, cfg.input_size)?;
        let expected = img.gsd() * cfg.hr_crop as f64 / cfg.input_size as f64;
        if (input.gsd() - expected).abs() > 1e-12 * expected {
            return Err(Error::InvalidArgument(format!(
                "gsd propagation broken: input gsd {} but source gsd {} x {}/{} = {expected}",
                input.gsd(),
                img.gsd(),
                cfg.hr_crop,
                cfg.input_size
            )));
        }
        let targets = build_targets(&hr, cfg.input_size, cfg.r_low, cfg.r_high_low)?;
        let plan = sample_mask(cfg.encoder.n_patches(), cfg.mask_ratio, key(STREAM_MASK))?;
        Ok(PreparedSample { input, targets, plan })
    }

    /// Loss and parameter gradients for one prepared sample.
    pub fn sample_grads(&self, s: &PreparedSample<T>) -> Result<(ParamGrads<T>, LossBreakdown)> {
        let mut g = Graph::new();
        let (lo, hi) = self.model.forward_graph(&mut g, &self.params, &s.input, &s.plan)?;
        let mask = if self.cfg.loss.masked_only_low {
            Some(masked_pixel_weights(
                &s.plan,
                self.cfg.encoder.grid_side(),
                self.cfg.input_size,
            )?)
        } else {
            None
        };
        let loss = loss_graph(&mut g, lo, hi, &s.targets, &self.cfg.loss, mask)?;
        let grads = g.backward(loss.total, &self.params);
        Ok((grads, loss.breakdown(&g)))
    }

    pub fn train_step(&mut self, data: &Dataset<T>) -> Result<LogRow> {
        if data.len() != self.n_data {
            return Err(Error::InvalidArgument(format!(
                "trainer was built for {} images, dataset has {}",
                self.n_data,
                data.len()
            )));
        }
        let idx = self.batch_indices(self.step);
        let batch: Vec<&RasterImage<T>> = idx.iter().map(|&i| &data.samples[i].image).collect();
        let row = self.train_step_batch(&batch);
        if let (Err(Error::NonFiniteLoss { .. }), Some(dir)) = (&row, &self.dump_dir) {
            let paths: Vec<String> = idx.iter().map(|&i| data.samples[i].path.display().to_string()).collect();
            let _ = std::fs::write(
                dir.join(format!("nonfinite_step{}_samples.json", self.step + 1)),
                serde_json::to_vec_pretty(&paths).unwrap_or_default(),
            );
        }
        row
    }

    /// One optimizer update on an explicit batch of source images.
    pub fn train_step_batch(&mut self, batch: &[&RasterImage<T>]) -> Result<LogRow> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(slot, img)| {
                let s = self.prepare(img, step, slot)?;
                self.sample_grads(&s)
            })
            .collect::<Result<Vec<_>>>()?;

        let inv = T::one() / T::from_usize_lossy(batch.len());
        let mut sum: Vec<Tensor<T>> = self
            .params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let mut acc = LossBreakdown::default();
        let mut per_sample = Vec::with_capacity(results.len());
        for (grads, b) in &results {
            for (s, g) in sum.iter_mut().zip(&grads.grads) {
                s.add_assign(g);
            }
            acc.total += b.total;
            acc.low = b.low.map(|v| acc.low.unwrap_or(0.0) + v);
            acc.high = b.high.map(|v| acc.high.unwrap_or(0.0) + v);
            per_sample.push(*b);
        }
        for s in &mut sum {
            s.scale(inv);
        }
        let n = batch.len() as f64;
        let row = LogRow {
            step: step + 1,
            loss_total: acc.total / n,
            loss_low: acc.low.map(|v| v / n),
            loss_high: acc.high.map(|v| v / n),
        };
        let grads = ParamGrads { grads: sum };
        let lr = lr_at(
            step,
            self.cfg.learning_rate,
            self.cfg.warmup_steps,
            self.total_steps,
            self.cfg.optim.min_lr_ratio,
        );
        if !row.loss_total.is_finite() || !grads.all_finite() {
            let detail = format!(
                "lr {lr}, per-sample losses {:?}, finite grads {}",
                per_sample.iter().map(|b| b.total).collect::<Vec<_>>(),
                grads.all_finite()
            );
            if let Some(dir) = &self.dump_dir {
                let dump = serde_json::json!({
                    "step": step + 1,
                    "lr": lr,
                    "losses": per_sample,
                    "grad_norms": grads.grads.iter().map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()).collect::<Vec<_>>(),
                    "param_names": self.params.layout().specs().iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
                });
                let _ = std::fs::write(
                    dir.join(format!("nonfinite_step{}.json", step + 1)),
                    serde_json::to_vec_pretty(&dump).unwrap_or_default(),
                );
            }
            return Err(Error::NonFiniteLoss { step: (step + 1) as u64, detail });
        }
        self.opt.step(&mut self.params, &grads, lr, self.cfg.weight_decay)?;
        self.step += 1;
        self.log.push(row);
        Ok(row)
    }

    /// Trains until `until` updates have been applied (capped at
    /// `total_steps`), calling `after` on every row.
    pub fn run(
        &mut self,
        data: &Dataset<T>,
        until: usize,
        mut after: impl FnMut(&Self, &LogRow) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.total_steps);
        while self.step < until {
            let row = self.train_step(data)?;
            after(self, &row)?;
        }
        Ok(())
    }
}
