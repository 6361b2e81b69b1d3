use std::fmt::Display;
use std::path::{Path, PathBuf};

use log::{info, warn};
use scalemae::autograd::Graph;
use scalemae::eval::{config_hash, extract_features, knn_classify, multiscale_eval, EvalSplit, FeatureSet, KnnReport, KnnRow};
use scalemae::imaging::{build_targets, load_image, make_input, random_scaled_crop, resample_square, save_png, RasterImage};
use scalemae::model::{param_report, ScaleMae};
use scalemae::nn::ParamStore;
use scalemae::patching::sample_mask;
use scalemae::pipeline::train::normalize;
use scalemae::pipeline::{
    derive_seed, load_checkpoint, model_from_checkpoint, save_checkpoint, smoothed, synth_dataset, synth_scene,
    write_loss_log, CheckpointRecord, Dataset, DatasetManifest, TrainConfig, Trainer,
};
use scalemae::posenc::{gsd_2d_sincos, standard_2d_sincos, PositionalGrid};
use scalemae::{Error, Scalar, Tensor};

use crate::{Cli, Command, Precision};

/// Exit status and one-line cause.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl Display) -> Self {
        Self {
            code: 2,
            message: msg.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::UnknownConfigKey { .. } | Error::Manifest(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

const VAL_STREAM: u64 = 0x7A1;

fn config(cli: &Cli) -> Outcome<TrainConfig> {
    let c = &cli.common;
    let mut cfg = TrainConfig::load(&c.config)?;
    cfg.apply_overrides(&c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Outcome<PathBuf> {
    let dir = cli.common.out.join(cli.command.name());
    std::fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn require_file(p: &Path) -> Outcome {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("no such file: {}", p.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Pretrain {
            manifest,
            steps,
            resume,
            precision,
        } => {
            let rec = match resume {
                Some(p) => {
                    require_file(p)?;
                    if cli.common.config != "toy" || !cli.common.overrides.is_empty() {
                        warn!("resuming: --config and --set are ignored in favour of the checkpoint's config");
                    }
                    Some(load_checkpoint(p)?)
                }
                None => None,
            };
            let use_f64 = match &rec {
                Some(r) => r.meta.scalar == "f64",
                None => *precision == Precision::F64,
            };
            if use_f64 {
                pretrain::<f64>(cli, manifest.as_deref(), *steps, rec)
            } else {
                pretrain::<f32>(cli, manifest.as_deref(), *steps, rec)
            }
        }
        Command::Extract {
            checkpoint,
            manifest,
            scales,
        } => {
            require_file(checkpoint)?;
            require_file(manifest)?;
            let rec = load_checkpoint(checkpoint)?;
            if rec.meta.scalar == "f64" {
                extract::<f64>(cli, &rec, manifest, scales)
            } else {
                extract::<f32>(cli, &rec, manifest, scales)
            }
        }
        Command::KnnEval {
            train,
            val,
            checkpoint,
            train_manifest,
            val_manifest,
            k,
            tag,
        } => match (train, checkpoint) {
            (Some(train), None) => knn_from_features(cli, train, val, k, tag),
            (None, Some(ckpt)) => {
                let (tm, vm) = (train_manifest.as_ref().unwrap(), val_manifest.as_ref().unwrap());
                for p in [ckpt, tm, vm] {
                    require_file(p)?;
                }
                let rec = load_checkpoint(ckpt)?;
                if rec.meta.scalar == "f64" {
                    knn_from_checkpoint::<f64>(cli, ckpt, &rec, tm, vm, k)
                } else {
                    knn_from_checkpoint::<f32>(cli, ckpt, &rec, tm, vm, k)
                }
            }
            _ => Err(Failure::usage("knn-eval needs either --train/--val or --checkpoint with manifests")),
        },
        Command::TargetsPreview { image, gsd, checkpoint } => targets_preview(cli, image.as_deref(), *gsd, checkpoint.as_deref()),
        Command::PosencDump { grid_side, dim, gsd } => posenc_dump(cli, *grid_side, *dim, gsd),
        Command::ParamReport => {
            let cfg = config(cli)?;
            let dir = out_dir(cli)?;
            let model = ScaleMae::new(&cfg.model_config())?;
            let report = param_report(&model);
            let text = report.render();
            print!("{text}");
            write_text(&dir.join("param_report.txt"), &text)?;
            write_text(
                &dir.join("param_report.json"),
                &serde_json::to_string_pretty(&report).map_err(Error::from)?,
            )
        }
        Command::SynthData { n_train, n_val } => {
            let cfg = config(cli)?;
            let dir = out_dir(cli)?;
            let s = &cfg.synth;
            let n_train = n_train.unwrap_or(s.n_scenes);
            let n_val = n_val.unwrap_or((n_train / 4).max(2));
            let range = (s.gsd_min, s.gsd_max);
            let classes = s.n_classes as u32;
            let side = s.base_size.max(cfg.hr_crop);
            let train = synth_dataset(&dir.join("train"), n_train, classes, side, range, cfg.seed)?;
            let val = synth_dataset(&dir.join("val"), n_val, classes, side, range, derive_seed(cfg.seed, &[VAL_STREAM]))?;
            println!(
                "{} training scenes in {}\n{} validation scenes in {}",
                train.entries.len(),
                dir.join("train/manifest.csv").display(),
                val.entries.len(),
                dir.join("val/manifest.csv").display()
            );
            Ok(())
        }
    }
}

fn pretrain<T: Scalar>(cli: &Cli, manifest: Option<&Path>, steps: Option<usize>, rec: Option<CheckpointRecord>) -> Outcome {
    let cfg = match &rec {
        Some(r) => r.meta.config.clone(),
        None => config(cli)?,
    };
    let dir = out_dir(cli)?;
    let manifest = match manifest {
        Some(p) => {
            require_file(p)?;
            DatasetManifest::read_csv(p)?
        }
        None => {
            let s = &cfg.synth;
            info!("no manifest given; generating {} synthetic scenes", s.n_scenes);
            synth_dataset(
                &dir.join("data"),
                s.n_scenes,
                s.n_classes as u32,
                s.base_size.max(cfg.hr_crop),
                (s.gsd_min, s.gsd_max),
                cfg.seed,
            )?
        }
    };
    let data = Dataset::<T>::load(&manifest, cfg.hr_crop)?;
    let mut trainer = match &rec {
        Some(r) => Trainer::<T>::from_checkpoint(r)?,
        None => Trainer::<T>::new(cfg.clone(), data.len())?,
    };
    if trainer.n_data != data.len() {
        return Err(Failure::usage(format!(
            "checkpoint was trained on {} images, manifest has {}",
            trainer.n_data,
            data.len()
        )));
    }
    trainer.dump_dir = Some(dir.clone());
    write_text(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Io {
        path: ckpt_dir.clone(),
        source: e,
    })?;
    let until = steps.unwrap_or(trainer.total_steps);
    info!(
        "training {} params on {} images from step {} to {}",
        trainer.params.total(),
        data.len(),
        trainer.step,
        until.min(trainer.total_steps)
    );
    let every = cfg.checkpoint_every;
    trainer.run(&data, until, |t, row| {
        if row.step % 10 == 0 || row.step == 1 {
            info!(
                "step {:>6}  loss {:.5}  (low {}, high {})",
                row.step,
                row.loss_total,
                row.loss_low.map_or("-".into(), |v| format!("{v:.5}")),
                row.loss_high.map_or("-".into(), |v| format!("{v:.5}"))
            );
        }
        if every > 0 && row.step % every == 0 {
            save_checkpoint(&ckpt_dir.join(format!("step_{:06}.ckpt", row.step)), &t.checkpoint())?;
            write_loss_log(&dir.join("loss.csv"), &t.log)?;
        }
        Ok(())
    })?;
    let last = ckpt_dir.join(format!("step_{:06}.ckpt", trainer.step));
    save_checkpoint(&last, &trainer.checkpoint())?;
    save_checkpoint(&dir.join("last.ckpt"), &trainer.checkpoint())?;
    write_loss_log(&dir.join("loss.csv"), &trainer.log)?;
    if let Some(l) = smoothed(&trainer.log, trainer.step, 10, |r| Some(r.loss_total)) {
        println!("step {}: smoothed loss {l:.6}; checkpoint {}", trainer.step, last.display());
    }
    Ok(())
}

fn fmt_scale(s: f64) -> String {
    format!("{s}")
}

fn extract<T: Scalar>(cli: &Cli, rec: &CheckpointRecord, manifest: &Path, scales: &[f64]) -> Outcome {
    let dir = out_dir(cli)?;
    let (model, params) = model_from_checkpoint::<T>(rec)?;
    let eval = &rec.meta.config.eval;
    let scales = if scales.is_empty() { eval.scales.clone() } else { scales.to_vec() };
    let m = DatasetManifest::read_csv(manifest)?;
    let data = Dataset::<T>::load(&m, 1)?;
    for s in scales {
        match extract_features(&model, &params, &data, s, eval.pooling)? {
            Some(fs) => {
                let p = dir.join(format!("features_{}_{}.json", data.name, fmt_scale(s)));
                fs.save(&p)?;
                println!("{}", p.display());
            }
            None => warn!("scale {s}% skipped: images fall below the patch size"),
        }
    }
    Ok(())
}

fn finish_report(dir: &Path, report: &KnnReport) -> Outcome {
    report.write_csv(&dir.join("knn.csv"))?;
    report.write_long_csv(&dir.join("knn_long.csv"))?;
    for r in &report.rows {
        println!("{:<16} {:>6}% k={:<4} accuracy {:.4}", r.dataset, r.scale_pct, r.k, r.accuracy);
    }
    for (d, s) in &report.skipped {
        println!("{d:<16} {s:>6}% skipped");
    }
    Ok(())
}

fn knn_from_features(cli: &Cli, train: &Path, val: &[PathBuf], ks: &[usize], tag: &str) -> Outcome {
    let cfg = config(cli)?;
    let dir = out_dir(cli)?;
    require_file(train)?;
    let train_fs = FeatureSet::load(train)?;
    let ks = if ks.is_empty() { cfg.eval.ks.clone() } else { ks.to_vec() };
    let mut report = KnnReport {
        config_hash: config_hash(&cfg)?,
        ..Default::default()
    };
    for v in val {
        require_file(v)?;
        let fs = FeatureSet::load(v)?;
        for &k in &ks {
            report.rows.push(KnnRow {
                dataset: fs.dataset.clone(),
                scale_pct: fs.scale_pct,
                k,
                accuracy: knn_classify(&train_fs, &fs, k)?,
                n_train: train_fs.len(),
                n_val: fs.len(),
                checkpoint: tag.to_string(),
            });
        }
    }
    finish_report(&dir, &report)
}

fn knn_from_checkpoint<T: Scalar>(
    cli: &Cli,
    ckpt: &Path,
    rec: &CheckpointRecord,
    train: &Path,
    val: &Path,
    ks: &[usize],
) -> Outcome {
    let dir = out_dir(cli)?;
    let (model, params) = model_from_checkpoint::<T>(rec)?;
    let mut eval = rec.meta.config.eval.clone();
    if !ks.is_empty() {
        eval.ks = ks.to_vec();
    }
    let train = Dataset::<T>::load(&DatasetManifest::read_csv(train)?, 1)?;
    let val = Dataset::<T>::load(&DatasetManifest::read_csv(val)?, 1)?;
    let tag = ckpt.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = multiscale_eval(
        &model,
        &params,
        &[EvalSplit {
            train: &train,
            val: &val,
        }],
        &eval,
        &tag,
        &config_hash(&rec.meta.config)?,
    )?;
    finish_report(&dir, &report)
}

/// Images side by side, each resized to `side` and placed left to right.
fn strip(panels: &[&RasterImage<f64>], side: usize) -> Outcome<RasterImage<f64>> {
    let resized = panels
        .iter()
        .map(|p| resample_square(p, side))
        .collect::<Result<Vec<_>, _>>()?;
    let c = resized[0].channels();
    Ok(RasterImage::from_fn(side, side * resized.len(), c, resized[0].gsd(), |y, x, ch| {
        resized[x / side].at(y, x % side, ch)
    })?)
}

fn shifted(img: &RasterImage<f64>, by: f64) -> Outcome<RasterImage<f64>> {
    Ok(img.with_pixels(img.pixels().map(|v| v + by))?)
}

fn targets_preview(cli: &Cli, image: Option<&Path>, gsd: f64, checkpoint: Option<&Path>) -> Outcome {
    let rec = match checkpoint {
        Some(p) => {
            require_file(p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let cfg = match &rec {
        Some(r) => r.meta.config.clone(),
        None => config(cli)?,
    };
    let dir = out_dir(cli)?;
    let src = match image {
        Some(p) => {
            require_file(p)?;
            load_image::<f64>(p, gsd)?
        }
        None => synth_scene(cfg.synth.base_size.max(cfg.hr_crop), 1, cfg.synth.n_classes as u32, gsd, cfg.seed)?,
    };
    let hr = random_scaled_crop(&src, cfg.hr_crop, derive_seed(cfg.seed, &[0xC0]))?;
    let input = make_input(&hr, cfg.input_size)?;
    let t = build_targets(&hr, cfg.input_size, cfg.r_low, cfg.r_high_low)?;
    let recombined = t.recombined()?;
    let high_view = shifted(&t.high, 0.5)?;
    for (name, img) in [
        ("hr", &hr),
        ("input", &input),
        ("low", &t.low),
        ("high", &high_view),
        ("blur_hr", &t.blur_hr),
        ("recombined", &recombined),
    ] {
        save_png(img, &dir.join(format!("{name}.png")))?;
    }
    let mut panel = vec![&hr, &t.low, &high_view, &t.blur_hr, &recombined];

    let preds;
    if let Some(rec) = &rec {
        let (model, params): (ScaleMae, ParamStore<f64>) = model_from_checkpoint(rec)?;
        let norm_in = make_input(&normalize(&hr, &cfg)?, cfg.input_size)?;
        let plan = sample_mask(cfg.encoder.n_patches(), cfg.mask_ratio, derive_seed(cfg.seed, &[0xC1]))?;
        let mut g = Graph::new();
        let (lo, hi) = model.forward_graph(&mut g, &params, &norm_in, &plan)?;
        let (m, s) = (cfg.pixel_mean, cfg.pixel_std);
        let wrap = |t: &Tensor<f64>, side: usize, f: &dyn Fn(f64) -> f64| RasterImage::new(side, side, t.map(f), hr.gsd() * cfg.hr_crop as f64 / side as f64);
        let low = wrap(g.value(lo), cfg.input_size, &|v| v * s + m)?;
        let high = wrap(g.value(hi), cfg.hr_crop, &|v| v * s)?;
        let recon = resample_square(&low, cfg.hr_crop)?.add(&high)?;
        let high_v = shifted(&high, 0.5)?;
        save_png(&low, &dir.join("pred_low.png"))?;
        save_png(&high_v, &dir.join("pred_high.png"))?;
        save_png(&recon, &dir.join("pred_recombined.png"))?;
        preds = [low, high_v, recon];
        panel.extend(preds.iter());
    }
    save_png(&strip(&panel, cfg.hr_crop)?, &dir.join("panel.png"))?;
    println!("panels written to {}", dir.display());
    Ok(())
}

fn write_grid(path: &Path, grid: &PositionalGrid<f64>) -> Outcome {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    let d = grid.values.cols();
    let mut header = vec!["token".to_string(), "x".into(), "y".into()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(Error::from)?;
    for t in 0..grid.values.rows() {
        let mut rec = vec![t.to_string(), (t % grid.grid_side).to_string(), (t / grid.grid_side).to_string()];
        rec.extend(grid.values.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn posenc_dump(cli: &Cli, grid_side: Option<usize>, dim: Option<usize>, gsds: &[f64]) -> Outcome {
    let cfg = config(cli)?;
    let dir = out_dir(cli)?;
    let side = grid_side.unwrap_or(cfg.encoder.grid_side());
    let pc = cfg.posenc.for_dim(dim.unwrap_or(cfg.encoder.embed_dim));
    let p = dir.join("standard.csv");
    write_grid(&p, &standard_2d_sincos(side, &pc)?)?;
    println!("{}", p.display());
    for &g in gsds {
        let p = dir.join(format!("gsd_{g}.csv"));
        write_grid(&p, &gsd_2d_sincos(side, g, &pc)?)?;
        println!("{}", p.display());
    }
    Ok(())
}
