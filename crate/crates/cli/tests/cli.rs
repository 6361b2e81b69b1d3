use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "hr_crop=64",
    "input_size=32",
    "r_low=2",
    "r_high_low=8",
    "encoder.input_size=32",
    "encoder.patch_size=8",
    "encoder.embed_dim=16",
    "encoder.depth=1",
    "encoder.heads=2",
    "decoder.decode_dim=8",
    "decoder.decode_heads=2",
    "decoder.decode_depth=1",
    "decoder.token_grid_side=4",
    "decoder.low_out_size=32",
    "decoder.high_out_size=64",
    "decoder.lb_channels=4",
    "batch_size=2",
    "max_steps=4",
    "warmup_steps=1",
    "checkpoint_every=2",
    "synth.n_scenes=6",
    "synth.base_size=64",
    "eval.ks=[1,3]",
];

fn run(out: &Path, args: &[&str], tiny: bool) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scalemae"));
    cmd.arg("--out").arg(out).args(args);
    if tiny {
        for s in TINY {
            cmd.arg("--set").arg(s);
        }
    }
    cmd.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn help_lists_every_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--help"], false);
    assert!(o.status.success());
    let t = text(&o);
    for key in ["encoder.use_gsd_posenc", "decoder.decode_depth", "loss.target_mode", "mask_ratio", "eval.scales"] {
        assert!(t.contains(key), "missing {key}");
    }
}

#[test]
fn param_report_prints_totals() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["param-report"], false);
    assert!(o.status.success(), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("scale-mae total") && t.contains("mae decoder (8 blocks)"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("param-report/param_report.json")).unwrap()).unwrap();
    let groups: u64 = json["groups"].as_array().unwrap().iter().map(|g| g[1].as_u64().unwrap()).sum();
    assert_eq!(groups, json["total"].as_u64().unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["param-report", "--set", "encoder.nope=3"], false);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("encoder.embed_dim"), "valid keys listed");
    let o = run(dir.path(), &["extract", "--checkpoint", "missing.ckpt", "--manifest", "m.csv"], false);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(dir.path(), &["no-such-command"], false).status.code(), Some(2));
    let o = run(dir.path(), &["param-report", "--config", "encoder.depth=4"], false);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn posenc_dump_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["posenc-dump", "--grid-side", "3", "--dim", "8", "--gsd", "1,2"], false);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["standard.csv", "gsd_1.csv", "gsd_2.csv"] {
        let s = std::fs::read_to_string(dir.path().join("posenc-dump").join(f)).unwrap();
        assert_eq!(s.lines().count(), 1 + 9);
        assert!(s.starts_with("token,x,y,f0,"));
    }
    let a = std::fs::read_to_string(dir.path().join("posenc-dump/standard.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("posenc-dump/gsd_1.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = run(out, &["synth-data", "--n-train", "6", "--n-val", "4"], true);
    assert!(o.status.success(), "{}", text(&o));
    let train_m = out.join("synth-data/train/manifest.csv");
    let val_m = out.join("synth-data/val/manifest.csv");

    let o = run(out, &["pretrain", "--manifest", train_m.to_str().unwrap()], true);
    assert!(o.status.success(), "{}", text(&o));
    let log = std::fs::read_to_string(out.join("pretrain/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
    assert!(out.join("pretrain/checkpoints/step_000002.ckpt").exists());
    let ckpt = out.join("pretrain/last.ckpt");

    let o = run(
        out,
        &["extract", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", val_m.to_str().unwrap(), "--scales", "50,100"],
        false,
    );
    assert!(o.status.success(), "{}", text(&o));
    let o = run(
        out,
        &["extract", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", train_m.to_str().unwrap(), "--scales", "100"],
        false,
    );
    assert!(o.status.success(), "{}", text(&o));
    let feats = out.join("extract");
    let o = run(
        out,
        &[
            "knn-eval",
            "--train",
            feats.join("features_manifest_100.json").to_str().unwrap(),
            "--val",
            feats.join("features_manifest_50.json").to_str().unwrap(),
            "--k",
            "1,3",
            "--tag",
            "last",
        ],
        false,
    );
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(out.join("knn-eval/knn.csv")).unwrap();
    assert!(csv.starts_with("dataset,scale_pct,k,accuracy,n_train,n_val,checkpoint\n"));
    assert_eq!(csv.lines().count(), 1 + 2);

    let o = run(
        out,
        &[
            "knn-eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--train-manifest",
            train_m.to_str().unwrap(),
            "--val-manifest",
            val_m.to_str().unwrap(),
        ],
        false,
    );
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(out.join("knn-eval/knn.csv")).unwrap();
    // four default scales, 12.5% of 64 px is exactly one 8 px patch
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    let o = run(out, &["targets-preview", "--checkpoint", ckpt.to_str().unwrap()], false);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["hr.png", "low.png", "high.png", "recombined.png", "pred_recombined.png", "panel.png"] {
        assert!(out.join("targets-preview").join(f).exists(), "{f}");
    }

    let mid = out.join("pretrain/checkpoints/step_000002.ckpt");
    let o = run(
        &out.join("resumed"),
        &["pretrain", "--resume", mid.to_str().unwrap(), "--manifest", train_m.to_str().unwrap()],
        false,
    );
    assert!(o.status.success(), "{}", text(&o));
    let resumed = std::fs::read_to_string(out.join("resumed/pretrain/loss.csv")).unwrap();
    assert_eq!(resumed, log);
}
