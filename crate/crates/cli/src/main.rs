mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use scalemae::pipeline::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "scalemae", version, about = "GSD-aware masked autoencoder pretraining and kNN evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Preset name (toy, vit-base, vit-large) or path to a TOML config.
    #[arg(long, global = true, default_value = "toy")]
    pub config: String,
    /// Override a config key, e.g. `--set encoder.depth=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random draw; replaces the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifacts go to `<out>/<command>/`.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the model on a manifest (or freshly generated synthetic scenes).
    Pretrain {
        /// `path,gsd,label` CSV. Synthetic scenes are generated when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stop after this many updates in total.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Write frozen-encoder features for each evaluation scale.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Percent scales; defaults to `eval.scales`.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
    },
    /// kNN accuracy, from feature files or from a checkpoint plus manifests.
    KnnEval {
        /// Training FeatureSet JSON.
        #[arg(long, requires = "val")]
        train: Option<PathBuf>,
        /// Validation FeatureSet JSON. Repeatable.
        #[arg(long)]
        val: Vec<PathBuf>,
        #[arg(long, conflicts_with_all = ["train", "val"], requires_all = ["train_manifest", "val_manifest"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Neighbour counts; defaults to `eval.ks`.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Label for the `checkpoint` column when evaluating feature files.
        #[arg(long, default_value = "")]
        tag: String,
    },
    /// Save input, low/high targets and their recombination as PNG panels.
    TargetsPreview {
        /// Source image; a synthetic scene is used when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        gsd: f64,
        /// Also render the model's reconstruction from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write standard and GSD-scaled positional encodings as CSV.
    PosencDump {
        /// Defaults to the encoder grid.
        #[arg(long)]
        grid_side: Option<usize>,
        /// Defaults to `encoder.embed_dim`.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
        gsd: Vec<f64>,
    },
    /// Print parameter counts per module and against an 8-block MAE decoder.
    ParamReport,
    /// Generate labelled synthetic train and validation scenes.
    SynthData {
        /// Defaults to `synth.n_scenes`.
        #[arg(long)]
        n_train: Option<usize>,
        /// Defaults to a quarter of the training count.
        #[arg(long)]
        n_val: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Extract { .. } => "extract",
            Command::KnnEval { .. } => "knn-eval",
            Command::TargetsPreview { .. } => "targets-preview",
            Command::PosencDump { .. } => "posenc-dump",
            Command::ParamReport => "param-report",
            Command::SynthData { .. } => "synth-data",
        }
    }
}

fn keys_help() -> String {
    let keys = TrainConfig::keys();
    let width = keys.iter().map(|k| k.0.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys for --set (toy defaults):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_long_help(keys_help()).after_help(keys_help()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let level = if cli.common.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.lines().next().unwrap_or(""));
            ExitCode::from(f.code)
        }
    }
}
