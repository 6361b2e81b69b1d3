//! Run configuration: presets, TOML files and dotted `key=value` overrides.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::optim::OptimConfig;
use crate::posenc::PosEncSettings;

pub const PRESETS: [&str; 3] = ["toy", "vit-base", "vit-large"];

/// Which output a frozen encoder exposes as the image feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub scales: Vec<f64>,
    pub pooling: Pooling,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![20],
            scales: vec![12.5, 25.0, 50.0, 100.0],
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub n_classes: usize,
    pub base_size: usize,
    pub gsd_min: f64,
    pub gsd_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            n_classes: 2,
            base_size: 160,
            gsd_min: 0.5,
            gsd_max: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub hr_crop: usize,
    pub input_size: usize,
    pub r_low: usize,
    pub r_high_low: usize,
    pub mask_ratio: f64,
    /// Used when `max_steps` is 0.
    pub epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub hflip: bool,
    pub pixel_mean: f64,
    pub pixel_std: f64,
    /// Steps between checkpoints during `pretrain`; 0 saves only the last.
    pub checkpoint_every: usize,
    pub optim: OptimConfig,
    pub posenc: PosEncSettings,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            seed: 0,
            hr_crop: 128,
            input_size: 64,
            r_low: 4,
            r_high_low: 16,
            mask_ratio: 0.75,
            epochs: 8,
            max_steps: 200,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 0.05,
            warmup_steps: 20,
            hflip: false,
            pixel_mean: 0.5,
            pixel_std: 0.5,
            checkpoint_every: 0,
            optim: OptimConfig::default(),
            posenc: PosEncSettings::default(),
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    fn vit(encoder: EncoderConfig) -> Self {
        Self {
            hr_crop: 448,
            input_size: 224,
            r_low: 14,
            r_high_low: 56,
            epochs: 800,
            max_steps: 0,
            batch_size: 8,
            learning_rate: 1.5e-4,
            warmup_steps: 1000,
            encoder,
            decoder: DecoderConfig::vit(),
            synth: SynthConfig {
                base_size: 512,
                ..SynthConfig::default()
            },
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "vit-base" => Ok(Self::vit(EncoderConfig::vit_base())),
            "vit-large" => Ok(Self::vit(EncoderConfig::vit_large())),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// TOML text merged over a preset. A top-level `preset = "..."` picks the
    /// base (default `toy`); every other key must exist in the schema.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {e}")))?;
        let base = match table.remove("preset") {
            None => Self::toy(),
            Some(Value::String(s)) => Self::preset(&s)?,
            Some(v) => return Err(Error::Config(format!("`preset` must be a string, got {v}"))),
        };
        let mut merged = base.to_table()?;
        merge(&mut merged, table, "")?;
        Self::from_table(merged)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) {
            return Self::preset(spec);
        }
        let path = std::path::Path::new(spec);
        if !path.exists() {
            return Err(Error::Config(format!(
                "config `{spec}` is neither a preset ({}) nor an existing file",
                PRESETS.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_table(&self) -> Result<Table> {
        match Value::try_from(self) {
            Ok(Value::Table(t)) => Ok(t),
            Ok(_) => Err(Error::Config("config did not serialize to a table".into())),
            Err(e) => Err(Error::Config(format!("config serialization failed: {e}"))),
        }
    }

    fn from_table(t: Table) -> Result<Self> {
        let cfg: Self = Value::Table(t)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    /// Applies one `dotted.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => Value::String(raw.to_string()),
        };
        let mut table = self.to_table()?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut table;
        for (i, part) in parts.iter().enumerate() {
            let unknown = || Error::UnknownConfigKey {
                key: key.to_string(),
                valid: Self::keys().into_iter().map(|k| k.0).collect::<Vec<_>>().join(", "),
            };
            if i + 1 == parts.len() {
                let slot = cur.get_mut(*part).filter(|v| !v.is_table()).ok_or_else(unknown)?;
                *slot = coerce(slot, value);
                break;
            }
            cur = match cur.get_mut(*part) {
                Some(Value::Table(t)) => t,
                _ => return Err(unknown()),
            };
        }
        *self = Self::from_table(table).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            self.set(o.as_ref())?;
        }
        Ok(())
    }

    /// Every overridable key with its default, in schema order.
    pub fn keys() -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten(&Self::toy().to_table().expect("default config serializes"), "", &mut out);
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            posenc: self.posenc.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model_config().validate()?;
        self.loss.validate()?;
        if !(self.r_low < self.input_size && self.input_size < self.hr_crop && self.r_high_low < self.hr_crop) {
            return bad(format!(
                "size chain needs r_low < input_size < hr_crop and r_high_low < hr_crop \
                 (r_low={}, input_size={}, hr_crop={}, r_high_low={})",
                self.r_low, self.input_size, self.hr_crop, self.r_high_low
            ));
        }
        if self.r_low == 0 || self.r_high_low == 0 || self.hr_crop % self.input_size != 0 {
            return bad(format!(
                "input_size {} must divide hr_crop {} and band sizes must be positive",
                self.input_size, self.hr_crop
            ));
        }
        if self.encoder.input_size != self.input_size {
            return bad(format!(
                "encoder.input_size {} differs from input_size {}",
                self.encoder.input_size, self.input_size
            ));
        }
        if self.decoder.low_out_size != self.input_size || self.decoder.high_out_size != self.hr_crop {
            return bad(format!(
                "decoder outputs ({}, {}) must equal (input_size, hr_crop) = ({}, {})",
                self.decoder.low_out_size, self.decoder.high_out_size, self.input_size, self.hr_crop
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if self.batch_size == 0 || (self.max_steps == 0 && self.epochs == 0) {
            return bad("batch_size and one of max_steps / epochs must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative".into());
        }
        if !(self.pixel_std > 0.0) {
            return bad("pixel_std must be positive".into());
        }
        if self.synth.n_classes < 1 || !(0.0 < self.synth.gsd_min && self.synth.gsd_min <= self.synth.gsd_max) {
            return bad("synth needs n_classes >= 1 and 0 < gsd_min <= gsd_max".into());
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            self.epochs * n.div_ceil(self.batch_size)
        }
    }
}

/// Integers typed into float fields parse as TOML integers; widen them.
fn coerce(old: &Value, new: Value) -> Value {
    match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Array(a), Value::Array(b)) if a.first().is_some_and(Value::is_float) => {
            Value::Array(b.into_iter().map(|v| coerce(&Value::Float(0.0), v)).collect())
        }
        (_, v) => v,
    }
}

fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(slot), v) if !slot.is_table() => *slot = coerce(slot, v),
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: path,
                    valid: TrainConfig::keys().into_iter().map(|k| k.0).collect::<Vec<_>>().join(", "),
                })
            }
        }
    }
    Ok(())
}

fn flatten(t: &Table, prefix: &str, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten(inner, &path, out),
            other => out.push((path, other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in PRESETS {
            TrainConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(TrainConfig::preset("vit-huge").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::preset("vit-large").unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn file_merges_over_preset() {
        let cfg = TrainConfig::from_toml_str(
            "preset = \"vit-base\"\nbatch_size = 4\nlearning_rate = 1\n[encoder]\ndepth = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.learning_rate, 1.0);
        assert_eq!(cfg.encoder.depth, 2);
        assert_eq!(cfg.encoder.embed_dim, 768);
        let err = TrainConfig::from_toml_str("[encoder]\ndepht = 2\n").unwrap_err();
        assert!(matches!(err, Error::UnknownConfigKey { ref key, .. } if key == "encoder.depht"));
    }

    #[test]
    fn overrides() {
        let mut cfg = TrainConfig::toy();
        cfg.apply_overrides(&[
            "encoder.use_gsd_posenc=false",
            "loss.target_mode=low_only",
            "mask_ratio=0.5",
            "decoder.posenc=\"standard\"",
            "eval.scales=[25, 50]",
            "seed=7",
        ])
        .unwrap();
        assert!(!cfg.encoder.use_gsd_posenc);
        assert_eq!(cfg.loss.target_mode, crate::objective::TargetMode::LowOnly);
        assert_eq!(cfg.mask_ratio, 0.5);
        assert_eq!(cfg.eval.scales, vec![25.0, 50.0]);
        assert_eq!(cfg.seed, 7);
        let err = cfg.set("encoder.nope=1").unwrap_err();
        match err {
            Error::UnknownConfigKey { key, valid } => {
                assert_eq!(key, "encoder.nope");
                assert!(valid.contains("encoder.depth"));
            }
            e => panic!("{e}"),
        }
        assert!(cfg.set("encoder=1").is_err());
        assert!(cfg.set("batch_size=\"many\"").is_err());
        assert!(cfg.set("no_equals_sign").is_err());
    }

    #[test]
    fn key_listing_covers_schema() {
        let keys: Vec<String> = TrainConfig::keys().into_iter().map(|k| k.0).collect();
        for k in ["seed", "mask_ratio", "encoder.use_gsd_posenc", "decoder.decode_depth", "loss.target_mode", "posenc.gsd_factor_orientation", "eval.ks"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
        let mut cfg = TrainConfig::toy();
        for (k, v) in TrainConfig::keys() {
            cfg.set(&format!("{k}={v}")).unwrap();
        }
        assert_eq!(cfg, TrainConfig::toy());
    }

    #[test]
    fn validation_catches_inconsistent_sizes() {
        let mut cfg = TrainConfig::toy();
        cfg.input_size = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::toy();
        cfg.r_low = 64;
        assert!(cfg.validate().is_err());
        assert_eq!(TrainConfig::toy().total_steps(1000), 200);
        let mut cfg = TrainConfig::toy();
        cfg.max_steps = 0;
        assert_eq!(cfg.total_steps(20), 8 * 3);
    }
}
