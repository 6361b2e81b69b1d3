//! Configuration, data, training and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod train;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, model_from_checkpoint, save_checkpoint, CheckpointMeta, CheckpointRecord, CHECKPOINT_VERSION};
pub use config::{EvalConfig, Pooling, SynthConfig, TrainConfig, PRESETS};
pub use data::{synth_dataset, synth_scene, Dataset, DatasetManifest, ManifestEntry, Sample};
pub use train::{read_loss_log, smoothed, write_loss_log, LogRow, Trainer};

/// Independent 64-bit seed for the stream named by `parts` under `seed`.
///
/// Up to three parts are used; the 32-byte ChaCha key is `seed` followed by
/// the parts, little-endian, zero-padded.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    assert!(parts.len() <= 3, "derive_seed takes at most three parts");
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    for (i, p) in parts.iter().enumerate() {
        key[8 * (i + 1)..8 * (i + 2)].copy_from_slice(&p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key).next_u64()
}
