#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use ssod::data::{generate, split, Dataset, SynthParams};
use ssod::detector::{DetectorConfig, DexEncoderConfig};
use ssod::teacher_student::TrainConfig;

/// A narrow detector that keeps the default topology (stride 16, five
/// anchors, deformable encoder) but trains in milliseconds per step.
pub fn tiny_model() -> DetectorConfig {
    DetectorConfig {
        backbone_channels: vec![4, 8, 8, 16],
        encoder: DexEncoderConfig {
            in_channels: 16,
            projected_channels: 16,
            block_channels: 8,
            num_dilated_blocks: 1,
            dilation_rates: vec![2],
            use_deformable: true,
        },
        ..DetectorConfig::default()
    }
}

pub fn tiny_dataset(dir: &Path, n_train: usize, n_test: usize, frac: f64, seed: u64) -> Dataset {
    let m = generate(dir, seed, n_train, n_test, &SynthParams::default()).unwrap();
    let m = split(&m, frac, seed).unwrap();
    m.save(&dir.join(ssod::data::MANIFEST_FILE)).unwrap();
    Dataset::open(dir).unwrap()
}

pub fn short_run(iterations: usize, burn_in: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        burn_in,
        eval_interval: (iterations / 4).max(1),
        checkpoint_interval: iterations.max(1),
        ..TrainConfig::default()
    }
}
