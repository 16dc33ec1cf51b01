//! The shipped fixture networks and the settings they were trained with.

use std::path::PathBuf;

use crate::accmodel::{AccModelNet, TrainConfig};
use crate::dnn::FinalDnn;
use crate::error::Result;
use crate::pipeline::StreamConfig;
use crate::scene::SceneConfig;

pub const DETECTOR_A: &str = "detector_a.agp";
pub const DETECTOR_B: &str = "detector_b.agp";
pub const SEGMENTER: &str = "segmenter.agp";
pub const SELECTOR: &str = "selector.agp";

/// Images generated for selector training, before downsampling.
pub const SELECTOR_IMAGES: usize = 2000;
pub const SELECTOR_IMAGE_SEED: u64 = 11;
pub const HELD_OUT_IMAGES: usize = 500;
pub const HELD_OUT_SEED: u64 = 12;

pub fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn load_dnn(name: &str) -> Result<FinalDnn> {
    FinalDnn::load(dir().join(name))
}

pub fn load_selector() -> Result<AccModelNet> {
    AccModelNet::load(dir().join(SELECTOR))
}

/// Scenes the selector is trained and tested on.
pub fn selector_scenes() -> SceneConfig {
    SceneConfig {
        width: 128,
        height: 128,
        blobs: 8,
        ..SceneConfig::default()
    }
}

/// Selector training settings; labels come from the heavily degraded frame.
pub fn selector_train_config() -> TrainConfig {
    TrainConfig {
        qp_low: 51,
        seed: 1,
        ..TrainConfig::default()
    }
}

/// Images labeled for the capacity experiment.
pub const FP_IMAGES: usize = 48;
pub const FP_IMAGE_SEED: u64 = 31;

/// Capacity-experiment labels: default 64×64 scenes, every image kept.
pub fn fp_train_config() -> TrainConfig {
    TrainConfig {
        downsample: 1,
        ..selector_train_config()
    }
}

/// Slow-motion video for mask persistence: at most 1 px/frame.
pub fn persistence_scenes() -> SceneConfig {
    SceneConfig {
        width: 256,
        height: 256,
        blobs: 2,
        speed: 1.0,
        ..SceneConfig::default()
    }
}

pub const PERSISTENCE_FRAMES: usize = 30;
pub const PERSISTENCE_SEEDS: [u64; 5] = [100, 101, 102, 103, 104];

pub fn persistence_stream() -> StreamConfig {
    StreamConfig {
        k: 1,
        gamma: 5,
        ..StreamConfig::default()
    }
}

/// Busy video for the accuracy / size tradeoff.
pub fn tradeoff_scenes() -> SceneConfig {
    SceneConfig {
        width: 256,
        height: 256,
        blobs: 8,
        ..SceneConfig::default()
    }
}

pub const TRADEOFF_FRAMES: usize = 30;
pub const TRADEOFF_SEED: u64 = 77;
pub const TRADEOFF_ALPHAS: [f64; 9] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 0.9];

pub fn tradeoff_stream() -> StreamConfig {
    StreamConfig {
        gamma: 1,
        qp_hi: 30,
        qp_lo: 51,
        ..StreamConfig::default()
    }
}

/// Short clips for the cross-network reuse check, on selector scenes.
pub const REUSE_FRAMES: usize = 10;
pub const REUSE_SEEDS: std::ops::Range<u64> = 9000..9020;

pub fn reuse_stream() -> StreamConfig {
    tradeoff_stream()
}
