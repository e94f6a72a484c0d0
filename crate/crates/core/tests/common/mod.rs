//! Tiny configurations shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use gzf::cli::RunConfig;
use gzf::data::DatasetManifest;
use gzf::model::{DsgeConfig, ModelConfig, VitConfig};
use gzf::synth::{generate_dataset, SynthConfig};
use gzf::train::TrainConfig;

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        image_size: 16,
        num_classes: 2,
        samples_per_class: 12,
        glyph_size: 4,
        marker_size: 2,
        gaze_len: 20,
        ..SynthConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        vit: VitConfig {
            image_size: 16,
            patch_size: 8,
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_hidden: None,
            dropout: 0.1,
        },
        dsge: DsgeConfig {
            seq_len: 20,
            hidden: 8,
            heads: 2,
            layers: 1,
            out_dim: 16,
            ..DsgeConfig::default()
        },
        mlp_hidden: 16,
        num_classes: 2,
        ..ModelConfig::desk()
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        base_lr: 0.05,
        epochs: 3,
        batch_size: 8,
        grad_clip: Some(1.0),
        record_wall_clock: false,
        ..TrainConfig::default()
    }
}

pub fn tiny_run() -> RunConfig {
    RunConfig {
        synth: tiny_synth(),
        model: tiny_model(),
        train: tiny_train(),
    }
}

/// Writes the tiny synthetic dataset under `dir` and returns its manifest.
pub fn tiny_dataset(dir: &Path) -> DatasetManifest {
    generate_dataset(&tiny_synth(), dir).unwrap()
}

/// Partial config file equivalent to [`tiny_run`], for CLI runs.
pub fn write_tiny_config(path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(&tiny_run()).unwrap()).unwrap();
}
