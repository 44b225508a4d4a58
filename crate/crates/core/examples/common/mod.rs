//! Tiny world shared by the training examples: 32x32 images over an 8x8
//! grid, so every run finishes in seconds.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hft::geometry::{BevGridSpec, CameraIntrinsics};
use hft::harness::RunConfig;
use hft::net::ModelConfig;
use hft::synthworld::{generate_dataset, DatasetConfig, SceneConfig};

pub fn workdir(name: &str) -> PathBuf {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("hft-example-{name}")));
    std::fs::create_dir_all(&dir).expect("create work directory");
    dir
}

pub fn tiny_dataset(dir: &Path, train: usize, val: usize) -> hft::Result<PathBuf> {
    let data = dir.join("data");
    let scene = SceneConfig {
        grid: BevGridSpec::with_extent_cells(8, 1.0, 1.0, &[2, 2, 4])?,
        intrinsics: CameraIntrinsics::new(16.0, 16.0, 16.0, 10.0, 1.6, 32, 32)?,
        ..SceneConfig::default()
    };
    generate_dataset(&DatasetConfig { scene, train, val }, 1, &data)?;
    Ok(data)
}

pub fn tiny_run(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        dataset: data.to_path_buf(),
        output: out.to_path_buf(),
        model: ModelConfig {
            encoder_channels: vec![8, 8, 8],
            bev_channels: 8,
            fused_channels: 8,
            decoder_channels: 8,
            ..ModelConfig::default()
        },
        epochs: 6,
        batch_size: 4,
        ..RunConfig::default()
    };
    cfg.optimizer.lr = 3e-3;
    cfg.optimizer.decay_epochs = vec![4];
    cfg
}
