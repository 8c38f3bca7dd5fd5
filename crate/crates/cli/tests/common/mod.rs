#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use semsplat::codec::CodecTrainConfig;
use semsplat::dataio::manifest::load_dataset;
use semsplat::dataio::synthetic::{gen_synthetic, SyntheticSpec};
use semsplat::losses::LossWeights;
use semsplat::pipeline::{checkpoint_dir, codec_train_step, CodecStepConfig};
use semsplat::trainer::{train_scene, TrainOptions};
use semsplat::TrainConfig;
use semsplat_cli::assets::AssetPaths;

/// A 32×32 scene trained for a handful of steps, built once per test binary.
pub fn scene_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let spec = SyntheticSpec {
            frames: 16,
            width: 32,
            height: 32,
            ..SyntheticSpec::standard(0)
        };
        gen_synthetic(&spec, &dir).unwrap();
        let manifest = dir.join("scene.json");
        let codec = CodecStepConfig {
            train: CodecTrainConfig {
                epochs: 5,
                ..CodecTrainConfig::default()
            },
            samples: 512,
        };
        codec_train_step(&manifest, &codec).unwrap();
        let dataset = load_dataset(&manifest).unwrap();
        let config = TrainConfig {
            iterations: 20,
            weights: LossWeights::for_resolution(32, 32),
            ..TrainConfig::default()
        };
        let (ck, _) = train_scene::<f32>(&dataset, &config, &TrainOptions::default()).unwrap();
        ck.save(checkpoint_dir(&dir)).unwrap();
        dir
    })
}

pub fn paths() -> AssetPaths {
    let dir = scene_dir();
    AssetPaths {
        manifest: dir.join("scene.json"),
        checkpoint: checkpoint_dir(dir),
        lexicon: None,
        codec: None,
    }
}
