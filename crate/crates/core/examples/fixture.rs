//! Runs the synthetic pipeline once and prints its metrics and phase timings.
//!
//! cargo run --release -p semsplat --example fixture -- [seed] [iterations] [dir]

use std::time::Instant;

use semsplat::dataio::manifest::load_dataset;
use semsplat::dataio::synthetic::gen_synthetic;
use semsplat::pipeline::{codec_train_step, evaluate_heldout, FixtureConfig};
use semsplat::trainer::{train_scene, TrainOptions};

fn main() -> semsplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = FixtureConfig::standard(seed);
    if let Some(it) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.train.iterations = it;
    }
    let dir = match args.get(3) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join(format!("semsplat-fixture-{seed}")),
    };
    let _ = std::fs::remove_dir_all(&dir);
    let clock = Instant::now();
    let lap = |what: &str| println!("{what:<8} {:>7.1} s", clock.elapsed().as_secs_f64());
    gen_synthetic(&cfg.spec, &dir)?;
    lap("gen");
    let manifest = dir.join("scene.json");
    let codec = codec_train_step(&manifest, &cfg.codec)?;
    lap("codec");
    let dataset = load_dataset(&manifest)?;
    let (ck, history) = train_scene::<f32>(&dataset, &cfg.train, &TrainOptions::default())?;
    lap("train");
    let (ious, psnr) = evaluate_heldout(&dataset, &ck.model, cfg.threshold, None)?;
    lap("eval");
    for (iter, p) in history.psnr_points() {
        println!("iter {iter:>5}  heldout psnr {p:.2}");
    }
    if let Some(last) = history.records.last() {
        println!("final loss {:?}", last.loss);
    }
    println!("gaussians {}", ck.model.cloud.len());
    println!("codec final {:?}", codec.final_loss());
    for (name, iou) in dataset.manifest.class_names.iter().zip(&ious) {
        println!("{name:<10} iou {iou:?}");
    }
    println!("heldout psnr {psnr:.2} dB");
    Ok(())
}
