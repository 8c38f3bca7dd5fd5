use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use semsplat::camera::Camera;
use semsplat::codec::CodecTrainConfig;
use semsplat::dataio::manifest::load_dataset;
use semsplat::dataio::synthetic::{gen_synthetic, SyntheticSpec};
use semsplat::evalkit::WallClock;
use semsplat::gradcheck;
use semsplat::losses::LossWeights;
use semsplat::pipeline::{bench_resolutions, checkpoint_dir, codec_train_step, evaluate, CodecStepConfig, Prompt};
use semsplat::query::DEFAULT_THRESHOLD;
use semsplat::trainer::{train_scene, TrainOptions};
use semsplat::{Checkpoint, TrainConfig};

use crate::assets::{query_images, AssetPaths, SceneAssets};
use crate::server::{serve, ServeConfig};

#[derive(Parser, Debug)]
#[command(name = "semsplat", version, about = "Dynamic semantic Gaussian splatting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dynamic scene with labels and features.
    GenSynthetic(GenArgs),
    /// Fit the feature codec and write compressed feature maps.
    CodecTrain(CodecArgs),
    /// Optimize a scene and save a checkpoint.
    Train(TrainArgs),
    /// Render a color image at a time.
    Render(RenderArgs),
    /// Segment a frame from a text prompt or an embedding.
    Query(QueryArgs),
    /// Held-out IoU, PSNR and query throughput.
    Eval(EvalArgs),
    /// Compare every analytic gradient with central differences.
    GradCheck(GradArgs),
    /// Serve renders and queries over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub compressed_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CodecArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory; defaults to `checkpoint` beside the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_final_ratio: Option<f64>,
    #[arg(long)]
    pub init_stride: Option<usize>,
    #[arg(long)]
    pub no_tracker: bool,
    #[arg(long)]
    pub no_region_smoothness: bool,
    /// JSONL log with one record per iteration.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SceneArgs {
    #[arg(long, default_value = "scene.json")]
    pub manifest: PathBuf,
    /// Defaults to `checkpoint` beside the manifest.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub codec: Option<PathBuf>,
}

impl SceneArgs {
    pub fn paths(&self) -> AssetPaths {
        AssetPaths {
            manifest: self.manifest.clone(),
            checkpoint: self
                .checkpoint
                .clone()
                .unwrap_or_else(|| default_checkpoint(&self.manifest)),
            lexicon: self.lexicon.clone(),
            codec: self.codec.clone(),
        }
    }
}

fn default_checkpoint(manifest: &Path) -> PathBuf {
    checkpoint_dir(manifest.parent().unwrap_or(Path::new(".")))
}

#[derive(Args, Debug)]
pub struct ViewArgs {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Camera position as x,y,z; replaces the scene camera.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub eye: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,0,0")]
    pub target: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0,-1,0")]
    pub up: Vec<f64>,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 50.0)]
    pub fov: f64,
}

impl ViewArgs {
    fn camera(&self, assets: &SceneAssets) -> Result<Camera<f64>> {
        let base = assets.default_camera(None);
        let (w, h) = (self.width.unwrap_or(base.width), self.height.unwrap_or(base.height));
        match &self.eye {
            Some(eye) => {
                let v = |x: &[f64]| [x[0], x[1], x[2]];
                Ok(Camera::look_at(v(eye), v(&self.target), v(&self.up), self.fov, w, h)?)
            }
            None => Ok(assets.default_camera(Some((w, h)))),
        }
    }
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub view: ViewArgs,
    /// Normalized time in [0, 1].
    #[arg(long)]
    pub time: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, conflicts_with = "embedding", required_unless_present = "embedding")]
    pub prompt: Option<String>,
    /// JSON file holding an embedding array.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    #[arg(long)]
    pub time: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out stem>_heatmap.png`.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Directory for the held-out query masks.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bench_repeats: usize,
    /// Square resolutions timed by the throughput bench.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256])]
    pub resolutions: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    /// Run a single suite instead of all of them.
    #[arg(long)]
    pub suite: Option<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 4)]
    pub max_concurrency: usize,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

/// Parses and runs; the return value is the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.kind() == ErrorKind::InvalidSubcommand {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynthetic(a) => gen(a),
        Command::CodecTrain(a) => codec_train(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Serve(a) => {
            let config = ServeConfig {
                bind: a.bind,
                port: a.port,
                paths: a.scene.paths(),
                max_concurrency: a.max_concurrency,
                resolution: size_pair(a.width, a.height)?,
            };
            tokio::runtime::Runtime::new()?.block_on(serve(config))
        }
    }
}

fn size_pair(w: Option<usize>, h: Option<usize>) -> Result<Option<(usize, usize)>> {
    match (w, h) {
        (Some(w), Some(h)) => Ok(Some((w, h))),
        (None, None) => Ok(None),
        _ => bail!("--width and --height go together"),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let base = SyntheticSpec::standard(a.seed);
    let spec = SyntheticSpec {
        classes: a.classes.unwrap_or(base.classes),
        frames: a.frames.unwrap_or(base.frames),
        width: a.width.unwrap_or(base.width),
        height: a.height.unwrap_or(base.height),
        full_feature_dim: a.feature_dim.unwrap_or(base.full_feature_dim),
        compressed_dim: a.compressed_dim.unwrap_or(base.compressed_dim),
        ..base
    };
    let manifest = gen_synthetic(&spec, &a.out)?;
    println!(
        "wrote {} frames of {}x{} to {}",
        manifest.frames.len(),
        spec.width,
        spec.height,
        a.out.join("scene.json").display()
    );
    Ok(())
}

fn codec_train(a: CodecArgs) -> Result<()> {
    let d = CodecStepConfig::default();
    let cfg = CodecStepConfig {
        train: CodecTrainConfig {
            epochs: a.epochs.unwrap_or(d.train.epochs),
            seed: a.seed,
            ..d.train
        },
        samples: a.samples.unwrap_or(d.samples),
    };
    let report = codec_train_step(&a.manifest, &cfg)?;
    if let Some((mse, cos)) = report.final_loss() {
        println!("codec mse {mse:.6} cosine loss {cos:.6}");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.manifest)?;
    let (w, h) = dataset
        .frames
        .first()
        .map(|f| (f.width, f.height))
        .context("manifest lists no frames")?;
    let d = TrainConfig::default();
    let config = TrainConfig {
        iterations: a.iterations.unwrap_or(d.iterations),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        lr_final_ratio: a.lr_final_ratio,
        seed: a.seed,
        init_stride: a.init_stride.unwrap_or(d.init_stride),
        use_tracker: !a.no_tracker,
        weights: LossWeights {
            region_smoothness: !a.no_region_smoothness,
            ..LossWeights::for_resolution(w, h)
        },
        ..d
    };
    let options = TrainOptions {
        log_path: a.log,
        diagnostic_path: None,
    };
    let (ck, history) = train_scene::<f32>(&dataset, &config, &options)?;
    let out = a.out.unwrap_or_else(|| default_checkpoint(&a.manifest));
    ck.save(&out)?;
    if let Some(last) = history.records.last() {
        println!("final loss {:.6}", last.loss.total);
    }
    if let Some((it, p)) = history.psnr_points().last() {
        println!("held-out psnr {p:.2} dB at iteration {it}");
    }
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        bail!("--time must be in [0, 1], got {t}");
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    check_time(a.time)?;
    let assets = SceneAssets::load(&a.scene.paths())?;
    let camera = a.view.camera(&assets)?;
    let png = assets.render_png(&camera, a.time)?;
    std::fs::write(&a.out, png).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn heatmap_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("query");
    out.with_file_name(format!("{stem}_heatmap.png"))
}

fn query(a: QueryArgs) -> Result<()> {
    check_time(a.time)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("--threshold must be in [0, 1], got {}", a.threshold);
    }
    let assets = SceneAssets::load(&a.scene.paths())?;
    let camera = a.view.camera(&assets)?;
    let prompt = match (&a.prompt, &a.embedding) {
        (Some(p), _) => Prompt::Text(p.clone()),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let values: Vec<f64> = serde_json::from_str(&text).context("embedding must be a JSON array of numbers")?;
            Prompt::Embedding {
                label: path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("embedding")
                    .to_string(),
                values,
            }
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    let q = assets.query(&camera, a.time, &prompt, a.threshold)?;
    let (mask, heat) = query_images(&q)?;
    let heat_path = a.heatmap.clone().unwrap_or_else(|| heatmap_path(&a.out));
    std::fs::write(&a.out, mask).with_context(|| format!("writing {}", a.out.display()))?;
    std::fs::write(&heat_path, heat).with_context(|| format!("writing {}", heat_path.display()))?;
    let s = q.score_stats();
    println!(
        "{}: {} of {} pixels at or above {} (scores {:.3} to {:.3}, mean {:.3})",
        q.prompt,
        q.mask.iter().filter(|&&m| m).count(),
        q.mask.len(),
        a.threshold,
        s.min,
        s.max,
        s.mean
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.scene.manifest)?;
    let paths = a.scene.paths();
    let ck = Checkpoint::<f32>::load_expecting(&paths.checkpoint, dataset.manifest.feature_dim)?;
    let mut report = evaluate(&dataset, &ck.model, a.threshold, a.masks.as_deref())?;
    let assets = SceneAssets::load(&paths)?;
    let prompts: Vec<Prompt> = dataset.manifest.class_names.iter().cloned().map(Prompt::Text).collect();
    let sizes: Vec<(usize, usize)> = a.resolutions.iter().map(|&r| (r, r)).collect();
    let camera = assets.default_camera(None).cast();
    let points = bench_resolutions(
        &mut WallClock::default(),
        &ck.model,
        &assets.codec,
        &assets.lexicon,
        &camera,
        &prompts,
        &sizes,
        a.bench_repeats,
    )?;
    let native = (assets.manifest.cameras[0].width, assets.manifest.cameras[0].height);
    report.latency = points
        .iter()
        .find(|p| (p.width, p.height) == native)
        .or(points.first())
        .map(|p| p.latency.clone());
    let mut json: serde_json::Value = serde_json::from_str(&report.to_json())?;
    json["throughput"] = serde_json::to_value(&points)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&json)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", report.table());
    for p in &points {
        println!(
            "{}x{}: median {:.2} ms, {:.1} fps",
            p.width, p.height, p.latency.median_ms, p.latency.fps
        );
    }
    Ok(())
}

fn grad_check(a: GradArgs) -> Result<()> {
    let reports = match &a.suite {
        Some(s) => vec![gradcheck::run_suite(s, a.configs, a.seed)?],
        None => gradcheck::run_all(a.configs, a.seed)?,
    };
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!(
            "{:<20} configs {:>4} redraws {:>3} entries {:>7} max rel err {:.3e} ({:.2}s)",
            r.name, r.configs, r.redraws, r.entries, r.max_rel_error, r.seconds
        );
        worst = worst.max(r.max_rel_error);
    }
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e})",
        gradcheck::TOLERANCE
    );
    if worst >= gradcheck::TOLERANCE || reports.iter().any(|r| !r.passed(a.configs)) {
        bail!("gradient check failed");
    }
    Ok(())
}
