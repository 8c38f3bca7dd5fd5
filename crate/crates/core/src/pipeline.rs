//! Multi-step workflows: codec training over a dataset, per-frame queries
//! and the synthetic end-to-end fixture.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::codec::{train_codec, CodecReport, CodecTrainConfig, FeatureCodec};
use crate::dataio::manifest::{load_dataset, Dataset, SceneManifest};
use crate::dataio::synthetic::{gen_synthetic, SyntheticSpec};
use crate::dataio::tensor::{write_tensor, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::evalkit::{bench_query, miou, psnr_u8, Clock, EvalReport, LatencyStats};
use crate::model::SceneModel;
use crate::query::{QueryLexicon, QueryResult};
use crate::scalar::Real;
use crate::trainer::{train_scene, Checkpoint, TrainConfig, TrainHistory, TrainOptions};

pub const CODEC_DIR: &str = "codec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecStepConfig {
    pub train: CodecTrainConfig,
    /// Pixels sampled across training frames for fitting.
    pub samples: usize,
}

impl Default for CodecStepConfig {
    fn default() -> Self {
        Self {
            train: CodecTrainConfig::default(),
            samples: 4096,
        }
    }
}

/// Fits the codec on sampled full-dimension features, writes compressed
/// maps for every frame and records both in the manifest.
pub fn codec_train_step(manifest_path: impl AsRef<Path>, cfg: &CodecStepConfig) -> Result<CodecReport> {
    let manifest_path = manifest_path.as_ref();
    let dataset = load_dataset(manifest_path)?;
    let df = dataset.manifest.full_feature_dim;
    let d = dataset.manifest.feature_dim;
    let (train, _) = dataset.split();
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training frames for the codec".into()));
    }
    let per_frame = dataset.frames[0].pixels();
    let total = train.len() * per_frame;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut picks: Vec<usize> = sample(&mut rng, total, cfg.samples.min(total)).into_vec();
    picks.sort_unstable();
    let mut rows = Vec::with_capacity(picks.len() * df);
    let mut loaded: Option<(usize, Vec<f32>)> = None;
    for p in picks {
        let frame = train[p / per_frame];
        if loaded.as_ref().map(|l| l.0) != Some(frame) {
            loaded = Some((frame, dataset.load_full_features(frame)?));
        }
        let feats = &loaded.as_ref().unwrap().1;
        let px = p % per_frame;
        rows.extend(feats[px * df..(px + 1) * df].iter().map(|&v| v as f64));
    }
    let (codec, report) = train_codec(&rows, df, d, &cfg.train)?;
    let root = &dataset.root;
    codec.save(root.join(CODEC_DIR))?;
    let mut manifest = dataset.manifest.clone();
    for (i, entry) in manifest.frames.iter_mut().enumerate() {
        let full = dataset.load_full_features(i)?;
        let z = encode_map(&codec, &full)?;
        let f = &dataset.frames[i];
        let rel = format!("frames/{}_feat.stpg", entry.name);
        write_tensor(
            root.join(&rel),
            &Tensor::new(vec![f.height, f.width, d], TensorData::F32(z))?,
        )?;
        entry.features = Some(rel);
    }
    manifest.codec = Some(CODEC_DIR.into());
    manifest.write(manifest_path)?;
    Ok(report)
}

fn encode_map(codec: &FeatureCodec<f64>, full: &[f32]) -> Result<Vec<f32>> {
    let df = codec.full_dim();
    if !full.len().is_multiple_of(df) {
        return Err(Error::invalid(
            "feature map length is not a multiple of the embedding size",
        ));
    }
    let x: Vec<f64> = full.iter().map(|&v| v as f64).collect();
    Ok(codec.encode_batch(&x)?.into_iter().map(|v| v as f32).collect())
}

/// Decodes an H×W×d feature render into unit embeddings.
pub fn decode_map<T: Real>(codec: &FeatureCodec<f64>, feature: &[T]) -> Result<Vec<f64>> {
    let d = codec.compressed_dim();
    let out: Vec<Vec<f64>> = feature
        .par_chunks(d)
        .map(|z| {
            let z: Vec<f64> = z.iter().map(|v| v.as_f64()).collect();
            codec.decode(&z)
        })
        .collect::<Result<_>>()?;
    Ok(out.concat())
}

/// A lexicon key or a caller-supplied embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    Text(String),
    Embedding { label: String, values: Vec<f64> },
}

impl Prompt {
    pub fn label(&self) -> &str {
        match self {
            Prompt::Text(s) => s,
            Prompt::Embedding { label, .. } => label,
        }
    }
}

/// Renders features at `(camera, t)`, decodes and scores them.
pub fn query_frame<T: Real>(
    model: &SceneModel<T>,
    codec: &FeatureCodec<f64>,
    lexicon: &QueryLexicon,
    camera: &Camera<T>,
    t: T,
    prompt: &Prompt,
    threshold: f64,
) -> Result<QueryResult> {
    let text: Vec<f64> = match prompt {
        Prompt::Text(p) => lexicon.resolve(p)?.to_vec(),
        Prompt::Embedding { values, .. } => {
            if values.len() != lexicon.dim() {
                return Err(Error::DimensionMismatch {
                    field: "prompt embedding".into(),
                    expected: lexicon.dim(),
                    found: values.len(),
                });
            }
            let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::invalid("prompt embedding must be finite and nonzero"));
            }
            values.iter().map(|v| v / n).collect()
        }
    };
    if codec.full_dim() != lexicon.dim() {
        return Err(Error::DimensionMismatch {
            field: "lexicon embedding dimension".into(),
            expected: codec.full_dim(),
            found: lexicon.dim(),
        });
    }
    let render = model.render(camera, t)?;
    let emb = decode_map(codec, &render.feature)?;
    let canon = lexicon.canonical_set();
    Ok(QueryResult::from_embeddings(
        prompt.label(),
        &text,
        &canon,
        &emb,
        camera.width,
        camera.height,
        threshold,
    ))
}

/// End-to-end run over a freshly generated synthetic scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub spec: SyntheticSpec,
    pub codec: CodecStepConfig,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl FixtureConfig {
    pub fn standard(seed: u64) -> Self {
        let spec = SyntheticSpec::standard(seed);
        let train = TrainConfig {
            seed,
            init_stride: 4,
            weights: crate::losses::LossWeights::for_resolution(spec.width, spec.height),
            ..TrainConfig::default()
        };
        Self {
            codec: CodecStepConfig {
                train: CodecTrainConfig {
                    seed,
                    ..CodecTrainConfig::default()
                },
                ..CodecStepConfig::default()
            },
            spec,
            train,
            threshold: crate::query::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureOutcome {
    pub dir: PathBuf,
    pub class_names: Vec<String>,
    /// Per class, IoU (percent) pooled over held-out frames.
    pub class_iou: Vec<Option<f64>>,
    pub heldout_psnr: f64,
    pub codec_report: CodecReport,
    pub seconds: f64,
    #[serde(skip)]
    pub history: TrainHistory,
}

pub fn checkpoint_dir(dir: &Path) -> PathBuf {
    dir.join("checkpoint")
}

/// Generates, compresses, trains and queries. The checkpoint lands in
/// `dir/checkpoint` and held-out masks in `dir/masks`.
pub fn run_fixture(dir: impl AsRef<Path>, cfg: &FixtureConfig) -> Result<FixtureOutcome> {
    let dir = dir.as_ref();
    let start = Instant::now();
    gen_synthetic(&cfg.spec, dir)?;
    let manifest_path = dir.join("scene.json");
    let codec_report = codec_train_step(&manifest_path, &cfg.codec)?;
    let dataset = load_dataset(&manifest_path)?;
    let (ck, history) = train_scene::<f32>(&dataset, &cfg.train, &TrainOptions::default())?;
    ck.save(checkpoint_dir(dir))?;
    let (class_iou, heldout_psnr) = evaluate_heldout(&dataset, &ck.model, cfg.threshold, Some(&dir.join("masks")))?;
    Ok(FixtureOutcome {
        dir: dir.to_path_buf(),
        class_names: dataset.manifest.class_names.clone(),
        class_iou,
        heldout_psnr,
        codec_report,
        seconds: start.elapsed().as_secs_f64(),
        history,
    })
}

/// Pooled per-class query IoU and mean PSNR over the held-out frames.
/// When `mask_dir` is set, every query mask is written there as raw bytes.
pub fn evaluate_heldout<T: Real>(
    dataset: &Dataset,
    model: &SceneModel<T>,
    threshold: f64,
    mask_dir: Option<&Path>,
) -> Result<(Vec<Option<f64>>, f64)> {
    let report = evaluate(dataset, model, threshold, mask_dir)?;
    let ious = dataset
        .manifest
        .class_names
        .iter()
        .map(|c| report.per_class_iou[c])
        .collect();
    Ok((ious, report.psnr_mean))
}

/// Held-out evaluation as a full report, without latency figures.
pub fn evaluate<T: Real>(
    dataset: &Dataset,
    model: &SceneModel<T>,
    threshold: f64,
    mask_dir: Option<&Path>,
) -> Result<EvalReport> {
    let (_, test) = dataset.split();
    if test.is_empty() {
        return Err(Error::EmptyDataset("no held-out frames".into()));
    }
    let (codec, lexicon) = query_assets(dataset)?;
    if let Some(m) = mask_dir {
        std::fs::create_dir_all(m).map_err(|e| Error::io(m, e))?;
    }
    let classes = &dataset.manifest.class_names;
    let mut pred: Vec<Vec<bool>> = vec![Vec::new(); classes.len()];
    let mut gt: Vec<Vec<bool>> = vec![Vec::new(); classes.len()];
    let mut psnr_per_frame = Vec::with_capacity(test.len());
    for &i in &test {
        let frame = &dataset.frames[i];
        let camera: Camera<T> = dataset.camera_for(i).cast();
        let t = T::lit(frame.timestamp);
        let render = model.render(&camera, t)?;
        psnr_per_frame.push(psnr_u8(&render.color, &frame.color)?);
        let emb = decode_map(codec, &render.feature)?;
        let canon = lexicon.canonical_set();
        for (c, name) in classes.iter().enumerate() {
            let text = lexicon.resolve(name)?;
            let q = QueryResult::from_embeddings(name, text, &canon, &emb, frame.width, frame.height, threshold);
            if let Some(m) = mask_dir {
                let bytes: Vec<u8> = q.mask.iter().map(|&b| u8::from(b)).collect();
                let p = m.join(format!("{}_{name}.mask", frame.name));
                std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            pred[c].extend(q.mask);
            gt[c].extend(frame.labels.iter().map(|&l| l as usize == c + 1));
        }
    }
    let m = miou(&pred, &gt)?;
    let psnr_mean = psnr_per_frame.iter().sum::<f64>() / psnr_per_frame.len() as f64;
    Ok(EvalReport {
        per_class_iou: classes.iter().cloned().zip(m.per_class).collect(),
        miou: m.mean,
        psnr_per_frame,
        psnr_mean,
        latency: None,
        config: serde_json::json!({
            "threshold": threshold,
            "heldout_frames": test,
            "scene": dataset.manifest.name,
        }),
    })
}

fn query_assets(dataset: &Dataset) -> Result<(&FeatureCodec<f64>, &QueryLexicon)> {
    let codec = dataset
        .codec
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no codec"))?;
    let lexicon = dataset
        .lexicon
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no lexicon"))?;
    Ok((codec, lexicon))
}

/// Query latency at one render resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThroughputPoint {
    pub width: usize,
    pub height: usize,
    pub latency: LatencyStats,
}

/// Times full `query_frame` calls (render, decode, score) for every prompt
/// in turn at each resolution, scaling the camera intrinsics.
#[allow(clippy::too_many_arguments)]
pub fn bench_resolutions<T: Real, C: Clock>(
    clock: &mut C,
    model: &SceneModel<T>,
    codec: &FeatureCodec<f64>,
    lexicon: &QueryLexicon,
    camera: &Camera<T>,
    prompts: &[Prompt],
    resolutions: &[(usize, usize)],
    repeats: usize,
) -> Result<Vec<ThroughputPoint>> {
    if prompts.is_empty() {
        return Err(Error::invalid("bench needs at least one prompt"));
    }
    resolutions
        .iter()
        .map(|&(w, h)| {
            let cam = camera.resized(w, h);
            let mut k = 0;
            let latency = bench_query(clock, 1, repeats, || {
                let p = &prompts[k % prompts.len()];
                k += 1;
                query_frame(
                    model,
                    codec,
                    lexicon,
                    &cam,
                    T::lit(0.5),
                    p,
                    crate::query::DEFAULT_THRESHOLD,
                )
                .map(|_| ())
            })?;
            Ok(ThroughputPoint {
                width: w,
                height: h,
                latency,
            })
        })
        .collect()
}

/// Loads a checkpoint trained on `dataset`, checking its feature dimension.
pub fn load_checkpoint_for(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<Checkpoint<f32>> {
    Checkpoint::load_expecting(dir, dataset.manifest.feature_dim)
}

/// Convenience for callers holding only a manifest path.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    SceneManifest::read(path)
}
