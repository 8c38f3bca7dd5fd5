//! Optimization loop, checkpoints and training logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataio::archive::{ArchiveReader, ArchiveWriter};
use crate::dataio::frame::FrameSample;
use crate::dataio::manifest::Dataset;
use crate::deformation::{DeformationField, DEFAULT_BASIS};
use crate::error::{Error, Result};
use crate::evalkit::psnr;
use crate::gaussian::{init_from_depth, GaussianCloud};
use crate::losses::{total_loss, LossBreakdown, LossTarget, LossWeights};
use crate::model::{ParamGroup, SceneModel};
use crate::optim::{Adam, AdamConfig};
use crate::rasterizer::Background;
use crate::scalar::Real;

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learning-rate multipliers applied on top of the base rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub means: f64,
    pub rotations: f64,
    pub scales: f64,
    pub opacity: f64,
    pub sh: f64,
    pub features: f64,
    pub deformation: f64,
    pub tracker: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        Self {
            means: 1.0,
            rotations: 1.0,
            scales: 1.0,
            opacity: 30.0,
            sh: 2.0,
            features: 4.0,
            deformation: 3.0,
            tracker: 1.0,
        }
    }
}

impl GroupRates {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Means => self.means,
            ParamGroup::Rotations => self.rotations,
            ParamGroup::Scales => self.scales,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Sh => self.sh,
            ParamGroup::Features => self.features,
            ParamGroup::Deformation => self.deformation,
            ParamGroup::Tracker => self.tracker,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub rates: GroupRates,
    /// Off for the no-tracker ablation.
    pub use_tracker: bool,
    pub basis: usize,
    /// Pixel stride when seeding Gaussians from the first training frame.
    pub init_stride: usize,
    pub sh_degree: usize,
    pub eval_every: usize,
    /// When set, the rate decays exponentially to this fraction of its
    /// initial value by the last iteration.
    #[serde(default)]
    pub lr_final_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 1.6e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            weights: LossWeights::default(),
            seed: 0,
            rates: GroupRates::default(),
            use_tracker: true,
            basis: DEFAULT_BASIS,
            init_stride: 2,
            sh_degree: 1,
            eval_every: 100,
            lr_final_ratio: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.basis == 0 || self.init_stride == 0 {
            return Err(Error::invalid("basis and init_stride must be positive"));
        }
        if let Some(r) = self.lr_final_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("lr_final_ratio must lie in (0, 1], got {r}")));
            }
        }
        crate::sh::check_degree(self.sh_degree)?;
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// CRC32 of the canonical JSON encoding.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn rate_at(&self, iteration: usize) -> f64 {
        match self.lr_final_ratio {
            Some(r) if self.iterations > 1 => {
                let u = iteration as f64 / (self.iterations - 1) as f64;
                self.learning_rate * r.powf(u)
            }
            _ => self.learning_rate,
        }
    }
}

/// Model, optimizer moments and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: SceneModel<T>,
    pub optim: Vec<Adam<T>>,
    pub iteration: usize,
    pub config: TrainConfig,
}

impl<T: Real> Checkpoint<T> {
    pub fn fresh(model: SceneModel<T>, config: TrainConfig) -> Self {
        let optim = model.tensors().iter().map(|(_, _, v)| Adam::new(v.len())).collect();
        Self {
            model,
            optim,
            iteration: 0,
            config,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        if dir.exists() {
            // stale tensors from an earlier save must not survive
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = ArchiveWriter::create(dir, CHECKPOINT_KIND)?;
        w.meta("checkpoint_version", CHECKPOINT_VERSION);
        w.meta("iteration", self.iteration);
        w.meta("config", &self.config);
        w.meta("config_hash", self.config.hash());
        w.meta("use_tracker", self.model.use_tracker);
        w.meta("background", self.model.background.color.map(|v| v.as_f64()));
        self.model.cloud.write_into(&mut w, "cloud.")?;
        self.model.field.write_into(&mut w)?;
        let steps: Vec<u64> = self.optim.iter().map(|a| a.step).collect();
        w.meta("adam.steps", steps);
        for ((name, _, v), adam) in self.model.tensors().iter().zip(&self.optim) {
            w.put_real(&format!("adam.{name}.m"), vec![v.len()], &adam.m)?;
            w.put_real(&format!("adam.{name}.v"), vec![v.len()], &adam.v)?;
        }
        w.finish()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let r = ArchiveReader::open(dir, CHECKPOINT_KIND)?;
        let version: u32 = r.meta_as("checkpoint_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                field: "checkpoint_version".into(),
                detail: format!("expected {CHECKPOINT_VERSION}, found {version}"),
            });
        }
        let config: TrainConfig = r.meta_as("config")?;
        let hash: u32 = r.meta_as("config_hash")?;
        if hash != config.hash() {
            return Err(Error::Checkpoint {
                field: "config_hash".into(),
                detail: format!("stored {hash:#010x} does not match config {:#010x}", config.hash()),
            });
        }
        let cloud = GaussianCloud::<T>::read_from(&r, "cloud.")?;
        let field = DeformationField::read_from(&r, cloud.len(), cloud.feature_dim)?;
        let bg: [f64; 3] = r.meta_as("background")?;
        let mut background = Background::black(cloud.feature_dim);
        background.color = bg.map(T::lit);
        let model = SceneModel {
            cloud,
            field,
            use_tracker: r.meta_as("use_tracker")?,
            background,
        };
        let steps: Vec<u64> = r.meta_as("adam.steps")?;
        let names = model.tensors();
        if steps.len() != names.len() {
            return Err(Error::Checkpoint {
                field: "adam.steps".into(),
                detail: format!("expected {} entries, found {}", names.len(), steps.len()),
            });
        }
        let mut optim = Vec::with_capacity(names.len());
        for ((name, _, v), step) in names.iter().zip(steps) {
            optim.push(Adam {
                m: r.real(&format!("adam.{name}.m"), &[v.len()])?,
                v: r.real(&format!("adam.{name}.v"), &[v.len()])?,
                step,
            });
        }
        drop(names);
        Ok(Self {
            model,
            optim,
            iteration: r.meta_usize("iteration")?,
            config,
        })
    }

    /// Loads and checks the compressed feature dimension.
    pub fn load_expecting(dir: impl AsRef<Path>, feature_dim: usize) -> Result<Self> {
        let ck = Self::load(dir)?;
        if ck.model.feature_dim() != feature_dim {
            return Err(Error::DimensionMismatch {
                field: "checkpoint feature dimension".into(),
                expected: feature_dim,
                found: ck.model.feature_dim(),
            });
        }
        Ok(ck)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub frame: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<LogRecord>,
}

impl TrainHistory {
    pub fn psnr_points(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| Some((r.iter, r.psnr?))).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Line-delimited JSON log of every iteration.
    pub log_path: Option<PathBuf>,
    /// Where to dump the model when training diverges.
    pub diagnostic_path: Option<PathBuf>,
}

/// Ground truth of one frame converted to the working scalar.
pub struct FrameTarget<T> {
    pub color: Vec<T>,
    pub depth: Vec<T>,
    pub feature: Vec<T>,
    pub labels: Vec<u16>,
    pub t: T,
    pub camera: Camera<T>,
}

impl<T: Real> FrameTarget<T> {
    pub fn new(frame: &FrameSample, camera: &Camera<f64>) -> Self {
        Self {
            color: frame.color.iter().map(|&c| T::lit(c as f64 / 255.0)).collect(),
            depth: frame.depth.iter().map(|&z| T::lit(z as f64)).collect(),
            feature: frame.features.iter().map(|&f| T::lit(f as f64)).collect(),
            labels: frame.labels.clone(),
            t: T::lit(frame.timestamp),
            camera: camera.cast(),
        }
    }

    pub fn as_loss_target(&self) -> LossTarget<'_, T> {
        LossTarget {
            color: &self.color,
            depth: &self.depth,
            feature: &self.feature,
            labels: if self.labels.iter().any(|&l| l != 0) {
                Some(&self.labels)
            } else {
                None
            },
        }
    }
}

/// Seeds the model from the first training frame.
pub fn init_model<T: Real>(dataset: &Dataset, config: &TrainConfig) -> Result<SceneModel<T>> {
    let (train, _) = dataset.split();
    let &first = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("no training frames".into()))?;
    let frame = &dataset.frames[first];
    if !frame.has_features() {
        return Err(Error::invalid(format!(
            "frame {} has no compressed features; run codec-train first",
            frame.name
        )));
    }
    let camera: Camera<T> = dataset.camera_for(first).cast();
    let cloud = init_from_depth(frame, &camera, config.init_stride, config.sh_degree)?;
    let mut model = SceneModel::new(cloud, config.basis, config.seed);
    model.use_tracker = config.use_tracker;
    Ok(model)
}

/// Trains from scratch on the dataset's training split.
pub fn train_scene<T: Real>(
    dataset: &Dataset,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(Checkpoint<T>, TrainHistory)> {
    config.validate()?;
    if dataset.frames.is_empty() {
        return Err(Error::EmptyDataset("dataset has no frames".into()));
    }
    let model = init_model(dataset, config)?;
    let mut ck = Checkpoint::fresh(model, config.clone());
    let history = resume_training(dataset, &mut ck, config.iterations, options)?;
    Ok((ck, history))
}

/// Runs `iterations` more steps on an existing checkpoint.
pub fn resume_training<T: Real>(
    dataset: &Dataset,
    ck: &mut Checkpoint<T>,
    iterations: usize,
    options: &TrainOptions,
) -> Result<TrainHistory> {
    let config = ck.config.clone();
    let (train, test) = dataset.split();
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training frames".into()));
    }
    let targets: Vec<Option<FrameTarget<T>>> = (0..dataset.frames.len())
        .map(|i| {
            let f = &dataset.frames[i];
            if !f.has_features() {
                return Err(Error::invalid(format!("frame {} has no compressed features", f.name)));
            }
            Ok(Some(FrameTarget::new(f, dataset.camera_for(i))))
        })
        .collect::<Result<_>>()?;
    let mut log = match &options.log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    // the sampler stream depends only on the seed and the absolute iteration
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..ck.iteration {
        rng.random_range(0..train.len());
    }
    let adam = config.adam();
    let groups: Vec<ParamGroup> = ck.model.tensors().iter().map(|t| t.1).collect();
    let mut history = TrainHistory::default();
    for _ in 0..iterations {
        let iter = ck.iteration;
        let frame = train[rng.random_range(0..train.len())];
        let target = targets[frame].as_ref().expect("targets built for every frame");
        let (render, tape) = ck.model.render_with_tape(&target.camera, target.t)?;
        let (loss, upstream) = total_loss(&render, &target.as_loss_target(), &config.weights)?;
        if !loss.total.is_finite() {
            if let Some(p) = &options.diagnostic_path {
                ck.save(p)?;
            }
            return Err(Error::Divergence {
                iteration: iter,
                detail: format!("loss {:?}", loss),
            });
        }
        let mut grads = ck.model.zeros_like();
        ck.model.backward(&tape, &upstream, &mut grads);
        let lr = config.rate_at(iter);
        {
            let gs: Vec<&[T]> = grads.tensors().into_iter().map(|t| t.2).collect();
            for (((p, g), opt), group) in ck
                .model
                .tensors_mut()
                .into_iter()
                .zip(gs)
                .zip(&mut ck.optim)
                .zip(&groups)
            {
                opt.update(p, g, lr * config.rates.get(*group), &adam);
            }
        }
        ck.model.project_constraints()?;
        ck.iteration += 1;
        let psnr_value = if !test.is_empty() && config.eval_every > 0 && ck.iteration.is_multiple_of(config.eval_every) {
            let k = test[(ck.iteration / config.eval_every - 1) % test.len()];
            let t = targets[k].as_ref().unwrap();
            let r = ck.model.render(&t.camera, t.t)?;
            Some(psnr(&r.color, &t.color))
        } else {
            None
        };
        let record = LogRecord {
            iter,
            frame,
            loss,
            psnr: psnr_value,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(options.log_path.as_ref().unwrap(), e))?;
        }
        history.records.push(record);
    }
    if let Some(mut w) = log {
        w.flush()
            .map_err(|e| Error::io(options.log_path.as_ref().unwrap(), e))?;
    }
    Ok(history)
}

/// Mean PSNR of the model over the given frames.
pub fn mean_psnr<T: Real>(model: &SceneModel<T>, dataset: &Dataset, frames: &[usize]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("no frames to evaluate".into()));
    }
    let mut sum = 0.0;
    for &i in frames {
        let t: FrameTarget<T> = FrameTarget::new(&dataset.frames[i], dataset.camera_for(i));
        let r = model.render(&t.camera, t.t)?;
        sum += psnr(&r.color, &t.color);
    }
    Ok(sum / frames.len() as f64)
}
