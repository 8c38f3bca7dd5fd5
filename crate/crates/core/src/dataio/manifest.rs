use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::codec::FeatureCodec;
use crate::dataio::frame::FrameSample;
use crate::dataio::tensor::{read_tensor, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::query::QueryLexicon;

pub const MANIFEST_VERSION: u32 = 1;

fn default_holdout() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub name: String,
    /// Seconds; normalized to [0, 1] at load.
    pub timestamp: f64,
    #[serde(default)]
    pub camera: usize,
    pub color: String,
    pub depth: String,
    #[serde(default)]
    pub labels: Option<String>,
    /// Compressed d-dimensional feature map, written by codec training.
    #[serde(default)]
    pub features: Option<String>,
    /// Full-dimension vision-language features, input to codec training.
    #[serde(default)]
    pub full_features: Option<String>,
}

/// Scene description; all paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub name: String,
    pub feature_dim: usize,
    pub full_feature_dim: usize,
    pub cameras: Vec<Camera<f64>>,
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub lexicon: Option<String>,
    #[serde(default)]
    pub codec: Option<String>,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default = "default_holdout")]
    pub holdout_every: usize,
}

impl SceneManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                detail: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Held-out frames are every `holdout_every`-th index starting at 0.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        split_indices(self.frames.len(), self.holdout_every)
    }
}

pub fn split_indices(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 || every < 2 {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| i % every != 0)
}

pub fn normalize_timestamps(ts: &[f64]) -> Vec<f64> {
    let lo = ts.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; ts.len()];
    }
    ts.iter().map(|t| (t - lo) / (hi - lo)).collect()
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub frames: Vec<FrameSample>,
    pub cameras: Vec<Camera<f64>>,
    pub lexicon: Option<QueryLexicon>,
    pub codec: Option<FeatureCodec<f64>>,
}

impl Dataset {
    pub fn camera_for(&self, frame: usize) -> &Camera<f64> {
        &self.cameras[self.frames[frame].camera]
    }

    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        self.manifest.split()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_full_features(&self, frame: usize) -> Result<Vec<f32>> {
        let entry = &self.manifest.frames[frame];
        let rel = entry
            .full_features
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("frame {} has no full feature map", entry.name)))?;
        let f = &self.frames[frame];
        let t = read_tensor(self.resolve(rel))?;
        expect_dims(
            &t,
            &[f.height, f.width, self.manifest.full_feature_dim],
            &entry.name,
            "full_features",
        )?;
        match t.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::invalid(format!(
                "frame {} full features must be f32",
                entry.name
            ))),
        }
    }
}

fn expect_dims(t: &Tensor, dims: &[usize], frame: &str, what: &str) -> Result<()> {
    if t.dims != dims {
        return Err(Error::ShapeMismatch {
            context: format!("frame {frame}"),
            detail: format!("{what} has shape {:?}, expected {dims:?}", t.dims),
        });
    }
    Ok(())
}

fn load_frame(root: &Path, m: &SceneManifest, entry: &FrameEntry) -> Result<FrameSample> {
    let read = |rel: &str| -> Result<Tensor> {
        let p = root.join(rel);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        read_tensor(p)
    };
    let wrong = |what: &str| Error::ShapeMismatch {
        context: format!("frame {}", entry.name),
        detail: format!("{what} has the wrong dtype"),
    };
    let color = read(&entry.color)?;
    if color.dims.len() != 3 || color.dims[2] != 3 {
        return Err(Error::ShapeMismatch {
            context: format!("frame {}", entry.name),
            detail: format!("color has shape {:?}, expected [H, W, 3]", color.dims),
        });
    }
    let (h, w) = (color.dims[0], color.dims[1]);
    let color = match color.data {
        TensorData::U8(v) => v,
        _ => return Err(wrong("color")),
    };
    let depth = read(&entry.depth)?;
    expect_dims(&depth, &[h, w], &entry.name, "depth")?;
    let depth = match depth.data {
        TensorData::F32(v) => v,
        _ => return Err(wrong("depth")),
    };
    let labels = match &entry.labels {
        Some(rel) => {
            let t = read(rel)?;
            expect_dims(&t, &[h, w], &entry.name, "labels")?;
            match t.data {
                TensorData::U16(v) => v,
                _ => return Err(wrong("labels")),
            }
        }
        None => vec![0; h * w],
    };
    let features = match &entry.features {
        Some(rel) => {
            let t = read(rel)?;
            if t.dims.len() == 3 && t.dims[..2] == [h, w] && t.dims[2] != m.feature_dim {
                return Err(Error::DimensionMismatch {
                    field: format!("frame {} features", entry.name),
                    expected: m.feature_dim,
                    found: t.dims[2],
                });
            }
            expect_dims(&t, &[h, w, m.feature_dim], &entry.name, "features")?;
            match t.data {
                TensorData::F32(v) => v,
                _ => return Err(wrong("features")),
            }
        }
        None => Vec::new(),
    };
    let cam = m.cameras.get(entry.camera).ok_or_else(|| {
        Error::invalid(format!(
            "frame {} references missing camera {}",
            entry.name, entry.camera
        ))
    })?;
    let frame = FrameSample {
        name: entry.name.clone(),
        width: w,
        height: h,
        color,
        depth,
        feature_dim: m.feature_dim,
        features,
        labels,
        timestamp: 0.0,
        camera: entry.camera,
    };
    frame.check_camera(cam.width, cam.height)?;
    Ok(frame)
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = SceneManifest::read(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.frames.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} lists no frames",
            manifest_path.display()
        )));
    }
    for cam in &manifest.cameras {
        cam.validate()?;
    }
    let mut frames = manifest
        .frames
        .par_iter()
        .map(|e| load_frame(&root, &manifest, e))
        .collect::<Result<Vec<_>>>()?;
    let ts: Vec<f64> = manifest.frames.iter().map(|e| e.timestamp).collect();
    for (f, t) in frames.iter_mut().zip(normalize_timestamps(&ts)) {
        f.timestamp = t;
        f.validate()?;
    }
    let lexicon = match &manifest.lexicon {
        Some(rel) => Some(QueryLexicon::load(root.join(rel))?),
        None => None,
    };
    let codec = match &manifest.codec {
        Some(rel) => {
            let c = FeatureCodec::<f64>::load(root.join(rel))?;
            if c.compressed_dim() != manifest.feature_dim {
                return Err(Error::DimensionMismatch {
                    field: "codec compressed dimension".into(),
                    expected: manifest.feature_dim,
                    found: c.compressed_dim(),
                });
            }
            if c.full_dim() != manifest.full_feature_dim {
                return Err(Error::DimensionMismatch {
                    field: "codec full dimension".into(),
                    expected: manifest.full_feature_dim,
                    found: c.full_dim(),
                });
            }
            Some(c)
        }
        None => None,
    };
    let cameras = manifest.cameras.clone();
    Ok(Dataset {
        root,
        manifest,
        frames,
        cameras,
        lexicon,
        codec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::tensor::write_tensor;

    fn write_frame(dir: &Path, name: &str, w: usize, h: usize, depth_h: usize) -> FrameEntry {
        let color = Tensor::new(vec![h, w, 3], TensorData::U8(vec![7; h * w * 3])).unwrap();
        let depth = Tensor::new(vec![depth_h, w], TensorData::F32(vec![1.0; depth_h * w])).unwrap();
        write_tensor(dir.join(format!("{name}_c.stpg")), &color).unwrap();
        write_tensor(dir.join(format!("{name}_d.stpg")), &depth).unwrap();
        FrameEntry {
            name: name.into(),
            timestamp: 0.0,
            camera: 0,
            color: format!("{name}_c.stpg"),
            depth: format!("{name}_d.stpg"),
            labels: None,
            features: None,
            full_features: None,
        }
    }

    fn manifest(frames: Vec<FrameEntry>) -> SceneManifest {
        SceneManifest {
            version: MANIFEST_VERSION,
            name: "t".into(),
            feature_dim: 3,
            full_feature_dim: 16,
            cameras: vec![Camera::identity(8, 4, 10.0)],
            frames,
            lexicon: None,
            codec: None,
            class_names: vec![],
            holdout_every: 8,
        }
    }

    #[test]
    fn timestamps_normalize_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = write_frame(dir.path(), "a", 8, 4, 4);
        let mut b = write_frame(dir.path(), "b", 8, 4, 4);
        a.timestamp = 3.0;
        b.timestamp = 5.0;
        let path = dir.path().join("scene.json");
        manifest(vec![a, b]).write(&path).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.frames[0].timestamp, 0.0);
        assert_eq!(ds.frames[1].timestamp, 1.0);
        assert_eq!(normalize_timestamps(&[4.0]), vec![0.0]);
    }

    #[test]
    fn depth_shape_mismatch_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_frame(dir.path(), "frame_bad", 8, 4, 3);
        let path = dir.path().join("scene.json");
        manifest(vec![a]).write(&path).unwrap();
        let err = load_dataset(&path).err().unwrap();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(err.to_string().contains("frame_bad"), "{err}");
    }

    #[test]
    fn empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        manifest(vec![]).write(&path).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::EmptyDataset(_))));

        let mut a = write_frame(dir.path(), "a", 8, 4, 4);
        a.depth = "nope.stpg".into();
        manifest(vec![a]).write(&path).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::MissingFile(_))));
    }

    #[test]
    fn holdout_split_every_eighth() {
        let (train, test) = split_indices(60, 8);
        assert_eq!(test, vec![0, 8, 16, 24, 32, 40, 48, 56]);
        assert_eq!(train.len(), 52);
        assert_eq!(split_indices(1, 8), (vec![0], vec![]));
    }
}
