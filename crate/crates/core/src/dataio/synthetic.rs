//! Analytic deforming scene used as a fixture: soft Gaussian blobs drifting
//! along sinusoidal paths in front of a textured backdrop, with exact color,
//! depth, labels and full-dimension class embeddings.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataio::manifest::{FrameEntry, SceneManifest, MANIFEST_VERSION};
use crate::dataio::tensor::{write_tensor, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::query::{QueryLexicon, CANONICAL_PHRASES};

pub const CLASS_NAMES: [&str; 12] = [
    "tissue",
    "liver",
    "grasper",
    "fat",
    "gallbladder",
    "abdominal wall",
    "instrument shaft",
    "kidney",
    "connective tissue",
    "blood",
    "clasper",
    "wrist",
];

const BACKDROP_DEPTH: f64 = 5.0;
const BLOB_PEAK_OPACITY: f64 = 0.97;
/// A blob occupies a pixel where its falloff is at least one half.
pub const OCCUPANCY_LEVEL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub objects: usize,
    pub classes: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub full_feature_dim: usize,
    pub compressed_dim: usize,
    pub feature_noise: f64,
    pub fps: f64,
}

impl SyntheticSpec {
    /// 3 classes, 60 frames, 128×128.
    pub fn standard(seed: u64) -> Self {
        Self {
            objects: 2,
            classes: 3,
            frames: 60,
            width: 128,
            height: 128,
            seed,
            full_feature_dim: 16,
            compressed_dim: 3,
            feature_noise: 0.02,
            fps: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid(format!(
                "resolution {}x{} below 16x16",
                self.width, self.height
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid("synthetic scenes need at least 2 classes"));
        }
        if self.classes > CLASS_NAMES.len() {
            return Err(Error::invalid(format!("at most {} classes", CLASS_NAMES.len())));
        }
        if self.frames < 2 {
            return Err(Error::invalid("synthetic scenes need at least 2 frames"));
        }
        if self.classes + CANONICAL_PHRASES.len() > self.full_feature_dim {
            return Err(Error::invalid(
                "full feature dimension must hold every class axis plus the canonical axes",
            ));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub class: usize,
    pub base: [f64; 3],
    pub amplitude: [f64; 3],
    pub phase: [f64; 3],
    pub sigma: f64,
    pub color: [f64; 3],
}

impl Blob {
    /// Camera-frame center at normalized time `u`.
    pub fn center(&self, u: f64) -> [f64; 3] {
        let mut c = self.base;
        for (a, v) in c.iter_mut().enumerate() {
            *v += self.amplitude[a] * (2.0 * PI * u + self.phase[a]).sin();
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelSample {
    pub color: [f64; 3],
    pub depth: f64,
    /// Class index (0 is the backdrop).
    pub class: usize,
}

/// Ray/blob closest approach: (distance along ray, Mahalanobis², camera z).
fn closest_approach(dir: &[f64; 3], c: &[f64; 3], sigma: f64) -> (f64, f64, f64) {
    let s = dir[0] * c[0] + dir[1] * c[1] + dir[2] * c[2];
    let c2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
    ((s), ((c2 - s * s).max(0.0)) / (sigma * sigma), s * dir[2])
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub camera: Camera<f64>,
    pub blobs: Vec<Blob>,
    pub class_colors: Vec<[f64; 3]>,
    /// Orthonormal class axes followed by the canonical axes, each D_f long.
    pub class_axes: Vec<Vec<f64>>,
    pub canonical_axes: Vec<Vec<f64>>,
}

fn gram_schmidt(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

impl SyntheticScene {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let focal = 1.1 * spec.width as f64;
        let camera = Camera::identity(spec.width, spec.height, focal);

        let mut class_colors = vec![
            [0.80, 0.45, 0.42],
            [0.55, 0.16, 0.12],
            [0.72, 0.74, 0.78],
            [0.92, 0.82, 0.45],
        ];
        while class_colors.len() < spec.classes {
            class_colors.push([
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
            ]);
        }
        class_colors.truncate(spec.classes);

        let blobs = (0..spec.objects)
            .map(|k| {
                let class = 1 + k % (spec.classes - 1);
                let lane = (k as f64 + 0.5) / spec.objects as f64;
                let base = [
                    -0.55 + 1.1 * lane + rng.random_range(-0.08..0.08),
                    rng.random_range(-0.3..0.3),
                    3.0 + rng.random_range(-0.3..0.3),
                ];
                let amplitude = [
                    rng.random_range(0.12..0.22),
                    rng.random_range(0.08..0.16),
                    rng.random_range(0.0..0.1),
                ];
                let phase = [
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                ];
                Blob {
                    class,
                    base,
                    amplitude,
                    phase,
                    sigma: rng.random_range(0.28..0.36),
                    color: class_colors[class],
                }
            })
            .collect();

        let axes = gram_schmidt(&mut rng, spec.classes + CANONICAL_PHRASES.len(), spec.full_feature_dim);
        let class_axes = axes[..spec.classes].to_vec();
        let mut common = vec![0.0; spec.full_feature_dim];
        for a in &class_axes {
            common.iter_mut().zip(a).for_each(|(c, v)| *c += v);
        }
        let cn = common.iter().map(|x| x * x).sum::<f64>().sqrt();
        // canonical phrases sit close to the shared class direction, like
        // generic words do in a real embedding space
        let canonical_axes = axes[spec.classes..]
            .iter()
            .map(|u| common.iter().zip(u).map(|(c, v)| 0.95 * c / cn + 0.312 * v).collect())
            .collect();

        Ok(Self {
            spec,
            camera,
            blobs,
            class_colors,
            class_axes,
            canonical_axes,
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.spec.classes].iter().map(|s| s.to_string()).collect()
    }

    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 / (self.spec.frames - 1) as f64
    }

    fn backdrop_color(&self, x: f64, y: f64) -> [f64; 3] {
        let base = self.class_colors[0];
        let tex = 0.85 + 0.15 * (3.1 * x + 1.7 * y).sin() * (2.3 * y - x).cos();
        base.map(|c| c * tex)
    }

    pub fn ray(&self, px: usize, py: usize) -> [f64; 3] {
        let cam = &self.camera;
        let d = [
            (px as f64 + 0.5 - cam.cx) / cam.fx,
            (py as f64 + 0.5 - cam.cy) / cam.fy,
            1.0,
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + 1.0).sqrt();
        d.map(|v| v / n)
    }

    /// Exact soft composite of the blobs over the backdrop at one pixel.
    pub fn sample(&self, px: usize, py: usize, u: f64) -> PixelSample {
        let dir = self.ray(px, py);
        let mut hits: Vec<(f64, f64, f64, &Blob)> = self
            .blobs
            .iter()
            .map(|b| {
                let (s, m2, z) = closest_approach(&dir, &b.center(u), b.sigma);
                (s, m2, z, b)
            })
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut trans = 1.0;
        let mut class = 0;
        for &(_, m2, z, blob) in &hits {
            let falloff = (-0.5 * m2).exp();
            if class == 0 && falloff >= OCCUPANCY_LEVEL {
                class = blob.class;
            }
            let a = BLOB_PEAK_OPACITY * falloff;
            let shade = 0.8 + 0.2 * falloff;
            for ch in 0..3 {
                color[ch] += a * trans * blob.color[ch] * shade;
            }
            depth += a * trans * z;
            trans *= 1.0 - a;
        }
        let t_bg = BACKDROP_DEPTH / dir[2];
        let bg = self.backdrop_color(dir[0] * t_bg, dir[1] * t_bg);
        for ch in 0..3 {
            color[ch] += trans * bg[ch];
        }
        depth += trans * BACKDROP_DEPTH;
        PixelSample { color, depth, class }
    }

    /// Unit embedding for one pixel: class axis plus seeded noise.
    fn embedding(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut v: Vec<f64> = self.class_axes[class]
            .iter()
            .map(|&a| a + self.spec.feature_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v.into_iter().map(|x| x as f32).collect()
    }

    pub fn lexicon(&self) -> QueryLexicon {
        let prompts: Vec<_> = self
            .class_names()
            .into_iter()
            .zip(&self.class_axes)
            .map(|(n, a)| (n, a.clone()))
            .collect();
        let canonical: Vec<_> = CANONICAL_PHRASES
            .iter()
            .zip(&self.canonical_axes)
            .map(|(p, a)| (p.to_string(), a.clone()))
            .collect();
        QueryLexicon::new(canonical, prompts).expect("synthetic lexicon is complete")
    }

    /// Color (u8), depth, labels and full features for one frame.
    pub fn render_frame(&self, frame: usize) -> (Vec<u8>, Vec<f32>, Vec<u16>, Vec<f32>) {
        let (w, h) = (self.spec.width, self.spec.height);
        let u = self.time(frame);
        let rows: Vec<_> = (0..h)
            .into_par_iter()
            .map(|py| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.spec.seed ^ ((frame as u64) << 32) ^ (py as u64).wrapping_mul(0x9E37_79B9),
                );
                let mut color = Vec::with_capacity(w * 3);
                let mut depth = Vec::with_capacity(w);
                let mut labels = Vec::with_capacity(w);
                let mut feats = Vec::with_capacity(w * self.spec.full_feature_dim);
                for px in 0..w {
                    let s = self.sample(px, py, u);
                    color.extend(s.color.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
                    depth.push(s.depth as f32);
                    labels.push(s.class as u16 + 1);
                    feats.extend(self.embedding(s.class, &mut rng));
                }
                (color, depth, labels, feats)
            })
            .collect();
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (c, d, l, f) in rows {
            out.0.extend(c);
            out.1.extend(d);
            out.2.extend(l);
            out.3.extend(f);
        }
        out
    }
}

/// Writes the scene to `out_dir` and returns its manifest (also saved as
/// `scene.json`). No codec or compressed features yet.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<SceneManifest> {
    let out = out_dir.as_ref();
    let scene = SyntheticScene::new(spec.clone())?;
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let (w, h, df) = (spec.width, spec.height, spec.full_feature_dim);

    let entries = (0..spec.frames)
        .into_par_iter()
        .map(|i| -> Result<FrameEntry> {
            let (color, depth, labels, feats) = scene.render_frame(i);
            let name = format!("frame_{i:03}");
            let rel = |kind: &str| format!("frames/{name}_{kind}.stpg");
            write_tensor(
                out.join(rel("color")),
                &Tensor::new(vec![h, w, 3], TensorData::U8(color))?,
            )?;
            write_tensor(
                out.join(rel("depth")),
                &Tensor::new(vec![h, w], TensorData::F32(depth))?,
            )?;
            write_tensor(
                out.join(rel("labels")),
                &Tensor::new(vec![h, w], TensorData::U16(labels))?,
            )?;
            write_tensor(
                out.join(rel("full")),
                &Tensor::new(vec![h, w, df], TensorData::F32(feats))?,
            )?;
            Ok(FrameEntry {
                name: name.clone(),
                timestamp: i as f64 / spec.fps,
                camera: 0,
                color: rel("color"),
                depth: rel("depth"),
                labels: Some(rel("labels")),
                features: None,
                full_features: Some(rel("full")),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    scene.lexicon().save(out.join("lexicon.json"))?;
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        name: format!("synthetic-seed{}", spec.seed),
        feature_dim: spec.compressed_dim,
        full_feature_dim: df,
        cameras: vec![scene.camera.clone()],
        frames: entries,
        lexicon: Some("lexicon.json".into()),
        codec: None,
        class_names: scene.class_names(),
        holdout_every: 8,
    };
    manifest.write(out.join("scene.json"))?;
    let spec_path = out.join("synthetic.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec).expect("spec serializes"))
        .map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}
