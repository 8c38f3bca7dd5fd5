//! Everything a render or query needs, loaded once from disk.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use semsplat::camera::Camera;
use semsplat::dataio::image::{heatmap_rgb, mask_png, rgb_png};
use semsplat::dataio::manifest::SceneManifest;
use semsplat::pipeline::{query_frame, Prompt};
use semsplat::query::QueryResult;
use semsplat::{Checkpoint, FeatureCodec, QueryLexicon, SceneModel};

pub struct SceneAssets {
    pub manifest: SceneManifest,
    pub model: SceneModel<f32>,
    pub codec: FeatureCodec<f64>,
    pub lexicon: QueryLexicon,
    /// Normalized frame timestamps, in manifest order.
    pub timestamps: Vec<f64>,
}

/// Where to find the pieces; lexicon and codec default to the manifest's.
#[derive(Clone, Debug)]
pub struct AssetPaths {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub codec: Option<PathBuf>,
}

impl SceneAssets {
    pub fn load(paths: &AssetPaths) -> Result<Self> {
        let manifest = SceneManifest::read(&paths.manifest)?;
        let root = paths.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let from_manifest = |rel: &Option<String>, what: &str| -> Result<PathBuf> {
            rel.as_ref()
                .map(|r| root.join(r))
                .with_context(|| format!("manifest names no {what}; pass --{what}"))
        };
        let lexicon_path = match &paths.lexicon {
            Some(p) => p.clone(),
            None => from_manifest(&manifest.lexicon, "lexicon")?,
        };
        let codec_path = match &paths.codec {
            Some(p) => p.clone(),
            None => from_manifest(&manifest.codec, "codec")?,
        };
        let lexicon = QueryLexicon::load(&lexicon_path)?;
        let codec = FeatureCodec::<f64>::load(&codec_path)
            .with_context(|| format!("loading codec from {}", codec_path.display()))?;
        let ck = Checkpoint::<f32>::load_expecting(&paths.checkpoint, manifest.feature_dim)
            .with_context(|| format!("loading checkpoint from {}", paths.checkpoint.display()))?;
        if codec.compressed_dim() != manifest.feature_dim {
            anyhow::bail!(
                "codec compresses to {} dimensions but the scene uses {}",
                codec.compressed_dim(),
                manifest.feature_dim
            );
        }
        if codec.full_dim() != lexicon.dim() {
            anyhow::bail!(
                "codec decodes to {} dimensions but lexicon embeddings have {}",
                codec.full_dim(),
                lexicon.dim()
            );
        }
        if manifest.cameras.is_empty() {
            anyhow::bail!("manifest lists no cameras");
        }
        let ts: Vec<f64> = manifest.frames.iter().map(|f| f.timestamp).collect();
        Ok(Self {
            timestamps: semsplat::dataio::manifest::normalize_timestamps(&ts),
            manifest,
            model: ck.model,
            codec,
            lexicon,
        })
    }

    /// Camera of the first frame, optionally resized.
    pub fn default_camera(&self, size: Option<(usize, usize)>) -> Camera<f64> {
        let idx = self.manifest.frames.first().map_or(0, |f| f.camera);
        let cam = self.manifest.cameras[idx].clone();
        match size {
            Some((w, h)) if (w, h) != (cam.width, cam.height) => cam.resized(w, h),
            _ => cam,
        }
    }

    pub fn render_png(&self, camera: &Camera<f64>, time: f64) -> Result<Vec<u8>> {
        let out = self.model.render(&camera.cast(), time as f32)?;
        Ok(rgb_png(camera.width, camera.height, &out.color_u8())?)
    }

    pub fn query(
        &self,
        camera: &Camera<f64>,
        time: f64,
        prompt: &Prompt,
        threshold: f64,
    ) -> semsplat::Result<QueryResult> {
        query_frame(
            &self.model,
            &self.codec,
            &self.lexicon,
            &camera.cast(),
            time as f32,
            prompt,
            threshold,
        )
    }
}

/// Mask and heatmap PNG bytes of a query.
pub fn query_images(q: &QueryResult) -> Result<(Vec<u8>, Vec<u8>)> {
    let mask = mask_png(q.width, q.height, &q.mask)?;
    let heat = rgb_png(q.width, q.height, &heatmap_rgb(&q.relevancy))?;
    Ok((mask, heat))
}
