//! Canonical cloud plus deformation field, rendered at a camera and time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deformation::{deform_backward, deform_feature, deform_gaussian, DeformationField, DeformedGaussians};
use crate::error::Result;
use crate::gaussian::GaussianCloud;
use crate::linalg::{normalize_backward, sub3, Vec3};
use crate::rasterizer::{
    project_backward, project_gaussian, rasterize_backward_taped, rasterize_forward, rasterize_forward_taped,
    Background, RasterTape, RenderGrads, RenderOutput, SplatSet,
};
use crate::scalar::{sigmoid, Real};
use crate::sh;

/// Optimizer grouping of parameter tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Means,
    Rotations,
    Scales,
    Opacity,
    Sh,
    Features,
    Deformation,
    Tracker,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel<T> {
    pub cloud: GaussianCloud<T>,
    pub field: DeformationField<T>,
    /// Whether the semantic tracker deforms features (off in ablations).
    pub use_tracker: bool,
    pub background: Background<T>,
}

/// Everything the backward pass needs from one forward render.
pub struct RenderTape<T> {
    pub t: T,
    pub camera: Camera<T>,
    pub deformed: DeformedGaussians<T>,
    pub set: SplatSet<T>,
    /// Unclamped SH color and unnormalized view vector, per splat.
    raw_rgb: Vec<[T; 3]>,
    view: Vec<Vec3<T>>,
    raster: RasterTape<T>,
}

impl<T: Real> SceneModel<T> {
    pub fn new(cloud: GaussianCloud<T>, basis: usize, seed: u64) -> Self {
        let field = DeformationField::identity(cloud.len(), basis, cloud.feature_dim, seed);
        let background = Background::black(cloud.feature_dim);
        Self {
            cloud,
            field,
            use_tracker: true,
            background,
        }
    }

    /// Gradient accumulator with the same layout.
    pub fn zeros_like(&self) -> Self {
        let mut cloud = GaussianCloud::zeros(self.cloud.len(), self.cloud.sh_degree, self.cloud.feature_dim);
        cloud.rotations.iter_mut().for_each(|v| *v = T::zero());
        Self {
            cloud,
            field: self.field.zeros_like(),
            use_tracker: self.use_tracker,
            background: self.background.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.cloud.feature_dim
    }

    /// Deformed attributes at time `t`.
    pub fn deform(&self, t: T) -> Result<DeformedGaussians<T>> {
        let mut deformed = deform_gaussian(&self.cloud, &self.field, t)?;
        if self.use_tracker && self.cloud.feature_dim > 0 {
            deformed.features = deform_feature(&self.cloud, &self.field.tracker, &self.field.gate, t);
        }
        Ok(deformed)
    }

    /// Projects deformed Gaussians into a splat set.
    pub fn splat(
        &self,
        deformed: &DeformedGaussians<T>,
        camera: &Camera<T>,
    ) -> (SplatSet<T>, Vec<[T; 3]>, Vec<Vec3<T>>) {
        let cloud = &self.cloud;
        let degree = cloud.sh_degree;
        let cam_pos = camera.position();
        let d = cloud.feature_dim;
        let projected: Vec<_> = (0..cloud.len())
            .into_par_iter()
            .map(|i| {
                let mean: Vec3<T> = std::array::from_fn(|a| deformed.means[3 * i + a]);
                let q: [T; 4] = std::array::from_fn(|a| deformed.rotations[4 * i + a]);
                let ls: Vec3<T> = std::array::from_fn(|a| deformed.log_scales[3 * i + a]);
                let view = sub3(&mean, &cam_pos);
                let dir = unit(&view);
                let raw = sh::eval_raw(cloud.sh(i), degree, &dir);
                let rgb = raw.map(|v| v.max(T::zero()).min(T::one()));
                let alpha = sigmoid(cloud.opacity_logits[i]);
                project_gaussian(&mean, &q, &ls, alpha, rgb, i, camera).map(|s| (s, raw, view))
            })
            .collect();
        let mut set = SplatSet::new(d);
        let mut raws = Vec::new();
        let mut views = Vec::new();
        for (s, raw, view) in projected.into_iter().flatten() {
            let i = s.source_index;
            set.push(s, &deformed.features[d * i..d * (i + 1)]);
            raws.push(raw);
            views.push(view);
        }
        (set, raws, views)
    }

    pub fn render(&self, camera: &Camera<T>, t: T) -> Result<RenderOutput<T>> {
        Ok(self.render_with_tape(camera, t)?.0)
    }

    /// Static render of the canonical Gaussians with no deformation applied.
    pub fn render_canonical(&self, camera: &Camera<T>) -> Result<RenderOutput<T>> {
        let mut cloud = self.cloud.clone();
        cloud.normalize_rotations()?;
        let canonical = DeformedGaussians {
            means: cloud.means,
            rotations: cloud.rotations,
            log_scales: cloud.log_scales,
            features: cloud.features,
        };
        let (set, _, _) = self.splat(&canonical, camera);
        Ok(rasterize_forward(&set, camera.width, camera.height, &self.background))
    }

    pub fn render_with_tape(&self, camera: &Camera<T>, t: T) -> Result<(RenderOutput<T>, RenderTape<T>)> {
        let deformed = self.deform(t)?;
        let (set, raw_rgb, view) = self.splat(&deformed, camera);
        let (out, raster) = rasterize_forward_taped(&set, camera.width, camera.height, &self.background);
        Ok((
            out,
            RenderTape {
                t,
                camera: camera.clone(),
                deformed,
                set,
                raw_rgb,
                view,
                raster,
            },
        ))
    }

    /// Accumulates parameter gradients for the render in `tape` into `grads`.
    pub fn backward(&self, tape: &RenderTape<T>, upstream: &RenderGrads<T>, grads: &mut SceneModel<T>) {
        let cam = &tape.camera;
        let set = &tape.set;
        let sg = rasterize_backward_taped(set, &tape.raster, &self.background, upstream);
        let cloud = &self.cloud;
        let degree = cloud.sh_degree;
        let kc = sh::coeff_count(degree);
        let d = cloud.feature_dim;
        let n = cloud.len();
        let mut g_def = DeformedGaussians::zeros(n, d);

        // per-splat work is independent; each splat owns one source point
        let per_splat: Vec<_> = (0..set.len())
            .into_par_iter()
            .map(|k| {
                let s = &set.splats[k];
                let i = s.source_index;
                let def = &tape.deformed;
                let mean: Vec3<T> = std::array::from_fn(|a| def.means[3 * i + a]);
                let q: [T; 4] = std::array::from_fn(|a| def.rotations[4 * i + a]);
                let ls: Vec3<T> = std::array::from_fn(|a| def.log_scales[3 * i + a]);
                let mut pg = project_backward(&mean, &q, &ls, cam, sg.center[k], sg.conic[k], sg.view_depth[k]);
                let alpha = s.alpha_base;
                let g_logit = sg.alpha_base[k] * alpha * (T::one() - alpha);

                let raw = tape.raw_rgb[k];
                let g_raw: [T; 3] = std::array::from_fn(|c| {
                    if raw[c] < T::zero() || raw[c] > T::one() {
                        T::zero()
                    } else {
                        sg.rgb[k][c]
                    }
                });
                let view = tape.view[k];
                let dir = unit(&view);
                let y = sh::basis(degree, &dir);
                let mut g_sh = vec![T::zero(); 3 * kc];
                let mut g_dir = [T::zero(); 3];
                if g_raw.iter().any(|&g| g != T::zero()) {
                    let yg = sh::basis_grad(degree, &dir);
                    let coeffs = cloud.sh(i);
                    for c in 0..3 {
                        for j in 0..kc {
                            g_sh[c * kc + j] = g_raw[c] * y[j];
                            let w = g_raw[c] * coeffs[c * kc + j];
                            for a in 0..3 {
                                g_dir[a] += w * yg[j][a];
                            }
                        }
                    }
                }
                let g_view = normalize_backward(&view, &g_dir);
                for a in 0..3 {
                    pg.mean[a] += g_view[a];
                }
                (i, pg, g_logit, g_sh)
            })
            .collect();
        for (k, (i, pg, g_logit, g_sh)) in per_splat.into_iter().enumerate() {
            for a in 0..3 {
                g_def.means[3 * i + a] += pg.mean[a];
                g_def.log_scales[3 * i + a] += pg.log_scale[a];
            }
            for a in 0..4 {
                g_def.rotations[4 * i + a] += pg.rotation[a];
            }
            grads.cloud.opacity_logits[i] += g_logit;
            for (dst, v) in grads.cloud.sh_coeffs[3 * kc * i..3 * kc * (i + 1)].iter_mut().zip(g_sh) {
                *dst += v;
            }
            for c in 0..d {
                g_def.features[d * i + c] += sg.features[d * k + c];
            }
        }
        deform_backward(
            cloud,
            &self.field,
            tape.t,
            &g_def,
            self.use_tracker,
            &mut grads.cloud,
            &mut grads.field,
        );
    }

    /// Named parameter tensors with their optimizer group.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &[T])> {
        let c = &self.cloud;
        let f = &self.field;
        let tr = &f.tracker;
        let mut v: Vec<(String, ParamGroup, &[T])> = vec![
            ("means".into(), ParamGroup::Means, &c.means),
            ("rotations".into(), ParamGroup::Rotations, &c.rotations),
            ("log_scales".into(), ParamGroup::Scales, &c.log_scales),
            ("opacity_logits".into(), ParamGroup::Opacity, &c.opacity_logits),
            ("sh_coeffs".into(), ParamGroup::Sh, &c.sh_coeffs),
            ("features".into(), ParamGroup::Features, &c.features),
        ];
        for (name, bank) in [
            ("mean", &f.mean),
            ("rotation", &f.rotation),
            ("scale", &f.scale),
            ("gate", &f.gate),
        ] {
            v.push((format!("fdm.{name}.weights"), ParamGroup::Deformation, &bank.weights));
            v.push((format!("fdm.{name}.centers"), ParamGroup::Deformation, &bank.centers));
            v.push((format!("fdm.{name}.widths"), ParamGroup::Deformation, &bank.widths));
        }
        v.push(("tracker.conv1_w".into(), ParamGroup::Tracker, &tr.conv1_w));
        v.push(("tracker.conv1_b".into(), ParamGroup::Tracker, &tr.conv1_b));
        v.push(("tracker.conv2_w".into(), ParamGroup::Tracker, &tr.conv2_w));
        v.push(("tracker.conv2_b".into(), ParamGroup::Tracker, &tr.conv2_b));
        v.push(("tracker.head_w".into(), ParamGroup::Tracker, &tr.head_w));
        v.push(("tracker.head_b".into(), ParamGroup::Tracker, &tr.head_b));
        v
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let c = &mut self.cloud;
        let f = &mut self.field;
        let mut v: Vec<&mut [T]> = vec![
            &mut c.means,
            &mut c.rotations,
            &mut c.log_scales,
            &mut c.opacity_logits,
            &mut c.sh_coeffs,
            &mut c.features,
        ];
        for bank in [&mut f.mean, &mut f.rotation, &mut f.scale, &mut f.gate] {
            v.push(&mut bank.weights);
            v.push(&mut bank.centers);
            v.push(&mut bank.widths);
        }
        let tr = &mut f.tracker;
        v.push(&mut tr.conv1_w);
        v.push(&mut tr.conv1_b);
        v.push(&mut tr.conv2_w);
        v.push(&mut tr.conv2_b);
        v.push(&mut tr.head_w);
        v.push(&mut tr.head_b);
        v
    }

    /// Post-step projection: σ ≥ 1e-6 on basis widths and unit quaternions.
    pub fn project_constraints(&mut self) -> Result<()> {
        self.field.clamp_widths();
        self.cloud.normalize_rotations()
    }
}

fn unit<T: Real>(v: &Vec3<T>) -> Vec3<T> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > T::zero() {
        v.map(|x| x / n)
    } else {
        *v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> SceneModel<f64> {
        let mut cloud = GaussianCloud::<f64>::zeros(2, 1, 3);
        cloud.means = vec![0.0, 0.0, 3.0, 0.3, -0.2, 4.0];
        cloud.log_scales = vec![-1.5; 6];
        cloud.opacity_logits = vec![1.0, 0.5];
        cloud.features = vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        SceneModel::new(cloud, 4, 3)
    }

    #[test]
    fn tensor_lists_align() {
        let mut m = tiny_model();
        let lens: Vec<usize> = m.tensors().iter().map(|t| t.2.len()).collect();
        let lens_mut: Vec<usize> = m.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(lens, lens_mut);
        assert_eq!(m.tensors().len(), 24);
    }

    #[test]
    fn identity_field_renders_static() {
        let m = tiny_model();
        let cam = Camera::identity(32, 32, 30.0);
        let a = m.render(&cam, 0.0).unwrap();
        let b = m.render(&cam, 0.77).unwrap();
        assert_eq!(a, b);
    }
}
