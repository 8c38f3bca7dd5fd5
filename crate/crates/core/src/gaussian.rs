//! Canonical (time-zero) Gaussian scene.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataio::archive::{ArchiveReader, ArchiveWriter};
use crate::dataio::frame::FrameSample;
use crate::error::{Error, Result};
use crate::scalar::{logit, sigmoid, Real};
use crate::sh;

pub const INIT_OPACITY: f64 = 0.1;

/// Per-point attributes, flat row-major arrays with a shared leading dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T> {
    pub sh_degree: usize,
    pub feature_dim: usize,
    /// N×3
    pub means: Vec<T>,
    /// N×4, (w, x, y, z)
    pub rotations: Vec<T>,
    /// N×3, log of per-axis standard deviations
    pub log_scales: Vec<T>,
    /// N
    pub opacity_logits: Vec<T>,
    /// N×3×K with K = (L+1)², channel-major per point
    pub sh_coeffs: Vec<T>,
    /// N×d
    pub features: Vec<T>,
}

impl<T: Real> GaussianCloud<T> {
    pub fn zeros(n: usize, sh_degree: usize, feature_dim: usize) -> Self {
        let mut rotations = vec![T::zero(); n * 4];
        rotations.iter_mut().step_by(4).for_each(|w| *w = T::one());
        Self {
            sh_degree,
            feature_dim,
            means: vec![T::zero(); n * 3],
            rotations,
            log_scales: vec![T::zero(); n * 3],
            opacity_logits: vec![T::zero(); n],
            sh_coeffs: vec![T::zero(); n * 3 * sh::coeff_count(sh_degree)],
            features: vec![T::zero(); n * feature_dim],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coeffs_per_point(&self) -> usize {
        3 * sh::coeff_count(self.sh_degree)
    }

    pub fn mean(&self, i: usize) -> [T; 3] {
        [self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2]]
    }

    pub fn rotation(&self, i: usize) -> [T; 4] {
        let r = &self.rotations[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn log_scale(&self, i: usize) -> [T; 3] {
        [
            self.log_scales[3 * i],
            self.log_scales[3 * i + 1],
            self.log_scales[3 * i + 2],
        ]
    }

    pub fn sh(&self, i: usize) -> &[T] {
        let k = self.coeffs_per_point();
        &self.sh_coeffs[i * k..(i + 1) * k]
    }

    pub fn feature(&self, i: usize) -> &[T] {
        let d = self.feature_dim;
        &self.features[i * d..(i + 1) * d]
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    /// Projects every quaternion back onto the unit sphere.
    pub fn normalize_rotations(&mut self) -> Result<()> {
        for (i, q) in self.rotations.chunks_exact_mut(4).enumerate() {
            let n = q.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::lit(1e-12)) {
                return Err(Error::DegenerateRotation {
                    index: i,
                    norm: n.as_f64(),
                });
            }
            q.iter_mut().for_each(|v| *v /= n);
        }
        Ok(())
    }

    pub fn check_shapes(&self) -> Result<()> {
        sh::check_degree(self.sh_degree)?;
        let n = self.len();
        let check = |field: &str, len: usize, per: usize| {
            if len != n * per {
                Err(Error::DimensionMismatch {
                    field: field.into(),
                    expected: n * per,
                    found: len,
                })
            } else {
                Ok(())
            }
        };
        check("means", self.means.len(), 3)?;
        check("rotations", self.rotations.len(), 4)?;
        check("log_scales", self.log_scales.len(), 3)?;
        check("sh_coeffs", self.sh_coeffs.len(), self.coeffs_per_point())?;
        check("features", self.features.len(), self.feature_dim)
    }

    pub fn cast<S: Real>(&self) -> GaussianCloud<S> {
        let c = crate::scalar::cast_vec::<T, S>;
        GaussianCloud {
            sh_degree: self.sh_degree,
            feature_dim: self.feature_dim,
            means: c(&self.means),
            rotations: c(&self.rotations),
            log_scales: c(&self.log_scales),
            opacity_logits: c(&self.opacity_logits),
            sh_coeffs: c(&self.sh_coeffs),
            features: c(&self.features),
        }
    }

    pub fn write_into(&self, w: &mut ArchiveWriter, prefix: &str) -> Result<()> {
        let n = self.len();
        w.meta(&format!("{prefix}n"), n);
        w.meta(&format!("{prefix}d"), self.feature_dim);
        w.meta(&format!("{prefix}sh_degree"), self.sh_degree);
        w.put_real(&format!("{prefix}means"), vec![n, 3], &self.means)?;
        w.put_real(&format!("{prefix}rotations"), vec![n, 4], &self.rotations)?;
        w.put_real(&format!("{prefix}log_scales"), vec![n, 3], &self.log_scales)?;
        w.put_real(&format!("{prefix}opacity_logits"), vec![n, 1], &self.opacity_logits)?;
        let k = sh::coeff_count(self.sh_degree);
        w.put_real(&format!("{prefix}sh_coeffs"), vec![n, 3, k], &self.sh_coeffs)?;
        w.put_real(&format!("{prefix}features"), vec![n, self.feature_dim], &self.features)
    }

    pub fn read_from(r: &ArchiveReader, prefix: &str) -> Result<Self> {
        let n = r.meta_usize(&format!("{prefix}n"))?;
        let d = r.meta_usize(&format!("{prefix}d"))?;
        let sh_degree = r.meta_usize(&format!("{prefix}sh_degree"))?;
        sh::check_degree(sh_degree)?;
        let k = sh::coeff_count(sh_degree);
        let cloud = Self {
            sh_degree,
            feature_dim: d,
            means: r.real(&format!("{prefix}means"), &[n, 3])?,
            rotations: r.real(&format!("{prefix}rotations"), &[n, 4])?,
            log_scales: r.real(&format!("{prefix}log_scales"), &[n, 3])?,
            opacity_logits: r.real(&format!("{prefix}opacity_logits"), &[n, 1])?,
            sh_coeffs: r.real(&format!("{prefix}sh_coeffs"), &[n, 3, k])?,
            features: r.real(&format!("{prefix}features"), &[n, d])?,
        };
        cloud.check_shapes()?;
        Ok(cloud)
    }
}

/// Seeds one Gaussian per sampled pixel with valid depth.
pub fn init_from_depth<T: Real>(
    frame: &FrameSample,
    camera: &Camera<T>,
    stride: usize,
    sh_degree: usize,
) -> Result<GaussianCloud<T>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    sh::check_degree(sh_degree)?;
    frame.check_camera(camera.width, camera.height)?;
    let d = frame.feature_dim;
    let k = sh::coeff_count(sh_degree);
    let mut cloud = GaussianCloud::zeros(0, sh_degree, d);
    let opacity = logit(T::lit(INIT_OPACITY));
    for py in (0..frame.height).step_by(stride) {
        for px in (0..frame.width).step_by(stride) {
            let idx = py * frame.width + px;
            let z = frame.depth[idx];
            if !(z.is_finite() && z > 0.0) {
                continue;
            }
            let z = T::lit(z as f64);
            let u = T::lit(px as f64 + 0.5);
            let v = T::lit(py as f64 + 0.5);
            cloud.means.extend(camera.backproject(u, v, z));
            cloud.rotations.extend([T::one(), T::zero(), T::zero(), T::zero()]);
            let scale = (z * T::lit(stride as f64) / camera.fx).ln();
            cloud.log_scales.extend([scale; 3]);
            cloud.opacity_logits.push(opacity);
            for ch in 0..3 {
                let c = T::lit(frame.color[3 * idx + ch] as f64 / 255.0);
                cloud.sh_coeffs.push(sh::dc_from_color(c));
                cloud.sh_coeffs.extend(std::iter::repeat_n(T::zero(), k - 1));
            }
            if d > 0 {
                cloud
                    .features
                    .extend(frame.features[d * idx..d * (idx + 1)].iter().map(|&f| T::lit(f as f64)));
            }
        }
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(cloud)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudDiagnostics {
    pub points: usize,
    pub non_finite_means: usize,
    pub non_finite_rotations: usize,
    pub non_finite_scales: usize,
    pub non_finite_sh: usize,
    pub non_finite_features: usize,
    pub out_of_range_opacities: usize,
    pub denormalized_quaternions: usize,
    pub shape_errors: Vec<String>,
}

impl CloudDiagnostics {
    pub fn violations(&self) -> usize {
        self.non_finite_means
            + self.non_finite_rotations
            + self.non_finite_scales
            + self.non_finite_sh
            + self.non_finite_features
            + self.out_of_range_opacities
            + self.denormalized_quaternions
            + self.shape_errors.len()
    }
}

fn count_rows<T: Real>(values: &[T], width: usize, bad: impl Fn(&[T]) -> bool) -> usize {
    if width == 0 {
        return 0;
    }
    values.chunks(width).filter(|row| bad(row)).count()
}

pub fn validate_cloud<T: Real>(cloud: &GaussianCloud<T>) -> CloudDiagnostics {
    let non_finite = |row: &[T]| row.iter().any(|v| !v.is_finite());
    let mut report = CloudDiagnostics {
        points: cloud.len(),
        ..Default::default()
    };
    if let Err(e) = cloud.check_shapes() {
        report.shape_errors.push(e.to_string());
    }
    report.non_finite_means = count_rows(&cloud.means, 3, non_finite);
    report.non_finite_rotations = count_rows(&cloud.rotations, 4, non_finite);
    report.non_finite_scales = count_rows(&cloud.log_scales, 3, non_finite);
    report.non_finite_sh = count_rows(&cloud.sh_coeffs, cloud.coeffs_per_point(), non_finite);
    report.non_finite_features = count_rows(&cloud.features, cloud.feature_dim, non_finite);
    report.out_of_range_opacities = cloud
        .opacity_logits
        .iter()
        .filter(|&&l| {
            let o = sigmoid(l);
            !(o > T::zero() && o < T::one())
        })
        .count();
    report.denormalized_quaternions = count_rows(&cloud.rotations, 4, |q| {
        let n = q.iter().map(|&v| v * v).sum::<T>().sqrt();
        n.is_finite() && (n - T::one()).abs() > T::lit(1e-6)
    });
    report
}
