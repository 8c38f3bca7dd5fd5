//! Screen-space splatting of deformed Gaussians.
//!
//! Projection follows the EWA local-affine approximation; compositing is
//! front-to-back alpha blending of color, expected depth and semantic
//! features with shared weights.

mod backward;
mod forward;
mod project;

pub use backward::{rasterize_backward, rasterize_backward_taped, SplatGrads};
pub use forward::{rasterize_forward, rasterize_forward_taped, rasterize_oracle, sort_front_to_back, RasterTape};
pub use project::{project_backward, project_gaussian, ProjectGrads};

use crate::scalar::Real;

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const LOW_PASS: f64 = 0.3;
pub const TILE_SIZE: usize = 16;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// A projected Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D<T> {
    pub center: [T; 2],
    /// Screen covariance (xx, xy, yy) in px², low-pass included.
    pub cov2d: [T; 3],
    /// Inverse of `cov2d`, same packing.
    pub conic: [T; 3],
    pub view_depth: T,
    pub rgb: [T; 3],
    pub alpha_base: T,
    pub source_index: usize,
    /// Half-widths of the box outside which alpha stays below the skip threshold.
    pub extent: [T; 2],
}

impl<T: Real> Splat2D<T> {
    /// Builds a splat from its screen covariance, deriving conic and extent.
    /// Returns `None` when the covariance is not positive definite or the
    /// splat can never reach the alpha threshold.
    pub fn new(
        center: [T; 2],
        cov2d: [T; 3],
        view_depth: T,
        rgb: [T; 3],
        alpha_base: T,
        source_index: usize,
    ) -> Option<Self> {
        let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
        if !(det > T::zero()) || !(cov2d[0] > T::zero()) {
            return None;
        }
        let level = T::lit(255.0) * alpha_base;
        if !(level > T::one()) {
            return None;
        }
        let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
        let m = (T::lit(2.0) * level.ln()).sqrt();
        // one pixel of slack so rounding at the ellipse boundary never
        // separates the tiled and exhaustive paths
        let extent = [m * cov2d[0].sqrt() + T::one(), m * cov2d[2].sqrt() + T::one()];
        Some(Self {
            center,
            cov2d,
            conic,
            view_depth,
            rgb,
            alpha_base,
            source_index,
            extent,
        })
    }

    /// Blend weight at a pixel center before the transmittance factor:
    /// `(alpha, gaussian falloff, clamped)` or `None` below the threshold.
    #[inline]
    pub fn alpha_at(&self, x: T, y: T) -> Option<(T, T, bool)> {
        Packed::new(self).alpha_at(x, y)
    }
}

/// The fields the per-pixel loop touches, kept contiguous.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Packed<T> {
    pub(crate) cx: T,
    pub(crate) cy: T,
    pub(crate) a: T,
    pub(crate) b: T,
    pub(crate) c: T,
    pub(crate) o: T,
    /// Below this exponent alpha is certainly under the skip threshold.
    pub(crate) floor: T,
}

impl<T: Real> Packed<T> {
    pub fn new(s: &Splat2D<T>) -> Self {
        // a small margin keeps the shortcut strictly conservative
        let floor = -(T::lit(255.0) * s.alpha_base).ln() - T::lit(1e-3);
        Self {
            cx: s.center[0],
            cy: s.center[1],
            a: s.conic[0],
            b: s.conic[1],
            c: s.conic[2],
            o: s.alpha_base,
            floor,
        }
    }

    #[inline]
    pub fn alpha_at(&self, x: T, y: T) -> Option<(T, T, bool)> {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let power = -T::lit(0.5) * (self.a * dx * dx + self.c * dy * dy) - self.b * dx * dy;
        if power > T::zero() || power < self.floor {
            return None;
        }
        let g = power.exp();
        let raw = self.o * g;
        if raw < T::lit(ALPHA_MIN) {
            return None;
        }
        let cap = T::lit(ALPHA_MAX);
        if raw > cap {
            Some((cap, g, true))
        } else {
            Some((raw, g, false))
        }
    }
}

/// Projected splats plus their (row-major) feature vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatSet<T> {
    pub splats: Vec<Splat2D<T>>,
    pub feature_dim: usize,
    pub features: Vec<T>,
}

impl<T: Real> SplatSet<T> {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            splats: Vec::new(),
            feature_dim,
            features: Vec::new(),
        }
    }

    pub fn push(&mut self, splat: Splat2D<T>, feature: &[T]) {
        debug_assert_eq!(feature.len(), self.feature_dim);
        self.splats.push(splat);
        self.features.extend_from_slice(feature);
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[T] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// What lies behind every splat.
#[derive(Clone, Debug, PartialEq)]
pub struct Background<T> {
    pub color: [T; 3],
    pub feature: Vec<T>,
}

impl<T: Real> Background<T> {
    pub fn black(feature_dim: usize) -> Self {
        Self {
            color: [T::zero(); 3],
            feature: vec![T::zero(); feature_dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// H×W×3
    pub color: Vec<T>,
    /// H×W, expected view depth, not normalized by coverage
    pub depth: Vec<T>,
    /// H×W×d
    pub feature: Vec<T>,
    /// H×W
    pub accum_alpha: Vec<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn zeros(width: usize, height: usize, feature_dim: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            feature_dim,
            color: vec![T::zero(); 3 * n],
            depth: vec![T::zero(); n],
            feature: vec![T::zero(); feature_dim * n],
            accum_alpha: vec![T::zero(); n],
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let diff = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).fold(T::zero(), T::max);
        diff(&self.color, &other.color)
            .max(diff(&self.depth, &other.depth))
            .max(diff(&self.feature, &other.feature))
            .max(diff(&self.accum_alpha, &other.accum_alpha))
    }

    pub fn color_u8(&self) -> Vec<u8> {
        self.color.iter().map(|&v| crate::dataio::image::quantize(v)).collect()
    }
}

/// Gradients of a scalar loss with respect to the render outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads<T> {
    pub color: Vec<T>,
    pub depth: Vec<T>,
    pub feature: Vec<T>,
}

impl<T: Real> RenderGrads<T> {
    pub fn zeros(width: usize, height: usize, feature_dim: usize) -> Self {
        let n = width * height;
        Self {
            color: vec![T::zero(); 3 * n],
            depth: vec![T::zero(); n],
            feature: vec![T::zero(); feature_dim * n],
        }
    }
}
