//! Training objective terms with analytic gradients.
//!
//! Every term averages over its element count so the weight λ keeps the
//! same meaning at any resolution.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::{RenderGrads, RenderOutput};
use crate::scalar::{sign, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub region_min_pixels: usize,
    pub depth_epsilon: f64,
    /// Switch for the region-aware smoothness term, used by ablations.
    #[serde(default = "yes")]
    pub region_smoothness: bool,
}

fn yes() -> bool {
    true
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            region_min_pixels: 1000,
            depth_epsilon: 1e-3,
            region_smoothness: true,
        }
    }
}

impl LossWeights {
    /// Defaults with the region threshold scaled from 854×480 to `w×h`.
    pub fn for_resolution(width: usize, height: usize) -> Self {
        Self {
            region_min_pixels: scaled_min_pixels(width, height),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.region_min_pixels < 1 {
            return Err(Error::invalid("region_min_pixels must be ≥ 1"));
        }
        if !(self.depth_epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "depth_epsilon must be > 0, got {}",
                self.depth_epsilon
            )));
        }
        Ok(())
    }
}

/// `round(1000·HW / (854·480))`, never below 16.
pub fn scaled_min_pixels(width: usize, height: usize) -> usize {
    let v = (1000.0 * (width * height) as f64 / (854.0 * 480.0)).round() as usize;
    v.max(16)
}

fn same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// Mean absolute error and its gradient on `pred`.
pub fn photometric_l1<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    same_len("l1", pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let n = T::lit(pred.len() as f64);
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            sum += (p - t).abs();
            sign(p - t) / n
        })
        .collect();
    Ok((sum / n, grad))
}

/// Mean of `|1/D̂ − 1/max(D, ε)|` over pixels with valid (positive) `D̂`.
pub fn inverse_depth_loss<T: Real>(depth: &[T], target: &[T], eps: T) -> Result<(T, Vec<T>)> {
    same_len("inverse depth", depth.len(), target.len())?;
    let valid = target.iter().filter(|&&t| t > T::zero()).count();
    let mut grad = vec![T::zero(); depth.len()];
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let n = T::lit(valid as f64);
    let mut sum = T::zero();
    for i in 0..depth.len() {
        let t = target[i];
        if !(t > T::zero()) {
            continue;
        }
        let clamped = depth[i] < eps;
        let d = if clamped { eps } else { depth[i] };
        let u = T::one() / t - T::one() / d;
        sum += u.abs();
        if !clamped {
            grad[i] = sign(u) / (d * d) / n;
        }
    }
    Ok((sum / n, grad))
}

/// Total variation of an H×W×c map: per channel, the mean absolute
/// difference over vertical pairs plus that over horizontal pairs, summed
/// over channels.
pub fn tv_loss<T: Real>(x: &[T], width: usize, height: usize, channels: usize) -> Result<(T, Vec<T>)> {
    same_len("tv", x.len(), width * height * channels)?;
    let mut grad = vec![T::zero(); x.len()];
    if width < 2 || height < 2 {
        return Err(Error::invalid(format!("tv needs at least 2×2, got {width}×{height}")));
    }
    let nv = T::lit(((height - 1) * width) as f64);
    let nh = T::lit((height * (width - 1)) as f64);
    let (mut sv, mut sh) = (T::zero(), T::zero());
    let at = |r: usize, c: usize, k: usize| (r * width + c) * channels + k;
    for r in 0..height {
        for c in 0..width {
            for k in 0..channels {
                let i = at(r, c, k);
                if r + 1 < height {
                    let j = at(r + 1, c, k);
                    let d = x[j] - x[i];
                    sv += d.abs();
                    let s = sign(d) / nv;
                    grad[j] += s;
                    grad[i] -= s;
                }
                if c + 1 < width {
                    let j = at(r, c + 1, k);
                    let d = x[j] - x[i];
                    sh += d.abs();
                    let s = sign(d) / nh;
                    grad[j] += s;
                    grad[i] -= s;
                }
            }
        }
    }
    Ok((sv / nv + sh / nh, grad))
}

/// Region-aware smoothness: within each label larger than `min_pixels`,
/// absolute deviation of the rendered features from the region mean.
/// Label 0 is unlabeled and ignored.
pub fn region_smoothness_loss<T: Real, L: Copy + Into<u64>>(
    feature: &[T],
    labels: &[L],
    channels: usize,
    min_pixels: usize,
) -> Result<(T, Vec<T>)> {
    same_len("region smoothness", feature.len(), labels.len() * channels)?;
    let mut grad = vec![T::zero(); feature.len()];
    let mut members: HashMap<u64, Vec<usize>> = HashMap::new();
    for (p, &l) in labels.iter().enumerate() {
        let l: u64 = l.into();
        if l != 0 {
            members.entry(l).or_default().push(p);
        }
    }
    let mut regions: Vec<(u64, Vec<usize>)> = members.into_iter().filter(|(_, px)| px.len() > min_pixels).collect();
    // fixed summation order
    regions.sort_by_key(|(l, _)| *l);
    let total: usize = regions.iter().map(|(_, px)| px.len()).sum();
    if total == 0 || channels == 0 {
        return Ok((T::zero(), grad));
    }
    let norm = T::lit((total * channels) as f64);
    let mut sum = T::zero();
    for (_, px) in &regions {
        let cnt = T::lit(px.len() as f64);
        for k in 0..channels {
            let mean = px.iter().map(|&p| feature[p * channels + k]).sum::<T>() / cnt;
            let mut sign_sum = T::zero();
            for &p in px {
                let d = feature[p * channels + k] - mean;
                sum += d.abs();
                let s = sign(d);
                sign_sum += s;
                grad[p * channels + k] += s / norm;
            }
            // the mean depends on every member
            let shift = sign_sum / cnt / norm;
            for &p in px {
                grad[p * channels + k] -= shift;
            }
        }
    }
    Ok((sum / norm, grad))
}

/// Connected groups (4-neighborhood) of identical quantized feature vectors,
/// numbered from 1 in scan order.
pub fn labels_from_features<T: Real>(
    feature: &[T],
    width: usize,
    height: usize,
    channels: usize,
    step: f64,
) -> Vec<u32> {
    let key = |p: usize| -> Vec<i64> {
        feature[p * channels..(p + 1) * channels]
            .iter()
            .map(|v| (v.as_f64() / step).round() as i64)
            .collect()
    };
    let keys: Vec<Vec<i64>> = (0..width * height).map(key).collect();
    let mut labels = vec![0u32; width * height];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..width * height {
        if labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if labels[q] == 0 && keys[q] == keys[start] {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
    }
    labels
}

/// Ground truth for one view, already converted to the working scalar.
#[derive(Clone, Debug)]
pub struct LossTarget<'a, T> {
    pub color: &'a [T],
    pub depth: &'a [T],
    /// Compressed features; empty slice disables the feature terms.
    pub feature: &'a [T],
    pub labels: Option<&'a [u16]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub color: f64,
    pub depth: f64,
    pub feature: f64,
    pub tv_color: f64,
    pub tv_depth: f64,
    pub tv_feature: f64,
    pub region: f64,
    pub total: f64,
}

/// Composite objective and its gradient on the render outputs.
pub fn total_loss<T: Real>(
    render: &RenderOutput<T>,
    target: &LossTarget<'_, T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, RenderGrads<T>)> {
    let (w, h, d) = (render.width, render.height, render.feature_dim);
    let lambda = T::lit(weights.lambda);
    let mut grads = RenderGrads::zeros(w, h, d);
    let mut out = LossBreakdown::default();
    let mut total = T::zero();

    let mut add = |dst: &mut Vec<T>, scale: T, (v, g): (T, Vec<T>)| -> f64 {
        for (a, b) in dst.iter_mut().zip(g) {
            *a += scale * b;
        }
        total += scale * v;
        v.as_f64()
    };

    out.color = add(&mut grads.color, T::one(), photometric_l1(&render.color, target.color)?);
    out.depth = add(
        &mut grads.depth,
        T::one(),
        inverse_depth_loss(&render.depth, target.depth, T::lit(weights.depth_epsilon))?,
    );
    out.tv_color = add(&mut grads.color, lambda, tv_loss(&render.color, w, h, 3)?);
    out.tv_depth = add(&mut grads.depth, lambda, tv_loss(&render.depth, w, h, 1)?);
    if d > 0 && !target.feature.is_empty() {
        out.feature = add(
            &mut grads.feature,
            T::one(),
            photometric_l1(&render.feature, target.feature)?,
        );
        out.tv_feature = add(&mut grads.feature, lambda, tv_loss(&render.feature, w, h, d)?);
        if weights.region_smoothness {
            if let Some(labels) = target.labels {
                out.region = add(
                    &mut grads.feature,
                    lambda,
                    region_smoothness_loss(&render.feature, labels, d, weights.region_min_pixels)?,
                );
            }
        }
    }
    out.total = total.as_f64();
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_offset() {
        let t = vec![0.1f64, 0.4, 0.9];
        let p: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        assert!((photometric_l1(&p, &t).unwrap().0 - 0.5).abs() < 1e-12);
        assert_eq!(photometric_l1(&t, &t).unwrap().0, 0.0);
        assert!(photometric_l1(&t, &t[..2]).is_err());
    }

    #[test]
    fn inverse_depth_closed_form() {
        let (v, _) = inverse_depth_loss(&[2.0f64], &[1.0], 1e-3).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let (v, g) = inverse_depth_loss(&[1e-5f64, 1.0], &[1.0, 0.0], 1e-3).unwrap();
        assert!((v - 999.0).abs() < 1e-9);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn tv_ramp() {
        let (w, h) = (5, 3);
        let x: Vec<f64> = (0..h).flat_map(|_| (0..w).map(|c| c as f64)).collect();
        let (v, _) = tv_loss(&x, w, h, 1).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert_eq!(tv_loss(&[0.3f64; 12], 2, 2, 3).unwrap().0, 0.0);
    }

    #[test]
    fn region_closed_form() {
        let f = [0.0f64, 0.0, 2.0, 2.0];
        let (v, _) = region_smoothness_loss(&f, &[1u16; 4], 1, 3).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        // at the threshold the region is ignored
        let (v, _) = region_smoothness_loss(&f, &[1u16; 4], 1, 4).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn min_pixels_scaling() {
        assert_eq!(scaled_min_pixels(128, 128), 40);
        assert_eq!(scaled_min_pixels(854, 480), 1000);
        assert_eq!(scaled_min_pixels(16, 16), 16);
    }

    #[test]
    fn components_split_same_value() {
        // two islands of value 1 separated by a column of 0
        let f = [1.0f64, 0.0, 1.0, 1.0, 0.0, 1.0];
        let l = labels_from_features(&f, 3, 2, 1, 0.01);
        assert_eq!(l, vec![1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn weights_validated() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.depth_epsilon = 0.0;
        assert!(w.validate().is_err());
    }
}
