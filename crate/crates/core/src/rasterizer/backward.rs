use rayon::prelude::*;

use crate::rasterizer::forward::{pack, payload, trace, RasterTape, TileGrid};
use crate::rasterizer::{Background, RenderGrads, SplatSet};
use crate::scalar::Real;

/// Gradients with respect to each splat in a [`SplatSet`], indexed like it.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads<T> {
    pub center: Vec<[T; 2]>,
    /// Per symmetric-matrix entry; the middle value is the gradient of one
    /// off-diagonal entry.
    pub conic: Vec<[T; 3]>,
    pub view_depth: Vec<T>,
    pub rgb: Vec<[T; 3]>,
    pub alpha_base: Vec<T>,
    pub feature_dim: usize,
    pub features: Vec<T>,
}

impl<T: Real> SplatGrads<T> {
    pub fn zeros(n: usize, feature_dim: usize) -> Self {
        Self {
            center: vec![[T::zero(); 2]; n],
            conic: vec![[T::zero(); 3]; n],
            view_depth: vec![T::zero(); n],
            rgb: vec![[T::zero(); 3]; n],
            alpha_base: vec![T::zero(); n],
            feature_dim,
            features: vec![T::zero(); n * feature_dim],
        }
    }
}

/// Backward pass of [`rasterize_forward`](super::rasterize_forward).
///
/// The per-pixel contributor lists are rebuilt by replaying the forward
/// traversal; use [`rasterize_backward_taped`] when a tape is at hand.
pub fn rasterize_backward<T: Real>(
    set: &SplatSet<T>,
    width: usize,
    height: usize,
    bg: &Background<T>,
    upstream: &RenderGrads<T>,
) -> SplatGrads<T> {
    rasterize_backward_taped(set, &trace(set, width, height), bg, upstream)
}

/// Backward pass over contributor lists recorded by
/// [`rasterize_forward_taped`](super::rasterize_forward_taped) for the same
/// splat set.
pub fn rasterize_backward_taped<T: Real>(
    set: &SplatSet<T>,
    tape: &RasterTape<T>,
    bg: &Background<T>,
    upstream: &RenderGrads<T>,
) -> SplatGrads<T> {
    assert_eq!(tape.splats, set.len(), "raster tape recorded for a different splat set");
    let d = set.feature_dim;
    let width = tape.width;
    let grid = TileGrid::new(tape.width, tape.height);
    let half = T::lit(0.5);
    // per-slot accumulator layout: rgb 3, depth, alpha_base, center 2,
    // conic 3, then the feature gradient
    let stride = 10 + d;
    let partials: Vec<Vec<T>> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let list = &tape.bins[t];
            let mut local = vec![T::zero(); list.len() * stride];
            if list.is_empty() {
                return local;
            }
            let packed = pack(set, list);
            let pay = payload(set, list);
            let row = 4 + d;
            let th = &tape.tiles[t];
            let (x0, x1, y0, y1) = grid.bounds(t);
            let tw = x1 - x0;
            for py in y0..y1 {
                let y = T::lit(py as f64) + half;
                for px in x0..x1 {
                    let lp = (py - y0) * tw + (px - x0);
                    let p = py * width + px;
                    let gc = &upstream.color[3 * p..3 * p + 3];
                    let gd = upstream.depth[p];
                    let gf = &upstream.feature[d * p..d * p + d];
                    let x = T::lit(px as f64) + half;
                    let hits = &th.hits[th.start[lp] as usize..th.start[lp + 1] as usize];
                    let mut rest = th.rest[lp]
                        * ((0..3).map(|c| gc[c] * bg.color[c]).sum::<T>()
                            + (0..d).map(|k| gf[k] * bg.feature[k]).sum::<T>());
                    for h in hits.iter().rev() {
                        let slot = h.slot as usize;
                        let v = &pay[slot * row..(slot + 1) * row];
                        let acc = &mut local[slot * stride..(slot + 1) * stride];
                        let (head, acc_f) = acc.split_at_mut(10);
                        let w = h.alpha * h.trans;
                        let mut gv = gd * v[3];
                        for c in 0..3 {
                            head[c] += w * gc[c];
                            gv += gc[c] * v[c];
                        }
                        head[3] += w * gd;
                        for ((a, &g), &f) in acc_f.iter_mut().zip(gf).zip(&v[4..]) {
                            *a += w * g;
                            gv += g * f;
                        }
                        let g_alpha = h.trans * gv - rest / (T::one() - h.alpha);
                        rest += w * gv;
                        if h.clamped {
                            continue;
                        }
                        head[4] += g_alpha * h.gauss;
                        // alpha = o·exp(power)
                        let s = &packed[slot];
                        let g_power = g_alpha * s.o * h.gauss;
                        let dx = x - s.cx;
                        let dy = y - s.cy;
                        head[5] += g_power * (s.a * dx + s.b * dy);
                        head[6] += g_power * (s.c * dy + s.b * dx);
                        let hg = -half * g_power;
                        head[7] += hg * dx * dx;
                        head[8] += hg * dx * dy;
                        head[9] += hg * dy * dy;
                    }
                }
            }
            local
        })
        .collect();
    let mut grads = SplatGrads::zeros(set.len(), d);
    for (t, local) in partials.iter().enumerate() {
        for (slot, &i) in tape.bins[t].iter().enumerate() {
            let acc = &local[slot * stride..(slot + 1) * stride];
            for c in 0..3 {
                grads.rgb[i][c] += acc[c];
                grads.conic[i][c] += acc[7 + c];
            }
            grads.view_depth[i] += acc[3];
            grads.alpha_base[i] += acc[4];
            grads.center[i][0] += acc[5];
            grads.center[i][1] += acc[6];
            for k in 0..d {
                grads.features[i * d + k] += acc[10 + k];
            }
        }
    }
    grads
}
