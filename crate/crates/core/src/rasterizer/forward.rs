use rayon::prelude::*;

use crate::rasterizer::{Background, Packed, RenderOutput, SplatSet, MIN_TRANSMITTANCE, TILE_SIZE};
use crate::scalar::Real;

/// Indices of splats ordered front to back, ties broken by source index.
pub fn sort_front_to_back<T: Real>(set: &SplatSet<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&set.splats[a], &set.splats[b]);
        sa.view_depth
            .partial_cmp(&sb.view_depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(sa.source_index.cmp(&sb.source_index))
    });
    order
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            tiles_x: width.div_ceil(TILE_SIZE),
            tiles_y: height.div_ceil(TILE_SIZE),
            width,
            height,
        }
    }

    pub fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel bounds `(x0, x1, y0, y1)` of a tile, half-open.
    pub fn bounds(&self, tile: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (
            x0,
            (x0 + TILE_SIZE).min(self.width),
            y0,
            (y0 + TILE_SIZE).min(self.height),
        )
    }

    /// Per-tile splat lists, each in front-to-back order.
    pub fn bin<T: Real>(&self, set: &SplatSet<T>, order: &[usize]) -> Vec<Vec<usize>> {
        let mut bins = vec![Vec::new(); self.count()];
        let half = T::lit(0.5);
        for &i in order {
            let s = &set.splats[i];
            // pixel centers sit at k + 0.5
            let lo_x = (s.center[0] - s.extent[0] - half).ceil();
            let hi_x = (s.center[0] + s.extent[0] - half).floor();
            let lo_y = (s.center[1] - s.extent[1] - half).ceil();
            let hi_y = (s.center[1] + s.extent[1] - half).floor();
            let Some((px0, px1)) = clip_range(lo_x, hi_x, self.width) else {
                continue;
            };
            let Some((py0, py1)) = clip_range(lo_y, hi_y, self.height) else {
                continue;
            };
            for ty in py0 / TILE_SIZE..=py1 / TILE_SIZE {
                for tx in px0 / TILE_SIZE..=px1 / TILE_SIZE {
                    bins[ty * self.tiles_x + tx].push(i);
                }
            }
        }
        bins
    }
}

fn clip_range<T: Real>(lo: T, hi: T, len: usize) -> Option<(usize, usize)> {
    let lo = lo.max(T::zero());
    let hi = hi.min(T::lit(len as f64 - 1.0));
    if !(lo <= hi) {
        return None;
    }
    Some((lo.to_usize()?, hi.to_usize()?))
}

/// Composites one pixel over the packed records of a splat list, with
/// `payload` holding each splat's `[rgb, depth, feature]` row.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn shade_pixel<T: Real>(
    packed: &[Packed<T>],
    payload: &[T],
    active: &[Span<T>],
    bg: &Background<T>,
    x: T,
    y: T,
    color: &mut [T],
    depth: &mut T,
    feature: &mut [T],
    accum: &mut T,
) {
    let d = feature.len();
    let row = 4 + d;
    let mut trans = T::one();
    let stop = T::lit(MIN_TRANSMITTANCE);
    color.fill(T::zero());
    feature.fill(T::zero());
    *depth = T::zero();
    for sp in active {
        if x < sp.lo || x > sp.hi {
            continue;
        }
        let slot = sp.slot as usize;
        let Some((alpha, _, _)) = packed[slot].alpha_at(x, y) else {
            continue;
        };
        let v = &payload[slot * row..(slot + 1) * row];
        let w = alpha * trans;
        for c in 0..3 {
            color[c] += w * v[c];
        }
        *depth += w * v[3];
        for (acc, &f) in feature.iter_mut().zip(&v[4..]) {
            *acc += w * f;
        }
        trans *= T::one() - alpha;
        if trans < stop {
            break;
        }
    }
    for c in 0..3 {
        color[c] += trans * bg.color[c];
    }
    for k in 0..d {
        feature[k] += trans * bg.feature[k];
    }
    *accum = T::one() - trans;
}

pub(crate) fn pack<T: Real>(set: &SplatSet<T>, list: &[usize]) -> Vec<Packed<T>> {
    list.iter().map(|&i| Packed::new(&set.splats[i])).collect()
}

/// A splat slot together with the x range a pixel row can possibly hit.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Span<T> {
    pub slot: u32,
    pub lo: T,
    pub hi: T,
}

/// Collects, in slot order, the splats whose skip-threshold ellipse meets
/// row `y` between pixel centers `x_lo` and `x_hi`. Each range is padded by
/// half a pixel so it only ever over-approximates the exact test.
pub(crate) fn row_spans<T: Real>(packed: &[Packed<T>], y: T, x_lo: T, x_hi: T, out: &mut Vec<Span<T>>) {
    out.clear();
    let (xl, xh) = (x_lo.as_f64(), x_hi.as_f64());
    for (slot, p) in packed.iter().enumerate() {
        let dy = (y - p.cy).as_f64();
        let (a, b, c) = (p.a.as_f64(), p.b.as_f64(), p.c.as_f64());
        // a·dx² + 2b·dy·dx + c·dy² + 2·floor <= 0
        let q = c * dy * dy + 2.0 * p.floor.as_f64();
        let disc = b * b * dy * dy - a * q;
        if disc < 0.0 {
            continue;
        }
        let r = disc.sqrt() / a;
        let mid = p.cx.as_f64() - b * dy / a;
        let lo = mid - r - 0.5;
        let hi = mid + r + 0.5;
        if hi < xl || lo > xh {
            continue;
        }
        out.push(Span {
            slot: slot as u32,
            lo: T::lit(lo),
            hi: T::lit(hi),
        });
    }
}

/// Every slot with an unbounded range.
pub(crate) fn all_spans<T: Real>(n: usize) -> Vec<Span<T>> {
    (0..n)
        .map(|slot| Span {
            slot: slot as u32,
            lo: T::neg_infinity(),
            hi: T::infinity(),
        })
        .collect()
}

/// Rows of `[rgb, depth, feature]` for `list`, contiguous.
pub(crate) fn payload<T: Real>(set: &SplatSet<T>, list: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(list.len() * (4 + set.feature_dim));
    for &i in list {
        let s = &set.splats[i];
        out.extend_from_slice(&s.rgb);
        out.push(s.view_depth);
        out.extend_from_slice(set.feature(i));
    }
    out
}

/// One splat's contribution at one pixel, as the forward pass saw it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Hit<T> {
    pub slot: u32,
    pub clamped: bool,
    pub alpha: T,
    pub gauss: T,
    /// Transmittance in front of this splat.
    pub trans: T,
}

/// Contributors of every pixel of one tile, in compositing order.
#[derive(Clone, Debug, Default)]
pub(crate) struct TileHits<T> {
    pub hits: Vec<Hit<T>>,
    /// Local pixel `p` owns `hits[start[p]..start[p + 1]]`.
    pub start: Vec<u32>,
    /// Transmittance left for the background, per local pixel.
    pub rest: Vec<T>,
}

/// Per-pixel contributor lists recorded by a forward pass, enough to run the
/// backward pass without re-traversing the splats.
#[derive(Clone, Debug)]
pub struct RasterTape<T> {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) splats: usize,
    pub(crate) bins: Vec<Vec<usize>>,
    pub(crate) tiles: Vec<TileHits<T>>,
}

impl<T> RasterTape<T> {
    /// Total number of recorded splat-pixel contributions.
    pub fn hit_count(&self) -> usize {
        self.tiles.iter().map(|t| t.hits.len()).sum()
    }
}

/// Walks one tile front to back and records every contribution.
pub(crate) fn trace_tile<T: Real>(packed: &[Packed<T>], bounds: (usize, usize, usize, usize)) -> TileHits<T> {
    let (x0, x1, y0, y1) = bounds;
    let half = T::lit(0.5);
    let stop = T::lit(MIN_TRANSMITTANCE);
    let mut out = TileHits {
        hits: Vec::new(),
        start: Vec::with_capacity((x1 - x0) * (y1 - y0) + 1),
        rest: Vec::with_capacity((x1 - x0) * (y1 - y0)),
    };
    out.start.push(0);
    let mut spans = Vec::with_capacity(packed.len());
    for py in y0..y1 {
        let y = T::lit(py as f64) + half;
        let (xa, xb) = (T::lit(x0 as f64) + half, T::lit((x1 - 1) as f64) + half);
        row_spans(packed, y, xa, xb, &mut spans);
        for px in x0..x1 {
            let x = T::lit(px as f64) + half;
            let mut trans = T::one();
            for sp in &spans {
                if x < sp.lo || x > sp.hi {
                    continue;
                }
                let Some((alpha, gauss, clamped)) = packed[sp.slot as usize].alpha_at(x, y) else {
                    continue;
                };
                out.hits.push(Hit {
                    slot: sp.slot,
                    clamped,
                    alpha,
                    gauss,
                    trans,
                });
                trans *= T::one() - alpha;
                if trans < stop {
                    break;
                }
            }
            out.start.push(out.hits.len() as u32);
            out.rest.push(trans);
        }
    }
    out
}

/// Shades one tile from its recorded contributions.
fn shade_tile<T: Real>(
    hits: &TileHits<T>,
    payload: &[T],
    bg: &Background<T>,
    tw: usize,
    th: usize,
    d: usize,
) -> RenderOutput<T> {
    let row = 4 + d;
    let mut out = RenderOutput::zeros(tw, th, d);
    for p in 0..tw * th {
        let color = &mut out.color[3 * p..3 * p + 3];
        let feature = &mut out.feature[d * p..d * p + d];
        let mut depth = T::zero();
        for h in &hits.hits[hits.start[p] as usize..hits.start[p + 1] as usize] {
            let v = &payload[h.slot as usize * row..(h.slot as usize + 1) * row];
            let w = h.alpha * h.trans;
            for c in 0..3 {
                color[c] += w * v[c];
            }
            depth += w * v[3];
            for (acc, &f) in feature.iter_mut().zip(&v[4..]) {
                *acc += w * f;
            }
        }
        let trans = hits.rest[p];
        for c in 0..3 {
            color[c] += trans * bg.color[c];
        }
        for k in 0..d {
            feature[k] += trans * bg.feature[k];
        }
        out.depth[p] = depth;
        out.accum_alpha[p] = T::one() - trans;
    }
    out
}

/// Bins and traces every tile without shading.
pub(crate) fn trace<T: Real>(set: &SplatSet<T>, width: usize, height: usize) -> RasterTape<T> {
    let grid = TileGrid::new(width, height);
    let order = sort_front_to_back(set);
    let bins = grid.bin(set, &order);
    let tiles = (0..grid.count())
        .into_par_iter()
        .map(|t| trace_tile(&pack(set, &bins[t]), grid.bounds(t)))
        .collect();
    RasterTape {
        width,
        height,
        splats: set.len(),
        bins,
        tiles,
    }
}

/// Tiled forward pass. Tiles run in parallel; each pixel is written by
/// exactly one tile so the result does not depend on scheduling. Produces
/// the same values as [`rasterize_forward_taped`] without recording.
pub fn rasterize_forward<T: Real>(
    set: &SplatSet<T>,
    width: usize,
    height: usize,
    bg: &Background<T>,
) -> RenderOutput<T> {
    let d = set.feature_dim;
    let grid = TileGrid::new(width, height);
    let order = sort_front_to_back(set);
    let bins = grid.bin(set, &order);
    let tiles: Vec<RenderOutput<T>> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.bounds(t);
            let (tw, th) = (x1 - x0, y1 - y0);
            let mut out = RenderOutput::zeros(tw, th, d);
            let list = &bins[t];
            let packed = pack(set, list);
            let pay = payload(set, list);
            let half = T::lit(0.5);
            let mut spans = Vec::with_capacity(list.len());
            for ly in 0..th {
                let y = T::lit((y0 + ly) as f64) + half;
                let (xa, xb) = (T::lit(x0 as f64) + half, T::lit((x1 - 1) as f64) + half);
                row_spans(&packed, y, xa, xb, &mut spans);
                for lx in 0..tw {
                    let p = ly * tw + lx;
                    let x = T::lit((x0 + lx) as f64) + half;
                    shade_pixel(
                        &packed,
                        &pay,
                        &spans,
                        bg,
                        x,
                        y,
                        &mut out.color[3 * p..3 * p + 3],
                        &mut out.depth[p],
                        &mut out.feature[d * p..d * p + d],
                        &mut out.accum_alpha[p],
                    );
                }
            }
            out
        })
        .collect();
    stitch(&grid, &tiles, width, height, d)
}

fn stitch<T: Real>(
    grid: &TileGrid,
    tiles: &[RenderOutput<T>],
    width: usize,
    height: usize,
    d: usize,
) -> RenderOutput<T> {
    let mut out = RenderOutput::zeros(width, height, d);
    for (t, tile) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = grid.bounds(t);
        let tw = x1 - x0;
        for ly in 0..(y1 - y0) {
            for lx in 0..tw {
                let src = ly * tw + lx;
                let dst = (y0 + ly) * width + x0 + lx;
                out.color[3 * dst..3 * dst + 3].copy_from_slice(&tile.color[3 * src..3 * src + 3]);
                out.feature[d * dst..d * dst + d].copy_from_slice(&tile.feature[d * src..d * src + d]);
                out.depth[dst] = tile.depth[src];
                out.accum_alpha[dst] = tile.accum_alpha[src];
            }
        }
    }
    out
}

/// [`rasterize_forward`] that also returns the tape consumed by
/// [`rasterize_backward_taped`](super::rasterize_backward_taped).
pub fn rasterize_forward_taped<T: Real>(
    set: &SplatSet<T>,
    width: usize,
    height: usize,
    bg: &Background<T>,
) -> (RenderOutput<T>, RasterTape<T>) {
    let d = set.feature_dim;
    let grid = TileGrid::new(width, height);
    let tape = trace(set, width, height);
    let tiles: Vec<RenderOutput<T>> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.bounds(t);
            let pay = payload(set, &tape.bins[t]);
            shade_tile(&tape.tiles[t], &pay, bg, x1 - x0, y1 - y0, d)
        })
        .collect();
    (stitch(&grid, &tiles, width, height, d), tape)
}

/// Reference compositor: every pixel visits every splat, no tiling, no
/// parallelism.
pub fn rasterize_oracle<T: Real>(
    set: &SplatSet<T>,
    width: usize,
    height: usize,
    bg: &Background<T>,
) -> RenderOutput<T> {
    let d = set.feature_dim;
    let order = sort_front_to_back(set);
    let packed = pack(set, &order);
    let pay = payload(set, &order);
    let spans = all_spans(order.len());
    let mut out = RenderOutput::zeros(width, height, d);
    let half = T::lit(0.5);
    for py in 0..height {
        for px in 0..width {
            let p = py * width + px;
            shade_pixel(
                &packed,
                &pay,
                &spans,
                bg,
                T::lit(px as f64) + half,
                T::lit(py as f64) + half,
                &mut out.color[3 * p..3 * p + 3],
                &mut out.depth[p],
                &mut out.feature[d * p..d * p + d],
                &mut out.accum_alpha[p],
            );
        }
    }
    out
}
