//! Finite-difference checks of every analytic backward pass.
//!
//! Each suite draws seeded random configurations in `f64`, evaluates a
//! scalar objective whose analytic gradient comes from the crate's own
//! backward code, and compares coordinates against central differences.
//! Configurations that sit within reach of a kink (ReLU, |·|, alpha
//! thresholds, depth ties) are redrawn instead of compared, because a
//! difference quotient across a kink measures the jump, not the slope.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::camera::Camera;
use crate::codec::FeatureCodec;
use crate::deformation::{deform_backward, fdm_backward, fdm_eval, SemanticTracker};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::losses::{
    inverse_depth_loss, photometric_l1, region_smoothness_loss, total_loss, tv_loss, LossTarget, LossWeights,
};
use crate::model::SceneModel;
use crate::rasterizer::{
    project_backward, project_gaussian, rasterize_backward, rasterize_forward, Background, RenderGrads, RenderOutput,
    Splat2D, SplatSet, ALPHA_MAX, ALPHA_MIN, MIN_TRANSMITTANCE,
};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step, relative to max(1, |x|).
pub const STEP: f64 = 1e-5;
/// Floor of the relative-error denominator, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const ERROR_FLOOR: f64 = 1e-5;
/// Distance from any kink a configuration must keep.
const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: usize = 100_000;

pub const SUITES: [&str; 11] = [
    "fdm",
    "tracker",
    "deformation",
    "projection",
    "rasterizer",
    "codec",
    "loss_l1",
    "loss_inverse_depth",
    "loss_tv",
    "loss_region",
    "loss_total",
];

/// Extra end-to-end suite through the full render path; not part of [`SUITES`].
pub const MODEL_SUITE: &str = "model";

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub configs: usize,
    /// Configurations discarded for sitting near a kink.
    pub redraws: usize,
    /// Coordinates compared.
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self, min_configs: usize) -> bool {
        self.configs >= min_configs && self.entries > 0 && self.max_rel_error < TOLERANCE
    }
}

#[derive(Default)]
struct Tally {
    entries: usize,
    max: f64,
    worst: String,
}

impl Tally {
    fn add(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.entries += 1;
        let e = rel_error(analytic, numeric);
        // NaN must register as a failure
        if !(e <= self.max) {
            self.max = if e.is_nan() { f64::INFINITY } else { e };
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", label());
        }
    }
}

fn step_for(x: f64) -> f64 {
    STEP * x.abs().max(1.0)
}

/// Central difference of `f` along one coordinate reached through `at`.
fn central<S>(state: &mut S, at: impl Fn(&mut S) -> &mut f64, f: impl Fn(&S) -> f64) -> f64 {
    let x0 = *at(state);
    let h = step_for(x0);
    *at(state) = x0 + h;
    let plus = f(state);
    *at(state) = x0 - h;
    let minus = f(state);
    *at(state) = x0;
    (plus - minus) / (2.0 * h)
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng, std)).collect()
}

fn uniforms(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs one named suite over `configs` accepted configurations.
pub fn run_suite(name: &str, configs: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crc32fast::hash(name.as_bytes()) as u64);
    let mut tally = Tally::default();
    let mut accepted = 0;
    let mut redraws = 0;
    while accepted < configs {
        let ok = match name {
            "fdm" => check_fdm(&mut rng, &mut tally),
            "tracker" => check_tracker(&mut rng, &mut tally),
            "deformation" => check_deformation(&mut rng, &mut tally),
            "projection" => check_projection(&mut rng, &mut tally),
            "rasterizer" => check_rasterizer(&mut rng, &mut tally),
            "codec" => check_codec(&mut rng, &mut tally),
            "loss_l1" => check_l1(&mut rng, &mut tally),
            "loss_inverse_depth" => check_inverse_depth(&mut rng, &mut tally),
            "loss_tv" => check_tv(&mut rng, &mut tally),
            "loss_region" => check_region(&mut rng, &mut tally),
            "loss_total" => check_total(&mut rng, &mut tally),
            MODEL_SUITE => check_model(&mut rng, &mut tally),
            other => {
                let mut known: Vec<&str> = SUITES.to_vec();
                known.push(MODEL_SUITE);
                return Err(Error::invalid(format!(
                    "unknown gradient suite {other:?}; known: {}",
                    known.join(", ")
                )));
            }
        };
        if ok {
            accepted += 1;
        } else {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::invalid(format!(
                    "suite {name} could not draw a smooth configuration"
                )));
            }
        }
    }
    Ok(SuiteReport {
        name: name.to_string(),
        configs: accepted,
        redraws,
        entries: tally.entries,
        max_rel_error: tally.max,
        worst: tally.worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Every suite in [`SUITES`], in order.
pub fn run_all(configs: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, configs, seed)).collect()
}

struct Fdm {
    weights: Vec<f64>,
    centers: Vec<f64>,
    widths: Vec<f64>,
}

fn check_fdm(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let c = rng.random_range(1..=4);
    let b = rng.random_range(2..=16);
    let mut st = Fdm {
        weights: normals(rng, c * b, 1.0),
        centers: uniforms(rng, b, 0.0, 1.0),
        widths: uniforms(rng, b, 0.05, 0.5),
    };
    let t = rng.random_range(0.0..1.0);
    let r = normals(rng, c, 1.0);
    let f = |s: &Fdm| {
        let mut out = vec![0.0; c];
        fdm_eval(&s.weights, &s.centers, &s.widths, t, &mut out);
        dot(&out, &r)
    };
    let (mut gw, mut gc, mut gs) = (vec![0.0; c * b], vec![0.0; b], vec![0.0; b]);
    fdm_backward(&st.weights, &st.centers, &st.widths, t, &r, &mut gw, &mut gc, &mut gs);
    for i in 0..c * b {
        let n = central(&mut st, |s| &mut s.weights[i], f);
        tally.add(|| format!("fdm weight {i}"), gw[i], n);
    }
    for j in 0..b {
        let n = central(&mut st, |s| &mut s.centers[j], f);
        tally.add(|| format!("fdm center {j}"), gc[j], n);
        let n = central(&mut st, |s| &mut s.widths[j], f);
        tally.add(|| format!("fdm width {j}"), gs[j], n);
    }
    true
}

fn random_tracker(rng: &mut ChaCha8Rng, d: usize) -> SemanticTracker<f64> {
    let mut tr = SemanticTracker::<f64>::zeros(d);
    for v in [
        &mut tr.conv1_w,
        &mut tr.conv1_b,
        &mut tr.conv2_w,
        &mut tr.conv2_b,
        &mut tr.head_w,
        &mut tr.head_b,
    ] {
        v.iter_mut().for_each(|x| *x = normal(rng, 0.5));
    }
    tr
}

fn tracker_tensors(tr: &mut SemanticTracker<f64>) -> [&mut Vec<f64>; 6] {
    [
        &mut tr.conv1_w,
        &mut tr.conv1_b,
        &mut tr.conv2_w,
        &mut tr.conv2_b,
        &mut tr.head_w,
        &mut tr.head_b,
    ]
}

fn tracker_coord(tr: &mut SemanticTracker<f64>, k: usize, i: usize) -> &mut f64 {
    let [a, b, c, d, e, f] = tracker_tensors(tr);
    &mut [a, b, c, d, e, f].into_iter().nth(k).expect("tensor index")[i]
}

fn model_coord(m: &mut SceneModel<f64>, k: usize, e: usize) -> &mut f64 {
    &mut m.tensors_mut().into_iter().nth(k).expect("tensor index")[e]
}

fn check_tracker(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let d = rng.random_range(1..=6);
    let tr = random_tracker(rng, d);
    let feature = normals(rng, d, 1.0);
    let t = rng.random_range(0.0..1.0);
    let r = normals(rng, d, 1.0);
    let (_, tape) = tr.forward(&feature, t);
    if tape.min_abs_preactivation() < KINK_MARGIN {
        return false;
    }
    let mut grads = tr.zeros_like();
    let g_in = tr.backward(&tape, &r, &mut grads);
    let mut st = (tr, feature);
    let f = |s: &(SemanticTracker<f64>, Vec<f64>)| dot(&s.0.forward(&s.1, t).0, &r);
    let names = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b"];
    let analytic: Vec<Vec<f64>> = tracker_tensors(&mut grads).iter().map(|v| v.to_vec()).collect();
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let n = central(&mut st, |s| tracker_coord(&mut s.0, k, i), f);
            tally.add(|| format!("tracker {} {i}", names[k]), g[i], n);
        }
    }
    for i in 0..d {
        let n = central(&mut st, |s| &mut s.1[i], f);
        tally.add(|| format!("tracker input {i}"), g_in[i], n);
    }
    true
}

/// A small model with every parameter drawn at random.
fn random_model(rng: &mut ChaCha8Rng, n: usize, d: usize, sh_degree: usize, basis: usize) -> SceneModel<f64> {
    let mut cloud = GaussianCloud::<f64>::zeros(n, sh_degree, d);
    for i in 0..n {
        cloud.means[3 * i] = rng.random_range(-0.4..0.4);
        cloud.means[3 * i + 1] = rng.random_range(-0.3..0.3);
        cloud.means[3 * i + 2] = rng.random_range(1.5..3.0);
    }
    cloud.rotations = normals(rng, 4 * n, 1.0);
    cloud.log_scales = uniforms(rng, 3 * n, -2.6, -1.6);
    cloud.opacity_logits = uniforms(rng, n, -1.5, 1.5);
    cloud.sh_coeffs = normals(rng, cloud.sh_coeffs.len(), 0.15);
    cloud.features = normals(rng, n * d, 1.0);
    let mut model = SceneModel::new(cloud, basis, rng.random());
    let f = &mut model.field;
    for bank in [&mut f.mean, &mut f.rotation, &mut f.scale, &mut f.gate] {
        bank.weights.iter_mut().for_each(|w| *w = normal(rng, 0.05));
        bank.centers.iter_mut().for_each(|c| *c = rng.random_range(0.0..1.0));
        bank.widths.iter_mut().for_each(|s| *s = rng.random_range(0.1..0.5));
    }
    f.tracker = random_tracker(rng, d);
    for w in f.tracker.head_w.iter_mut().chain(f.tracker.head_b.iter_mut()) {
        *w *= 0.1;
    }
    model.use_tracker = rng.random_bool(0.5);
    model.background = Background {
        color: [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
        feature: normals(rng, d, 0.5),
    };
    model
}

fn tracker_margin(model: &SceneModel<f64>, t: f64) -> f64 {
    if !model.use_tracker {
        return f64::INFINITY;
    }
    (0..model.cloud.len())
        .map(|i| {
            model
                .field
                .tracker
                .forward(model.cloud.feature(i), t)
                .1
                .min_abs_preactivation()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Coordinates (tensor, element) of a model, at most `budget` of them,
/// keeping a few from every tensor.
fn sample_coords(rng: &mut ChaCha8Rng, model: &SceneModel<f64>, skip: &[&str], budget: usize) -> Vec<(usize, usize)> {
    let tensors = model.tensors();
    let live: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .filter(|(_, t)| !skip.contains(&t.0.as_str()) && !t.2.is_empty())
        .map(|(k, t)| (k, t.2.len()))
        .collect();
    let total: usize = live.iter().map(|l| l.1).sum();
    let mut out = Vec::new();
    for &(k, len) in &live {
        let quota = if total <= budget {
            len
        } else {
            (len * budget / total).max(len.min(4))
        };
        let picks = rand::seq::index::sample(rng, len, quota.min(len));
        let mut picks = picks.into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|e| (k, e)));
    }
    out
}

fn check_deformation(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=4);
    let basis = rng.random_range(3..=8);
    let mut model = random_model(rng, n, d, 0, basis);
    let t = rng.random_range(0.0..1.0);
    if tracker_margin(&model, t) < KINK_MARGIN {
        return false;
    }
    let up = crate::deformation::DeformedGaussians {
        means: normals(rng, 3 * n, 1.0),
        rotations: normals(rng, 4 * n, 1.0),
        log_scales: normals(rng, 3 * n, 1.0),
        features: normals(rng, d * n, 1.0),
    };
    let Ok(_) = model.deform(t) else {
        return false;
    };
    let mut grads = model.zeros_like();
    deform_backward(
        &model.cloud,
        &model.field,
        t,
        &up,
        model.use_tracker,
        &mut grads.cloud,
        &mut grads.field,
    );
    let f = |m: &SceneModel<f64>| match m.deform(t) {
        Ok(df) => {
            dot(&df.means, &up.means)
                + dot(&df.rotations, &up.rotations)
                + dot(&df.log_scales, &up.log_scales)
                + dot(&df.features, &up.features)
        }
        Err(_) => f64::NAN,
    };
    let coords = sample_coords(rng, &model, &["opacity_logits", "sh_coeffs"], 400);
    let gt = grads.tensors();
    let names: Vec<String> = gt.iter().map(|t| t.0.clone()).collect();
    for (k, e) in coords {
        let n = central(&mut model, |m| model_coord(m, k, e), f);
        tally.add(|| format!("deformation {} {e}", names[k]), gt[k].2[e], n);
    }
    true
}

fn random_camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Camera<f64> {
    let eye = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-4.0..-2.0),
    ];
    let target = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0];
    Camera::look_at(eye, target, [0.0, -1.0, 0.0], 50.0, width, height).expect("distinct eye and target")
}

struct Geom {
    mean: [f64; 3],
    q: [f64; 4],
    ls: [f64; 3],
}

fn check_projection(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let cam = random_camera(rng, 64, 48);
    let mut st = Geom {
        mean: [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ],
        q: [normal(rng, 1.0), normal(rng, 1.0), normal(rng, 1.0), normal(rng, 1.0)],
        ls: [
            rng.random_range(-3.0..-1.5),
            rng.random_range(-3.0..-1.5),
            rng.random_range(-3.0..-1.5),
        ],
    };
    let rc = [normal(rng, 1.0), normal(rng, 1.0)];
    let rk = [normal(rng, 1.0), normal(rng, 1.0), normal(rng, 1.0)];
    let rd = normal(rng, 1.0);
    let f = |g: &Geom| match project_gaussian(&g.mean, &g.q, &g.ls, 0.5, [0.5; 3], 0, &cam) {
        Some(s) => dot(&s.center, &rc) + dot(&s.conic, &rk) + rd * s.view_depth,
        None => f64::NAN,
    };
    if !f(&st).is_finite() {
        return false;
    }
    // per-entry gradient of the symmetric conic, whose off-diagonal value appears twice
    let g = project_backward(&st.mean, &st.q, &st.ls, &cam, rc, [rk[0], 0.5 * rk[1], rk[2]], rd);
    for a in 0..3 {
        let n = central(&mut st, |s| &mut s.mean[a], f);
        if !n.is_finite() {
            return false;
        }
        tally.add(|| format!("projection mean {a}"), g.mean[a], n);
        let n = central(&mut st, |s| &mut s.ls[a], f);
        tally.add(|| format!("projection log_scale {a}"), g.log_scale[a], n);
    }
    for a in 0..4 {
        let n = central(&mut st, |s| &mut s.q[a], f);
        tally.add(|| format!("projection rotation {a}"), g.rotation[a], n);
    }
    true
}

fn random_splats(rng: &mut ChaCha8Rng, width: usize, height: usize, count: usize, d: usize) -> SplatSet<f64> {
    let mut set = SplatSet::new(d);
    let mut depths: Vec<f64> = Vec::new();
    while set.len() < count {
        let depth = rng.random_range(0.5..5.0);
        if depths.iter().any(|&z| (z - depth).abs() < 0.05) {
            continue;
        }
        let (sx, sy) = (rng.random_range(0.8..4.0), rng.random_range(0.8..4.0));
        let th = rng.random_range(0.0..std::f64::consts::PI);
        let (c, s) = (th.cos(), th.sin());
        let cov = [
            c * c * sx * sx + s * s * sy * sy,
            c * s * (sx * sx - sy * sy),
            s * s * sx * sx + c * c * sy * sy,
        ];
        let center = [
            rng.random_range(0.0..width as f64),
            rng.random_range(0.0..height as f64),
        ];
        let rgb = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let alpha = rng.random_range(0.05..0.95);
        if let Some(sp) = Splat2D::new(center, cov, depth, rgb, alpha, set.len()) {
            depths.push(depth);
            let feat = normals(rng, d, 1.0);
            set.push(sp, &feat);
        }
    }
    set
}

fn raw_alpha(s: &Splat2D<f64>, x: f64, y: f64) -> f64 {
    let (dx, dy) = (x - s.center[0], y - s.center[1]);
    let [a, b, c] = s.conic;
    s.alpha_base * (-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy).exp()
}

/// True when no pixel sits near an alpha threshold, the clamp or the
/// transmittance cut-off.
fn raster_smooth(set: &SplatSet<f64>, width: usize, height: usize) -> bool {
    let order = crate::rasterizer::sort_front_to_back(set);
    let near = |v: f64, at: f64| (v / at - 1.0).abs() < KINK_MARGIN * 10.0;
    for py in 0..height {
        for px in 0..width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut trans = 1.0;
            for &i in &order {
                let raw = raw_alpha(&set.splats[i], x, y);
                if near(raw, ALPHA_MIN) || near(raw, ALPHA_MAX) {
                    return false;
                }
                if raw < ALPHA_MIN {
                    continue;
                }
                trans *= 1.0 - raw.min(ALPHA_MAX);
                if near(trans, MIN_TRANSMITTANCE) {
                    return false;
                }
                if trans < MIN_TRANSMITTANCE {
                    break;
                }
            }
        }
    }
    true
}

fn render_dot(out: &RenderOutput<f64>, up: &RenderGrads<f64>) -> f64 {
    dot(&out.color, &up.color) + dot(&out.depth, &up.depth) + dot(&out.feature, &up.feature)
}

fn random_upstream(rng: &mut ChaCha8Rng, width: usize, height: usize, d: usize) -> RenderGrads<f64> {
    let n = width * height;
    RenderGrads {
        color: normals(rng, 3 * n, 1.0),
        depth: normals(rng, n, 1.0),
        feature: normals(rng, d * n, 1.0),
    }
}

fn check_rasterizer(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let (width, height) = (rng.random_range(6..=16), rng.random_range(6..=16));
    let d = rng.random_range(0..=4);
    let count = rng.random_range(1..=8);
    let mut set = random_splats(rng, width, height, count, d);
    if !raster_smooth(&set, width, height) {
        return false;
    }
    let bg = Background {
        color: [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
        feature: normals(rng, d, 0.5),
    };
    let up = random_upstream(rng, width, height, d);
    let g = rasterize_backward(&set, width, height, &bg, &up);
    let f = |s: &SplatSet<f64>| render_dot(&rasterize_forward(s, width, height, &bg), &up);
    for i in 0..set.len() {
        for a in 0..2 {
            let n = central(&mut set, |s| &mut s.splats[i].center[a], f);
            tally.add(|| format!("raster center {i}.{a}"), g.center[i][a], n);
        }
        for a in 0..3 {
            // the off-diagonal conic value enters the quadratic form twice
            let scale = if a == 1 { 2.0 } else { 1.0 };
            let n = central(&mut set, |s| &mut s.splats[i].conic[a], f);
            tally.add(|| format!("raster conic {i}.{a}"), scale * g.conic[i][a], n);
            let n = central(&mut set, |s| &mut s.splats[i].rgb[a], f);
            tally.add(|| format!("raster rgb {i}.{a}"), g.rgb[i][a], n);
        }
        let n = central(&mut set, |s| &mut s.splats[i].view_depth, f);
        tally.add(|| format!("raster depth {i}"), g.view_depth[i], n);
        let n = central(&mut set, |s| &mut s.splats[i].alpha_base, f);
        tally.add(|| format!("raster opacity {i}"), g.alpha_base[i], n);
        for k in 0..d {
            let n = central(&mut set, |s| &mut s.features[i * d + k], f);
            tally.add(|| format!("raster feature {i}.{k}"), g.features[i * d + k], n);
        }
    }
    true
}

fn check_codec(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let df = rng.random_range(4..=16);
    let d = rng.random_range(2..=4);
    let rows = rng.random_range(1..=4);
    let mut codec = FeatureCodec::<f64>::init(df, d, rng.random());
    let n_params = codec.params.len();
    // give the biases some spread so no unit is pinned at zero
    for p in codec.params.iter_mut() {
        if *p == 0.0 {
            *p = normal(rng, 0.1);
        }
    }
    let mut x = Vec::with_capacity(rows * df);
    for _ in 0..rows {
        let mut v = normals(rng, df, 1.0);
        let n = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        x.extend(v);
    }
    if x.chunks(df).any(|row| codec.min_abs_preactivation(row) < KINK_MARGIN) {
        return false;
    }
    let mut g = vec![0.0; n_params];
    if codec.batch_loss(&x, Some(&mut g)).is_err() {
        return false;
    }
    let f = |c: &FeatureCodec<f64>| {
        let (m, k) = c.batch_loss(&x, None).expect("shapes fixed");
        m + k
    };
    let picks = rand::seq::index::sample(rng, n_params, 48.min(n_params)).into_vec();
    for i in picks {
        let n = central(&mut codec, |c| &mut c.params[i], f);
        tally.add(|| format!("codec param {i}"), g[i], n);
    }
    true
}

/// Checks a loss with signature `(x) -> (value, grad)` on every coordinate.
fn check_elementwise(
    tally: &mut Tally,
    label: &str,
    mut x: Vec<f64>,
    loss: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> bool {
    let Ok((_, g)) = loss(&x) else {
        return false;
    };
    let f = |v: &Vec<f64>| loss(v).map(|r| r.0).unwrap_or(f64::NAN);
    for i in 0..x.len() {
        let n = central(&mut x, |v| &mut v[i], f);
        tally.add(|| format!("{label} {i}"), g[i], n);
    }
    true
}

fn far_from_zero(v: impl IntoIterator<Item = f64>) -> bool {
    v.into_iter().all(|d| d.abs() > KINK_MARGIN)
}

fn check_l1(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let n = rng.random_range(1..=48);
    let pred = normals(rng, n, 1.0);
    let target = normals(rng, n, 1.0);
    if !far_from_zero(pred.iter().zip(&target).map(|(p, t)| p - t)) {
        return false;
    }
    check_elementwise(tally, "l1", pred, |p| photometric_l1(p, &target))
}

fn depth_smooth(depth: &[f64], target: &[f64], eps: f64) -> bool {
    depth.iter().zip(target).all(|(&d, &t)| {
        if t <= 0.0 {
            return true;
        }
        let dd = d.max(eps);
        (d - eps).abs() > KINK_MARGIN && (1.0 / t - 1.0 / dd).abs() > KINK_MARGIN
    })
}

fn random_depths(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let depth = (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                rng.random_range(0.0..eps)
            } else {
                rng.random_range(0.2..4.0)
            }
        })
        .collect();
    let target = (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.2..4.0)
            }
        })
        .collect();
    (depth, target)
}

fn check_inverse_depth(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let n = rng.random_range(1..=48);
    let eps = rng.random_range(0.01..0.1);
    let (depth, target) = random_depths(rng, n, eps);
    if !depth_smooth(&depth, &target, eps) {
        return false;
    }
    check_elementwise(tally, "inverse depth", depth, |d| inverse_depth_loss(d, &target, eps))
}

fn tv_smooth(x: &[f64], w: usize, h: usize, c: usize) -> bool {
    let at = |r: usize, col: usize, k: usize| x[(r * w + col) * c + k];
    for r in 0..h {
        for col in 0..w {
            for k in 0..c {
                if r + 1 < h && (at(r + 1, col, k) - at(r, col, k)).abs() <= KINK_MARGIN {
                    return false;
                }
                if col + 1 < w && (at(r, col + 1, k) - at(r, col, k)).abs() <= KINK_MARGIN {
                    return false;
                }
            }
        }
    }
    true
}

fn check_tv(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let (w, h, c) = (
        rng.random_range(2..=8),
        rng.random_range(2..=8),
        rng.random_range(1..=4),
    );
    let x = normals(rng, w * h * c, 1.0);
    if !tv_smooth(&x, w, h, c) {
        return false;
    }
    check_elementwise(tally, "tv", x, |v| tv_loss(v, w, h, c))
}

/// Label map of a few random rectangles over background label 0.
fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<u16> {
    let mut labels = vec![0u16; w * h];
    for l in 1..=rng.random_range(1..=4u16) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..w) + 1, rng.random_range(y0..h) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                labels[y * w + x] = l;
            }
        }
    }
    labels
}

fn region_smooth(x: &[f64], labels: &[u16], c: usize) -> bool {
    let mut ids: Vec<u16> = labels.iter().copied().filter(|&l| l != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    for l in ids {
        let px: Vec<usize> = (0..labels.len()).filter(|&p| labels[p] == l).collect();
        for k in 0..c {
            let mean = px.iter().map(|&p| x[p * c + k]).sum::<f64>() / px.len() as f64;
            if !far_from_zero(px.iter().map(|&p| x[p * c + k] - mean)) {
                return false;
            }
        }
    }
    true
}

fn check_region(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let (w, h, c) = (
        rng.random_range(4..=10),
        rng.random_range(4..=10),
        rng.random_range(1..=3),
    );
    let labels = random_labels(rng, w, h);
    let min_pixels = rng.random_range(0..=6);
    let x = normals(rng, w * h * c, 1.0);
    if !region_smooth(&x, &labels, c) {
        return false;
    }
    check_elementwise(tally, "region", x, |v| {
        region_smoothness_loss(v, &labels, c, min_pixels)
    })
}

fn check_total(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let (w, h, d) = (
        rng.random_range(2..=8),
        rng.random_range(2..=8),
        rng.random_range(0..=3),
    );
    let n = w * h;
    let weights = LossWeights {
        lambda: rng.random_range(0.005..0.5),
        region_min_pixels: rng.random_range(0..=4),
        depth_epsilon: rng.random_range(0.01..0.1),
        region_smoothness: rng.random_bool(0.8),
    };
    let mut render = RenderOutput::<f64>::zeros(w, h, d);
    render.color = normals(rng, 3 * n, 1.0);
    render.feature = normals(rng, d * n, 1.0);
    let (depth, t_depth) = random_depths(rng, n, weights.depth_epsilon);
    render.depth = depth;
    let t_color = normals(rng, 3 * n, 1.0);
    let t_feature = normals(rng, d * n, 1.0);
    let labels = random_labels(rng, w, h);
    let smooth = far_from_zero(render.color.iter().zip(&t_color).map(|(a, b)| a - b))
        && far_from_zero(render.feature.iter().zip(&t_feature).map(|(a, b)| a - b))
        && depth_smooth(&render.depth, &t_depth, weights.depth_epsilon)
        && tv_smooth(&render.color, w, h, 3)
        && tv_smooth(&render.depth, w, h, 1)
        && (d == 0 || tv_smooth(&render.feature, w, h, d))
        && (d == 0 || region_smooth(&render.feature, &labels, d));
    if !smooth {
        return false;
    }
    let target = LossTarget {
        color: &t_color,
        depth: &t_depth,
        feature: &t_feature,
        labels: Some(&labels),
    };
    let Ok((_, g)) = total_loss(&render, &target, &weights) else {
        return false;
    };
    let f = |r: &RenderOutput<f64>| total_loss(r, &target, &weights).map(|v| v.0.total).unwrap_or(f64::NAN);
    for i in 0..render.color.len() {
        let n = central(&mut render, |r| &mut r.color[i], f);
        tally.add(|| format!("total color {i}"), g.color[i], n);
    }
    for i in 0..render.depth.len() {
        let n = central(&mut render, |r| &mut r.depth[i], f);
        tally.add(|| format!("total depth {i}"), g.depth[i], n);
    }
    for i in 0..render.feature.len() {
        let n = central(&mut render, |r| &mut r.feature[i], f);
        tally.add(|| format!("total feature {i}"), g.feature[i], n);
    }
    true
}

/// The full render path, from canonical parameters to rendered maps. Too
/// many thresholds to enumerate here, so a coordinate whose difference
/// quotient changes with the step size marks the configuration as kinked.
fn check_model(rng: &mut ChaCha8Rng, tally: &mut Tally) -> bool {
    let (width, height) = (16, 12);
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=3);
    let degree = rng.random_range(0..=1);
    let basis = rng.random_range(3..=6);
    let mut model = random_model(rng, n, d, degree, basis);
    let cam = Camera::identity(width, height, 14.0);
    let t = rng.random_range(0.0..1.0);
    if tracker_margin(&model, t) < KINK_MARGIN {
        return false;
    }
    let Ok((out, tape)) = model.render_with_tape(&cam, t) else {
        return false;
    };
    if tape.set.len() < n || !raster_smooth(&tape.set, width, height) {
        return false;
    }
    let up = random_upstream(rng, width, height, d);
    let mut grads = model.zeros_like();
    model.backward(&tape, &up, &mut grads);
    let _ = out;
    let f = |m: &SceneModel<f64>| match m.render(&cam, t) {
        Ok(r) => render_dot(&r, &up),
        Err(_) => f64::NAN,
    };
    let coords = sample_coords(rng, &model, &[], 160);
    let gt = grads.tensors();
    let names: Vec<String> = gt.iter().map(|t| t.0.clone()).collect();
    let mut pending = Vec::with_capacity(coords.len());
    for (k, e) in coords {
        let coarse = central(&mut model, |m| model_coord(m, k, e), f);
        let x0 = *model_coord(&mut model, k, e);
        let h = step_for(x0) / 4.0;
        *model_coord(&mut model, k, e) = x0 + h;
        let plus = f(&model);
        *model_coord(&mut model, k, e) = x0 - h;
        let minus = f(&model);
        *model_coord(&mut model, k, e) = x0;
        let fine = (plus - minus) / (2.0 * h);
        if !coarse.is_finite() || rel_error(coarse, fine) > 1e-2 {
            return false;
        }
        pending.push((k, e, coarse));
    }
    for (k, e, numeric) in pending {
        tally.add(|| format!("model {} {e}", names[k]), gt[k].2[e], numeric);
    }
    true
}
