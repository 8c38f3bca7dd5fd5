#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat::rasterizer::{Background, RenderOutput, Splat2D, SplatSet, ALPHA_MAX, ALPHA_MIN, MIN_TRANSMITTANCE};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `count` random anisotropic splats, some partly off-screen.
pub fn random_scene(rng: &mut ChaCha8Rng, count: usize, width: usize, height: usize, d: usize) -> SplatSet<f64> {
    let mut set = SplatSet::new(d);
    while set.len() < count {
        let (sx, sy) = (rng.random_range(0.5..8.0), rng.random_range(0.5..8.0));
        let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (c, s) = (th.cos(), th.sin());
        let cov = [
            c * c * sx * sx + s * s * sy * sy,
            c * s * (sx * sx - sy * sy),
            s * s * sx * sx + c * c * sy * sy,
        ];
        let center = [
            rng.random_range(-8.0..width as f64 + 8.0),
            rng.random_range(-8.0..height as f64 + 8.0),
        ];
        let depth = rng.random_range(0.5..10.0);
        let rgb = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let alpha = rng.random_range(0.02..1.0);
        if let Some(sp) = Splat2D::new(center, cov, depth, rgb, alpha, set.len()) {
            let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            set.push(sp, &f);
        }
    }
    set
}

pub fn random_background(rng: &mut ChaCha8Rng, d: usize) -> Background<f64> {
    Background {
        color: [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
        feature: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Per-pixel front-to-back compositing over every splat, written
/// independently of the tiled renderer.
pub fn brute_force(set: &SplatSet<f64>, width: usize, height: usize, bg: &Background<f64>) -> RenderOutput<f64> {
    let d = set.feature_dim;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&set.splats[a], &set.splats[b]);
        sa.view_depth
            .total_cmp(&sb.view_depth)
            .then(sa.source_index.cmp(&sb.source_index))
    });
    let mut out = RenderOutput::zeros(width, height, d);
    for py in 0..height {
        for px in 0..width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let p = py * width + px;
            let mut trans = 1.0;
            for &i in &order {
                let s = &set.splats[i];
                let (dx, dy) = (x - s.center[0], y - s.center[1]);
                let [a, b, c] = s.conic;
                let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
                if power > 0.0 {
                    continue;
                }
                let raw = s.alpha_base * power.exp();
                if raw < ALPHA_MIN {
                    continue;
                }
                let alpha = raw.min(ALPHA_MAX);
                let w = alpha * trans;
                for k in 0..3 {
                    out.color[3 * p + k] += w * s.rgb[k];
                }
                out.depth[p] += w * s.view_depth;
                for k in 0..d {
                    out.feature[d * p + k] += w * set.features[i * d + k];
                }
                trans *= 1.0 - alpha;
                if trans < MIN_TRANSMITTANCE {
                    break;
                }
            }
            for k in 0..3 {
                out.color[3 * p + k] += trans * bg.color[k];
            }
            for k in 0..d {
                out.feature[d * p + k] += trans * bg.feature[k];
            }
            out.accum_alpha[p] = 1.0 - trans;
        }
    }
    out
}

/// A 32×32, 16-frame synthetic scene with a quickly fitted codec.
pub fn small_fixture(dir: &std::path::Path, seed: u64) -> semsplat::dataio::manifest::Dataset {
    use semsplat::codec::CodecTrainConfig;
    use semsplat::dataio::synthetic::{gen_synthetic, SyntheticSpec};
    use semsplat::pipeline::{codec_train_step, CodecStepConfig};
    let spec = SyntheticSpec {
        frames: 16,
        width: 32,
        height: 32,
        ..SyntheticSpec::standard(seed)
    };
    gen_synthetic(&spec, dir).unwrap();
    let manifest = dir.join("scene.json");
    let cfg = CodecStepConfig {
        train: CodecTrainConfig {
            epochs: 5,
            seed,
            ..CodecTrainConfig::default()
        },
        samples: 512,
    };
    codec_train_step(&manifest, &cfg).unwrap();
    semsplat::dataio::manifest::load_dataset(&manifest).unwrap()
}

pub fn small_train_config(iterations: usize, seed: u64) -> semsplat::TrainConfig {
    semsplat::TrainConfig {
        iterations,
        seed,
        init_stride: 2,
        eval_every: 5,
        weights: semsplat::losses::LossWeights::for_resolution(32, 32),
        ..semsplat::TrainConfig::default()
    }
}
