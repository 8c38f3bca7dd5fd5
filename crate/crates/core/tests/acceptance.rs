//! One PASS/FAIL line per headline criterion. Runs the full synthetic
//! pipeline about ten times, so expect it to take the better part of an hour
//! on a single core. Exits nonzero on a failed criterion only when
//! `SEMSPLAT_ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use semsplat::dataio::manifest::{load_dataset, Dataset};
use semsplat::dataio::synthetic::gen_synthetic;
use semsplat::deformation::SemanticTracker;
use semsplat::evalkit::WallClock;
use semsplat::gradcheck::{self, TOLERANCE};
use semsplat::pipeline::{
    bench_resolutions, checkpoint_dir, codec_train_step, evaluate_heldout, query_frame, run_fixture, FixtureConfig,
    FixtureOutcome, Prompt,
};
use semsplat::query::{relevancy_score, QueryResult, DEFAULT_THRESHOLD};
use semsplat::rasterizer::rasterize_forward;
use semsplat::trainer::{train_scene, TrainOptions};
use semsplat::{Camera, SceneModel};

struct Verdicts(Vec<(&'static str, bool)>);

impl Verdicts {
    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stdout().flush();
        self.0.push((name, pass));
    }
}

fn rasterizer_oracle(v: &mut Verdicts) {
    let start = Instant::now();
    let mut r = common::rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=200);
        let d = r.random_range(0..=4);
        let set = common::random_scene(&mut r, n, 64, 64, d);
        let bg = common::random_background(&mut r, d);
        let tiled = rasterize_forward(&set, 64, 64, &bg);
        worst = worst.max(tiled.max_abs_diff(&common::brute_force(&set, 64, 64, &bg)));
    }
    let secs = start.elapsed().as_secs_f64();
    v.record(
        "rasterizer oracle",
        worst <= 1e-5 && secs < 60.0,
        format!("100 scenes at 64x64, max abs diff {worst:.2e} (limit 1e-5), {secs:.1} s (limit 60)"),
    );
}

fn gradient_suite(v: &mut Verdicts) {
    let start = Instant::now();
    let reports = gradcheck::run_all(100, 0).expect("gradient suites run");
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all = reports.iter().all(|r| r.passed(100));
    let fewest = reports.iter().map(|r| r.configs).min().unwrap_or(0);
    v.record(
        "gradient suite",
        all && worst < TOLERANCE && secs < 300.0,
        format!(
            "{} backwards, >= {fewest} configs each, max rel err {worst:.2e} (limit {TOLERANCE:.0e}), {secs:.1} s (limit 300)",
            reports.len()
        ),
    );
}

fn query_math(v: &mut Verdicts, fixture: Option<(&Dataset, &SceneModel<f32>)>) {
    // every dot equal
    let img = [1.0, 0.0];
    let a = [0.3, 0.91f64.sqrt()];
    let b = [0.3, -(0.91f64.sqrt())];
    let symmetric = relevancy_score(&img, &a, &[&a[..], &b[..], &a[..], &b[..]]);
    // dot 1 with the prompt and −1 with each canonical phrase
    let c = [-1.0, 0.0];
    let reference = relevancy_score(&img, &img, &[&c[..]; 4]);
    let expected = 1.0 / (1.0 + (-2.0f64).exp());
    let mut consistent = true;
    let mut pixels = 0;
    if let Some((dataset, model)) = fixture {
        let codec = dataset.codec.as_ref().unwrap();
        let lexicon = dataset.lexicon.as_ref().unwrap();
        let cam: Camera<f32> = dataset.camera_for(0).cast();
        for name in &dataset.manifest.class_names {
            for t in [0.0, 0.37, 1.0] {
                let q = query_frame(
                    model,
                    codec,
                    lexicon,
                    &cam,
                    t,
                    &Prompt::Text(name.clone()),
                    DEFAULT_THRESHOLD,
                )
                .unwrap();
                consistent &= q
                    .relevancy
                    .iter()
                    .zip(&q.mask)
                    .all(|(s, m)| *m == (*s >= DEFAULT_THRESHOLD));
                pixels += q.mask.len();
            }
        }
    }
    let mut r = common::rng(5);
    let canon: Vec<Vec<f64>> = (0..4)
        .map(|_| unit((0..8).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect();
    let canon_refs: Vec<&[f64]> = canon.iter().map(|c| c.as_slice()).collect();
    let text = unit((0..8).map(|_| r.random_range(-1.0..1.0)).collect());
    let emb: Vec<f64> = (0..4096)
        .flat_map(|_| unit((0..8).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect();
    let q = QueryResult::from_embeddings("random", &text, &canon_refs, &emb, 64, 64, DEFAULT_THRESHOLD);
    consistent &= q
        .relevancy
        .iter()
        .zip(&q.mask)
        .all(|(s, m)| *m == (*s >= DEFAULT_THRESHOLD));
    pixels += q.mask.len();
    v.record(
        "query math",
        (symmetric - 0.5).abs() < 1e-12 && (reference - expected).abs() < 1e-12 && consistent,
        format!(
            "symmetric {symmetric:.15}, reference {reference:.15} (expected {expected:.15}), mask == score >= 0.4 on {pixels} pixels: {consistent}"
        ),
    );
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn identity_deformation(v: &mut Verdicts, dataset: &Dataset, trained: &SceneModel<f32>) {
    let mut model = trained.clone();
    let field = &mut model.field;
    for bank in [&mut field.mean, &mut field.rotation, &mut field.scale, &mut field.gate] {
        bank.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    field.tracker = SemanticTracker::zeros(model.cloud.feature_dim);
    let cam: Camera<f32> = dataset.camera_for(0).cast();
    let reference = model.render_canonical(&cam).unwrap();
    let mut r = common::rng(11);
    let times: Vec<f32> = (0..10).map(|_| r.random_range(0.0..=1.0)).collect();
    let identical = times
        .iter()
        .filter(|&&t| model.render(&cam, t).unwrap() == reference)
        .count();
    v.record(
        "identity deformation",
        identical == times.len(),
        format!(
            "{identical}/10 random times bit-identical to the static render ({} Gaussians)",
            model.cloud.len()
        ),
    );
}

fn end_to_end(v: &mut Verdicts, out: &FixtureOutcome) {
    let ious: Vec<String> = out
        .class_names
        .iter()
        .zip(&out.class_iou)
        .map(|(n, i)| format!("{n} {}", i.map_or("n/a".into(), |x| format!("{x:.1}"))))
        .collect();
    let iou_ok = out.class_iou.len() == 3 && out.class_iou.iter().all(|i| i.is_some_and(|x| x >= 70.0));
    v.record(
        "end-to-end fixture",
        iou_ok && out.heldout_psnr >= 25.0 && out.seconds <= 1200.0,
        format!(
            "IoU [{}] (limit 70), held-out PSNR {:.2} dB (limit 25), {:.0} s (limit 1200)",
            ious.join(", "),
            out.heldout_psnr,
            out.seconds
        ),
    );
}

fn train_variant(dataset: &Dataset, cfg: &FixtureConfig, tracker: bool, smoothness: bool) -> f64 {
    let mut train = cfg.train.clone();
    train.use_tracker = tracker;
    train.weights.region_smoothness = smoothness;
    let (ck, _) = train_scene::<f32>(dataset, &train, &TrainOptions::default()).unwrap();
    evaluate_heldout(dataset, &ck.model, cfg.threshold, None).unwrap().1
}

fn ablation(v: &mut Verdicts, root: &Path, seed0: (&Dataset, f64)) {
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let cfg = FixtureConfig::standard(seed);
        let owned;
        let (dataset, full) = if seed == 0 {
            seed0
        } else {
            let dir = root.join(format!("ablation-{seed}"));
            gen_synthetic(&cfg.spec, &dir).unwrap();
            codec_train_step(dir.join("scene.json"), &cfg.codec).unwrap();
            owned = load_dataset(dir.join("scene.json")).unwrap();
            let full = train_variant(&owned, &cfg, true, true);
            (&owned, full)
        };
        let no_rs = train_variant(dataset, &cfg, true, false);
        let no_tracker = train_variant(dataset, &cfg, false, true);
        println!("  seed {seed}: full {full:.2} dB, no region smoothness {no_rs:.2} dB, no tracker {no_tracker:.2} dB");
        rows.push((full, no_rs, no_tracker));
    }
    let ok = rows.iter().all(|&(f, a, b)| f >= a && f >= b);
    let mean = |k: usize| rows.iter().map(|r| [r.0, r.1, r.2][k]).sum::<f64>() / rows.len() as f64;
    v.record(
        "ablation direction",
        ok,
        format!(
            "mean held-out PSNR over 3 seeds: full {:.2}, no region smoothness {:.2}, no tracker {:.2} dB",
            mean(0),
            mean(1),
            mean(2)
        ),
    );
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn determinism(v: &mut Verdicts, first: &Path, root: &Path) {
    let second = root.join("rerun");
    run_fixture(&second, &FixtureConfig::standard(0)).unwrap();
    let (ck_a, ck_b) = (files(&checkpoint_dir(first)), files(&checkpoint_dir(&second)));
    let (m_a, m_b) = (files(&first.join("masks")), files(&second.join("masks")));
    v.record(
        "determinism",
        !ck_a.is_empty() && ck_a == ck_b && !m_a.is_empty() && m_a == m_b,
        format!(
            "checkpoint files identical: {}, {} query masks identical: {}",
            ck_a == ck_b,
            m_a.len(),
            m_a == m_b
        ),
    );
}

fn throughput(v: &mut Verdicts, dataset: &Dataset, model: &SceneModel<f32>) {
    let prompts: Vec<Prompt> = dataset.manifest.class_names.iter().cloned().map(Prompt::Text).collect();
    let sizes = [(64, 64), (128, 128), (256, 256), (512, 512)];
    let points = bench_resolutions(
        &mut WallClock::default(),
        model,
        dataset.codec.as_ref().unwrap(),
        dataset.lexicon.as_ref().unwrap(),
        &dataset.camera_for(0).cast(),
        &prompts,
        &sizes,
        7,
    )
    .unwrap();
    for p in &points {
        println!(
            "  {}x{}: median {:.2} ms, {:.1} FPS over {} runs",
            p.width,
            p.height,
            p.latency.median_ms,
            p.latency.fps,
            p.latency.samples_ms.len()
        );
    }
    let monotone = points
        .windows(2)
        .all(|w| w[0].latency.median_ms <= w[1].latency.median_ms);
    v.record(
        "throughput report",
        points.len() == sizes.len() && monotone,
        format!(
            "median latency non-decreasing across {} resolutions: {monotone}",
            points.len()
        ),
    );
}

fn main() {
    let mut v = Verdicts(Vec::new());
    rasterizer_oracle(&mut v);
    gradient_suite(&mut v);

    let root = tempfile::tempdir().unwrap();
    let first = root.path().join("fixture");
    let outcome = run_fixture(&first, &FixtureConfig::standard(0)).unwrap();
    let dataset = load_dataset(first.join("scene.json")).unwrap();
    let model = semsplat::Checkpoint::<f32>::load(checkpoint_dir(&first)).unwrap().model;

    query_math(&mut v, Some((&dataset, &model)));
    identity_deformation(&mut v, &dataset, &model);
    end_to_end(&mut v, &outcome);
    throughput(&mut v, &dataset, &model);
    determinism(&mut v, &first, root.path());
    ablation(&mut v, root.path(), (&dataset, outcome.heldout_psnr));

    let failed: Vec<&str> = v.0.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", v.0.len() - failed.len(), v.0.len());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        // the verdict lines are the report; set this to gate on them
        if std::env::var_os("SEMSPLAT_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
