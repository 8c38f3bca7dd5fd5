mod common;

use std::path::Path;
use std::process::{Command, Output};

use semsplat::dataio::image::decode_png;

fn semsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsplat"))
        .args(args)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let o = semsplat(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let t = text(&o);
    assert!(t.contains("Usage"), "{t}");
    assert!(t.contains("gen-synthetic") && t.contains("serve"), "{t}");
}

#[test]
fn train_without_manifest_names_the_flag() {
    let o = semsplat(&["train", "--iterations", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("--manifest"));
}

#[test]
fn help_exits_0() {
    assert_eq!(semsplat(&["--help"]).status.code(), Some(0));
    assert_eq!(semsplat(&["query", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_files_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = semsplat(&["train", "--manifest", s(&dir.path().join("nope.json"))]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn grad_check_reports_the_max_error() {
    let o = semsplat(&["grad-check", "--seed", "0"]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(0), "{t}");
    let line = t.lines().find(|l| l.starts_with("max relative error")).unwrap();
    let v: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(v < 1e-3, "{line}");
}

#[test]
fn scene_commands_from_generation_to_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = d.join("scene.json");
    let run = |args: &[&str]| {
        let o = semsplat(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o));
        o
    };
    run(&[
        "gen-synthetic",
        "--out",
        s(d),
        "--frames",
        "16",
        "--width",
        "32",
        "--height",
        "32",
    ]);
    run(&[
        "codec-train",
        "--manifest",
        s(&manifest),
        "--epochs",
        "3",
        "--samples",
        "256",
    ]);
    let log = d.join("train.jsonl");
    run(&[
        "train",
        "--manifest",
        s(&manifest),
        "--iterations",
        "6",
        "--log",
        s(&log),
    ]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 6);
    assert!(d.join("checkpoint").is_dir());

    let frame = d.join("frame.png");
    run(&[
        "render",
        "--manifest",
        s(&manifest),
        "--time",
        "0.5",
        "--out",
        s(&frame),
    ]);
    assert_eq!(decode_png(&std::fs::read(&frame).unwrap()).unwrap().0, 32);

    // manifest and checkpoint default to the working directory
    let o = Command::new(env!("CARGO_BIN_EXE_semsplat"))
        .current_dir(d)
        .args(["query", "--prompt", "liver", "--time", "0.5", "--out", "mask.png"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let (w, h, ch, _) = decode_png(&std::fs::read(d.join("mask.png")).unwrap()).unwrap();
    assert_eq!((w, h, ch), (32, 32, 1));
    let (_, _, ch, _) = decode_png(&std::fs::read(d.join("mask_heatmap.png")).unwrap()).unwrap();
    assert_eq!(ch, 3);

    let o = semsplat(&[
        "query",
        "--manifest",
        s(&manifest),
        "--prompt",
        "livr",
        "--time",
        "0.5",
        "--out",
        s(&d.join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("liver"));
    let o = semsplat(&[
        "query",
        "--manifest",
        s(&manifest),
        "--prompt",
        "liver",
        "--time",
        "0.5",
        "--threshold",
        "1.5",
        "--out",
        s(&d.join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let report = d.join("report.json");
    run(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--out",
        s(&report),
        "--bench-repeats",
        "2",
        "--resolutions",
        "16,32",
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["psnr_mean"].as_f64().unwrap().is_finite());
    assert_eq!(v["throughput"].as_array().unwrap().len(), 2);
    assert!(v["latency"]["median_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn serve_rejects_zero_concurrency() {
    let p = common::paths();
    let o = semsplat(&[
        "serve",
        "--manifest",
        s(&p.manifest),
        "--max-concurrency",
        "0",
        "--port",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
