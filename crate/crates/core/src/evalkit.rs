//! Segmentation and rendering metrics, query throughput measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize, Serializer};

use crate::dataio::image::quantize;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `10·log10(1/MSE)` over values in [0, 1]; `+∞` for identical inputs.
pub fn psnr<T: Real>(img: &[T], reference: &[T]) -> f64 {
    debug_assert_eq!(img.len(), reference.len());
    let mse = img
        .iter()
        .zip(reference)
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            d * d
        })
        .sum::<f64>()
        / img.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR with a shape check.
pub fn psnr_checked<T: Real>(img: &[T], reference: &[T]) -> Result<f64> {
    if img.len() != reference.len() {
        return Err(Error::invalid(format!(
            "psnr: {} values vs {} reference values",
            img.len(),
            reference.len()
        )));
    }
    Ok(psnr(img, reference))
}

/// PSNR of a render after 8-bit quantization against 8-bit ground truth.
pub fn psnr_u8<T: Real>(render: &[T], reference: &[u8]) -> Result<f64> {
    let a: Vec<f64> = render.iter().map(|&v| quantize(v) as f64 / 255.0).collect();
    let b: Vec<f64> = reference.iter().map(|&v| v as f64 / 255.0).collect();
    psnr_checked(&a, &b)
}

/// Intersection over union in percent; `None` when both masks are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "iou: mask sizes {} and {} differ",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok((union > 0).then(|| 100.0 * inter as f64 / union as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` marks classes with an empty union, left out of the mean.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn miou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "miou: {} predicted classes vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let per_class = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| iou(p, g))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(MiouReport { per_class, mean })
}

/// Millisecond time source; swapped for a scripted one in tests.
pub trait Clock {
    fn now_ms(&mut self) -> f64;
}

pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now_ms(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Replays a fixed list of timestamps.
pub struct FakeClock {
    pub stamps: Vec<f64>,
    pub next: usize,
}

impl FakeClock {
    /// Timestamps whose consecutive differences are `durations`, starting at 0.
    /// Each measured run reads the clock twice.
    pub fn from_durations(durations: &[f64]) -> Self {
        let mut stamps = Vec::new();
        let mut t = 0.0;
        for d in durations {
            stamps.push(t);
            t += d;
            stamps.push(t);
        }
        Self { stamps, next: 0 }
    }
}

impl Clock for FakeClock {
    fn now_ms(&mut self) -> f64 {
        let v = self.stamps[self.next.min(self.stamps.len() - 1)];
        self.next += 1;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    pub fn from_samples(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no latency samples"));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        samples.shrink_to_fit();
        Ok(Self {
            samples_ms: samples,
            median_ms: median,
            p95_ms: sorted[rank - 1],
            fps: 1000.0 / median,
        })
    }
}

/// Times `run` `repeats` times after `warmup` untimed runs.
pub fn bench_query<C: Clock, F: FnMut() -> Result<()>>(
    clock: &mut C,
    warmup: usize,
    repeats: usize,
    mut run: F,
) -> Result<LatencyStats> {
    if warmup < 1 {
        return Err(Error::invalid("bench_query needs at least one warmup run"));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = clock.now_ms();
        run()?;
        samples.push(clock.now_ms() - start);
    }
    LatencyStats::from_samples(samples)
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn vec_finite_or_inf<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_finite() {
            seq.serialize_element(x)?;
        } else {
            seq.serialize_element("inf")?;
        }
    }
    seq.end()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub miou: Option<f64>,
    #[serde(serialize_with = "vec_finite_or_inf")]
    pub psnr_per_frame: Vec<f64>,
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr_mean: f64,
    pub latency: Option<LatencyStats>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8}", "class", "IoU %");
        for (name, v) in &self.per_class_iou {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "{name:<16} {v:>8.2}");
                }
                None => {
                    let _ = writeln!(s, "{name:<16} {:>8}", "n/a");
                }
            }
        }
        if let Some(m) = self.miou {
            let _ = writeln!(s, "{:<16} {m:>8.2}", "mIoU");
        }
        let _ = writeln!(s, "{:<16} {:>8.2}", "PSNR dB", self.psnr_mean);
        if let Some(l) = &self.latency {
            let _ = writeln!(s, "{:<16} {:>8.2}", "median ms", l.median_ms);
            let _ = writeln!(s, "{:<16} {:>8.2}", "p95 ms", l.p95_ms);
            let _ = writeln!(s, "{:<16} {:>8.2}", "FPS", l.fps);
        }
        s
    }
}
