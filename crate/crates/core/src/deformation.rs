//! Time-dependent deformation of the canonical cloud.
//!
//! Each attribute offset is a weighted sum of Gaussian radial bases in
//! normalized time, ψ(t) = Σ_j ω_j exp(−(t−θ_j)² / 2σ_j²). Means, raw
//! rotations and log-scales receive additive offsets; features are deformed
//! by a small shared 1-D convolutional tracker gated per point by
//! sigmoid(δ·ψ_gate(t)).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::archive::{ArchiveReader, ArchiveWriter};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::linalg::{self, normalize_backward};
use crate::scalar::{sigmoid, Real};

pub const MIN_WIDTH: f64 = 1e-6;
pub const DEFAULT_BASIS: usize = 16;
pub const DEFAULT_SLOPE: f64 = 2.5;
pub const TRACKER_HIDDEN: usize = 16;
pub const TRACKER_KERNEL: usize = 3;

/// ψ(t) for one point: `weights` is C×B, `centers` and `widths` are B long.
pub fn fdm_eval<T: Real>(weights: &[T], centers: &[T], widths: &[T], t: T, out: &mut [T]) {
    let b = centers.len();
    let half = T::lit(0.5);
    out.fill(T::zero());
    for j in 0..b {
        let d = (t - centers[j]) / widths[j];
        let basis = (-half * d * d).exp();
        for (c, o) in out.iter_mut().enumerate() {
            *o += weights[c * b + j] * basis;
        }
    }
}

/// Accumulates ∂L/∂ω, ∂L/∂θ, ∂L/∂σ for one point given ∂L/∂ψ.
#[allow(clippy::too_many_arguments)]
pub fn fdm_backward<T: Real>(
    weights: &[T],
    centers: &[T],
    widths: &[T],
    t: T,
    upstream: &[T],
    g_weights: &mut [T],
    g_centers: &mut [T],
    g_widths: &mut [T],
) {
    if upstream.iter().all(|&g| g == T::zero()) {
        return;
    }
    let b = centers.len();
    let half = T::lit(0.5);
    for j in 0..b {
        let diff = t - centers[j];
        let s = widths[j];
        let basis = (-half * diff * diff / (s * s)).exp();
        // Σ_c g_c ω_cj
        let mut wg = T::zero();
        for (c, &g) in upstream.iter().enumerate() {
            g_weights[c * b + j] += g * basis;
            wg += g * weights[c * b + j];
        }
        g_centers[j] += wg * basis * diff / (s * s);
        g_widths[j] += wg * basis * diff * diff / (s * s * s);
    }
}

/// One bank of per-point basis parameters with `channels` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FdmBank<T> {
    pub points: usize,
    pub channels: usize,
    pub basis: usize,
    /// N×C×B
    pub weights: Vec<T>,
    /// N×B
    pub centers: Vec<T>,
    /// N×B
    pub widths: Vec<T>,
}

impl<T: Real> FdmBank<T> {
    /// Zero weights, centers evenly spaced on [0, 1], widths 1/B.
    pub fn identity(points: usize, channels: usize, basis: usize) -> Self {
        let centers_one: Vec<T> = (0..basis)
            .map(|j| {
                if basis == 1 {
                    T::lit(0.5)
                } else {
                    T::lit(j as f64 / (basis - 1) as f64)
                }
            })
            .collect();
        Self {
            points,
            channels,
            basis,
            weights: vec![T::zero(); points * channels * basis],
            centers: centers_one.iter().cycle().take(points * basis).cloned().collect(),
            widths: vec![T::lit(1.0 / basis as f64); points * basis],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            points: self.points,
            channels: self.channels,
            basis: self.basis,
            weights: vec![T::zero(); self.weights.len()],
            centers: vec![T::zero(); self.centers.len()],
            widths: vec![T::zero(); self.widths.len()],
        }
    }

    fn slices(&self, i: usize) -> (&[T], &[T], &[T]) {
        let (c, b) = (self.channels, self.basis);
        (
            &self.weights[i * c * b..(i + 1) * c * b],
            &self.centers[i * b..(i + 1) * b],
            &self.widths[i * b..(i + 1) * b],
        )
    }

    pub fn eval(&self, i: usize, t: T, out: &mut [T]) {
        let (w, c, s) = self.slices(i);
        fdm_eval(w, c, s, t, out);
    }

    pub fn backward(&self, i: usize, t: T, upstream: &[T], grads: &mut FdmBank<T>) {
        let (w, c, s) = self.slices(i);
        let (ch, b) = (self.channels, self.basis);
        fdm_backward(
            w,
            c,
            s,
            t,
            upstream,
            &mut grads.weights[i * ch * b..(i + 1) * ch * b],
            &mut grads.centers[i * b..(i + 1) * b],
            &mut grads.widths[i * b..(i + 1) * b],
        );
    }

    pub fn clamp_widths(&mut self) {
        let lo = T::lit(MIN_WIDTH);
        self.widths.iter_mut().for_each(|s| *s = s.max(lo));
    }

    pub fn check(&self, field: &str) -> Result<()> {
        let (n, c, b) = (self.points, self.channels, self.basis);
        for (what, len, want) in [
            ("weights", self.weights.len(), n * c * b),
            ("centers", self.centers.len(), n * b),
            ("widths", self.widths.len(), n * b),
        ] {
            if len != want {
                return Err(Error::DimensionMismatch {
                    field: format!("{field}.{what}"),
                    expected: want,
                    found: len,
                });
            }
        }
        Ok(())
    }
}

/// Shared feature tracker: two 1-D convolutions over the sequence
/// `[f_1 .. f_d, t]` (one input channel, same padding, ReLU after each)
/// followed by a linear head back to `d` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTracker<T> {
    pub feature_dim: usize,
    /// H×1×K
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    /// H×H×K
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    /// d × H·(d+1)
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
    pub slope: T,
}

/// Intermediate activations of one tracker evaluation.
pub struct TrackerTape<T> {
    input: Vec<T>,
    pre1: Vec<T>,
    act1: Vec<T>,
    pre2: Vec<T>,
    act2: Vec<T>,
}

const H: usize = TRACKER_HIDDEN;
const K: usize = TRACKER_KERNEL;

impl<T: Real> TrackerTape<T> {
    pub fn new(feature_dim: usize) -> Self {
        let len = feature_dim + 1;
        Self {
            input: vec![T::zero(); len],
            pre1: vec![T::zero(); H * len],
            act1: vec![T::zero(); H * len],
            pre2: vec![T::zero(); H * len],
            act2: vec![T::zero(); H * len],
        }
    }

    /// Smallest |pre-activation| over both ReLU layers; a finite-difference
    /// probe is only meaningful when this stays well above the step.
    pub fn min_abs_preactivation(&self) -> T {
        self.pre1
            .iter()
            .chain(&self.pre2)
            .fold(T::infinity(), |m, &p| m.min(p.abs()))
    }
}

fn relu_mask<T: Real>(g: &mut [T], pre: &[T]) {
    for (g, &p) in g.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Kernel-3 convolution with zero padding: `x` is `cin×len`, `w` is
/// `cout×cin×3`, `out` is `cout×len`. Each output position is one dot
/// product against the gathered `cin×3` window.
fn conv_same<T: Real>(x: &[T], cin: usize, w: &[T], b: &[T], len: usize, out: &mut [T]) {
    let m = cin * K;
    let mut col = [T::zero(); H * K];
    let col = &mut col[..m];
    for i in 0..len {
        for c in 0..cin {
            let xr = &x[c * len..(c + 1) * len];
            col[c * K] = if i > 0 { xr[i - 1] } else { T::zero() };
            col[c * K + 1] = xr[i];
            col[c * K + 2] = if i + 1 < len { xr[i + 1] } else { T::zero() };
        }
        for (o, &bo) in b.iter().enumerate() {
            out[o * len + i] = bo + linalg::dot(&w[o * m..(o + 1) * m], col);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_same_backward<T: Real>(
    x: &[T],
    cin: usize,
    w: &[T],
    len: usize,
    g_out: &[T],
    g_w: &mut [T],
    g_b: &mut [T],
    g_x: &mut [T],
) {
    let m = cin * K;
    let mut col = [T::zero(); H * K];
    let mut g_col = [T::zero(); H * K];
    let (col, g_col) = (&mut col[..m], &mut g_col[..m]);
    let cout = g_b.len();
    for i in 0..len {
        if (0..cout).all(|o| g_out[o * len + i] == T::zero()) {
            continue;
        }
        for c in 0..cin {
            let xr = &x[c * len..(c + 1) * len];
            col[c * K] = if i > 0 { xr[i - 1] } else { T::zero() };
            col[c * K + 1] = xr[i];
            col[c * K + 2] = if i + 1 < len { xr[i + 1] } else { T::zero() };
        }
        g_col.fill(T::zero());
        for o in 0..cout {
            let g = g_out[o * len + i];
            if g == T::zero() {
                continue;
            }
            g_b[o] += g;
            linalg::axpy(g, col, &mut g_w[o * m..(o + 1) * m]);
            linalg::axpy(g, &w[o * m..(o + 1) * m], g_col);
        }
        for c in 0..cin {
            let gx = &mut g_x[c * len..(c + 1) * len];
            if i > 0 {
                gx[i - 1] += g_col[c * K];
            }
            gx[i] += g_col[c * K + 1];
            if i + 1 < len {
                gx[i + 1] += g_col[c * K + 2];
            }
        }
    }
}

impl<T: Real> SemanticTracker<T> {
    pub fn zeros(feature_dim: usize) -> Self {
        let len = feature_dim + 1;
        Self {
            feature_dim,
            conv1_w: vec![T::zero(); H * K],
            conv1_b: vec![T::zero(); H],
            conv2_w: vec![T::zero(); H * H * K],
            conv2_b: vec![T::zero(); H],
            head_w: vec![T::zero(); feature_dim * H * len],
            head_b: vec![T::zero(); feature_dim],
            slope: T::lit(DEFAULT_SLOPE),
        }
    }

    /// He-initialized convolutions and a zero head, so the tracker starts as
    /// the identity deformation while still receiving head gradients.
    pub fn init(feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Self::zeros(feature_dim);
        let mut fill = |v: &mut [T], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            v.iter_mut()
                .for_each(|x| *x = T::lit(std * rng.sample::<f64, _>(StandardNormal)));
        };
        fill(&mut t.conv1_w, K);
        fill(&mut t.conv2_w, H * K);
        t
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.feature_dim);
        z.slope = T::zero();
        z
    }

    fn seq_len(&self) -> usize {
        self.feature_dim + 1
    }

    pub fn forward(&self, feature: &[T], t: T) -> (Vec<T>, TrackerTape<T>) {
        let mut tape = TrackerTape::new(self.feature_dim);
        let mut out = vec![T::zero(); self.feature_dim];
        self.forward_into(feature, t, &mut tape, &mut out);
        (out, tape)
    }

    /// Allocation-free forward pass reusing `tape`.
    pub fn forward_into(&self, feature: &[T], t: T, tape: &mut TrackerTape<T>, out: &mut [T]) {
        let d = self.feature_dim;
        let len = self.seq_len();
        tape.input[..d].copy_from_slice(feature);
        tape.input[d] = t;
        conv_same(&tape.input, 1, &self.conv1_w, &self.conv1_b, len, &mut tape.pre1);
        for (a, &p) in tape.act1.iter_mut().zip(&tape.pre1) {
            *a = p.max(T::zero());
        }
        conv_same(&tape.act1, H, &self.conv2_w, &self.conv2_b, len, &mut tape.pre2);
        for (a, &p) in tape.act2.iter_mut().zip(&tape.pre2) {
            *a = p.max(T::zero());
        }
        let m = H * len;
        for (j, o) in out.iter_mut().enumerate().take(d) {
            *o = self.head_b[j] + linalg::dot(&self.head_w[j * m..(j + 1) * m], &tape.act2);
        }
    }

    /// Accumulates weight gradients into `grads` and returns ∂L/∂feature.
    pub fn backward(&self, tape: &TrackerTape<T>, g_out: &[T], grads: &mut SemanticTracker<T>) -> Vec<T> {
        let d = self.feature_dim;
        let len = self.seq_len();
        let m = H * len;
        let mut g_act2 = vec![T::zero(); m];
        for j in 0..d {
            let g = g_out[j];
            if g == T::zero() {
                continue;
            }
            grads.head_b[j] += g;
            let gw = &mut grads.head_w[j * m..(j + 1) * m];
            let w = &self.head_w[j * m..(j + 1) * m];
            for q in 0..m {
                gw[q] += g * tape.act2[q];
                g_act2[q] += g * w[q];
            }
        }
        relu_mask(&mut g_act2, &tape.pre2);
        let mut g_act1 = vec![T::zero(); m];
        conv_same_backward(
            &tape.act1,
            H,
            &self.conv2_w,
            len,
            &g_act2,
            &mut grads.conv2_w,
            &mut grads.conv2_b,
            &mut g_act1,
        );
        relu_mask(&mut g_act1, &tape.pre1);
        let mut g_input = vec![T::zero(); len];
        conv_same_backward(
            &tape.input,
            1,
            &self.conv1_w,
            len,
            &g_act1,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
            &mut g_input,
        );
        g_input.truncate(d);
        g_input
    }

    pub fn gate(&self, psi: T) -> T {
        sigmoid(self.slope * psi)
    }
}

/// All deformation parameters of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    pub mean: FdmBank<T>,
    pub rotation: FdmBank<T>,
    pub scale: FdmBank<T>,
    pub gate: FdmBank<T>,
    pub tracker: SemanticTracker<T>,
}

/// Deformed attributes at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGaussians<T> {
    pub means: Vec<T>,
    /// Unit quaternions.
    pub rotations: Vec<T>,
    pub log_scales: Vec<T>,
    pub features: Vec<T>,
}

/// Upstream gradients on the deformed attributes (same layout).
pub type DeformedGrads<T> = DeformedGaussians<T>;

impl<T: Real> DeformedGaussians<T> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            means: vec![T::zero(); 3 * n],
            rotations: vec![T::zero(); 4 * n],
            log_scales: vec![T::zero(); 3 * n],
            features: vec![T::zero(); d * n],
        }
    }
}

impl<T: Real> DeformationField<T> {
    pub fn identity(points: usize, basis: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            mean: FdmBank::identity(points, 3, basis),
            rotation: FdmBank::identity(points, 4, basis),
            scale: FdmBank::identity(points, 3, basis),
            gate: FdmBank::identity(points, 1, basis),
            tracker: SemanticTracker::init(feature_dim, seed),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mean: self.mean.zeros_like(),
            rotation: self.rotation.zeros_like(),
            scale: self.scale.zeros_like(),
            gate: self.gate.zeros_like(),
            tracker: self.tracker.zeros_like(),
        }
    }

    pub fn points(&self) -> usize {
        self.mean.points
    }

    pub fn basis(&self) -> usize {
        self.mean.basis
    }

    pub fn clamp_widths(&mut self) {
        self.mean.clamp_widths();
        self.rotation.clamp_widths();
        self.scale.clamp_widths();
        self.gate.clamp_widths();
    }

    pub fn check(&self, n: usize, d: usize) -> Result<()> {
        for (name, bank, ch) in [
            ("mean", &self.mean, 3),
            ("rotation", &self.rotation, 4),
            ("scale", &self.scale, 3),
            ("gate", &self.gate, 1),
        ] {
            if bank.points != n || bank.channels != ch || bank.basis != self.mean.basis {
                return Err(Error::DimensionMismatch {
                    field: format!("deformation.{name}"),
                    expected: n,
                    found: bank.points,
                });
            }
            bank.check(name)?;
        }
        if self.tracker.feature_dim != d {
            return Err(Error::DimensionMismatch {
                field: "tracker feature dimension".into(),
                expected: d,
                found: self.tracker.feature_dim,
            });
        }
        Ok(())
    }

    pub fn write_into(&self, w: &mut ArchiveWriter) -> Result<()> {
        let (n, b) = (self.points(), self.basis());
        w.meta("deformation.basis", b);
        for (name, bank) in [
            ("mean", &self.mean),
            ("rotation", &self.rotation),
            ("scale", &self.scale),
            ("gate", &self.gate),
        ] {
            w.put_real(&format!("fdm.{name}.weights"), vec![n, bank.channels, b], &bank.weights)?;
            w.put_real(&format!("fdm.{name}.centers"), vec![n, b], &bank.centers)?;
            w.put_real(&format!("fdm.{name}.widths"), vec![n, b], &bank.widths)?;
        }
        let tr = &self.tracker;
        let d = tr.feature_dim;
        w.put_real("tracker.conv1_w", vec![H, 1, K], &tr.conv1_w)?;
        w.put_real("tracker.conv1_b", vec![H], &tr.conv1_b)?;
        w.put_real("tracker.conv2_w", vec![H, H, K], &tr.conv2_w)?;
        w.put_real("tracker.conv2_b", vec![H], &tr.conv2_b)?;
        w.put_real("tracker.head_w", vec![d, H * (d + 1)], &tr.head_w)?;
        w.put_real("tracker.head_b", vec![d], &tr.head_b)?;
        w.put_real("tracker.slope", vec![1], &[tr.slope])
    }

    pub fn read_from(r: &ArchiveReader, n: usize, d: usize) -> Result<Self> {
        let b = r.meta_usize("deformation.basis")?;
        let bank = |name: &str, ch: usize| -> Result<FdmBank<T>> {
            Ok(FdmBank {
                points: n,
                channels: ch,
                basis: b,
                weights: r.real(&format!("fdm.{name}.weights"), &[n, ch, b])?,
                centers: r.real(&format!("fdm.{name}.centers"), &[n, b])?,
                widths: r.real(&format!("fdm.{name}.widths"), &[n, b])?,
            })
        };
        let tracker = SemanticTracker {
            feature_dim: d,
            conv1_w: r.real("tracker.conv1_w", &[H, 1, K])?,
            conv1_b: r.real("tracker.conv1_b", &[H])?,
            conv2_w: r.real("tracker.conv2_w", &[H, H, K])?,
            conv2_b: r.real("tracker.conv2_b", &[H])?,
            head_w: r.real("tracker.head_w", &[d, H * (d + 1)])?,
            head_b: r.real("tracker.head_b", &[d])?,
            slope: r.real("tracker.slope", &[1])?[0],
        };
        Ok(Self {
            mean: bank("mean", 3)?,
            rotation: bank("rotation", 4)?,
            scale: bank("scale", 3)?,
            gate: bank("gate", 1)?,
            tracker,
        })
    }
}

/// μ′ = μ + ψ_μ(t), r′ = normalize(r + ψ_r(t)), s′ = s + ψ_s(t). Features
/// are copied unchanged; see [`deform_feature`].
pub fn deform_gaussian<T: Real>(
    cloud: &GaussianCloud<T>,
    field: &DeformationField<T>,
    t: T,
) -> Result<DeformedGaussians<T>> {
    let n = cloud.len();
    let mut out = DeformedGaussians {
        means: cloud.means.clone(),
        rotations: cloud.rotations.clone(),
        log_scales: cloud.log_scales.clone(),
        features: cloud.features.clone(),
    };
    let mut psi = [T::zero(); 4];
    for i in 0..n {
        field.mean.eval(i, t, &mut psi[..3]);
        for a in 0..3 {
            out.means[3 * i + a] += psi[a];
        }
        field.scale.eval(i, t, &mut psi[..3]);
        for a in 0..3 {
            out.log_scales[3 * i + a] += psi[a];
        }
        field.rotation.eval(i, t, &mut psi);
        let q = &mut out.rotations[4 * i..4 * i + 4];
        for a in 0..4 {
            q[a] += psi[a];
        }
        let norm = q.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::lit(1e-12)) || !norm.is_finite() {
            return Err(Error::DegenerateRotation {
                index: i,
                norm: norm.as_f64(),
            });
        }
        q.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// f′ = f + g(concat(f, t)) · sigmoid(δ·ψ_gate(t)) for every point.
pub fn deform_feature<T: Real>(
    cloud: &GaussianCloud<T>,
    tracker: &SemanticTracker<T>,
    gate: &FdmBank<T>,
    t: T,
) -> Vec<T> {
    let d = cloud.feature_dim;
    let mut out = cloud.features.clone();
    let mut psi = [T::zero()];
    let mut tape = TrackerTape::new(d);
    let mut g = vec![T::zero(); d];
    for i in 0..cloud.len() {
        gate.eval(i, t, &mut psi);
        let beta = tracker.gate(psi[0]);
        tracker.forward_into(cloud.feature(i), t, &mut tape, &mut g);
        for k in 0..d {
            out[i * d + k] += g[k] * beta;
        }
    }
    out
}

/// Chains gradients on the deformed attributes back to the canonical cloud
/// and the deformation parameters. `use_tracker` must match the forward.
pub fn deform_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    field: &DeformationField<T>,
    t: T,
    upstream: &DeformedGrads<T>,
    use_tracker: bool,
    g_cloud: &mut GaussianCloud<T>,
    g_field: &mut DeformationField<T>,
) {
    let n = cloud.len();
    let d = cloud.feature_dim;
    let mut psi = [T::zero(); 4];
    let mut tape = TrackerTape::new(d);
    let mut g = vec![T::zero(); d];
    let zero = |v: &[T]| v.iter().all(|&x| x == T::zero());
    for i in 0..n {
        let gm = &upstream.means[3 * i..3 * i + 3];
        if zero(gm)
            && zero(&upstream.rotations[4 * i..4 * i + 4])
            && zero(&upstream.log_scales[3 * i..3 * i + 3])
            && zero(&upstream.features[d * i..d * (i + 1)])
        {
            continue;
        }
        for a in 0..3 {
            g_cloud.means[3 * i + a] += gm[a];
        }
        field.mean.backward(i, t, gm, &mut g_field.mean);

        let gs = &upstream.log_scales[3 * i..3 * i + 3];
        for a in 0..3 {
            g_cloud.log_scales[3 * i + a] += gs[a];
        }
        field.scale.backward(i, t, gs, &mut g_field.scale);

        field.rotation.eval(i, t, &mut psi);
        let raw: [T; 4] = std::array::from_fn(|a| cloud.rotations[4 * i + a] + psi[a]);
        let gq: [T; 4] = std::array::from_fn(|a| upstream.rotations[4 * i + a]);
        let g_raw = normalize_backward(&raw, &gq);
        for a in 0..4 {
            g_cloud.rotations[4 * i + a] += g_raw[a];
        }
        field.rotation.backward(i, t, &g_raw, &mut g_field.rotation);

        let gf = &upstream.features[d * i..d * (i + 1)];
        for k in 0..d {
            g_cloud.features[d * i + k] += gf[k];
        }
        if use_tracker && d > 0 && gf.iter().any(|&v| v != T::zero()) {
            let tr = &field.tracker;
            field.gate.eval(i, t, &mut psi[..1]);
            let beta = tr.gate(psi[0]);
            tr.forward_into(cloud.feature(i), t, &mut tape, &mut g);
            let g_beta: T = (0..d).map(|k| gf[k] * g[k]).sum();
            let g_out: Vec<T> = gf.iter().map(|&v| v * beta).collect();
            let g_in = tr.backward(&tape, &g_out, &mut g_field.tracker);
            for k in 0..d {
                g_cloud.features[d * i + k] += g_in[k];
            }
            let g_psi = g_beta * beta * (T::one() - beta) * tr.slope;
            field.gate.backward(i, t, &[g_psi], &mut g_field.gate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_offsets() {
        let bank = FdmBank::<f64>::identity(2, 3, 5);
        let mut out = [1.0; 3];
        bank.eval(1, 0.37, &mut out);
        assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn single_basis_peak() {
        let mut out = [0.0];
        fdm_eval(&[1.0f64], &[0.5], &[0.2], 0.5, &mut out);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn two_basis_closed_form() {
        let mut out = [0.0];
        fdm_eval(&[1.0f64, -2.0], &[0.2, 0.8], &[0.1, 0.3], 0.5, &mut out);
        let oracle = 1.0 * (-0.5f64 * (0.3f64 / 0.1).powi(2)).exp() + -2.0 * (-0.5f64 * 1.0).exp();
        assert!((out[0] - oracle).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_gradients() {
        let (w, c, s) = ([0.0f64, 0.0], [0.3, 0.9], [0.2, 0.1]);
        let (mut gw, mut gc, mut gs) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        fdm_backward(&w, &c, &s, 0.4, &[1.0], &mut gw, &mut gc, &mut gs);
        assert_eq!(gc, [0.0; 2]);
        assert_eq!(gs, [0.0; 2]);
        assert!((gw[0] - (-0.5f64 * 0.25).exp()).abs() < 1e-15);
    }

    #[test]
    fn center_gradient_vanishes_at_peak() {
        let (w, c, s) = ([1.7f64], [0.6], [0.2]);
        let (mut gw, mut gc, mut gs) = ([0.0], [0.0], [0.0]);
        fdm_backward(&w, &c, &s, 0.6, &[1.0], &mut gw, &mut gc, &mut gs);
        assert_eq!(gc[0], 0.0);
        assert_eq!(gs[0], 0.0);
    }

    #[test]
    fn gate_at_zero_is_half_and_slope_value() {
        let tr = SemanticTracker::<f64>::zeros(3);
        assert_eq!(tr.gate(0.0), 0.5);
        assert!((tr.gate(1.0) - 1.0 / (1.0 + (-2.5f64).exp())).abs() < 1e-15);
        assert!((tr.gate(1.0) - 0.924).abs() < 5e-4);
    }

    #[test]
    fn zero_tracker_leaves_features() {
        let mut cloud = GaussianCloud::<f64>::zeros(3, 1, 3);
        cloud.features.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let mut gate = FdmBank::identity(3, 1, 4);
        gate.weights.iter_mut().for_each(|w| *w = 0.7);
        let out = deform_feature(&cloud, &SemanticTracker::zeros(3), &gate, 0.3);
        assert_eq!(out, cloud.features);
    }

    #[test]
    fn zero_gate_halves_tracker_output() {
        let mut cloud = GaussianCloud::<f64>::zeros(1, 1, 3);
        cloud.features.copy_from_slice(&[0.2, -0.4, 0.9]);
        let mut tr = SemanticTracker::init(3, 11);
        tr.head_w
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = ((i % 5) as f64 - 2.0) * 0.05);
        tr.head_b.copy_from_slice(&[0.1, 0.2, 0.3]);
        let gate = FdmBank::identity(1, 1, 4);
        let out = deform_feature(&cloud, &tr, &gate, 0.6);
        let (g, _) = tr.forward(&cloud.features, 0.6);
        for k in 0..3 {
            assert_eq!(out[k], cloud.features[k] + 0.5 * g[k]);
        }
    }

    #[test]
    fn identity_field_preserves_attributes() {
        let mut cloud = GaussianCloud::<f64>::zeros(4, 1, 2);
        cloud
            .means
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 * 0.1);
        let field = DeformationField::identity(4, 8, 2, 0);
        let out = deform_gaussian(&cloud, &field, 0.77).unwrap();
        assert_eq!(out.means, cloud.means);
        assert_eq!(out.rotations, cloud.rotations);
        assert_eq!(out.log_scales, cloud.log_scales);
    }

    #[test]
    fn additive_mean_offset() {
        let cloud = GaussianCloud::<f64>::zeros(1, 0, 0);
        let mut field = DeformationField::identity(1, 1, 0, 0);
        field.mean.weights.copy_from_slice(&[0.1, 0.0, 0.0]);
        // single basis centered at 0.5 evaluated at its peak
        let out = deform_gaussian(&cloud, &field, 0.5).unwrap();
        assert_eq!(out.means, vec![0.1, 0.0, 0.0]);
    }

    #[test]
    fn cancelling_rotation_is_degenerate() {
        let cloud = GaussianCloud::<f64>::zeros(1, 0, 0);
        let mut field = DeformationField::identity(1, 1, 0, 0);
        field.rotation.weights[0] = -1.0;
        assert!(matches!(
            deform_gaussian(&cloud, &field, 0.5),
            Err(Error::DegenerateRotation { index: 0, .. })
        ));
    }
}
