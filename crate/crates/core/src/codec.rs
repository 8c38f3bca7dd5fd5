//! Autoencoder compressing full-dimension vision-language embeddings to the
//! low-dimensional features carried by each Gaussian.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::archive::{ArchiveReader, ArchiveWriter};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, gemm, MatRef};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;

/// Hidden widths between the full and compressed dimensions.
pub const PYRAMID: [usize; 4] = [256, 128, 64, 16];

const ARCHIVE_KIND: &str = "codec";

/// rows per batched encode; fixed so results never depend on scheduling
const ENCODE_CHUNK: usize = 1024;

/// Encoder and decoder MLPs stored as one flat parameter vector.
///
/// Layer `k` of a network with sizes `s` owns an `s[k+1]×s[k]` row-major
/// weight followed by an `s[k+1]` bias. Encoder parameters come first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCodec<T> {
    encoder_sizes: Vec<usize>,
    decoder_sizes: Vec<usize>,
    pub params: Vec<T>,
}

fn layer_param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Forward activations of one network, kept for the backward pass.
struct Trace<T> {
    /// Post-activation inputs to each layer, then the raw output.
    acts: Vec<Vec<T>>,
}

fn mlp_forward<T: Real>(sizes: &[usize], params: &[T], x: &[T], keep: bool) -> (Vec<T>, Option<Trace<T>>) {
    let layers = sizes.len() - 1;
    let mut acts = Vec::new();
    let mut cur = x.to_vec();
    let mut off = 0;
    for k in 0..layers {
        let (n_in, n_out) = (sizes[k], sizes[k + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut next = b.to_vec();
        for (o, out) in next.iter_mut().enumerate() {
            *out += dot(&w[o * n_in..(o + 1) * n_in], &cur);
        }
        if k + 1 < layers {
            next.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        if keep {
            acts.push(std::mem::take(&mut cur));
        }
        cur = next;
    }
    if keep {
        acts.push(cur.clone());
        (cur, Some(Trace { acts }))
    } else {
        (cur, None)
    }
}

/// Accumulates parameter gradients into `grads`, returns the input gradient.
fn mlp_backward<T: Real>(sizes: &[usize], params: &[T], trace: &Trace<T>, g_out: &[T], grads: &mut [T]) -> Vec<T> {
    let layers = sizes.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for k in 0..layers {
        offsets.push(off);
        off += sizes[k] * sizes[k + 1] + sizes[k + 1];
    }
    let mut g = g_out.to_vec();
    for k in (0..layers).rev() {
        let (n_in, n_out) = (sizes[k], sizes[k + 1]);
        if k + 1 < layers {
            // relu mask on this layer's output, which is the next input
            for (gv, &a) in g.iter_mut().zip(&trace.acts[k + 1]) {
                if a <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        let off = offsets[k];
        let input = &trace.acts[k];
        let w = &params[off..off + n_in * n_out];
        let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        let mut g_in = vec![T::zero(); n_in];
        for o in 0..n_out {
            let go = g[o];
            if go == T::zero() {
                continue;
            }
            gb[o] += go;
            axpy(go, input, &mut gw[o * n_in..(o + 1) * n_in]);
            axpy(go, &w[o * n_in..(o + 1) * n_in], &mut g_in);
        }
        g = g_in;
    }
    g
}

/// Row-batched [`mlp_forward`]: `x` holds `rows` inputs back to back.
fn mlp_forward_batch<T: Real>(
    sizes: &[usize],
    params: &[T],
    x: &[T],
    rows: usize,
    keep: bool,
) -> (Vec<T>, Option<Trace<T>>) {
    let layers = sizes.len() - 1;
    let mut acts = Vec::new();
    let mut cur = x.to_vec();
    let mut off = 0;
    for k in 0..layers {
        let (n_in, n_out) = (sizes[k], sizes[k + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut next = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            next.extend_from_slice(b);
        }
        gemm(
            T::one(),
            MatRef::new(&cur, rows, n_in),
            MatRef::new(w, n_out, n_in).t(),
            T::one(),
            &mut next,
        );
        if k + 1 < layers {
            next.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        if keep {
            acts.push(std::mem::take(&mut cur));
        }
        cur = next;
    }
    if keep {
        acts.push(cur.clone());
        (cur, Some(Trace { acts }))
    } else {
        (cur, None)
    }
}

/// Row-batched [`mlp_backward`].
fn mlp_backward_batch<T: Real>(
    sizes: &[usize],
    params: &[T],
    trace: &Trace<T>,
    g_out: &[T],
    rows: usize,
    grads: &mut [T],
) -> Vec<T> {
    let layers = sizes.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for k in 0..layers {
        offsets.push(off);
        off += sizes[k] * sizes[k + 1] + sizes[k + 1];
    }
    let mut g = g_out.to_vec();
    for k in (0..layers).rev() {
        let (n_in, n_out) = (sizes[k], sizes[k + 1]);
        if k + 1 < layers {
            for (gv, &a) in g.iter_mut().zip(&trace.acts[k + 1]) {
                if a <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        let off = offsets[k];
        let w = &params[off..off + n_in * n_out];
        let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        gemm(
            T::one(),
            MatRef::new(&g, rows, n_out).t(),
            MatRef::new(&trace.acts[k], rows, n_in),
            T::one(),
            gw,
        );
        for row in g.chunks_exact(n_out) {
            gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
        }
        let mut g_in = vec![T::zero(); rows * n_in];
        gemm(
            T::one(),
            MatRef::new(&g, rows, n_out),
            MatRef::new(w, n_out, n_in),
            T::zero(),
            &mut g_in,
        );
        g = g_in;
    }
    g
}

/// Gradient of `mse + (1 − cos)` with respect to the reconstruction `y`.
fn recon_terms<T: Real>(y: &[T], x: &[T], g_y: Option<&mut [T]>) -> (T, T) {
    let df = T::lit(x.len() as f64);
    let mse = y.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / df;
    let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let guard = T::lit(1e-12);
    let denom = (ny * nx).max(guard);
    let dotp = y.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
    let cos = dotp / denom;
    if let Some(g_y) = g_y {
        let two = T::lit(2.0);
        let ny2 = (ny * ny).max(guard);
        for ((g, &a), &b) in g_y.iter_mut().zip(y).zip(x) {
            let g_mse = two * (a - b) / df;
            let g_cos = b / denom - cos * a / ny2;
            *g = g_mse - g_cos;
        }
    }
    (mse, T::one() - cos)
}

fn l2_normalize<T: Real>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl<T: Real> FeatureCodec<T> {
    pub fn zeros(full_dim: usize, compressed_dim: usize) -> Self {
        let mut encoder_sizes = vec![full_dim];
        encoder_sizes.extend(PYRAMID);
        encoder_sizes.push(compressed_dim);
        let decoder_sizes: Vec<usize> = encoder_sizes.iter().rev().copied().collect();
        let n = layer_param_count(&encoder_sizes) + layer_param_count(&decoder_sizes);
        Self {
            encoder_sizes,
            decoder_sizes,
            params: vec![T::zero(); n],
        }
    }

    /// He-initialized weights, zero biases.
    pub fn init(full_dim: usize, compressed_dim: usize, seed: u64) -> Self {
        let mut codec = Self::zeros(full_dim, compressed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        let sizes: Vec<Vec<usize>> = vec![codec.encoder_sizes.clone(), codec.decoder_sizes.clone()];
        for s in &sizes {
            for w in s.windows(2) {
                let std = (2.0 / w[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for p in &mut codec.params[off..off + w[0] * w[1]] {
                    *p = T::lit(normal.sample(&mut rng));
                }
                off += w[0] * w[1] + w[1];
            }
        }
        codec
    }

    pub fn full_dim(&self) -> usize {
        self.encoder_sizes[0]
    }

    pub fn compressed_dim(&self) -> usize {
        *self.encoder_sizes.last().unwrap()
    }

    pub fn encoder_sizes(&self) -> &[usize] {
        &self.encoder_sizes
    }

    pub fn decoder_sizes(&self) -> &[usize] {
        &self.decoder_sizes
    }

    fn split(&self) -> (&[T], &[T]) {
        self.params.split_at(layer_param_count(&self.encoder_sizes))
    }

    fn check_len(&self, field: &str, expected: usize, found: usize) -> Result<()> {
        if expected != found {
            return Err(Error::invalid(format!(
                "{field} expects length {expected}, got {found}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_len("encode", self.full_dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("encode input is not finite"));
        }
        Ok(mlp_forward(&self.encoder_sizes, self.split().0, x, false).0)
    }

    /// Row-wise encode of an M×D_f matrix.
    pub fn encode_batch(&self, rows: &[T]) -> Result<Vec<T>> {
        let df = self.full_dim();
        if !rows.len().is_multiple_of(df) {
            return Err(Error::invalid(format!(
                "batch length {} is not a multiple of {df}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("encode input is not finite"));
        }
        let enc = self.split().0;
        let out: Vec<Vec<T>> = rows
            .par_chunks(df * ENCODE_CHUNK)
            .map(|c| mlp_forward_batch(&self.encoder_sizes, enc, c, c.len() / df, false).0)
            .collect();
        Ok(out.concat())
    }

    /// Decoder output before normalization.
    pub fn decode_raw(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_len("decode", self.compressed_dim(), z.len())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("decode input is not finite"));
        }
        Ok(mlp_forward(&self.decoder_sizes, self.split().1, z, false).0)
    }

    /// Decoded embedding scaled to unit norm; zero stays zero.
    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        let mut v = self.decode_raw(z)?;
        l2_normalize(&mut v);
        Ok(v)
    }

    /// Per-sample reconstruction terms `(mse, 1 − cos)` and, when `grads` is
    /// given, their sum's parameter gradient added into it.
    pub fn sample_loss(&self, x: &[T], grads: Option<&mut [T]>) -> (T, T) {
        let (enc, dec) = self.split();
        let keep = grads.is_some();
        let (z, et) = mlp_forward(&self.encoder_sizes, enc, x, keep);
        let (y, dt) = mlp_forward(&self.decoder_sizes, dec, &z, keep);
        let Some(grads) = grads else {
            return recon_terms(&y, x, None);
        };
        let mut g_y = vec![T::zero(); y.len()];
        let terms = recon_terms(&y, x, Some(&mut g_y));
        let n_enc = enc.len();
        let (g_enc, g_dec) = grads.split_at_mut(n_enc);
        let g_z = mlp_backward(&self.decoder_sizes, dec, dt.as_ref().unwrap(), &g_y, g_dec);
        mlp_backward(&self.encoder_sizes, enc, et.as_ref().unwrap(), &g_z, g_enc);
        terms
    }

    /// Smallest |pre-activation| of any hidden ReLU unit on input `x`,
    /// through the encoder and then the decoder.
    pub fn min_abs_preactivation(&self, x: &[T]) -> T {
        let (enc, dec) = self.split();
        let mut min = T::infinity();
        let mut cur = x.to_vec();
        for (sizes, params) in [(&self.encoder_sizes, enc), (&self.decoder_sizes, dec)] {
            let layers = sizes.len() - 1;
            let mut off = 0;
            for k in 0..layers {
                let (n_in, n_out) = (sizes[k], sizes[k + 1]);
                let w = &params[off..off + n_in * n_out];
                let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
                off += n_in * n_out + n_out;
                let mut next: Vec<T> = (0..n_out)
                    .map(|o| b[o] + dot(&w[o * n_in..(o + 1) * n_in], &cur))
                    .collect();
                if k + 1 < layers {
                    next.iter().for_each(|v| min = min.min(v.abs()));
                    next.iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
                cur = next;
            }
        }
        min
    }

    /// Summed `(mse, 1 − cos)` over the rows of `x`, with the parameter
    /// gradient of their total added into `grads` when given. Agrees with
    /// summing [`sample_loss`](Self::sample_loss) up to rounding.
    pub fn batch_loss(&self, x: &[T], grads: Option<&mut [T]>) -> Result<(T, T)> {
        let df = self.full_dim();
        let rows = full_rows(x, df)?;
        let (enc, dec) = self.split();
        let keep = grads.is_some();
        let (z, et) = mlp_forward_batch(&self.encoder_sizes, enc, x, rows, keep);
        let (y, dt) = mlp_forward_batch(&self.decoder_sizes, dec, &z, rows, keep);
        let mut g_y = if keep { vec![T::zero(); y.len()] } else { Vec::new() };
        let (mut sum_mse, mut sum_cos) = (T::zero(), T::zero());
        for r in 0..rows {
            let span = r * df..(r + 1) * df;
            let g = if keep { Some(&mut g_y[span.clone()]) } else { None };
            let (m, c) = recon_terms(&y[span.clone()], &x[span], g);
            sum_mse += m;
            sum_cos += c;
        }
        if let Some(grads) = grads {
            let (g_enc, g_dec) = grads.split_at_mut(enc.len());
            let g_z = mlp_backward_batch(&self.decoder_sizes, dec, dt.as_ref().unwrap(), &g_y, rows, g_dec);
            mlp_backward_batch(&self.encoder_sizes, enc, et.as_ref().unwrap(), &g_z, rows, g_enc);
        }
        Ok((sum_mse, sum_cos))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut w = ArchiveWriter::create(dir, ARCHIVE_KIND)?;
        w.meta("full_dim", self.full_dim());
        w.meta("compressed_dim", self.compressed_dim());
        w.meta("encoder_sizes", &self.encoder_sizes);
        w.meta("decoder_sizes", &self.decoder_sizes);
        let mut off = 0;
        for (net, sizes) in [("encoder", &self.encoder_sizes), ("decoder", &self.decoder_sizes)] {
            for (k, s) in sizes.windows(2).enumerate() {
                let nw = s[0] * s[1];
                w.put_real(
                    &format!("{net}.{k}.weight"),
                    vec![s[1], s[0]],
                    &self.params[off..off + nw],
                )?;
                w.put_real(
                    &format!("{net}.{k}.bias"),
                    vec![s[1]],
                    &self.params[off + nw..off + nw + s[1]],
                )?;
                off += nw + s[1];
            }
        }
        w.finish()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let r = ArchiveReader::open(dir, ARCHIVE_KIND)?;
        let full = r.meta_usize("full_dim")?;
        let d = r.meta_usize("compressed_dim")?;
        let mut codec = Self::zeros(full, d);
        let enc: Vec<usize> = r.meta_as("encoder_sizes")?;
        let dec: Vec<usize> = r.meta_as("decoder_sizes")?;
        if enc != codec.encoder_sizes || dec != codec.decoder_sizes {
            return Err(Error::Checkpoint {
                field: "encoder_sizes".into(),
                detail: format!("layer sizes {enc:?}/{dec:?} do not match the pyramid"),
            });
        }
        let mut off = 0;
        for (net, sizes) in [("encoder", enc), ("decoder", dec)] {
            for (k, s) in sizes.windows(2).enumerate() {
                let nw = s[0] * s[1];
                let wt: Vec<T> = r.real(&format!("{net}.{k}.weight"), &[s[1], s[0]])?;
                let b: Vec<T> = r.real(&format!("{net}.{k}.bias"), &[s[1]])?;
                codec.params[off..off + nw].copy_from_slice(&wt);
                codec.params[off + nw..off + nw + s[1]].copy_from_slice(&b);
                off += nw + s[1];
            }
        }
        Ok(codec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    /// Mean squared reconstruction error per epoch.
    pub mse: Vec<f64>,
    /// Mean (1 − cosine) per epoch.
    pub cosine: Vec<f64>,
}

impl CodecReport {
    pub fn final_loss(&self) -> Option<(f64, f64)> {
        Some((*self.mse.last()?, *self.cosine.last()?))
    }
}

/// Trains a fresh codec on an M×D_f row-major matrix.
pub fn train_codec<T: Real>(
    rows: &[T],
    full_dim: usize,
    compressed_dim: usize,
    cfg: &CodecTrainConfig,
) -> Result<(FeatureCodec<T>, CodecReport)> {
    let codec = FeatureCodec::init(full_dim, compressed_dim, cfg.seed);
    train_codec_from(codec, rows, cfg)
}

/// Continues training from the given weights.
pub fn train_codec_from<T: Real>(
    mut codec: FeatureCodec<T>,
    rows: &[T],
    cfg: &CodecTrainConfig,
) -> Result<(FeatureCodec<T>, CodecReport)> {
    let df = codec.full_dim();
    if full_rows(rows, df)? < 2 {
        return Err(Error::EmptyDataset("codec training needs at least two samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let m = rows.len() / df;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0063_6f64_6563);
    let mut order: Vec<usize> = (0..m).collect();
    let mut opt = Adam::new(codec.params.len());
    let adam = AdamConfig {
        lr: cfg.lr,
        eps: 1e-8,
        ..AdamConfig::default()
    };
    let mut report = CodecReport::default();
    let mut iteration = 0;
    let mut xb = Vec::with_capacity(cfg.batch_size * df);
    let mut grads = vec![T::zero(); codec.params.len()];
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_mse, mut sum_cos) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            xb.clear();
            for &i in batch {
                xb.extend_from_slice(&rows[i * df..(i + 1) * df]);
            }
            grads.fill(T::zero());
            let (bm, bc) = codec.batch_loss(&xb, Some(&mut grads))?;
            let scale = T::one() / T::lit(batch.len() as f64);
            grads.iter_mut().for_each(|g| *g *= scale);
            let loss = (bm + bc) * scale;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    iteration,
                    detail: format!("codec loss {loss}"),
                });
            }
            sum_mse += bm.as_f64();
            sum_cos += bc.as_f64();
            opt.update(&mut codec.params, &grads, cfg.lr, &adam);
            iteration += 1;
        }
        report.mse.push(sum_mse / m as f64);
        report.cosine.push(sum_cos / m as f64);
    }
    Ok((codec, report))
}

fn full_rows<T>(rows: &[T], df: usize) -> Result<usize> {
    if df == 0 || !rows.len().is_multiple_of(df) {
        return Err(Error::invalid(format!(
            "feature matrix length {} is not a multiple of {df}",
            rows.len()
        )));
    }
    Ok(rows.len() / df)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let mut v = v;
        l2_normalize(&mut v);
        v
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let c = FeatureCodec::<f64>::zeros(16, 3);
        assert_eq!(c.encode(&[0.7; 16]).unwrap(), vec![0.0; 3]);
        assert_eq!(c.decode(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn dimension_checked() {
        let c = FeatureCodec::<f64>::zeros(16, 3);
        assert!(matches!(c.encode(&[0.0; 15]), Err(Error::InvalidArgument(_))));
        assert!(matches!(c.decode(&[0.0; 4]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn layer_shapes_chain() {
        let c = FeatureCodec::<f32>::zeros(32, 5);
        assert_eq!(c.encoder_sizes(), &[32, 256, 128, 64, 16, 5]);
        assert_eq!(c.decoder_sizes(), &[5, 16, 64, 128, 256, 32]);
        let y = FeatureCodec::<f32>::init(32, 5, 1).decode(&[0.1; 5]).unwrap();
        assert_eq!(y.len(), 32);
    }

    #[test]
    fn batch_rows_independent() {
        let c = FeatureCodec::<f64>::init(16, 3, 2);
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let both = c.encode_batch(&[v.clone(), v.clone()].concat()).unwrap();
        assert_eq!(both[..3], both[3..]);
        for (a, b) in both[..3].iter().zip(c.encode(&v).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_loss_sums_sample_losses() {
        let c = FeatureCodec::<f64>::init(16, 3, 5);
        let x: Vec<f64> = (0..5 * 16).map(|i| ((i * 7 % 11) as f64 * 0.3).cos()).collect();
        let mut g_batch = vec![0.0; c.params.len()];
        let (bm, bc) = c.batch_loss(&x, Some(&mut g_batch)).unwrap();
        let mut g_each = vec![0.0; c.params.len()];
        let (mut sm, mut sc) = (0.0, 0.0);
        for row in x.chunks(16) {
            let (m, k) = c.sample_loss(row, Some(&mut g_each));
            sm += m;
            sc += k;
        }
        assert!((bm - sm).abs() < 1e-12 && (bc - sc).abs() < 1e-12);
        let scale = g_each.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        for (a, b) in g_batch.iter().zip(&g_each) {
            assert!((a - b).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn decode_is_unit_norm() {
        let c = FeatureCodec::<f64>::init(16, 3, 3);
        for k in 0..10 {
            let z = [k as f64 * 0.3 - 1.0, 0.5, -0.2];
            let y = c.decode(&z).unwrap();
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn memorizes_single_vector() {
        let v = unit((0..16).map(|i| (i as f64 * 0.9).cos()).collect());
        let rows: Vec<f64> = (0..8).flat_map(|_| v.clone()).collect();
        let cfg = CodecTrainConfig {
            epochs: 200,
            lr: 1e-3,
            batch_size: 8,
            seed: 4,
        };
        let (_, report) = train_codec(&rows, 16, 3, &cfg).unwrap();
        let (mse, cos) = report.final_loss().unwrap();
        assert!(mse < 1e-4, "mse {mse}");
        assert!(cos < 1e-3, "cos {cos}");
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let rows: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let cfg = CodecTrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 2,
            seed: 9,
        };
        let (trained, report) = train_codec(&rows, 16, 3, &cfg).unwrap();
        assert_eq!(trained, FeatureCodec::init(16, 3, 9));
        assert_eq!(report.mse[0], report.mse[2]);
    }

    #[test]
    fn one_sample_rejected() {
        let cfg = CodecTrainConfig::default();
        assert!(matches!(
            train_codec(&[0.5f64; 16], 16, 3, &cfg),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn nan_input_diverges() {
        let mut rows = vec![0.25f64; 64];
        rows[5] = f64::NAN;
        let cfg = CodecTrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        assert!(matches!(
            train_codec(&rows, 16, 3, &cfg),
            Err(Error::Divergence { iteration: 0, .. })
        ));
    }

    #[test]
    fn save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = FeatureCodec::<f32>::init(16, 3, 11);
        c.save(dir.path().join("codec")).unwrap();
        assert_eq!(FeatureCodec::<f32>::load(dir.path().join("codec")).unwrap(), c);
    }
}
