//! Stochastic variational training with per-image latent optimization.
//!
//! Every training image owns a diagonal Gaussian posterior over its latent.
//! Each batch first runs a fixed number of Adam steps on the batch's
//! posteriors with the decoder frozen, then one Adam step on the decoder
//! with the posteriors frozen. Both steps minimize
//! `KL(q || N(0, I)) + |decoder(z) - x|^2 / (2 sigma^2)` with one
//! reparameterized sample `z = mu + tau * eps`.

use matrixmultiply::sgemm;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kl_diag_gaussian, logistic, DecoderModel};
use crate::adam::{Adam, AdamConfig};
use crate::detection::ClassLabel;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{derive_seed, stream_rng, Stream, StreamRng};

/// Rows per gradient shard. Fixed so results do not depend on `jobs`.
const SHARD_ROWS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub latent_steps_per_decoder_update: usize,
    pub lr_decoder: f64,
    pub lr_latent: f64,
    pub sigma: f64,
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub seed: u64,
    /// Worker threads for shard-parallel updates; results are identical for
    /// any value.
    pub jobs: usize,
}

impl Default for TrainConfig {
    /// Full-size schedule: 400 epochs, batch 100, learning rates 1e-4 / 1e-2.
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 100,
            latent_steps_per_decoder_update: 10,
            lr_decoder: 1e-4,
            lr_latent: 0.01,
            sigma: 0.1,
            latent_dim: super::DEFAULT_LATENT_DIM,
            hidden_width: super::DEFAULT_HIDDEN,
            seed: 0,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    /// Short schedule that converges on a single core in minutes: fewer
    /// epochs, compensated by smaller batches and larger steps.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 25,
            lr_decoder: 1e-3,
            lr_latent: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.latent_steps_per_decoder_update == 0 {
            return Err(Error::Config(
                "epochs, batch_size and latent steps must be >= 1".into(),
            ));
        }
        if !(self.lr_decoder > 0.0 && self.lr_latent > 0.0 && self.sigma > 0.0) {
            return Err(Error::Config("learning rates and sigma must be > 0".into()));
        }
        if self.latent_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("latent_dim and hidden_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Variational posterior for one object: latent Gaussian plus placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    /// `log` of the posterior standard deviations.
    pub log_tau: Vec<f64>,
    /// Translation in reconstruction-grid pixels.
    pub t: (f64, f64),
    /// Fixed scale factors `d / L`.
    pub s: (f64, f64),
    /// In-plane rotation in degrees when enabled.
    pub alpha: Option<f64>,
}

impl LatentPosterior {
    pub fn prior(n_z: usize) -> Self {
        Self {
            mu: vec![0.0; n_z],
            log_tau: vec![0.0; n_z],
            t: (0.0, 0.0),
            s: (1.0, 1.0),
            alpha: None,
        }
    }

    pub fn tau(&self) -> Vec<f64> {
        self.log_tau.iter().map(|l| l.exp()).collect()
    }

    pub fn kl(&self) -> f64 {
        kl_diag_gaussian(&self.mu, &self.log_tau)
    }

    /// Reparameterized draw `mu + tau * eps`; `eps` receives the noise.
    pub fn sample(&self, rng: &mut StreamRng, eps: &mut [f64]) -> Vec<f64> {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(rng);
        }
        self.mu
            .iter()
            .zip(&self.log_tau)
            .zip(eps.iter())
            .map(|((m, l), e)| m + l.exp() * e)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub cls: ClassLabel,
    /// Mean per-image loss at the prior posteriors and initial decoder.
    pub initial_mean_loss: f64,
    /// Mean per-image loss measured at each epoch's decoder steps.
    pub epoch_mean_loss: Vec<f64>,
    pub posteriors: Vec<LatentPosterior>,
}

struct LatentState {
    post: LatentPosterior,
    opt: Adam,
}

/// Scratch for one shard of rows.
#[derive(Default)]
struct ShardBufs {
    z: Vec<f32>,
    eps: Vec<f64>,
    hpre: Vec<f32>,
    h: Vec<f32>,
    y: Vec<f32>,
    g: Vec<f32>,
    gh: Vec<f32>,
    gz: Vec<f32>,
    loss: Vec<f64>,
}

struct ShardGrads {
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// Trains one class decoder on `images` (each `d x d`).
pub fn svi_train(
    cls: ClassLabel,
    images: &[Image],
    cfg: &TrainConfig,
) -> Result<(DecoderModel, TrainReport)> {
    cfg.validate()?;
    let first = images
        .first()
        .ok_or_else(|| Error::Config(format!("class {cls}: empty training set")))?;
    let d = first.width();
    if let Some(bad) = images.iter().find(|im| im.width() != d || im.height() != d) {
        return Err(Error::ShapeMismatch(format!(
            "class {cls}: training image {}x{} but expected {d}x{d}",
            bad.height(),
            bad.width()
        )));
    }
    let model = DecoderModel::new_random(cls, cfg.latent_dim, d, cfg.hidden_width, cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| Trainer::new(model, images, cfg).run())
}

struct Trainer<'a> {
    model: DecoderModel,
    targets: Vec<Vec<f32>>,
    cfg: &'a TrainConfig,
    latents: Vec<LatentState>,
    opt: Adam,
}

impl<'a> Trainer<'a> {
    fn new(model: DecoderModel, images: &[Image], cfg: &'a TrainConfig) -> Self {
        let n_z = cfg.latent_dim;
        let targets = images
            .iter()
            .map(|im| im.as_slice().iter().map(|&v| v as f32).collect())
            .collect();
        let latents = images
            .iter()
            .map(|_| LatentState {
                post: LatentPosterior::prior(n_z),
                opt: Adam::new(AdamConfig::with_lr(cfg.lr_latent), 2 * n_z),
            })
            .collect();
        let n_params = model.params().iter().map(|p| p.len()).sum();
        Self {
            model,
            targets,
            cfg,
            latents,
            opt: Adam::new(AdamConfig::with_lr(cfg.lr_decoder), n_params),
        }
    }

    fn run(mut self) -> Result<(DecoderModel, TrainReport)> {
        let cls = self.model.cls();
        let n = self.targets.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.cfg.seed, Stream::Training, 1000 + cls as u64);

        let initial_mean_loss = {
            let losses = self.evaluate_losses(&order, &mut rng);
            check_finite(&losses, "initial loss", cls)?;
            losses.iter().sum::<f64>() / n as f64
        };

        let mut curve = Vec::with_capacity(self.cfg.epochs);
        for _epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                for _ in 0..self.cfg.latent_steps_per_decoder_update {
                    self.latent_step(batch, &mut rng);
                }
                let losses = self.decoder_step(batch, &mut rng);
                check_finite(&losses, "decoder step", cls)?;
                total += losses.iter().sum::<f64>();
            }
            curve.push(total / n as f64);
        }
        let report = TrainReport {
            cls,
            initial_mean_loss,
            epoch_mean_loss: curve,
            posteriors: self.latents.into_iter().map(|l| l.post).collect(),
        };
        Ok((self.model, report))
    }

    /// One seed per shard per step, drawn from the master training stream so
    /// shard processing order does not matter.
    fn shard_seeds(&self, batch: &[usize], rng: &mut StreamRng) -> Vec<u64> {
        use rand::Rng;
        batch
            .chunks(SHARD_ROWS)
            .map(|_| derive_seed(rng.random(), Stream::Training, 0))
            .collect()
    }

    fn evaluate_losses(&self, idx: &[usize], rng: &mut StreamRng) -> Vec<f64> {
        let seeds = self.shard_seeds(idx, rng);
        idx.par_chunks(SHARD_ROWS)
            .zip(seeds)
            .map(|(rows, seed)| {
                let mut bufs = ShardBufs::default();
                self.forward_shard(rows, seed, &mut bufs);
                bufs.loss
            })
            .collect::<Vec<_>>()
            .concat()
    }

    fn latent_step(&mut self, batch: &[usize], rng: &mut StreamRng) {
        let seeds = self.shard_seeds(batch, rng);
        let n_z = self.cfg.latent_dim;
        let updates: Vec<Vec<(Vec<f64>, usize)>> = batch
            .par_chunks(SHARD_ROWS)
            .zip(seeds)
            .map(|(rows, seed)| {
                let mut bufs = ShardBufs::default();
                self.forward_shard(rows, seed, &mut bufs);
                self.backward_shard(rows, &mut bufs, false);
                rows.iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        let post = &self.latents[i].post;
                        let mut grad = vec![0.0; 2 * n_z];
                        for k in 0..n_z {
                            let gz = bufs.gz[r * n_z + k] as f64;
                            let tau = post.log_tau[k].exp();
                            grad[k] = gz + post.mu[k];
                            grad[n_z + k] = gz * bufs.eps[r * n_z + k] * tau + (tau * tau - 1.0);
                        }
                        (grad, i)
                    })
                    .collect()
            })
            .collect();
        for (grad, i) in updates.into_iter().flatten() {
            let state = &mut self.latents[i];
            let mut params: Vec<f64> = state.post.mu.iter().chain(&state.post.log_tau).copied().collect();
            state.opt.step(&mut params, &grad);
            state.post.mu.copy_from_slice(&params[..n_z]);
            state.post.log_tau.copy_from_slice(&params[n_z..]);
        }
    }

    fn decoder_step(&mut self, batch: &[usize], rng: &mut StreamRng) -> Vec<f64> {
        let seeds = self.shard_seeds(batch, rng);
        let results: Vec<(ShardGrads, Vec<f64>)> = batch
            .par_chunks(SHARD_ROWS)
            .zip(seeds)
            .map(|(rows, seed)| {
                let mut bufs = ShardBufs::default();
                self.forward_shard(rows, seed, &mut bufs);
                let grads = self.backward_shard(rows, &mut bufs, true).unwrap();
                (grads, bufs.loss)
            })
            .collect();

        let scale = 1.0 / batch.len() as f32;
        let mut flat: Vec<f32> = Vec::with_capacity(self.opt_len());
        let mut losses = Vec::with_capacity(batch.len());
        let mut acc: Option<ShardGrads> = None;
        // Fixed reduction order: shard 0, 1, 2, ...
        for (g, l) in results {
            losses.extend(l);
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (dst, src) in [(&mut a.w1, &g.w1), (&mut a.b1, &g.b1), (&mut a.w2, &g.w2), (&mut a.b2, &g.b2)] {
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let acc = acc.expect("non-empty batch");
        for block in [&acc.w1, &acc.b1, &acc.w2, &acc.b2] {
            flat.extend(block.iter().map(|g| g * scale));
        }
        let mut params: Vec<f32> = self.model.params().concat();
        self.opt.step_f32(&mut params, &flat);
        let mut off = 0;
        for block in self.model.params_mut() {
            let len = block.len();
            block.copy_from_slice(&params[off..off + len]);
            off += len;
        }
        losses
    }

    fn opt_len(&self) -> usize {
        self.model.params().iter().map(|p| p.len()).sum()
    }

    /// Samples latents for `rows`, runs the forward pass, fills per-row
    /// losses and the output-preactivation gradient `g`.
    fn forward_shard(&self, rows: &[usize], seed: u64, b: &mut ShardBufs) {
        let m = &self.model;
        let (r, nz, hid, out) = (rows.len(), m.latent_dim(), m.hidden_width(), m.output_len());
        let sigma2 = self.cfg.sigma * self.cfg.sigma;
        let mut rng = crate::seed::stream_rng(seed, Stream::Training, 0);
        b.z.resize(r * nz, 0.0);
        b.eps.resize(r * nz, 0.0);
        for (ri, &i) in rows.iter().enumerate() {
            let z = self.latents[i]
                .post
                .sample(&mut rng, &mut b.eps[ri * nz..(ri + 1) * nz]);
            for k in 0..nz {
                b.z[ri * nz + k] = z[k] as f32;
            }
        }
        // hpre = z . w1^T + b1
        b.hpre.clear();
        for _ in 0..r {
            b.hpre.extend_from_slice(&m.b1);
        }
        gemm(r, nz, hid, (&b.z, nz, 1), (&m.w1, 1, nz), 1.0, (&mut b.hpre, hid));
        b.h.clear();
        b.h.extend(b.hpre.iter().map(|v| v.max(0.0)));
        // y = logistic(h . w2 + b2)
        b.y.clear();
        for _ in 0..r {
            b.y.extend_from_slice(&m.b2);
        }
        gemm(r, hid, out, (&b.h, hid, 1), (&m.w2, out, 1), 1.0, (&mut b.y, out));
        b.g.resize(r * out, 0.0);
        b.loss.clear();
        for (ri, &i) in rows.iter().enumerate() {
            let x = &self.targets[i];
            let ys = &mut b.y[ri * out..(ri + 1) * out];
            let gs = &mut b.g[ri * out..(ri + 1) * out];
            let mut sq = 0.0f64;
            for o in 0..out {
                let y = logistic(ys[o] as f64);
                let diff = y - x[o] as f64;
                sq += diff * diff;
                ys[o] = y as f32;
                gs[o] = (diff / sigma2 * y * (1.0 - y)) as f32;
            }
            b.loss.push(self.latents[i].post.kl() + sq / (2.0 * sigma2));
        }
    }

    /// Back-propagates `b.g`; always fills `b.gz`, and with `weights`
    /// returns the parameter gradients summed over the shard.
    fn backward_shard(&self, rows: &[usize], b: &mut ShardBufs, weights: bool) -> Option<ShardGrads> {
        let m = &self.model;
        let (r, nz, hid, out) = (rows.len(), m.latent_dim(), m.hidden_width(), m.output_len());
        // gh = g . w2^T, masked by the rectifier
        b.gh.clear();
        b.gh.resize(r * hid, 0.0);
        gemm(r, out, hid, (&b.g, out, 1), (&m.w2, 1, out), 0.0, (&mut b.gh, hid));
        for (g, &p) in b.gh.iter_mut().zip(&b.hpre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        b.gz.clear();
        b.gz.resize(r * nz, 0.0);
        gemm(r, hid, nz, (&b.gh, hid, 1), (&m.w1, nz, 1), 0.0, (&mut b.gz, nz));
        if !weights {
            return None;
        }
        let mut w2 = vec![0.0f32; hid * out];
        gemm(hid, r, out, (&b.h, 1, hid), (&b.g, out, 1), 0.0, (&mut w2, out));
        let mut w1 = vec![0.0f32; hid * nz];
        gemm(hid, r, nz, (&b.gh, 1, hid), (&b.z, nz, 1), 0.0, (&mut w1, nz));
        let mut b1 = vec![0.0f32; hid];
        let mut b2 = vec![0.0f32; out];
        for ri in 0..r {
            b1.iter_mut().zip(&b.gh[ri * hid..(ri + 1) * hid]).for_each(|(a, g)| *a += g);
            b2.iter_mut().zip(&b.g[ri * out..(ri + 1) * out]).for_each(|(a, g)| *a += g);
        }
        Some(ShardGrads { w1, b1, w2, b2 })
    }
}

/// `c = a . b + beta * c` for row-major `c` (`m x n`); `a` and `b` given as
/// `(data, row_stride, col_stride)`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], usize, usize),
    b: (&[f32], usize, usize),
    beta: f32,
    c: (&mut [f32], usize),
) {
    assert!(a.0.len() >= (m - 1) * a.1 + (k - 1) * a.2 + 1);
    assert!(b.0.len() >= (k - 1) * b.1 + (n - 1) * b.2 + 1);
    assert!(c.0.len() >= m * c.1);
    // SAFETY: the asserts above bound every index sgemm touches.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            1,
        );
    }
}

fn check_finite(losses: &[f64], stage: &'static str, cls: ClassLabel) -> Result<()> {
    if let Some((i, l)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
        return Err(Error::NonFinite {
            stage,
            detail: format!("class {cls}, row {i}: loss {l}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(d: usize, cx: f64, cy: f64, r: f64, color: [f64; 3]) -> Image {
        let mut im = Image::zeros(d, d);
        for y in 0..d {
            for x in 0..d {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    im.set_pixel(x, y, color);
                }
            }
        }
        im
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            latent_steps_per_decoder_update: 5,
            lr_decoder: 3e-3,
            lr_latent: 0.05,
            sigma: 0.1,
            latent_dim: 4,
            hidden_width: 32,
            seed: 9,
            jobs: 1,
        }
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let imgs: Vec<Image> = (0..12)
            .map(|i| blob(12, 6.0, 6.0, 2.0 + (i % 4) as f64, [0.8, 0.4, 0.2]))
            .collect();
        let cfg = tiny_cfg();
        let (m1, r1) = svi_train(3, &imgs, &cfg).unwrap();
        let (m2, r2) = svi_train(3, &imgs, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        assert_eq!(r1.epoch_mean_loss.len(), 30);
        assert!(*r1.epoch_mean_loss.last().unwrap() < 0.5 * r1.initial_mean_loss);
    }

    #[test]
    fn job_count_does_not_change_result() {
        let imgs: Vec<Image> = (0..60)
            .map(|i| blob(8, 4.0, 4.0, 1.5 + (i % 3) as f64, [0.5, 0.9, 0.2]))
            .collect();
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        cfg.batch_size = 60;
        let (a, _) = svi_train(1, &imgs, &cfg).unwrap();
        cfg.jobs = 3;
        let (b, _) = svi_train(1, &imgs, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(svi_train(1, &[], &tiny_cfg()).is_err());
        let imgs = vec![Image::zeros(8, 8), Image::zeros(9, 9)];
        assert!(svi_train(1, &imgs, &tiny_cfg()).is_err());
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        assert!(svi_train(1, &[Image::zeros(8, 8)], &cfg).is_err());
    }
}
