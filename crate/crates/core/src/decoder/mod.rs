//! Per-class generative decoder: latent vector -> `d x d x 3` image.
//!
//! Architecture: affine `n_z -> hidden`, rectifier, affine `hidden -> 3 d^2`,
//! logistic squashing. Parameters are stored as `f32` (the on-disk width);
//! all arithmetic runs in `f64`.
//!
//! Model file (little-endian): magic `b"DSAM"`, `u32` version, `u32` class,
//! `u32` n_z, `u32` d, `u32` hidden, then `f32` blocks in order
//! `w1 [hidden][n_z]`, `b1 [hidden]`, `w2 [hidden][3 d^2]`, `b2 [3 d^2]`.
//! Output index `(y * d + x) * 3 + c` matches [`Image`] layout.

mod train;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::detection::ClassLabel;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{stream_rng, Stream};

pub use train::{svi_train, LatentPosterior, TrainConfig, TrainReport};

pub const MODEL_MAGIC: &[u8; 4] = b"DSAM";
pub const MODEL_VERSION: u32 = 1;

pub const DEFAULT_LATENT_DIM: usize = 10;
pub const DEFAULT_SIDE: usize = 50;
pub const DEFAULT_HIDDEN: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    cls: ClassLabel,
    n_z: usize,
    d: usize,
    hidden: usize,
    pub(crate) w1: Vec<f32>,
    pub(crate) b1: Vec<f32>,
    pub(crate) w2: Vec<f32>,
    pub(crate) b2: Vec<f32>,
}

/// Intermediate values of one forward pass, reused by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Squashed output, `3 d^2` values in `(0, 1)`.
    pub output: Vec<f64>,
    grad_pre_out: Vec<f64>,
    grad_hidden: Vec<f64>,
}

/// Gradients of `<upstream, decoder(z)>` w.r.t. the latent and every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGradients {
    pub z: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DecoderModel {
    /// Layer-wise uniform init in `+-1/sqrt(fan_in)`, biases zero.
    pub fn new_random(cls: ClassLabel, n_z: usize, d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Training, cls as u64);
        let out = 3 * d * d;
        let u1 = Uniform::new_inclusive(-1.0 / (n_z as f64).sqrt(), 1.0 / (n_z as f64).sqrt()).unwrap();
        let u2 = Uniform::new_inclusive(-1.0 / (hidden as f64).sqrt(), 1.0 / (hidden as f64).sqrt())
            .unwrap();
        let w1 = (0..hidden * n_z).map(|_| u1.sample(&mut rng) as f32).collect();
        let w2 = (0..hidden * out).map(|_| u2.sample(&mut rng) as f32).collect();
        Self {
            cls,
            n_z,
            d,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; out],
        }
    }

    pub fn zeros(cls: ClassLabel, n_z: usize, d: usize, hidden: usize) -> Self {
        let out = 3 * d * d;
        Self {
            cls,
            n_z,
            d,
            hidden,
            w1: vec![0.0; hidden * n_z],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * out],
            b2: vec![0.0; out],
        }
    }

    /// Random parameters of a given scale, biases included (used by tests
    /// and benchmarks that need a non-trivial map).
    pub fn with_random_params(mut self, scale: f64, rng: &mut impl Rng) -> Self {
        for p in self.params_mut() {
            for v in p.iter_mut() {
                *v = (rng.random_range(-1.0..1.0) * scale) as f32;
            }
        }
        self
    }

    pub fn cls(&self) -> ClassLabel {
        self.cls
    }
    pub fn latent_dim(&self) -> usize {
        self.n_z
    }
    pub fn side(&self) -> usize {
        self.d
    }
    pub fn hidden_width(&self) -> usize {
        self.hidden
    }
    pub fn output_len(&self) -> usize {
        3 * self.d * self.d
    }

    /// Parameter blocks in file order (`w1`, `b1`, `w2`, `b2`).
    pub fn params(&self) -> [&[f32]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut [f32]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.n_z {
            return Err(Error::ShapeMismatch(format!(
                "latent has {} entries, decoder expects {}",
                z.len(),
                self.n_z
            )));
        }
        Ok(())
    }

    /// Decodes `z` into a `d x d` image.
    pub fn forward(&self, z: &[f64]) -> Result<Image> {
        let mut act = Activations::default();
        self.forward_into(z, &mut act)?;
        Image::from_raw(self.d, self.d, act.output)
    }

    /// Forward pass keeping intermediates in `act`.
    pub fn forward_into(&self, z: &[f64], act: &mut Activations) -> Result<()> {
        self.check_latent(z)?;
        let (nz, out) = (self.n_z, self.output_len());
        act.hidden_pre.resize(self.hidden, 0.0);
        act.hidden.resize(self.hidden, 0.0);
        for j in 0..self.hidden {
            let row = &self.w1[j * nz..(j + 1) * nz];
            let pre = self.b1[j] as f64 + row.iter().zip(z).map(|(&w, &v)| w as f64 * v).sum::<f64>();
            act.hidden_pre[j] = pre;
            act.hidden[j] = pre.max(0.0);
        }
        act.output.clear();
        act.output.extend(self.b2.iter().map(|&b| b as f64));
        for (j, &h) in act.hidden.iter().enumerate() {
            if h > 0.0 {
                axpy_f32(h, &self.w2[j * out..(j + 1) * out], &mut act.output);
            }
        }
        for v in act.output.iter_mut() {
            *v = logistic(*v);
        }
        Ok(())
    }

    /// Back-propagates `g_out` (gradient w.r.t. the squashed output) to the
    /// latent, writing into `g_z`. `act` must come from `forward_into` on the
    /// same latent.
    pub fn backward_latent(&self, act: &mut Activations, g_out: &[f64], g_z: &mut [f64]) -> Result<()> {
        self.backward_hidden(act, g_out)?;
        g_z.iter_mut().for_each(|g| *g = 0.0);
        let nz = self.n_z;
        for (j, &gh) in act.grad_hidden.iter().enumerate() {
            if gh != 0.0 {
                let row = &self.w1[j * nz..(j + 1) * nz];
                for (g, &w) in g_z.iter_mut().zip(row) {
                    *g += w as f64 * gh;
                }
            }
        }
        Ok(())
    }

    /// Fills `act.grad_pre_out` and `act.grad_hidden` (the latter already
    /// masked by the rectifier).
    fn backward_hidden(&self, act: &mut Activations, g_out: &[f64]) -> Result<()> {
        let out = self.output_len();
        if g_out.len() != out || act.output.len() != out {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} entries, decoder output has {out}",
                g_out.len()
            )));
        }
        act.grad_pre_out.clear();
        act.grad_pre_out
            .extend(g_out.iter().zip(&act.output).map(|(g, y)| g * y * (1.0 - y)));
        act.grad_hidden.resize(self.hidden, 0.0);
        for j in 0..self.hidden {
            act.grad_hidden[j] = if act.hidden_pre[j] > 0.0 {
                dot_f32(&self.w2[j * out..(j + 1) * out], &act.grad_pre_out)
            } else {
                0.0
            };
        }
        Ok(())
    }

    /// Exact gradients of `sum(upstream * decoder(z))`.
    pub fn gradients(&self, z: &[f64], upstream: &[f64]) -> Result<DecoderGradients> {
        let mut act = Activations::default();
        self.forward_into(z, &mut act)?;
        let mut gz = vec![0.0; self.n_z];
        self.backward_latent(&mut act, upstream, &mut gz)?;
        let (nz, out) = (self.n_z, self.output_len());
        let mut w1 = vec![0.0; self.hidden * nz];
        let mut w2 = vec![0.0; self.hidden * out];
        for j in 0..self.hidden {
            let gh = act.grad_hidden[j];
            for i in 0..nz {
                w1[j * nz + i] = gh * z[i];
            }
            let h = act.hidden[j];
            if h > 0.0 {
                for (g, &p) in w2[j * out..(j + 1) * out].iter_mut().zip(&act.grad_pre_out) {
                    *g = h * p;
                }
            }
        }
        Ok(DecoderGradients {
            z: gz,
            w1,
            b1: act.grad_hidden.clone(),
            w2,
            b2: act.grad_pre_out.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        for v in [
            MODEL_VERSION,
            self.cls,
            self.n_z as u32,
            self.d as u32,
            self.hidden as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for block in self.params() {
            for v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::BadModelFile("missing DSAM magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != MODEL_VERSION {
            return Err(Error::ModelVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let (cls, n_z, d, hidden) = (word(1), word(2) as usize, word(3) as usize, word(4) as usize);
        if n_z == 0 || d == 0 || hidden == 0 {
            return Err(Error::BadModelFile(format!(
                "zero dimension in header (n_z {n_z}, d {d}, hidden {hidden})"
            )));
        }
        let mut model = Self::zeros(cls, n_z, d, hidden);
        let expected: usize = model.params().iter().map(|b| b.len()).sum();
        let payload = &bytes[24..];
        if payload.len() != expected * 4 {
            return Err(Error::BadModelFile(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                expected * 4
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for block in model.params_mut() {
            for v in block.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok(model)
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn axpy_f32(a: f64, x: &[f32], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi as f64;
    }
}

#[inline]
fn dot_f32(x: &[f32], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += a[k] as f64 * b[k];
        }
    }
    let mut s: f64 = acc.iter().sum();
    for (a, b) in xr.iter().zip(yr) {
        s += *a as f64 * b;
    }
    s
}

/// KL divergence of `N(mu, diag(tau^2))` from `N(0, I)` with `tau = exp(log_tau)`.
pub fn kl_diag_gaussian(mu: &[f64], log_tau: &[f64]) -> f64 {
    assert_eq!(mu.len(), log_tau.len(), "mu and log_tau lengths differ");
    let n = mu.len() as f64;
    let mu2: f64 = mu.iter().map(|m| m * m).sum();
    let tau2: f64 = log_tau.iter().map(|l| (2.0 * l).exp()).sum();
    let log_sum: f64 = log_tau.iter().sum();
    (mu2 + tau2 - n) / 2.0 - log_sum
}

/// One trained decoder per class.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: BTreeMap<ClassLabel, DecoderModel>,
}

impl ModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: DecoderModel) {
        self.models.insert(model.cls(), model);
    }

    pub fn get(&self, cls: ClassLabel) -> Result<&DecoderModel> {
        self.models.get(&cls).ok_or(Error::MissingModel(cls))
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassLabel> + '_ {
        self.models.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model_path(dir: &Path, cls: ClassLabel) -> std::path::PathBuf {
        dir.join(format!("class_{cls:02}.dsam"))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in self.models.values() {
            m.save(&Self::model_path(dir, m.cls()))?;
        }
        Ok(())
    }

    /// Loads every `class_NN.dsam` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut bank = Self::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "dsam"))
            .collect();
        paths.sort();
        for p in paths {
            bank.insert(DecoderModel::load(&p)?);
        }
        Ok(bank)
    }
}

impl FromIterator<DecoderModel> for ModelBank {
    fn from_iter<T: IntoIterator<Item = DecoderModel>>(iter: T) -> Self {
        let mut bank = Self::new();
        for m in iter {
            bank.insert(m);
        }
        bank
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> DecoderModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderModel::zeros(2, 3, 4, 5).with_random_params(0.8, &mut rng)
    }

    #[test]
    fn zero_model_is_half_gray() {
        let m = DecoderModel::zeros(1, 10, 6, 8);
        let img = m.forward(&[0.3; 10]).unwrap();
        assert!(img.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_rejects_wrong_latent() {
        let m = DecoderModel::zeros(1, 10, 6, 8);
        assert!(matches!(m.forward(&[0.0; 9]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn forward_strictly_inside_unit_interval_and_deterministic() {
        let m = small_model(3);
        let z = [0.4, -1.2, 2.0];
        let a = m.forward(&z).unwrap();
        let b = m.forward(&z).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = small_model(4);
        let g = m.gradients(&[0.1, 0.2, -0.3], &vec![0.0; m.output_len()]).unwrap();
        for block in [&g.z, &g.w1, &g.b1, &g.w2, &g.b2] {
            assert!(block.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_bias_gradient_is_logistic_derivative() {
        let m = small_model(5);
        let z = [0.5, 0.5, -0.5];
        let y = m.forward(&z).unwrap();
        let g = m.gradients(&z, &vec![1.0; m.output_len()]).unwrap();
        for (gb, yv) in g.b2.iter().zip(y.as_slice()) {
            assert!((gb - yv * (1.0 - yv)).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian(&[0.0; 10], &[0.0; 10]), 0.0);
        let mut mu = [0.0; 10];
        mu[0] = 1.0;
        assert!((kl_diag_gaussian(&mu, &[0.0; 10]) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mu: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lt: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(kl_diag_gaussian(&mu, &lt) >= 0.0);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let m = small_model(6);
        let mut buf = Vec::new();
        m.encode(&mut buf).unwrap();
        assert_eq!(DecoderModel::decode(&buf).unwrap(), m);

        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(DecoderModel::decode(&bad), Err(Error::BadModelFile(_))));

        let mut old = buf.clone();
        old[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            DecoderModel::decode(&old),
            Err(Error::ModelVersion { found: 7, .. })
        ));

        assert!(DecoderModel::decode(&buf[..buf.len() - 4]).is_err());
    }
}
