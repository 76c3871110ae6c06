//! Amodal reconstruction of detected objects.
//!
//! A single reconstruction fits one class decoder's latent posterior and
//! grid pose to the visible pixels of a detection box. A whole
//! reconstruction paints single reconstructions onto a black canvas in
//! occlusion order, each one seeing only the pixels left blank by those in
//! front of it.

mod warp;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::decoder::{kl_diag_gaussian, Activations, DecoderModel, LatentPosterior, ModelBank};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geom::{BoundingBox, PixelWindow};
use crate::image::Image;
use crate::mask::{support_mask, Mask, PixelSet, SupportMask};
use crate::seed::{stream_rng, Stream};

pub use warp::{affine_map, bilinear_sample, rotate_about, warp_image, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub n_iter: usize,
    pub sigma: f64,
    /// Occlusion threshold on the RGB norm.
    pub t0: f64,
    pub lr_latent: f64,
    /// Adam step for the translation, reconstruction pixels.
    pub lr_pose: f64,
    /// Adam step for the rotation, degrees.
    pub lr_rotation: f64,
    /// Final reconstruction at `z = mu`; otherwise one posterior draw.
    pub use_mean_for_final: bool,
    pub enable_rotation: bool,
    /// Keep the per-step loss trace in each [`SingleRecon`].
    pub record_trace: bool,
    /// Master seed of the inference noise stream.
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_iter: 300,
            sigma: 0.1,
            t0: 0.15,
            lr_latent: 0.01,
            lr_pose: 0.1,
            lr_rotation: 0.2,
            use_mean_for_final: true,
            enable_rotation: false,
            record_trace: false,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_iter >= 1
            && self.sigma > 0.0
            && self.t0 >= 0.0
            && self.lr_latent > 0.0
            && self.lr_pose >= 0.0
            && self.lr_rotation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid reconstruction config {self:?}")))
        }
    }
}

/// One row of the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub kl: f64,
    pub recon: f64,
}

impl TraceRow {
    pub fn total(&self) -> f64 {
        self.kl + self.recon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleRecon {
    /// `L x L` reconstruction.
    pub recon: Image,
    pub posterior: LatentPosterior,
    /// `L x L` box centered on the detection box.
    pub bb_star: BoundingBox,
    /// Image coordinate of the reconstruction's top-left pixel.
    pub origin: (i64, i64),
    pub support: SupportMask,
    /// Loss of the final reconstruction (KL plus visible-pixel residual).
    pub final_loss: f64,
    /// No visible pixels: the posterior is the prior.
    pub unconstrained: bool,
    pub trace: Vec<TraceRow>,
}

impl SingleRecon {
    pub fn side(&self) -> usize {
        self.recon.width()
    }
}

/// Frame geometry of a detection: its pixel window (unclipped) and the
/// enclosing `L x L` square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub window: PixelWindow,
    pub l: usize,
    /// Offset of the window inside the `L x L` square.
    pub offset: (usize, usize),
}

impl Frame {
    pub fn of(bbox: &BoundingBox) -> Self {
        let window = bbox.pixel_window();
        let (w, h) = (window.width(), window.height());
        let l = w.max(h);
        Self {
            window,
            l,
            offset: ((l - w) / 2, (l - h) / 2),
        }
    }

    pub fn origin(&self) -> (i64, i64) {
        (self.window.x0 - self.offset.0 as i64, self.window.y0 - self.offset.1 as i64)
    }
}

/// The image restricted to the detection window, zero outside the image,
/// and the mask of window pixels that lie on the image.
pub fn window_target(image: &Image, bbox: &BoundingBox) -> (Image, PixelSet) {
    let win = bbox.pixel_window();
    let (w, h) = (win.width(), win.height());
    let mut target = Image::zeros(h, w);
    let mut inside = Mask::empty(h, w);
    for v in 0..h {
        let y = win.y0 + v as i64;
        if y < 0 || y >= image.height() as i64 {
            continue;
        }
        for u in 0..w {
            let x = win.x0 + u as i64;
            if x < 0 || x >= image.width() as i64 {
                continue;
            }
            target.set_pixel(u, v, image.pixel(x as usize, y as usize));
            inside.set(u, v, true);
        }
    }
    (target, inside)
}

/// Loss and gradients of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub kl: f64,
    pub recon: f64,
    pub g_mu: Vec<f64>,
    pub g_log_tau: Vec<f64>,
    pub g_t: (f64, f64),
    pub g_alpha: f64,
}

impl LossGrad {
    pub fn total(&self) -> f64 {
        self.kl + self.recon
    }
}

#[derive(Default)]
pub struct Workspace {
    act: Activations,
    g_out: Vec<f64>,
    g_z: Vec<f64>,
}

/// The single-reconstruction objective for one detection: KL to the prior
/// plus `1/(2 sigma^2)` times the squared residual over the visible pixels
/// of the centered window crop.
pub struct ReconProblem<'a> {
    model: &'a DecoderModel,
    l: usize,
    s: f64,
    /// Visible pixels in `L x L` coordinates with their target colors.
    pixels: Vec<(f64, f64)>,
    targets: Vec<[f64; 3]>,
    inv_sigma2: f64,
}

impl<'a> ReconProblem<'a> {
    /// `target` and `visible` live in the detection window frame.
    pub fn new(model: &'a DecoderModel, frame: &Frame, target: &Image, visible: &PixelSet, sigma: f64) -> Result<Self> {
        let (w, h) = (frame.window.width(), frame.window.height());
        if (target.width(), target.height()) != (w, h) || (visible.width(), visible.height()) != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "target {}x{} / visible {}x{} do not match window {h}x{w}",
                target.height(),
                target.width(),
                visible.height(),
                visible.width()
            )));
        }
        let (ox, oy) = frame.offset;
        let mut pixels = Vec::with_capacity(visible.count());
        let mut targets = Vec::with_capacity(visible.count());
        for (u, v) in visible.iter() {
            pixels.push(((u + ox) as f64, (v + oy) as f64));
            targets.push(target.pixel(u, v));
        }
        Ok(Self {
            model,
            l: frame.l,
            s: model.side() as f64 / frame.l as f64,
            pixels,
            targets,
            inv_sigma2: 1.0 / (sigma * sigma),
        })
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    pub fn visible_count(&self) -> usize {
        self.pixels.len()
    }

    /// Loss and gradients at `z = mu + tau * eps`.
    pub fn evaluate(&self, post: &LatentPosterior, eps: &[f64], ws: &mut Workspace) -> Result<LossGrad> {
        let n_z = self.model.latent_dim();
        let tau: Vec<f64> = post.log_tau.iter().map(|l| l.exp()).collect();
        let z: Vec<f64> = (0..n_z).map(|i| post.mu[i] + tau[i] * eps[i]).collect();
        self.model.forward_into(&z, &mut ws.act)?;
        let d = self.model.side();
        ws.g_out.clear();
        ws.g_out.resize(self.model.output_len(), 0.0);

        let pose = Pose {
            s: (self.s, self.s),
            t: post.t,
            alpha: post.alpha,
        };
        let c = (self.l as f64 - 1.0) / 2.0;
        let (sin, cos) = post.alpha.unwrap_or(0.0).to_radians().sin_cos();
        let src = &ws.act.output;
        let mut recon = 0.0;
        let (mut g_tx, mut g_ty, mut g_alpha) = (0.0, 0.0, 0.0);
        for (&(xb, yb), tgt) in self.pixels.iter().zip(&self.targets) {
            let (x, y) = pose.map(xb, yb, self.l);
            let mut r = [0.0; 3];
            let mut rx = [0.0; 3];
            let mut ry = [0.0; 3];
            warp::for_taps(d, x, y, |o, w, wx, wy| {
                for ch in 0..3 {
                    r[ch] += w * src[o + ch];
                    rx[ch] += wx * src[o + ch];
                    ry[ch] += wy * src[o + ch];
                }
            });
            let mut gx = 0.0;
            let mut gy = 0.0;
            let mut g = [0.0; 3];
            for ch in 0..3 {
                let res = r[ch] - tgt[ch];
                recon += res * res;
                g[ch] = res * self.inv_sigma2;
                gx += g[ch] * rx[ch];
                gy += g[ch] * ry[ch];
            }
            let g_out = &mut ws.g_out;
            warp::for_taps(d, x, y, |o, w, _, _| {
                for ch in 0..3 {
                    g_out[o + ch] += w * g[ch];
                }
            });
            g_tx += gx;
            g_ty += gy;
            if post.alpha.is_some() {
                // d(rotated point)/d(alpha) = (-(y' - c), x' - c) per radian.
                let (dx, dy) = (xb - c, yb - c);
                let (xr, yr) = (cos * dx - sin * dy, sin * dx + cos * dy);
                g_alpha += gx * (-yr) + gy * xr;
            }
        }
        let s = self.s;
        ws.g_z.resize(n_z, 0.0);
        self.model.backward_latent(&mut ws.act, &ws.g_out, &mut ws.g_z)?;
        let g_mu = (0..n_z).map(|i| ws.g_z[i] + post.mu[i]).collect();
        let g_log_tau = (0..n_z)
            .map(|i| ws.g_z[i] * eps[i] * tau[i] + tau[i] * tau[i] - 1.0)
            .collect();
        Ok(LossGrad {
            kl: kl_diag_gaussian(&post.mu, &post.log_tau),
            recon: 0.5 * self.inv_sigma2 * recon,
            g_mu,
            g_log_tau,
            g_t: (s * g_tx, s * g_ty),
            g_alpha: s * g_alpha * std::f64::consts::PI / 180.0,
        })
    }

    /// The `L x L` reconstruction decoded at `z`.
    pub fn render(&self, z: &[f64], post: &LatentPosterior) -> Result<Image> {
        let decoded = self.model.forward(z)?;
        let pose = Pose {
            s: (self.s, self.s),
            t: post.t,
            alpha: post.alpha,
        };
        Ok(warp_image(&decoded, &pose, self.l))
    }
}

/// Decodes the posterior mean and warps it onto an `l x l` grid.
pub fn warp_decode(model: &DecoderModel, post: &LatentPosterior, l: usize) -> Result<Image> {
    let decoded = model.forward(&post.mu)?;
    let pose = Pose {
        s: post.s,
        t: post.t,
        alpha: post.alpha,
    };
    Ok(warp_image(&decoded, &pose, l))
}

fn check_finite(stage: &'static str, step: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage,
            detail: format!("loss {v} at step {step}"),
        })
    }
}

/// Fits `model` to the visible pixels of `det`'s window. `target` and
/// `visible` are in the frame of `det.bbox.pixel_window()`. The noise comes
/// from the inference stream of `cfg.seed` at `stream_index` (the detection
/// index in a whole reconstruction).
pub fn single_reconstruction(
    target: &Image,
    visible: &PixelSet,
    det: &Detection,
    model: &DecoderModel,
    cfg: &ReconConfig,
    stream_index: u64,
) -> Result<SingleRecon> {
    cfg.validate()?;
    if model.cls() != det.cls {
        return Err(Error::Config(format!(
            "decoder of class {} asked to reconstruct a class-{} detection",
            model.cls(),
            det.cls
        )));
    }
    let frame = Frame::of(&det.bbox);
    let problem = ReconProblem::new(model, &frame, target, visible, cfg.sigma)?;
    let n_z = model.latent_dim();
    let s = problem.scale();
    let mut post = LatentPosterior {
        s: (s, s),
        alpha: cfg.enable_rotation.then_some(0.0),
        ..LatentPosterior::prior(n_z)
    };
    let mut ws = Workspace::default();
    let mut trace = Vec::new();
    let unconstrained = problem.visible_count() == 0;
    let mut rng = stream_rng(cfg.seed, Stream::Inference, stream_index);

    if !unconstrained {
        let mut latent_opt = Adam::new(AdamConfig::with_lr(cfg.lr_latent), 2 * n_z);
        let mut pose_opt = Adam::new(AdamConfig::with_lr(cfg.lr_pose), 2);
        let mut rot_opt = Adam::new(AdamConfig::with_lr(cfg.lr_rotation), 1);
        let mut eps = vec![0.0; n_z];
        let mut latent = vec![0.0; 2 * n_z];
        let mut g_latent = vec![0.0; 2 * n_z];
        for step in 0..cfg.n_iter {
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            let lg = problem.evaluate(&post, &eps, &mut ws)?;
            check_finite("single reconstruction", step, lg.total())?;
            if cfg.record_trace {
                trace.push(TraceRow {
                    kl: lg.kl,
                    recon: lg.recon,
                });
            }
            latent[..n_z].copy_from_slice(&post.mu);
            latent[n_z..].copy_from_slice(&post.log_tau);
            g_latent[..n_z].copy_from_slice(&lg.g_mu);
            g_latent[n_z..].copy_from_slice(&lg.g_log_tau);
            latent_opt.step(&mut latent, &g_latent);
            post.mu.copy_from_slice(&latent[..n_z]);
            post.log_tau.copy_from_slice(&latent[n_z..]);
            let mut t = [post.t.0, post.t.1];
            pose_opt.step(&mut t, &[lg.g_t.0, lg.g_t.1]);
            post.t = (t[0], t[1]);
            if let Some(a) = post.alpha.as_mut() {
                let mut v = [*a];
                rot_opt.step(&mut v, &[lg.g_alpha]);
                *a = v[0];
            }
        }
    }

    let mut eps = vec![0.0; n_z];
    let z = if cfg.use_mean_for_final || unconstrained {
        post.mu.clone()
    } else {
        post.sample(&mut rng, &mut eps)
    };
    let final_loss = problem.evaluate(&post, &eps, &mut ws)?.total();
    check_finite("single reconstruction", cfg.n_iter, final_loss)?;
    let recon = problem.render(&z, &post)?;
    let (cx, cy) = det.bbox.center();
    Ok(SingleRecon {
        support: support_mask(&recon, cfg.t0),
        recon,
        posterior: post,
        bb_star: BoundingBox::from_center(cx, cy, frame.l as f64, frame.l as f64)?,
        origin: frame.origin(),
        final_loss,
        unconstrained,
        trace,
    })
}

/// Writes `step,kl,recon,total` rows.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,kl,recon,total\n");
    for (i, r) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", r.kl, r.recon, r.total()));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Identifies a single reconstruction's inputs within one image and one
/// reconstruction config.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemoKey {
    index: usize,
    cls: crate::detection::ClassLabel,
    bbox: [u64; 4],
    visible: Vec<bool>,
}

/// Single reconstructions shared by every cache of one image. A single
/// reconstruction is a pure function of its key, so reusing one across
/// searches (say, over a penalty grid) changes no result. Only valid while
/// the image, the models and the reconstruction config stay fixed.
pub type ReconMemo = Arc<Mutex<HashMap<MemoKey, SingleRecon>>>;

pub fn new_memo() -> ReconMemo {
    ReconMemo::default()
}

/// Single reconstructions keyed by detection index.
#[derive(Debug, Clone, Default)]
pub struct ReconCache {
    entries: BTreeMap<usize, SingleRecon>,
    computed: usize,
    memo_hits: usize,
    memo: Option<ReconMemo>,
}

impl ReconCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_memo(memo: Option<ReconMemo>) -> Self {
        Self {
            memo,
            ..Self::default()
        }
    }

    pub fn get(&self, index: usize) -> Option<&SingleRecon> {
        self.entries.get(&index)
    }

    pub fn insert(&mut self, index: usize, recon: SingleRecon) {
        self.entries.insert(index, recon);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Single reconstructions computed through this cache so far.
    pub fn computed(&self) -> usize {
        self.computed
    }

    /// Misses served from the shared memo instead of being computed.
    pub fn memo_hits(&self) -> usize {
        self.memo_hits
    }

    fn fill(
        &mut self,
        item: &Indexed,
        target: &Image,
        visible: &PixelSet,
        model: &DecoderModel,
        cfg: &ReconConfig,
    ) -> Result<()> {
        let key = self.memo.as_ref().map(|_| MemoKey {
            index: item.index,
            cls: item.det.cls,
            bbox: item.det.bbox.to_array().map(f64::to_bits),
            visible: visible.as_slice().to_vec(),
        });
        if let (Some(memo), Some(key)) = (&self.memo, &key) {
            let hit = memo.lock().expect("memo lock").get(key).cloned();
            if let Some(sr) = hit {
                self.memo_hits += 1;
                self.entries.insert(item.index, sr);
                return Ok(());
            }
        }
        let sr = single_reconstruction(target, visible, &item.det, model, cfg, item.index as u64)?;
        self.computed += 1;
        if let (Some(memo), Some(key)) = (&self.memo, key) {
            memo.lock().expect("memo lock").insert(key, sr.clone());
        }
        self.entries.insert(item.index, sr);
        Ok(())
    }
}

/// A detection tagged with its index in the candidate list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Indexed {
    pub index: usize,
    pub det: Detection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WholeRecon {
    pub canvas: Image,
    /// Per pixel, row-major: index of the detection that painted it.
    pub owner: Vec<Option<usize>>,
    /// Processing order (detection indices, front first).
    pub order: Vec<usize>,
}

/// Occlusion order: occ descending, then score descending, then index.
pub fn occlusion_order(subset: &[Indexed]) -> Vec<Indexed> {
    let mut v = subset.to_vec();
    v.sort_by(|a, b| {
        b.det
            .occ
            .total_cmp(&a.det.occ)
            .then(b.det.score.total_cmp(&a.det.score))
            .then(a.index.cmp(&b.index))
    });
    v
}

/// Composites `subset` front to back onto a black canvas the size of
/// `image`, computing missing single reconstructions into `cache`.
pub fn whole_reconstruction(
    subset: &[Indexed],
    cache: &mut ReconCache,
    image: &Image,
    models: &ModelBank,
    cfg: &ReconConfig,
) -> Result<WholeRecon> {
    let (h, w) = (image.height(), image.width());
    let mut canvas = Image::zeros(h, w);
    let mut owner = vec![None; h * w];
    let ordered = occlusion_order(subset);
    for item in &ordered {
        if cache.get(item.index).is_none() {
            let (target, inside) = window_target(image, &item.det.bbox);
            let win = item.det.bbox.pixel_window();
            let visible = Mask::from_fn(inside.height(), inside.width(), |u, v| {
                inside.get(u, v) && canvas.is_blank((win.x0 + u as i64) as usize, (win.y0 + v as i64) as usize)
            });
            cache.fill(item, &target, &visible, models.get(item.det.cls)?, cfg)?;
        }
        let sr = cache.get(item.index).expect("just inserted");
        let (ox, oy) = sr.origin;
        for (u, v) in sr.support.iter() {
            let (x, y) = (ox + u as i64, oy + v as i64);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            if canvas.is_blank(x, y) {
                canvas.set_pixel(x, y, sr.recon.pixel(u, v));
                owner[y * w + x] = Some(item.index);
            }
        }
    }
    Ok(WholeRecon {
        canvas,
        owner,
        order: ordered.iter().map(|i| i.index).collect(),
    })
}
