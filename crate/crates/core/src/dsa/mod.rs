//! Detection selection: the interpretation loss of an ordered detection
//! subset and the greedy search with one step back.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::decoder::{LatentPosterior, ModelBank};
use crate::detection::{ClassLabel, Detection};
use crate::error::{Error, Result};
use crate::geom::iou;
use crate::image::Image;
use crate::recon::{whole_reconstruction, Indexed, ReconCache, ReconConfig, ReconMemo, WholeRecon};

/// How single reconstructions are reused between subset evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// One reconstruction per detection, computed on first use and kept for
    /// the rest of the search.
    Paper,
    /// Every subset is reconstructed from scratch.
    Invalidate,
}

impl std::str::FromStr for CacheMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(CacheMode::Paper),
            "invalidate" => Ok(CacheMode::Invalidate),
            _ => Err(Error::Config(format!("unknown cache mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsaConfig {
    /// Per-box penalty `2 sigma^2 lambda0`.
    pub lambda: f64,
    pub sigma: f64,
    /// Detections scoring below this are dropped before the search.
    pub min_objectness: f64,
    /// `(source, target)`: a box labeled `source` is also tried as `target`.
    pub competition_pairs: Vec<(ClassLabel, ClassLabel)>,
    pub cache_mode: CacheMode,
    pub recon: ReconConfig,
}

impl Default for DsaConfig {
    fn default() -> Self {
        Self {
            lambda: 30.0,
            sigma: 0.1,
            min_objectness: 0.25,
            competition_pairs: Vec::new(),
            cache_mode: CacheMode::Paper,
            recon: ReconConfig::default(),
        }
    }
}

impl DsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.sigma > 0.0) || !(0.0..=1.0).contains(&self.min_objectness) {
            return Err(Error::Config(format!(
                "dsa needs lambda >= 0, sigma > 0 and min_objectness in [0,1], got {}, {}, {}",
                self.lambda, self.sigma, self.min_objectness
            )));
        }
        self.recon.validate()
    }

    /// Labels a `cls` box is tried under, its own label first.
    pub fn label_options(&self, cls: ClassLabel) -> Vec<ClassLabel> {
        let mut out = vec![cls];
        for &(src, dst) in &self.competition_pairs {
            if src == cls && !out.contains(&dst) {
                out.push(dst);
            }
        }
        out
    }
}

/// `log p_K(k)` for the geometric prior `p_K(k) = (1 - e^-lambda0) e^(-lambda0 k)`.
pub fn count_prior_log(k: usize, lambda0: f64) -> f64 {
    assert!(lambda0 > 0.0, "lambda0 must be positive");
    -lambda0 * k as f64 + (-(-lambda0).exp_m1()).ln()
}

/// Gaussian negative log-likelihood of `image` around `canvas`, every
/// channel of every pixel with variance `sigma^2`.
pub fn image_nll(image: &Image, canvas: &Image, sigma: f64) -> Result<f64> {
    let sse = image.squared_distance(canvas)?;
    let n = image.as_slice().len() as f64;
    Ok(0.5 * n * (2.0 * PI * sigma * sigma).ln() + sse / (2.0 * sigma * sigma))
}

/// `||mu||^2 + sum tau^2 - 2 sum log tau` for one posterior.
pub fn posterior_penalty(p: &LatentPosterior) -> f64 {
    let mu2: f64 = p.mu.iter().map(|m| m * m).sum();
    let tau2: f64 = p.log_tau.iter().map(|l| (2.0 * l).exp()).sum();
    let log_tau: f64 = p.log_tau.iter().sum();
    mu2 + tau2 - 2.0 * log_tau
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpretationLoss {
    pub total: f64,
    /// `||I - canvas||^2`.
    pub recon_term: f64,
    /// `lambda * k`.
    pub count_term: f64,
    /// `sigma^2` times the summed posterior penalties.
    pub kl_term: f64,
}

impl InterpretationLoss {
    pub fn new(recon_term: f64, count_term: f64, kl_term: f64) -> Self {
        Self {
            total: recon_term + count_term + kl_term,
            recon_term,
            count_term,
            kl_term,
        }
    }
}

/// Approximate `log p(I, dets)`: count prior, image likelihood of the
/// canvas and minus the KL of each posterior.
pub fn approx_log_joint(image: &Image, canvas: &Image, posteriors: &[&LatentPosterior], lambda0: f64, sigma: f64) -> Result<f64> {
    let kl: f64 = posteriors.iter().map(|p| p.kl()).sum();
    Ok(count_prior_log(posteriors.len(), lambda0) - image_nll(image, canvas, sigma)? - kl)
}

/// Loss of `subset` together with the whole reconstruction behind it.
/// Missing single reconstructions are computed into `cache`.
pub fn interpretation_loss(
    image: &Image,
    subset: &[Indexed],
    cache: &mut ReconCache,
    models: &ModelBank,
    cfg: &DsaConfig,
) -> Result<(InterpretationLoss, WholeRecon)> {
    let whole = whole_reconstruction(subset, cache, image, models, &cfg.recon)?;
    let recon_term = image.squared_distance(&whole.canvas)?;
    let kl: f64 = subset
        .iter()
        .map(|d| posterior_penalty(&cache.get(d.index).expect("reconstructed above").posterior))
        .sum();
    let loss = InterpretationLoss::new(recon_term, cfg.lambda * subset.len() as f64, cfg.sigma * cfg.sigma * kl);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            stage: "interpretation loss",
            detail: format!("{loss:?}"),
        });
    }
    Ok((loss, whole))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Keep,
    Add,
    Swap,
}

/// One greedy step. Infinite losses are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub step: usize,
    pub candidate: usize,
    /// Label the candidate was evaluated under (after competition).
    pub label: ClassLabel,
    pub l_prev: Option<f64>,
    pub l_add: f64,
    pub l_swap: Option<f64>,
    /// Selected detection the swap would drop.
    pub swap_with: Option<usize>,
    pub action: Action,
}

#[derive(Debug, Clone)]
pub struct Interpretation {
    /// Selected detections in selection order, relabeled where competition
    /// changed a label.
    pub selected: Vec<Indexed>,
    pub cache: ReconCache,
    pub loss: InterpretationLoss,
    pub decisions: Vec<Decision>,
}

impl Interpretation {
    pub fn detections(&self) -> Vec<Detection> {
        self.selected.iter().map(|i| i.det).collect()
    }

    /// Loss after each step, `None` before the first addition.
    pub fn loss_sequence(&self) -> Vec<Option<f64>> {
        let mut cur = None;
        self.decisions
            .iter()
            .map(|d| {
                cur = match d.action {
                    Action::Keep => cur,
                    Action::Add => Some(d.l_add),
                    Action::Swap => d.l_swap,
                };
                cur
            })
            .collect()
    }
}

/// Candidates the search considers: score at least `min_objectness`, by
/// descending score, indexed by their position in `dets`.
pub fn candidates(dets: &[Detection], min_objectness: f64) -> Vec<Indexed> {
    let mut out: Vec<Indexed> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.score >= min_objectness)
        .map(|(index, det)| Indexed { index, det: *det })
        .collect();
    out.sort_by(|a, b| b.det.score.total_cmp(&a.det.score).then(a.index.cmp(&b.index)));
    out
}

struct Evaluated {
    loss: InterpretationLoss,
    cache: Option<ReconCache>,
}

fn evaluate(
    image: &Image,
    subset: &[Indexed],
    shared: &ReconCache,
    models: &ModelBank,
    cfg: &DsaConfig,
    memo: &Option<ReconMemo>,
) -> Result<Evaluated> {
    let mut cache = match cfg.cache_mode {
        CacheMode::Paper => shared.clone(),
        CacheMode::Invalidate => ReconCache::with_memo(memo.clone()),
    };
    let (loss, _) = interpretation_loss(image, subset, &mut cache, models, cfg)?;
    Ok(Evaluated { loss, cache: Some(cache) })
}

/// Greedy search over `dets` in descending score order. Each candidate is
/// compared as: keep the current set, add it, or swap it for the selected
/// detection it overlaps most. Ties go to keep, then add. With competition
/// pairs configured, the candidate's label is chosen by the lower add loss.
pub fn greedy_select(image: &Image, dets: &[Detection], models: &ModelBank, cfg: &DsaConfig) -> Result<Interpretation> {
    greedy_select_with_memo(image, dets, models, cfg, None)
}

/// [`greedy_select`] drawing single reconstructions from `memo` when
/// present. Results are identical; the memo must belong to this image, these
/// models and `cfg.recon`.
pub fn greedy_select_with_memo(
    image: &Image,
    dets: &[Detection],
    models: &ModelBank,
    cfg: &DsaConfig,
    memo: Option<ReconMemo>,
) -> Result<Interpretation> {
    cfg.validate()?;
    let mut selected: Vec<Indexed> = Vec::new();
    let mut cache = ReconCache::with_memo(memo.clone());
    let mut current: Option<InterpretationLoss> = None;
    let mut decisions = Vec::new();

    for (step, cand) in candidates(dets, cfg.min_objectness).into_iter().enumerate() {
        // Label competition on the add branch; the first option wins ties.
        let mut best: Option<(Indexed, Evaluated)> = None;
        for label in cfg.label_options(cand.det.cls) {
            let item = Indexed {
                det: Detection { cls: label, ..cand.det },
                ..cand
            };
            let mut with = selected.clone();
            with.push(item);
            let ev = evaluate(image, &with, &cache, models, cfg, &memo)?;
            if best.as_ref().is_none_or(|(_, b)| ev.loss.total < b.loss.total) {
                best = Some((item, ev));
            }
        }
        let (item, mut add) = best.expect("at least one label option");

        let swap_with = selected
            .iter()
            .map(|s| (s.index, iou(&s.det.bbox, &item.det.bbox)))
            .filter(|&(_, o)| o > 0.0)
            .fold(None, |b: Option<(usize, f64)>, (i, o)| match b {
                Some((bi, bo)) if bo > o || (bo == o && bi < i) => Some((bi, bo)),
                _ => Some((i, o)),
            })
            .map(|(i, _)| i);
        let mut swap = None;
        if let Some(j) = swap_with {
            let mut without: Vec<Indexed> = selected.iter().copied().filter(|s| s.index != j).collect();
            without.push(item);
            let base = add.cache.as_ref().expect("fresh evaluation");
            swap = Some((without.clone(), evaluate(image, &without, base, models, cfg, &memo)?));
        }

        let l_prev = current.map(|l| l.total);
        let l_add = add.loss.total;
        let swap_loss = swap.as_ref().map(|(_, e)| e.loss);
        let l_swap = swap_loss.map(|l| l.total);
        let best_total = [l_prev, Some(l_add), l_swap]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        let action = if l_prev == Some(best_total) {
            Action::Keep
        } else if l_add == best_total {
            Action::Add
        } else {
            Action::Swap
        };
        let swap_cache = swap.as_mut().map(|(_, ev)| ev.cache.take().expect("fresh evaluation"));
        let add_cache = add.cache.take().expect("fresh evaluation");
        match action {
            Action::Keep => {}
            Action::Add => {
                selected.push(item);
                current = Some(add.loss);
            }
            Action::Swap => {
                selected = swap.take().expect("swap evaluated").0;
                current = swap_loss;
            }
        }
        cache = match cfg.cache_mode {
            // Reconstructions persist whatever the decision; rejected
            // candidates are never revisited.
            CacheMode::Paper => swap_cache.unwrap_or(add_cache),
            CacheMode::Invalidate => match action {
                Action::Keep => cache,
                Action::Add => add_cache,
                Action::Swap => swap_cache.expect("swap evaluated"),
            },
        };
        decisions.push(Decision {
            step,
            candidate: cand.index,
            label: item.det.cls,
            l_prev,
            l_add,
            l_swap,
            swap_with,
            action,
        });
    }

    let loss = match current {
        Some(l) => l,
        None => {
            let (l, _) = interpretation_loss(image, &[], &mut cache, models, cfg)?;
            l
        }
    };
    Ok(Interpretation {
        selected,
        cache,
        loss,
        decisions,
    })
}

/// Relabels each detection of `dets` (taken as the whole interpretation)
/// whose class is a competition source: the label with the lower
/// interpretation loss wins, earlier labels winning ties. Detections are
/// visited in order and later ones see earlier relabelings.
pub fn class_competition(image: &Image, dets: &[Detection], models: &ModelBank, cfg: &DsaConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut out: Vec<Indexed> = dets
        .iter()
        .enumerate()
        .map(|(index, det)| Indexed { index, det: *det })
        .collect();
    for i in 0..out.len() {
        let options = cfg.label_options(out[i].det.cls);
        if options.len() == 1 {
            continue;
        }
        let mut best: Option<(ClassLabel, f64)> = None;
        for label in options {
            models.get(label)?;
            let mut trial = out.clone();
            trial[i].det.cls = label;
            let (loss, _) = interpretation_loss(image, &trial, &mut ReconCache::new(), models, cfg)?;
            if best.is_none_or(|(_, l)| loss.total < l) {
                best = Some((label, loss.total));
            }
        }
        out[i].det.cls = best.expect("options are non-empty").0;
    }
    Ok(out.into_iter().map(|i| i.det).collect())
}

/// Writes the decision log as JSON lines.
pub fn write_decisions(decisions: &[Decision], w: &mut impl std::io::Write) -> std::io::Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut *w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
