//! Non-maximum suppression baselines and final score thresholding.
//!
//! Suppression is class-agnostic unless `per_class` is set. Inputs are
//! ordered by score with the lower input index winning ties.

use serde::{Deserialize, Serialize};

use crate::detection::{sort_by_score_desc, Detection};
use crate::error::{Error, Result};
use crate::geom::{diou, iou, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftMethod {
    Linear,
    Gaussian,
}

impl std::str::FromStr for SoftMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SoftMethod::Linear),
            "gaussian" => Ok(SoftMethod::Gaussian),
            _ => Err(Error::Config(format!("unknown soft-nms method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub nt: f64,
    pub soft_method: SoftMethod,
    pub soft_sigma: f64,
    /// Only suppress among detections of the same class.
    pub per_class: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            nt: 0.5,
            soft_method: SoftMethod::Linear,
            soft_sigma: 0.5,
            per_class: false,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nt) || !(self.soft_sigma > 0.0) {
            return Err(Error::Config(format!(
                "nms threshold {} must lie in [0,1] and sigma {} be positive",
                self.nt, self.soft_sigma
            )));
        }
        Ok(())
    }
}

fn sorted(dets: &[Detection]) -> Vec<Detection> {
    let mut v = dets.to_vec();
    sort_by_score_desc(&mut v);
    v
}

fn greedy(dets: &[Detection], nt: f64, per_class: bool, overlap: fn(&BoundingBox, &BoundingBox) -> f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted(dets) {
        let suppressed = kept
            .iter()
            .any(|k| (!per_class || k.cls == d.cls) && overlap(&k.bbox, &d.bbox) > nt);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Greedy IoU suppression.
pub fn nms(dets: &[Detection], nt: f64) -> Vec<Detection> {
    greedy(dets, nt, false, iou)
}

/// Greedy suppression on DIoU instead of IoU.
pub fn diou_nms(dets: &[Detection], nt: f64) -> Vec<Detection> {
    greedy(dets, nt, false, diou)
}

/// Suppression honoring every field of `cfg`.
pub fn nms_with(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    greedy(dets, cfg.nt, cfg.per_class, iou)
}

pub fn diou_nms_with(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    greedy(dets, cfg.nt, cfg.per_class, diou)
}

/// Soft-NMS: nothing is removed, overlapping scores decay. Output is in
/// selection order, which is descending in final score.
pub fn soft_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut rest = sorted(dets);
    let mut out = Vec::with_capacity(rest.len());
    while !rest.is_empty() {
        // First maximum wins ties, keeping the earlier detection.
        let best = rest
            .iter()
            .enumerate()
            .fold(0, |b, (i, d)| if d.score > rest[b].score { i } else { b });
        let top = rest.remove(best);
        for d in rest.iter_mut() {
            if cfg.per_class && d.cls != top.cls {
                continue;
            }
            let o = iou(&top.bbox, &d.bbox);
            let factor = match cfg.soft_method {
                SoftMethod::Linear => 1.0 - o,
                SoftMethod::Gaussian => (-o * o / cfg.soft_sigma).exp(),
            };
            d.score *= factor;
        }
        out.push(top);
    }
    out
}

/// Detections scoring strictly above `t`.
pub fn threshold_select(dets: &[Detection], t: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score > t).copied().collect()
}
