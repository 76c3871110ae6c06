//! Detection simulator: turns scene ground truth into the noisy candidate
//! list a detector with an occlusion branch would emit.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::detection::{sort_by_score_desc, ClassLabel, Detection};
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::scenegen::{GroundTruth, NUM_CLASSES};
use crate::seed::{stream_rng, Stream, StreamRng};

/// Directed label confusion: a true `from` object is reported as `to` with
/// probability `prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub from: ClassLabel,
    pub to: ClassLabel,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-corner Gaussian jitter of true detections, pixels.
    pub box_jitter_sd: f64,
    pub score_floor: f64,
    pub score_ceiling: f64,
    pub occ_noise_sd: f64,
    /// Probability of replacing a true label by a uniformly drawn other class.
    pub label_flip_prob: f64,
    pub confusion_pairs: Vec<Confusion>,
    /// Expected duplicates per true object.
    pub dup_rate: f64,
    /// Per-corner jitter of duplicates around the true box, pixels.
    pub dup_jitter_sd: f64,
    /// Range of the score decrement of a duplicate below its source.
    pub dup_score_drop: (f64, f64),
    /// Expected false positives per image.
    pub fp_rate: f64,
    pub fp_score_range: (f64, f64),
    pub num_classes: u32,
    pub seed: u64,
}

impl NoiseConfig {
    /// Every noise source off: detections are the ground truth.
    pub fn zero() -> Self {
        Self {
            box_jitter_sd: 0.0,
            score_floor: 1.0,
            score_ceiling: 1.0,
            occ_noise_sd: 0.0,
            label_flip_prob: 0.0,
            confusion_pairs: Vec::new(),
            dup_rate: 0.0,
            dup_jitter_sd: 0.0,
            dup_score_drop: (0.0, 0.0),
            fp_rate: 0.0,
            fp_score_range: (0.0, 0.0),
            num_classes: NUM_CLASSES,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        let range = |(lo, hi): (f64, f64)| prob(lo) && prob(hi) && lo <= hi;
        let ok = self.box_jitter_sd >= 0.0
            && self.occ_noise_sd >= 0.0
            && self.dup_jitter_sd >= 0.0
            && self.dup_rate >= 0.0
            && self.fp_rate >= 0.0
            && prob(self.label_flip_prob)
            && range((self.score_floor, self.score_ceiling))
            && range(self.fp_score_range)
            && range(self.dup_score_drop)
            && self.num_classes >= 1
            && self.confusion_pairs.iter().all(|c| prob(c.prob));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise config {self:?}")))
        }
    }
}

/// Named presets: `baseline`, `score_shift`, `label_shift`.
pub fn shift_profile(name: &str) -> Result<NoiseConfig> {
    let baseline = NoiseConfig {
        box_jitter_sd: 1.0,
        score_floor: 0.6,
        score_ceiling: 0.99,
        occ_noise_sd: 0.05,
        label_flip_prob: 0.0,
        confusion_pairs: Vec::new(),
        dup_rate: 0.5,
        dup_jitter_sd: 4.0,
        dup_score_drop: (0.02, 0.2),
        fp_rate: 0.5,
        fp_score_range: (0.05, 0.7),
        num_classes: NUM_CLASSES,
        seed: 0,
    };
    match name {
        "baseline" => Ok(baseline),
        "score_shift" => Ok(NoiseConfig {
            score_floor: 0.3,
            score_ceiling: 0.95,
            ..baseline
        }),
        "label_shift" => Ok(NoiseConfig {
            confusion_pairs: vec![Confusion {
                from: 8,
                to: 9,
                prob: 0.8,
            }],
            ..baseline
        }),
        other => Err(Error::Config(format!(
            "unknown noise profile {other:?} (expected baseline, score_shift or label_shift)"
        ))),
    }
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("standard deviation validated non-negative")
}

fn poisson(rng: &mut impl Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Perturbs each corner by `N(0, sd)` and clips to the canvas; falls back to
/// the clipped source box if the result degenerates.
fn jitter_box(rng: &mut impl Rng, b: &BoundingBox, sd: f64, (h, w): (usize, usize)) -> BoundingBox {
    let n = normal(sd);
    let mut c = b.to_array();
    for v in &mut c {
        *v += n.sample(rng);
    }
    let clip = |c: [f64; 4]| {
        BoundingBox::new(
            c[0].clamp(0.0, w as f64),
            c[1].clamp(0.0, h as f64),
            c[2].clamp(0.0, w as f64),
            c[3].clamp(0.0, h as f64),
        )
    };
    clip(c).or_else(|_| clip(b.to_array())).unwrap_or(*b)
}

fn random_other_label(rng: &mut impl Rng, cls: ClassLabel, n: u32) -> ClassLabel {
    if n < 2 {
        return cls;
    }
    let k = rng.random_range(1..n);
    if k >= cls {
        k + 1
    } else {
        k
    }
}

fn simulate_with(gt: &GroundTruth, cfg: &NoiseConfig, rng: &mut StreamRng) -> Vec<Detection> {
    let n = gt.objects.len();
    let occ_noise = normal(cfg.occ_noise_sd);
    let mut dets: Vec<Detection> = Vec::with_capacity(2 * n + 2);
    for (obj, bbox) in gt.objects.iter().zip(&gt.boxes) {
        let bbox = jitter_box(rng, bbox, cfg.box_jitter_sd, gt.canvas);
        let score = if cfg.score_ceiling > cfg.score_floor {
            rng.random_range(cfg.score_floor..=cfg.score_ceiling)
        } else {
            cfg.score_ceiling
        };
        let occ = (1.0 - obj.depth_rank as f64 / n as f64 + occ_noise.sample(rng)).clamp(0.0, 1.0);
        let mut cls = obj.cls;
        for c in &cfg.confusion_pairs {
            if cls == c.from && rng.random_bool(c.prob) {
                cls = c.to;
                break;
            }
        }
        if cfg.label_flip_prob > 0.0 && rng.random_bool(cfg.label_flip_prob) {
            cls = random_other_label(rng, cls, cfg.num_classes);
        }
        dets.push(Detection { score, bbox, occ, cls });
    }

    for _ in 0..poisson(rng, cfg.dup_rate * n as f64) {
        let i = rng.random_range(0..n);
        let src = dets[i];
        let drop = if cfg.dup_score_drop.1 > cfg.dup_score_drop.0 {
            rng.random_range(cfg.dup_score_drop.0..=cfg.dup_score_drop.1)
        } else {
            cfg.dup_score_drop.0
        };
        dets.push(Detection {
            score: (src.score - drop).max(0.0),
            bbox: jitter_box(rng, &gt.boxes[i], cfg.dup_jitter_sd, gt.canvas),
            occ: (src.occ + occ_noise.sample(rng)).clamp(0.0, 1.0),
            cls: src.cls,
        });
    }

    for _ in 0..poisson(rng, cfg.fp_rate) {
        let bbox = if n == 0 || rng.random_bool(0.5) {
            random_box(rng, gt.canvas)
        } else {
            let src = rng.random_range(0..n);
            partial_box(rng, &gt.boxes[src])
        };
        let (lo, hi) = cfg.fp_score_range;
        dets.push(Detection {
            score: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            bbox,
            occ: rng.random(),
            cls: rng.random_range(1..=cfg.num_classes),
        });
    }
    sort_by_score_desc(&mut dets);
    dets
}

/// Uniform box with sides in `[15, 50]` pixels, inside the canvas.
fn random_box(rng: &mut impl Rng, (h, w): (usize, usize)) -> BoundingBox {
    let bw = rng.random_range(15.0..=50.0f64).min(w as f64);
    let bh = rng.random_range(15.0..=50.0f64).min(h as f64);
    let x0 = rng.random_range(0.0..=w as f64 - bw);
    let y0 = rng.random_range(0.0..=h as f64 - bh);
    BoundingBox::new(x0, y0, x0 + bw, y0 + bh).expect("positive sides")
}

/// Random sub-box covering 40-80% of each side of `b`.
fn partial_box(rng: &mut impl Rng, b: &BoundingBox) -> BoundingBox {
    let fw = rng.random_range(0.4..=0.8);
    let fh = rng.random_range(0.4..=0.8);
    let (bw, bh) = (b.width() * fw, b.height() * fh);
    let x0 = b.x_min() + rng.random_range(0.0..=b.width() - bw);
    let y0 = b.y_min() + rng.random_range(0.0..=b.height() - bh);
    BoundingBox::new(x0, y0, x0 + bw, y0 + bh).expect("positive sides")
}

/// Candidate detections for scene `scene_id`, sorted by score descending.
pub fn simulate_detections(gt: &GroundTruth, cfg: &NoiseConfig, scene_id: u64) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Detector, scene_id);
    Ok(simulate_with(gt, cfg, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::iou;
    use crate::scenegen::{gen_eval_sets, render_scene, EvalSizes, ObjectSpec, SceneConfig};

    fn two_overlapping() -> GroundTruth {
        let specs = [
            ObjectSpec {
                cls: 8,
                center: (80.0, 100.0),
                scale: 20.0,
                rotation: 0.0,
                depth_rank: 1,
            },
            ObjectSpec {
                cls: 2,
                center: (100.0, 100.0),
                scale: 20.0,
                rotation: 0.0,
                depth_rank: 0,
            },
        ];
        render_scene(&specs, [0.8, 0.4, 0.2], (200, 200)).unwrap().1
    }

    #[test]
    fn zero_noise_is_identity_lift() {
        let sizes = EvalSizes {
            validation: vec![],
            test: vec![(6, 3)],
        };
        let (_, test) = gen_eval_sets(1, &sizes, &SceneConfig::default()).unwrap();
        for s in &test {
            let dets = simulate_detections(&s.gt, &NoiseConfig::zero(), s.id as u64).unwrap();
            assert_eq!(dets.len(), 6);
            // Equal scores keep ground-truth order.
            for (i, d) in dets.iter().enumerate() {
                assert_eq!(d.bbox, s.gt.boxes[i]);
                assert_eq!(d.cls, s.gt.objects[i].cls);
                assert_eq!(d.score, 1.0);
            }
            for a in 0..6 {
                for b in 0..6 {
                    if s.gt.objects[a].depth_rank < s.gt.objects[b].depth_rank {
                        assert!(dets[a].occ > dets[b].occ);
                    }
                }
            }
        }
    }

    #[test]
    fn front_object_scores_higher_occ() {
        let gt = two_overlapping();
        let dets = simulate_detections(&gt, &NoiseConfig::zero(), 0).unwrap();
        assert!(dets[1].occ > dets[0].occ);
    }

    #[test]
    fn duplicate_count_matches_poisson_mean() {
        let gt = two_overlapping();
        let cfg = NoiseConfig {
            dup_rate: 1.0,
            ..NoiseConfig::zero()
        };
        let draws = 1000;
        let total: usize = (0..draws)
            .map(|i| simulate_detections(&gt, &cfg, i).unwrap().len())
            .sum();
        let mean = total as f64 / draws as f64;
        // Duplicates ~ Poisson(2): sd of the mean is sqrt(2 / 1000).
        assert!((mean - 4.0).abs() < 3.0 * (2.0f64 / draws as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn outputs_sorted_and_in_range() {
        let gt = two_overlapping();
        for name in ["baseline", "score_shift", "label_shift"] {
            let cfg = shift_profile(name).unwrap();
            for i in 0..200 {
                let dets = simulate_detections(&gt, &cfg, i).unwrap();
                assert!(dets.windows(2).all(|p| p[0].score >= p[1].score));
                for d in &dets {
                    d.validate().unwrap();
                    assert!((1..=10).contains(&d.cls));
                    assert!(d.bbox.x_min() >= 0.0 && d.bbox.x_max() <= 200.0);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let gt = two_overlapping();
        let cfg = shift_profile("baseline").unwrap();
        assert_eq!(
            simulate_detections(&gt, &cfg, 5).unwrap(),
            simulate_detections(&gt, &cfg, 5).unwrap()
        );
    }

    #[test]
    fn label_shift_confuses_eight() {
        let gt = two_overlapping();
        let cfg = shift_profile("label_shift").unwrap();
        let mut flipped = 0;
        for i in 0..1000 {
            let dets = simulate_detections(&gt, &cfg, i).unwrap();
            // The true class-8 detection is the one best matching its box.
            let d = dets
                .iter()
                .max_by(|a, b| iou(&a.bbox, &gt.boxes[0]).total_cmp(&iou(&b.bbox, &gt.boxes[0])))
                .unwrap();
            if d.cls == 9 {
                flipped += 1;
            }
        }
        assert!((700..=900).contains(&flipped), "{flipped}");
    }

    #[test]
    fn presets() {
        let b = shift_profile("baseline").unwrap();
        assert_eq!((b.dup_rate, b.fp_rate, b.box_jitter_sd), (0.5, 0.5, 1.0));
        let s = shift_profile("score_shift").unwrap();
        assert_eq!((s.score_floor, s.score_ceiling), (0.3, 0.95));
        let l = shift_profile("label_shift").unwrap();
        assert_eq!(l.confusion_pairs, vec![Confusion { from: 8, to: 9, prob: 0.8 }]);
        assert!(shift_profile("nope").is_err());
    }

    #[test]
    fn other_label_never_repeats() {
        let mut rng = stream_rng(0, Stream::Detector, 0);
        for cls in 1..=10 {
            for _ in 0..50 {
                let o = random_other_label(&mut rng, cls, 10);
                assert!(o != cls && (1..=10).contains(&o));
            }
        }
    }
}
