use proptest::prelude::*;

use dsa_core::decoder::{kl_diag_gaussian, DecoderModel, LatentPosterior, ModelBank};
use dsa_core::dsa::{interpretation_loss, DsaConfig};
use dsa_core::eval::{accuracy_boxes, accuracy_labels, SceneResult};
use dsa_core::recon::{warp_decode, Indexed, ReconCache, ReconConfig};
use dsa_core::scenegen::{gen_eval_sets, EvalSizes, SceneConfig};
use dsa_core::{BoundingBox, Detection, Image};

fn det(b: [f64; 4], cls: u32) -> Detection {
    Detection::new(0.9, BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(), 0.5, cls).unwrap()
}

proptest! {
    #[test]
    fn unit_warp_equals_decoder_output(seed in 0u64..1000, z in prop::collection::vec(-2.0..2.0f64, 4)) {
        let m = DecoderModel::new_random(1, 4, 9, 12, seed);
        let post = LatentPosterior {
            mu: z.clone(),
            log_tau: vec![0.0; 4],
            t: (0.0, 0.0),
            s: (1.0, 1.0),
            alpha: None,
        };
        prop_assert_eq!(warp_decode(&m, &post, 9).unwrap(), m.forward(&z).unwrap());
    }

    #[test]
    fn kl_is_non_negative(
        mu in prop::collection::vec(-3.0..3.0f64, 1..8),
        lt in prop::collection::vec(-3.0..3.0f64, 8),
    ) {
        let lt = &lt[..mu.len()];
        let kl = kl_diag_gaussian(&mu, lt);
        prop_assert!(kl >= 0.0);
        if mu.iter().chain(lt).any(|v| v.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn label_accuracy_never_exceeds_box_accuracy(
        scenes in prop::collection::vec(
            (prop::collection::vec(1u32..4, 0..5), prop::collection::vec(1u32..4, 0..5)),
            1..20,
        )
    ) {
        let results: Vec<SceneResult> = scenes
            .iter()
            .enumerate()
            .map(|(i, (truth, pred))| {
                let dets: Vec<Detection> = pred.iter().map(|&c| det([0.0, 0.0, 2.0, 2.0], c)).collect();
                SceneResult::new(i, "m", 0.5, truth, &dets, 0.0)
            })
            .collect();
        prop_assert!(accuracy_labels(&results).unwrap().0 <= accuracy_boxes(&results).unwrap().0);
    }
}

#[test]
fn kl_vanishes_at_the_prior() {
    assert_eq!(kl_diag_gaussian(&[0.0; 5], &[0.0; 5]), 0.0);
}

#[test]
fn visible_masks_partition_the_foreground() {
    let sizes = EvalSizes {
        validation: vec![(3, 4), (4, 4)],
        test: vec![(7, 4)],
    };
    let (val, test) = gen_eval_sets(11, &sizes, &SceneConfig::default()).unwrap();
    for s in val.iter().chain(&test) {
        let (h, w) = s.gt.canvas;
        for y in 0..h {
            for x in 0..w {
                let owners = s.gt.visible_masks.iter().filter(|m| m.get(x, y)).count();
                assert!(owners <= 1, "scene {} pixel ({x}, {y}) visible in {owners} objects", s.id);
                assert_eq!(owners == 1, !s.image.is_blank(x, y), "scene {} pixel ({x}, {y})", s.id);
            }
        }
        for m in &s.gt.visible_masks {
            assert!(m.count() >= SceneConfig::default().min_visible);
        }
    }
}

#[test]
fn invisible_detection_never_lowers_loss_at_zero_penalty() {
    // A decoder that renders black: its reconstructions have empty support.
    let mut dark = DecoderModel::zeros(2, 3, 8, 4);
    dark.params_mut()[3].fill(-40.0);
    let lit = DecoderModel::new_random(1, 3, 8, 4, 3);
    let bank: ModelBank = [dark, lit].into_iter().collect();
    let mut img = Image::zeros(30, 30);
    for y in 2..10 {
        for x in 2..10 {
            img.set_pixel(x, y, [0.6, 0.2, 0.4]);
        }
    }
    let cfg = DsaConfig {
        lambda: 0.0,
        recon: ReconConfig {
            n_iter: 20,
            ..ReconConfig::default()
        },
        ..DsaConfig::default()
    };
    let base = Indexed { index: 0, det: det([2.0, 2.0, 10.0, 10.0], 1) };
    for b in [[15.0, 15.0, 25.0, 25.0], [4.0, 4.0, 12.0, 12.0]] {
        let extra = Indexed { index: 1, det: det(b, 2) };
        let (without, _) = interpretation_loss(&img, &[base], &mut ReconCache::new(), &bank, &cfg).unwrap();
        let (with, whole) = interpretation_loss(&img, &[base, extra], &mut ReconCache::new(), &bank, &cfg).unwrap();
        assert!(whole.owner.iter().all(|o| *o != Some(1)));
        assert!(with.total >= without.total, "{with:?} vs {without:?}");
    }
}
