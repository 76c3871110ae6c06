use super::*;
use crate::decoder::{DecoderModel, ModelBank};
use crate::geom::BoundingBox;
use crate::recon::ReconConfig;
use crate::scenegen::{gen_eval_sets, EvalSizes, SceneConfig, NUM_CLASSES};

fn res(truth: &[ClassLabel], pred: &[ClassLabel]) -> SceneResult {
    let dets: Vec<Detection> = pred
        .iter()
        .map(|&c| Detection::new(0.9, BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0.5, c).unwrap())
        .collect();
    SceneResult::new(0, "m", 0.5, truth, &dets, 0.0)
}

#[test]
fn standard_error_examples() {
    assert!((standard_error(0.962, 500) - 0.0086).abs() < 5e-5);
    assert_eq!(standard_error(1.0, 10), 0.0);
}

#[test]
fn accuracy_examples() {
    let all = vec![res(&[1, 2], &[2, 1]); 3];
    assert_eq!(accuracy_boxes(&all).unwrap(), (1.0, 0.0));
    let half = [res(&[1], &[1]), res(&[1], &[]), res(&[2], &[2]), res(&[2], &[2, 2])];
    assert_eq!(accuracy_boxes(&half).unwrap(), (0.5, 0.25));
    let swapped = res(&[1, 1, 2], &[1, 2, 2]);
    assert!(swapped.boxes_correct() && !swapped.labels_correct());
    assert!(matches!(accuracy_labels(&[]), Err(Error::EmptyResults)));
    assert!(matches!(accuracy_boxes(&[]), Err(Error::EmptyResults)));
}

#[test]
fn median_tie_rule() {
    let g = LAMBDA_GRID;
    assert_eq!(median_argmax(&g, &[0.9, 0.9, 0.9, 0.5, 0.1]), 20.0);
    assert_eq!(median_argmax(&g, &[0.1, 0.3, 0.9, 0.5, 0.1]), 30.0);
    assert_eq!(median_argmax(&g, &[0.9, 0.9, 0.1, 0.1, 0.1]), 10.0);
    assert_eq!(median_argmax(&[0.5], &[0.0]), 0.5);
}

#[test]
fn separable_scores_pick_a_separating_threshold() {
    // True boxes score 0.95, false ones 0.05.
    let truth: Vec<ClassLabel> = vec![1, 2];
    let dets = [
        Detection::new(0.95, BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), 0.5, 1).unwrap(),
        Detection::new(0.95, BoundingBox::new(20.0, 0.0, 25.0, 5.0).unwrap(), 0.5, 2).unwrap(),
        Detection::new(0.05, BoundingBox::new(40.0, 0.0, 45.0, 5.0).unwrap(), 0.5, 3).unwrap(),
    ];
    let (tb, tl) = grid_search_threshold(&threshold_grid(), |t| {
        let kept = crate::nms::threshold_select(&dets, t);
        Ok(vec![SceneResult::new(0, "nms", t, &truth, &kept, 0.0)])
    })
    .unwrap();
    assert!(tb >= 0.05 && tb < 0.95 && tl == tb, "{tb}");
    // Maximizers are 0.05..=0.94; the lower median of those 90 values.
    assert_eq!(tb, 0.49);
    let (a, b) = grid_search_lambda(&[20.0], |_| Ok(vec![res(&[1], &[1])])).unwrap();
    assert_eq!((a, b), (20.0, 20.0));
    assert!(grid_search_lambda(&[], |_| Ok(vec![])).is_err());
}

#[test]
fn names_parse() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    for s in Scenario::ALL {
        assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
    }
    assert!("bogus".parse::<Method>().is_err());
    assert_eq!("fixed-0.5".parse::<Scenario>().unwrap(), Scenario::Fixed);
}

#[test]
fn report_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = vec![
        Report::from_results("nms", "T", (0.91, &[res(&[1], &[1])]), (0.9, &[res(&[1], &[2])])).unwrap(),
        Report::from_results("nms+dsa", "lambda", (15.0, &[res(&[1], &[1])]), (15.0, &[res(&[1], &[1])])).unwrap(),
    ];
    let p = dir.path().join("r.csv");
    write_reports_csv(&p, &r).unwrap();
    assert_eq!(read_reports_csv(&p).unwrap(), r);
    let table = format_table(&r);
    assert!(table.contains("1.000 (0.0000)") && table.contains("0.000 (0.0000)"));
}

fn tiny_bank() -> ModelBank {
    (1..=NUM_CLASSES)
        .map(|c| DecoderModel::new_random(c, 3, 12, 8, c as u64))
        .collect()
}

fn tiny_sets() -> (Vec<crate::scenegen::Scene>, Vec<crate::scenegen::Scene>) {
    let sizes = EvalSizes {
        validation: vec![(3, 3)],
        test: vec![(5, 3)],
    };
    gen_eval_sets(1, &sizes, &SceneConfig::default()).unwrap()
}

fn tiny_cfg(scenario: Scenario) -> ExperimentConfig {
    ExperimentConfig {
        scenario,
        lambda_grid: vec![10.0, 30.0],
        dsa: crate::dsa::DsaConfig {
            recon: ReconConfig {
                n_iter: 3,
                ..ReconConfig::default()
            },
            ..Default::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn baseline_experiment_emits_five_rows() {
    let (val, test) = tiny_sets();
    let out = run_experiment(&val, &test, &tiny_bank(), &tiny_cfg(Scenario::Baseline)).unwrap();
    let names: Vec<&str> = out.reports.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["nms", "soft-nms", "diou-nms", "nms+dsa", "soft-nms+dsa"]);
    for r in &out.reports {
        assert_eq!(r.n, 3);
        assert!((0.0..=1.0).contains(&r.acc_boxes) && (0.0..=1.0).contains(&r.acc_labels));
    }
    let again = run_experiment(&val, &test, &tiny_bank(), &tiny_cfg(Scenario::Baseline)).unwrap();
    assert_eq!(again.reports, out.reports);
    for r in &out.test_results {
        assert!(!r.labels_correct() || r.boxes_correct());
    }
}

#[test]
fn fixed_and_rotate_scenarios() {
    let (val, test) = tiny_sets();
    let cfg = ExperimentConfig {
        methods: vec![Method::Nms, Method::SoftNms, Method::DiouNms],
        ..tiny_cfg(Scenario::Fixed)
    };
    let out = run_experiment(&val, &test, &tiny_bank(), &cfg).unwrap();
    assert!(out.reports.iter().all(|r| r.param_boxes == 0.5 && r.param_labels == 0.5));
    assert!(out.tuning.is_empty());

    let cfg = ExperimentConfig {
        methods: vec![Method::NmsDsa],
        lambda_grid: vec![20.0],
        ..tiny_cfg(Scenario::Rotate10)
    };
    let data = prepare_scenario(&val, &test, &cfg).unwrap();
    assert!(data.dsa.recon.enable_rotation);
    assert_eq!(data.validation, val);
    assert_ne!(data.test, test);
    let out = run_experiment(&val, &test, &tiny_bank(), &cfg).unwrap();
    let names: Vec<&str> = out.reports.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["nms+dsa", "nms+dsa+cc"]);
}
