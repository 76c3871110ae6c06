use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grid_search, threshold_grid, GridPoint, Report, SceneResult, LAMBDA_GRID};
use crate::decoder::ModelBank;
use crate::detection::{ClassLabel, Detection};
use crate::detsim::{shift_profile, simulate_detections, NoiseConfig};
use crate::dsa::{greedy_select_with_memo, DsaConfig};
use crate::error::{Error, Result};
use crate::nms::{diou_nms_with, nms_with, soft_nms, threshold_select, NmsConfig};
use crate::recon::new_memo;
use crate::scenegen::{perturb_enlarge, perturb_rotate, Scene};

/// Detector ids of test scenes are offset so they never share a noise
/// stream with validation scenes of the same index.
const TEST_ID_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Nms,
    SoftNms,
    DiouNms,
    NmsDsa,
    SoftNmsDsa,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Nms, Method::SoftNms, Method::DiouNms, Method::NmsDsa, Method::SoftNmsDsa];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nms => "nms",
            Method::SoftNms => "soft-nms",
            Method::DiouNms => "diou-nms",
            Method::NmsDsa => "nms+dsa",
            Method::SoftNmsDsa => "soft-nms+dsa",
        }
    }

    pub fn is_dsa(self) -> bool {
        matches!(self, Method::NmsDsa | Method::SoftNmsDsa)
    }

    /// The suppression stage. DSA methods suppress with `dsa_nt`.
    pub fn suppress(self, dets: &[Detection], nms: &NmsConfig, dsa_nt: f64) -> Vec<Detection> {
        match self {
            Method::Nms => nms_with(dets, nms),
            Method::SoftNms | Method::SoftNmsDsa => soft_nms(dets, nms),
            Method::DiouNms => diou_nms_with(dets, nms),
            Method::NmsDsa => nms_with(dets, &NmsConfig { nt: dsa_nt, ..*nms }),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected nms, soft-nms, diou-nms, nms+dsa or soft-nms+dsa)")))
    }
}

/// A method plus, for DSA, whether class competition runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub competition: bool,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        if self.competition {
            format!("{}+cc", self.method.name())
        } else {
            self.method.name().to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Same detector noise on validation and test.
    Baseline,
    /// Baseline data, score thresholds pinned instead of tuned.
    Fixed,
    /// Test detections drawn from the `score_shift` profile.
    ScoreShift,
    /// Test scenes spun by 10 degrees, `label_shift` detections; DSA runs
    /// with rotation and is reported with and without class competition.
    Rotate10,
    /// Test scenes cropped and enlarged, `score_shift` detections.
    Enlarge,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Baseline,
        Scenario::Fixed,
        Scenario::ScoreShift,
        Scenario::Rotate10,
        Scenario::Enlarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::Fixed => "fixed",
            Scenario::ScoreShift => "score_shift",
            Scenario::Rotate10 => "rotate10",
            Scenario::Enlarge => "enlarge",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "fixed-0.5" && *m == Scenario::Fixed))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scenario {s:?} (expected baseline, fixed, score_shift, rotate10 or enlarge)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub nms: NmsConfig,
    /// Suppression threshold ahead of DSA.
    pub dsa_nt: f64,
    pub dsa: DsaConfig,
    pub threshold_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub fixed_threshold: f64,
    pub rotate_degrees: f64,
    pub enlarge_crop: usize,
    pub competition_pairs: Vec<(ClassLabel, ClassLabel)>,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Baseline,
            seed: 0,
            methods: Method::ALL.to_vec(),
            nms: NmsConfig::default(),
            dsa_nt: 0.5,
            dsa: DsaConfig::default(),
            threshold_grid: threshold_grid(),
            lambda_grid: LAMBDA_GRID.to_vec(),
            fixed_threshold: 0.5,
            rotate_degrees: 10.0,
            enlarge_crop: 180,
            competition_pairs: vec![(9, 8)],
            jobs: 1,
        }
    }
}

/// Scenes, detector profiles and method variants of one scenario.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub validation: Vec<Scene>,
    pub test: Vec<Scene>,
    pub val_profile: NoiseConfig,
    pub test_profile: NoiseConfig,
    pub specs: Vec<MethodSpec>,
    pub dsa: DsaConfig,
}

/// Applies the scenario's perturbation (test only) and picks profiles.
pub fn prepare_scenario(validation: &[Scene], test: &[Scene], cfg: &ExperimentConfig) -> Result<ScenarioData> {
    let profile = |name: &str| -> Result<NoiseConfig> {
        Ok(NoiseConfig {
            seed: cfg.seed,
            ..shift_profile(name)?
        })
    };
    let mut dsa = DsaConfig {
        recon: crate::recon::ReconConfig {
            seed: cfg.seed,
            ..cfg.dsa.recon.clone()
        },
        ..cfg.dsa.clone()
    };
    let (test, test_profile) = match cfg.scenario {
        Scenario::Baseline | Scenario::Fixed => (test.to_vec(), profile("baseline")?),
        Scenario::ScoreShift => (test.to_vec(), profile("score_shift")?),
        Scenario::Rotate10 => {
            dsa.recon.enable_rotation = true;
            (perturb_rotate(test, cfg.rotate_degrees)?, profile("label_shift")?)
        }
        Scenario::Enlarge => (perturb_enlarge(test, cfg.enlarge_crop)?, profile("score_shift")?),
    };
    let mut specs = Vec::new();
    for &m in &cfg.methods {
        specs.push(MethodSpec {
            method: m,
            competition: false,
        });
        if m.is_dsa() && cfg.scenario == Scenario::Rotate10 {
            specs.push(MethodSpec {
                method: m,
                competition: true,
            });
        }
    }
    Ok(ScenarioData {
        validation: validation.to_vec(),
        test,
        val_profile: profile("baseline")?,
        test_profile,
        specs,
        dsa,
    })
}

/// Simulated detections for every scene; `test` selects the test id range.
pub fn simulate_set(scenes: &[Scene], profile: &NoiseConfig, test: bool) -> Result<Vec<Vec<Detection>>> {
    let base = if test { TEST_ID_BASE } else { 0 };
    scenes
        .par_iter()
        .map(|s| simulate_detections(&s.gt, profile, base + s.id as u64))
        .collect()
}

/// Validation accuracy of one method at one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub method: String,
    #[serde(flatten)]
    pub point: GridPoint,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub reports: Vec<Report>,
    /// Test-set results under every tuned parameter.
    pub test_results: Vec<SceneResult>,
    pub tuning: Vec<TuningRow>,
}

struct Split<'a> {
    scenes: &'a [Scene],
    dets: Vec<Vec<Detection>>,
}

fn run_threshold(spec: &MethodSpec, split: &Split, cfg: &ExperimentConfig, t: f64) -> Vec<SceneResult> {
    split
        .scenes
        .iter()
        .zip(&split.dets)
        .map(|(s, dets)| {
            let start = Instant::now();
            let kept = threshold_select(&spec.method.suppress(dets, &cfg.nms, cfg.dsa_nt), t);
            let ms = start.elapsed().as_secs_f64() * 1e3;
            SceneResult::new(s.id, &spec.label(), t, &s.gt.labels(), &kept, ms)
        })
        .collect()
}

/// Results of each DSA spec at each lambda, per spec then lambda then
/// scene. One memo per scene serves every spec and lambda.
fn run_dsa(
    specs: &[MethodSpec],
    split: &Split,
    models: &ModelBank,
    cfg: &ExperimentConfig,
    dsa: &DsaConfig,
    lambdas: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<SceneResult>>>> {
    let per_scene: Vec<Vec<Vec<SceneResult>>> = split
        .scenes
        .par_iter()
        .zip(&split.dets)
        .map(|(s, dets)| {
            let mut by_base: BTreeMap<Method, _> = BTreeMap::new();
            specs
                .iter()
                .zip(lambdas)
                .map(|(spec, grid)| {
                    let memo = by_base.entry(spec.method).or_insert_with(new_memo).clone();
                    let suppressed = spec.method.suppress(dets, &cfg.nms, cfg.dsa_nt);
                    grid.iter()
                        .map(|&lambda| {
                            let run_cfg = DsaConfig {
                                lambda,
                                competition_pairs: if spec.competition { cfg.competition_pairs.clone() } else { Vec::new() },
                                ..dsa.clone()
                            };
                            let start = Instant::now();
                            let out = greedy_select_with_memo(&s.image, &suppressed, models, &run_cfg, Some(memo.clone()))?;
                            let ms = start.elapsed().as_secs_f64() * 1e3;
                            Ok(SceneResult::new(s.id, &spec.label(), lambda, &s.gt.labels(), &out.detections(), ms))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    // Transpose scene-major into spec, lambda, scene.
    Ok((0..specs.len())
        .map(|si| {
            (0..lambdas[si].len())
                .map(|li| per_scene.iter().map(|scene| scene[si][li].clone()).collect())
                .collect()
        })
        .collect())
}

fn distinct(a: f64, b: f64) -> Vec<f64> {
    if a == b {
        vec![a]
    } else {
        vec![a, b]
    }
}

fn pick<'a>(params: &[f64], results: &'a [Vec<SceneResult>], p: f64) -> &'a [SceneResult] {
    &results[params.iter().position(|&q| q == p).expect("tuned value was run")]
}

/// Tunes every method on validation and evaluates it on test.
pub fn run_experiment(validation: &[Scene], test: &[Scene], models: &ModelBank, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.nms.validate()?;
    cfg.dsa.validate()?;
    if validation.is_empty() || test.is_empty() {
        return Err(Error::EmptyResults);
    }
    let data = prepare_scenario(validation, test, cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_prepared(&data, models, cfg))
}

fn run_prepared(data: &ScenarioData, models: &ModelBank, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let val = Split {
        scenes: &data.validation,
        dets: simulate_set(&data.validation, &data.val_profile, false)?,
    };
    let test = Split {
        scenes: &data.test,
        dets: simulate_set(&data.test, &data.test_profile, true)?,
    };
    let mut reports = Vec::new();
    let mut test_results = Vec::new();
    let mut tuning = Vec::new();

    for spec in data.specs.iter().filter(|s| !s.method.is_dsa()) {
        let (tb, tl) = if cfg.scenario == Scenario::Fixed {
            (cfg.fixed_threshold, cfg.fixed_threshold)
        } else {
            let (tb, tl, curve) = grid_search(&cfg.threshold_grid, |t| Ok(run_threshold(spec, &val, cfg, t)))?;
            tuning.extend(curve.into_iter().map(|point| TuningRow {
                method: spec.label(),
                point,
            }));
            (tb, tl)
        };
        let params = distinct(tb, tl);
        let runs: Vec<Vec<SceneResult>> = params.iter().map(|&t| run_threshold(spec, &test, cfg, t)).collect();
        reports.push(Report::from_results(
            &spec.label(),
            "T",
            (tb, pick(&params, &runs, tb)),
            (tl, pick(&params, &runs, tl)),
        )?);
        test_results.extend(runs.into_iter().flatten());
    }

    let dsa_specs: Vec<MethodSpec> = data.specs.iter().copied().filter(|s| s.method.is_dsa()).collect();
    if !dsa_specs.is_empty() {
        let grids = vec![cfg.lambda_grid.clone(); dsa_specs.len()];
        let val_runs = run_dsa(&dsa_specs, &val, models, cfg, &data.dsa, &grids)?;
        let mut tuned = Vec::new();
        for (spec, runs) in dsa_specs.iter().zip(&val_runs) {
            let mut i = 0;
            let (lb, ll, curve) = grid_search(&cfg.lambda_grid, |_| {
                i += 1;
                Ok(runs[i - 1].clone())
            })?;
            tuning.extend(curve.into_iter().map(|point| TuningRow {
                method: spec.label(),
                point,
            }));
            tuned.push((lb, ll));
        }
        let test_grids: Vec<Vec<f64>> = tuned.iter().map(|&(b, l)| distinct(b, l)).collect();
        let test_runs = run_dsa(&dsa_specs, &test, models, cfg, &data.dsa, &test_grids)?;
        for ((spec, &(lb, ll)), (params, runs)) in dsa_specs.iter().zip(&tuned).zip(test_grids.iter().zip(test_runs)) {
            reports.push(Report::from_results(
                &spec.label(),
                "lambda",
                (lb, pick(params, &runs, lb)),
                (ll, pick(params, &runs, ll)),
            )?);
            test_results.extend(runs.into_iter().flatten());
        }
    }
    Ok(ExperimentOutput {
        reports,
        test_results,
        tuning,
    })
}
