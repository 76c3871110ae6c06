//! Accuracy metrics, validation grid searches and the experiment matrix.

mod experiment;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{ClassLabel, Detection};
use crate::error::{Error, Result};

pub use experiment::{
    prepare_scenario, run_experiment, simulate_set, ExperimentConfig, ExperimentOutput, Method, MethodSpec, Scenario,
    ScenarioData, TuningRow,
};

/// Outcome of one method on one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: usize,
    pub method: String,
    /// Threshold or penalty the scene was processed with.
    pub param: f64,
    pub true_count: usize,
    pub pred_count: usize,
    /// Sorted.
    pub true_labels: Vec<ClassLabel>,
    /// Sorted.
    pub pred_labels: Vec<ClassLabel>,
    pub wall_ms: f64,
}

impl SceneResult {
    pub fn new(scene_id: usize, method: &str, param: f64, truth: &[ClassLabel], pred: &[Detection], wall_ms: f64) -> Self {
        let mut true_labels = truth.to_vec();
        true_labels.sort_unstable();
        let mut pred_labels: Vec<ClassLabel> = pred.iter().map(|d| d.cls).collect();
        pred_labels.sort_unstable();
        Self {
            scene_id,
            method: method.to_string(),
            param,
            true_count: true_labels.len(),
            pred_count: pred_labels.len(),
            true_labels,
            pred_labels,
            wall_ms,
        }
    }

    pub fn boxes_correct(&self) -> bool {
        self.pred_count == self.true_count
    }

    /// Label multisets agree (which implies the counts agree).
    pub fn labels_correct(&self) -> bool {
        self.pred_labels == self.true_labels
    }
}

/// Binomial standard error `sqrt(p (1 - p) / n)`.
pub fn standard_error(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn accuracy(results: &[SceneResult], ok: impl Fn(&SceneResult) -> bool) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let n = results.len();
    let p = results.iter().filter(|r| ok(r)).count() as f64 / n as f64;
    Ok((p, standard_error(p, n)))
}

/// Fraction of scenes with the right number of boxes, with its standard error.
pub fn accuracy_boxes(results: &[SceneResult]) -> Result<(f64, f64)> {
    accuracy(results, SceneResult::boxes_correct)
}

/// Fraction of scenes with the right label multiset, with its standard error.
pub fn accuracy_labels(results: &[SceneResult]) -> Result<(f64, f64)> {
    accuracy(results, SceneResult::labels_correct)
}

/// The median of the grid values attaining the maximum score; with an even
/// number of maximizers the lower middle one.
pub fn median_argmax(grid: &[f64], scores: &[f64]) -> f64 {
    assert!(!grid.is_empty() && grid.len() == scores.len(), "grid and scores must be non-empty and aligned");
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut winners: Vec<f64> = grid.iter().zip(scores).filter(|(_, &s)| s == best).map(|(&g, _)| g).collect();
    winners.sort_by(f64::total_cmp);
    winners[(winners.len() - 1) / 2]
}

/// Validation accuracies at one grid value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub param: f64,
    pub acc_boxes: f64,
    pub acc_labels: f64,
}

/// Evaluates `eval` at every grid value and picks the best value for each
/// metric (ties: median).
pub fn grid_search(grid: &[f64], mut eval: impl FnMut(f64) -> Result<Vec<SceneResult>>) -> Result<(f64, f64, Vec<GridPoint>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty search grid".into()));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &g in grid {
        let res = eval(g)?;
        curve.push(GridPoint {
            param: g,
            acc_boxes: accuracy_boxes(&res)?.0,
            acc_labels: accuracy_labels(&res)?.0,
        });
    }
    let boxes: Vec<f64> = curve.iter().map(|c| c.acc_boxes).collect();
    let labels: Vec<f64> = curve.iter().map(|c| c.acc_labels).collect();
    Ok((median_argmax(grid, &boxes), median_argmax(grid, &labels), curve))
}

/// `0.01, 0.02, ..., 0.99`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

pub const LAMBDA_GRID: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];

/// Best score thresholds `(T_boxes, T_labels)` on validation.
pub fn grid_search_threshold(grid: &[f64], val_results: impl FnMut(f64) -> Result<Vec<SceneResult>>) -> Result<(f64, f64)> {
    grid_search(grid, val_results).map(|(b, l, _)| (b, l))
}

/// Best penalties `(lambda_boxes, lambda_labels)` on validation.
pub fn grid_search_lambda(grid: &[f64], val_results: impl FnMut(f64) -> Result<Vec<SceneResult>>) -> Result<(f64, f64)> {
    grid_search(grid, val_results).map(|(b, l, _)| (b, l))
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    /// `T` for score thresholds, `lambda` for the selection penalty.
    pub param_name: String,
    pub param_boxes: f64,
    pub param_labels: f64,
    pub acc_boxes: f64,
    pub se_boxes: f64,
    pub acc_labels: f64,
    pub se_labels: f64,
    pub n: usize,
}

impl Report {
    /// Box accuracy from `at_boxes`, label accuracy from `at_labels` (the
    /// test results under each tuned parameter).
    pub fn from_results(
        method: &str,
        param_name: &str,
        (param_boxes, at_boxes): (f64, &[SceneResult]),
        (param_labels, at_labels): (f64, &[SceneResult]),
    ) -> Result<Self> {
        let (acc_boxes, se_boxes) = accuracy_boxes(at_boxes)?;
        let (acc_labels, se_labels) = accuracy_labels(at_labels)?;
        Ok(Self {
            method: method.to_string(),
            param_name: param_name.to_string(),
            param_boxes,
            param_labels,
            acc_boxes,
            se_boxes,
            acc_labels,
            se_labels,
            n: at_boxes.len(),
        })
    }
}

pub const REPORT_HEADER: &str = "method,param_boxes,param_labels,acc_boxes,se_boxes,acc_labels,se_labels,n";

pub fn write_reports_csv(path: &Path, reports: &[Report]) -> Result<()> {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method, r.param_boxes, r.param_labels, r.acc_boxes, r.se_boxes, r.acc_labels, r.se_labels, r.n
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_reports_csv`]. The parameter name is not
/// stored; it is inferred from the method (`lambda` for DSA rows).
pub fn read_reports_csv(path: &Path) -> Result<Vec<Report>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Config(format!("{}: not a report file (bad header)", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config(format!("{}: malformed report row {l:?}", path.display()));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(Report {
                method: f[0].to_string(),
                param_name: if f[0].contains("dsa") { "lambda" } else { "T" }.to_string(),
                param_boxes: num(1)?,
                param_labels: num(2)?,
                acc_boxes: num(3)?,
                se_boxes: num(4)?,
                acc_labels: num(5)?,
                se_labels: num(6)?,
                n: f[7].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Fixed-width table with `p (se)` cells.
pub fn format_table(reports: &[Report]) -> String {
    let mut out = format!(
        "{:<20} {:>6} {:>8} {:>8} {:>18} {:>18} {:>5}\n",
        "method", "param", "boxes", "labels", "acc boxes", "acc labels", "n"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<20} {:>6} {:>8} {:>8} {:>18} {:>18} {:>5}\n",
            r.method,
            r.param_name,
            r.param_boxes,
            r.param_labels,
            format!("{:.3} ({:.4})", r.acc_boxes, r.se_boxes),
            format!("{:.3} ({:.4})", r.acc_labels, r.se_labels),
            r.n
        ));
    }
    out
}

pub fn write_scene_results(results: &[SceneResult], w: &mut impl Write) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
