//! Leave-one-out experiments over a dataset: budget sweeps, normalized
//! objective curves and binarized accuracy.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ard::{fit_prior, ModelError, PriorParams, DEFAULT_PRIOR_SCALE};
use crate::dataset::{DatasetError, DatasetFile, ResultRow};
use crate::domain::{
    normalized_objective, objective, App, Budget, DomainError, Specification, UserScore,
    FEATURE_DIM,
};
use crate::engine::{run_query_loop, EngineError, SessionTrace};
use crate::oracle::ReplayOracle;
use crate::seed::cell_rng;

/// Score threshold for "acceptable", the normalized neutral rating.
pub const ACCEPTABLE_THRESHOLD: f64 = 0.5;

/// Flag for rows whose normalization is undefined.
pub const FLAG_DEGENERATE: &str = "degenerate";
/// Flag for rows of apps where no reduction beats the original.
pub const FLAG_NO_GAIN: &str = "no-gain";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("leave-one-out needs at least 2 apps, dataset has {0}")]
    TooFewApps(usize),
    #[error("unknown test app {0}")]
    UnknownApp(String),
    #[error("app {app}: reduction {reduction} has no survey data")]
    MissingCoverage { app: String, reduction: String },
    #[error("length mismatch: {predicted} predictions, {actual} actual scores")]
    LengthMismatch { predicted: usize, actual: usize },
    #[error("no scores to compare")]
    Empty,
    #[error("rows mix specifications {0} and {1}")]
    MixedSpecs(Specification, Specification),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("app {app}: {source}")]
    Model { app: String, source: ModelError },
    #[error("app {app}: {source}")]
    Engine { app: String, source: EngineError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the prior for a test app comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PriorMode {
    /// ARD fit on every other app.
    #[default]
    Fitted,
    /// Zero mean and unit standard deviation on every weight.
    Flat { noise_sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub specs: Vec<Specification>,
    pub budgets: Vec<Budget>,
    pub runs: usize,
    pub seed: u64,
    /// Apps to hold out in turn; empty means all.
    pub test_apps: Vec<String>,
    pub prior_scale: f64,
    pub prior: PriorMode,
    /// Score recommendations under this spec instead of the one used to
    /// select them.
    pub evaluate_under: Option<Specification>,
    pub record_timing: bool,
}

/// λ in {1, 3} crossed with CPU-only, memory-only, network-only and uniform α.
pub fn default_specs() -> Vec<Specification> {
    let third = 1.0 / 3.0;
    let alphas = [
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (0.0, 0.0, 1.0),
        (third, third, third),
    ];
    [1.0, 3.0]
        .iter()
        .flat_map(|&lambda| {
            alphas.iter().map(move |&(c, m, n)| {
                Specification::from_parts(lambda, c, m, n).expect("valid default spec")
            })
        })
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            specs: default_specs(),
            budgets: (0..=6).map(Budget::Queries).collect(),
            runs: 25,
            seed: 0,
            test_apps: Vec::new(),
            prior_scale: DEFAULT_PRIOR_SCALE,
            prior: PriorMode::Fitted,
            evaluate_under: None,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::Config("runs must be at least 1".into()));
        }
        if self.specs.is_empty() {
            return Err(HarnessError::Config("no specifications".into()));
        }
        if self.budgets.is_empty() {
            return Err(HarnessError::Config("no budgets".into()));
        }
        if !(self.prior_scale.is_finite() && self.prior_scale > 0.0) {
            return Err(HarnessError::Config(format!(
                "prior_scale must be positive, got {}",
                self.prior_scale
            )));
        }
        Ok(())
    }
}

/// Objective-based outcome of one recommendation.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub rho: Option<f64>,
    pub flag: Option<&'static str>,
}

/// Scores the reduction `chosen` of `app` against the true scores.
///
/// The ratio is undefined when no reduction beats the original app. When the
/// best reduction exactly ties the original, a choice that also ties it
/// counts as optimal.
pub fn score_choice(
    app: &App,
    truth: &[UserScore],
    spec: &Specification,
    chosen: &str,
) -> Outcome {
    let values: Vec<f64> = app
        .reductions
        .iter()
        .zip(truth)
        .map(|(r, u)| objective(*u, &r.savings, spec))
        .collect();
    let original = app.original_objective(spec);
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let value = app
        .reductions
        .iter()
        .position(|r| r.id == chosen)
        .map(|i| values[i])
        .expect("chosen reduction belongs to the app");
    match normalized_objective(value, original, best) {
        Ok(_) if best < original => Outcome {
            rho: None,
            flag: Some(FLAG_NO_GAIN),
        },
        Ok(rho) => Outcome {
            rho: Some(rho),
            flag: None,
        },
        Err(_) if (value - best).abs() < crate::domain::DEGENERATE_DENOMINATOR => Outcome {
            rho: Some(1.0),
            flag: Some(FLAG_DEGENERATE),
        },
        Err(_) => Outcome {
            rho: None,
            flag: Some(FLAG_DEGENERATE),
        },
    }
}

struct TestApp<'a> {
    app: &'a App,
    truth: Vec<UserScore>,
    prior: PriorParams,
}

fn prepare_test_apps<'a>(
    dataset: &'a DatasetFile,
    test_apps: &[String],
    mode: PriorMode,
    scale: f64,
) -> Result<Vec<TestApp<'a>>, HarnessError> {
    if dataset.apps.len() < 2 {
        return Err(HarnessError::TooFewApps(dataset.apps.len()));
    }
    let selected: Vec<&App> = if test_apps.is_empty() {
        dataset.apps.iter().collect()
    } else {
        test_apps
            .iter()
            .map(|id| dataset.app(id).ok_or_else(|| HarnessError::UnknownApp(id.clone())))
            .collect::<Result<_, _>>()?
    };
    let index = dataset.survey_index();
    for app in &selected {
        if let Some(r) = app.reductions.iter().find(|r| !index.covers(&r.id)) {
            return Err(HarnessError::MissingCoverage {
                app: app.id.clone(),
                reduction: r.id.clone(),
            });
        }
    }
    selected
        .into_par_iter()
        .map(|app| {
            let model_err = |source| HarnessError::Model {
                app: app.id.clone(),
                source,
            };
            let prior = match mode {
                PriorMode::Fitted => {
                    let history = dataset.history(Some(&app.id))?;
                    fit_prior(&history, scale).map_err(model_err)?
                }
                PriorMode::Flat { noise_sd } => {
                    PriorParams::flat(FEATURE_DIM, noise_sd, scale).map_err(model_err)?
                }
            };
            Ok(TestApp {
                app,
                truth: dataset.true_scores(app)?,
                prior,
            })
        })
        .collect()
}

struct Cell<'a> {
    test: &'a TestApp<'a>,
    spec: Specification,
    budget: Budget,
    run: usize,
}

fn cells<'a>(tests: &'a [TestApp<'a>], specs: &[Specification], budgets: &[Budget], runs: usize) -> Vec<Cell<'a>> {
    let mut out = Vec::new();
    for test in tests {
        for spec in specs {
            for &budget in budgets {
                for run in 0..runs {
                    out.push(Cell {
                        test,
                        spec: *spec,
                        budget,
                        run,
                    });
                }
            }
        }
    }
    out
}

fn run_cell(
    cell: &Cell<'_>,
    dataset_index: &crate::oracle::SurveyIndex,
    seed: u64,
) -> Result<SessionTrace, HarnessError> {
    let app = cell.test.app;
    let budget = cell.budget.resolve(app.reductions.len());
    let mut rng = cell_rng(seed, &app.id, &cell.spec, budget, cell.run);
    let mut oracle = ReplayOracle::new(dataset_index);
    run_query_loop(app, cell.spec, budget, &cell.test.prior, &mut oracle, &mut rng).map_err(
        |source| HarnessError::Engine {
            app: app.id.clone(),
            source,
        },
    )
}

/// Holds out each test app in turn, fits the prior on the rest and runs
/// every `(spec, budget, run)` cell against the replay oracle.
///
/// Rows come back in `(app, spec, budget, run)` order regardless of thread
/// count.
pub fn leave_one_out_eval(
    dataset: &DatasetFile,
    config: &ExperimentConfig,
) -> Result<Vec<ResultRow>, HarnessError> {
    config.validate()?;
    let tests = prepare_test_apps(dataset, &config.test_apps, config.prior, config.prior_scale)?;
    let index = dataset.survey_index();
    cells(&tests, &config.specs, &config.budgets, config.runs)
        .par_iter()
        .map(|cell| {
            let start = Instant::now();
            let trace = run_cell(cell, &index, config.seed)?;
            let ms = config
                .record_timing
                .then(|| start.elapsed().as_millis() as u64);
            let chosen = trace.recommendation.clone().expect("finished session");
            let eval_spec = config.evaluate_under.unwrap_or(cell.spec);
            let outcome = score_choice(cell.test.app, &cell.test.truth, &eval_spec, &chosen);
            Ok(ResultRow {
                app_id: cell.test.app.id.clone(),
                spec: cell.spec,
                budget: cell.budget,
                run: cell.run,
                recommendation: chosen,
                rho: outcome.rho,
                queries: trace.steps.len(),
                ms,
                flag: outcome.flag.map(str::to_string),
            })
        })
        .collect()
}

/// Fraction of positions where prediction and truth fall on the same side
/// of `threshold`.
pub fn binarized_accuracy(
    predicted: &[UserScore],
    actual: &[UserScore],
    threshold: f64,
) -> Result<f64, HarnessError> {
    if predicted.len() != actual.len() {
        return Err(HarnessError::LengthMismatch {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    if predicted.is_empty() {
        return Err(HarnessError::Empty);
    }
    let agree = predicted
        .iter()
        .zip(actual)
        .filter(|(p, a)| (p.value() >= threshold) == (a.value() >= threshold))
        .count();
    Ok(agree as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub app_id: String,
    pub budget: Budget,
    pub run: usize,
    pub accuracy: f64,
    /// Reductions whose score was observed rather than predicted.
    pub queried: usize,
}

/// Binarized accuracy of the per-reduction score estimates after each
/// budget. Queried reductions use their observed score.
pub fn accuracy_sweep(
    dataset: &DatasetFile,
    config: &ExperimentConfig,
) -> Result<Vec<AccuracyRow>, HarnessError> {
    config.validate()?;
    let tests = prepare_test_apps(dataset, &config.test_apps, config.prior, config.prior_scale)?;
    let index = dataset.survey_index();
    cells(&tests, &config.specs, &config.budgets, config.runs)
        .par_iter()
        .map(|cell| {
            let trace = run_cell(cell, &index, config.seed)?;
            let predicted: Vec<UserScore> = cell
                .test
                .app
                .reductions
                .iter()
                .map(|r| {
                    trace
                        .estimates
                        .iter()
                        .find(|e| e.reduction_id == r.id)
                        .map(|e| e.score)
                        .expect("estimate per reduction")
                })
                .collect();
            Ok(AccuracyRow {
                app_id: cell.test.app.id.clone(),
                budget: cell.budget,
                run: cell.run,
                accuracy: binarized_accuracy(
                    &predicted,
                    &cell.test.truth,
                    ACCEPTABLE_THRESHOLD,
                )?,
                queried: trace.steps.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: Budget,
    pub mean: f64,
    /// Standard error of the mean; absent with a single sample.
    pub stderr: Option<f64>,
    pub n: usize,
}

/// Mean and standard error of `(budget, value)` samples, by budget.
pub fn summarize(samples: impl IntoIterator<Item = (Budget, f64)>) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<Budget, Vec<f64>> = BTreeMap::new();
    for (budget, value) in samples {
        groups.entry(budget).or_default().push(value);
    }
    groups
        .into_iter()
        .map(|(budget, values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = (n > 1).then(|| {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            });
            CurvePoint {
                budget,
                mean,
                stderr,
                n,
            }
        })
        .collect()
}

/// Per-budget mean ρ. Rows with undefined ρ are skipped.
pub fn rho_curve(rows: &[ResultRow]) -> Result<Vec<CurvePoint>, HarnessError> {
    if let Some(first) = rows.first() {
        if let Some(other) = rows.iter().find(|r| r.spec != first.spec) {
            return Err(HarnessError::MixedSpecs(first.spec, other.spec));
        }
    }
    Ok(summarize(
        rows.iter().filter_map(|r| r.rho.map(|rho| (r.budget, rho))),
    ))
}

/// True when each mean is at least the previous one minus `tolerance`.
pub fn is_non_decreasing(curve: &[CurvePoint], tolerance: f64) -> bool {
    curve
        .windows(2)
        .all(|w| w[1].mean >= w[0].mean - tolerance)
}

pub fn write_curve<W: Write>(curve: &[CurvePoint], sink: W) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer
        .write_record(["budget", "mean", "stderr", "n"])
        .map_err(DatasetError::from)?;
    for p in curve {
        writer
            .write_record([
                p.budget.to_string(),
                p.mean.to_string(),
                p.stderr.map(|s| s.to_string()).unwrap_or_default(),
                p.n.to_string(),
            ])
            .map_err(DatasetError::from)?;
    }
    writer.flush()?;
    Ok(())
}

/// Line plot of a curve with ±1 stderr whiskers, as standalone SVG.
pub fn write_curve_svg<W: Write>(
    curve: &[CurvePoint],
    title: &str,
    mut sink: W,
) -> Result<(), HarnessError> {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let lo = curve
        .iter()
        .map(|p| p.mean - p.stderr.unwrap_or(0.0))
        .fold(0.0_f64, f64::min);
    let hi = curve
        .iter()
        .map(|p| p.mean + p.stderr.unwrap_or(0.0))
        .fold(1.0_f64, f64::max);
    let slots = curve.len().max(2) - 1;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / slots as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

    writeln!(
        sink,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(sink, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        sink,
        r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    )?;
    writeln!(
        sink,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    )?;
    for v in [lo, (lo + hi) / 2.0, hi] {
        writeln!(
            sink,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            PAD - 6.0,
            y(v) + 4.0
        )?;
    }
    let mut path = String::new();
    for (i, p) in curve.iter().enumerate() {
        let (px, py) = (x(i), y(p.mean));
        path.push_str(&format!("{}{px:.1},{py:.1} ", if i == 0 { "M" } else { "L" }));
        if let Some(se) = p.stderr {
            writeln!(
                sink,
                r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="gray"/>"#,
                y(p.mean - se),
                y(p.mean + se)
            )?;
        }
        writeln!(sink, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3"/>"#)?;
        writeln!(
            sink,
            r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD + 16.0,
            p.budget
        )?;
    }
    writeln!(
        sink,
        r#"<path d="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.trim_end()
    )?;
    writeln!(
        sink,
        r#"<text x="{}" y="{}" text-anchor="middle">budget</text>"#,
        W / 2.0,
        H - 8.0
    )?;
    writeln!(sink, "</svg>")?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
