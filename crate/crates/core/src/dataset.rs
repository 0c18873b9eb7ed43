//! Files on disk: datasets, fitted priors, session traces and result tables.
//!
//! Datasets, priors and traces are JSON. Result tables are CSV.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ard::{ModelError, PriorParams};
use crate::domain::{
    App, Budget, DomainError, FeatureVector, HistoricalDataset, HistoryEntry, Reduction, ReductionKind,
    ResourceSavings, Specification, SurveyRecord, UserScore, ViewAggregation, FEATURE_DIM,
};
use crate::engine::SessionTrace;
use crate::oracle::{OracleError, SurveyIndex};

pub const DATASET_SCHEMA_VERSION: &str = "1";
pub const PRIOR_SCHEMA_VERSION: &str = "1";
pub const TRACE_SCHEMA_VERSION: &str = "1";

/// Column header of the results CSV.
pub const RESULTS_HEADER: [&str; 12] = [
    "app_id",
    "lambda",
    "alpha_cpu",
    "alpha_mem",
    "alpha_net",
    "budget",
    "run",
    "recommendation",
    "rho",
    "queries",
    "ms",
    "flag",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message} (at {pointer})")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        pointer: String,
        message: String,
    },
    #[error("unsupported schema_version {found:?}; supported: {supported:?}")]
    Version {
        found: String,
        supported: Vec<&'static str>,
    },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("expected dimension {expected}, found {found} in {field}")]
    Dimension {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let pointer = err.path().to_string();
        let inner = err.into_inner();
        let full = inner.to_string();
        let message = match full.rsplit_once(" at line ") {
            Some((head, _)) if inner.line() > 0 => head.to_string(),
            _ => full,
        };
        DatasetError::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            pointer,
            message,
        }
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    writer
        .write_all(b"\n")
        .and_then(|_| writer.flush())
        .map_err(io_err(path))
}

fn check_version(found: &str, supported: &'static str) -> Result<(), DatasetError> {
    if found == supported {
        Ok(())
    } else {
        Err(DatasetError::Version {
            found: found.to_string(),
            supported: vec![supported],
        })
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct PercentSavings {
    cpu: f64,
    mem: f64,
    net: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReductionRecord {
    id: String,
    kind: ReductionKind,
    views: Vec<String>,
    features: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    savings: Option<ResourceSavings>,
    #[serde(default, skip_serializing)]
    savings_percent: Option<PercentSavings>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    asset_refs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppRecord {
    id: String,
    category: String,
    reductions: Vec<ReductionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    apps: Vec<AppRecord>,
    #[serde(default)]
    surveys: Vec<SurveyRecord>,
}

/// A validated dataset: apps with their reductions plus survey answers.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub schema_version: String,
    /// Free-form provenance note, e.g. marking generated data.
    pub description: Option<String>,
    pub apps: Vec<App>,
    pub surveys: Vec<SurveyRecord>,
}

impl Serialize for DatasetFile {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        DatasetRecord {
            schema_version: self.schema_version.clone(),
            description: self.description.clone(),
            apps: self
                .apps
                .iter()
                .map(|app| AppRecord {
                    id: app.id.clone(),
                    category: app.category.clone(),
                    reductions: app
                        .reductions
                        .iter()
                        .map(|r| ReductionRecord {
                            id: r.id.clone(),
                            kind: r.kind,
                            views: r.views.clone(),
                            features: r.features,
                            savings: Some(r.savings),
                            savings_percent: None,
                            asset_refs: r.asset_refs.clone(),
                        })
                        .collect(),
                })
                .collect(),
            surveys: self.surveys.clone(),
        }
        .serialize(serializer)
    }
}

impl DatasetFile {
    pub fn new(apps: Vec<App>, surveys: Vec<SurveyRecord>) -> Result<Self, DatasetError> {
        let dataset = Self {
            schema_version: DATASET_SCHEMA_VERSION.to_string(),
            description: None,
            apps,
            surveys,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    fn from_record(record: DatasetRecord) -> Result<Self, DatasetError> {
        check_version(&record.schema_version, DATASET_SCHEMA_VERSION)?;
        let mut apps = Vec::with_capacity(record.apps.len());
        for app in record.apps {
            let mut reductions = Vec::with_capacity(app.reductions.len());
            for r in app.reductions {
                let savings = match (r.savings, r.savings_percent) {
                    (Some(s), None) => s,
                    (None, Some(p)) => ResourceSavings::from_percent(p.cpu, p.mem, p.net)
                        .map_err(|e| {
                            DatasetError::Integrity(format!("reduction {}: {e}", r.id))
                        })?,
                    (Some(_), Some(_)) => {
                        return Err(DatasetError::Integrity(format!(
                            "reduction {} gives both savings and savings_percent",
                            r.id
                        )))
                    }
                    (None, None) => {
                        return Err(DatasetError::Integrity(format!(
                            "reduction {} has no savings",
                            r.id
                        )))
                    }
                };
                reductions.push(Reduction {
                    id: r.id,
                    app_id: app.id.clone(),
                    kind: r.kind,
                    views: r.views,
                    features: r.features,
                    savings,
                    asset_refs: r.asset_refs,
                });
            }
            apps.push(App {
                id: app.id,
                category: app.category,
                reductions,
                original_savings: ResourceSavings::NONE,
            });
        }
        let dataset = Self {
            schema_version: record.schema_version,
            description: record.description,
            apps,
            surveys: record.surveys,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Checks ids and referential integrity.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut app_ids = HashSet::new();
        let mut views_by_reduction: HashMap<&str, &[String]> = HashMap::new();
        for app in &self.apps {
            if !app_ids.insert(app.id.as_str()) {
                return Err(DatasetError::Integrity(format!("duplicate app id {}", app.id)));
            }
            app.validate()?;
            for r in &app.reductions {
                if r.features.as_slice().len() != FEATURE_DIM {
                    return Err(DatasetError::Dimension {
                        field: "features",
                        expected: FEATURE_DIM,
                        found: r.features.as_slice().len(),
                    });
                }
                if views_by_reduction.insert(&r.id, &r.views).is_some() {
                    return Err(DatasetError::Integrity(format!(
                        "reduction id {} is used by more than one app",
                        r.id
                    )));
                }
            }
        }
        for survey in &self.surveys {
            let views = views_by_reduction
                .get(survey.reduction_id.as_str())
                .ok_or_else(|| {
                    DatasetError::Integrity(format!(
                        "survey references unknown reduction {}",
                        survey.reduction_id
                    ))
                })?;
            if !views.contains(&survey.view_id) {
                return Err(DatasetError::Integrity(format!(
                    "survey references view {} which reduction {} does not modify",
                    survey.view_id, survey.reduction_id
                )));
            }
        }
        Ok(())
    }

    /// Non-fatal observations about the dataset.
    pub fn warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        if self.apps.iter().all(|a| a.reductions.is_empty()) {
            warnings.push("no optimizable apps".to_string());
        }
        let index = self.survey_index();
        for app in &self.apps {
            let missing = app.reductions.iter().filter(|r| !index.covers(&r.id)).count();
            if missing > 0 {
                warnings.push(format!(
                    "app {}: {missing} reduction(s) without survey data",
                    app.id
                ));
            }
        }
        warnings
    }

    pub fn app(&self, id: &str) -> Option<&App> {
        self.apps.iter().find(|a| a.id == id)
    }

    pub fn reduction_count(&self) -> usize {
        self.apps.iter().map(|a| a.reductions.len()).sum()
    }

    pub fn survey_index(&self) -> SurveyIndex {
        SurveyIndex::new(&self.surveys)
    }

    /// Replay scores of every surveyed reduction, optionally leaving out one app.
    pub fn history(&self, exclude_app: Option<&str>) -> Result<HistoricalDataset, DatasetError> {
        let index = self.survey_index();
        let mut entries = Vec::new();
        for app in self.apps.iter().filter(|a| Some(a.id.as_str()) != exclude_app) {
            for r in app.reductions.iter().filter(|r| index.covers(&r.id)) {
                entries.push(HistoryEntry {
                    app_id: app.id.clone(),
                    reduction_id: r.id.clone(),
                    features: r.features,
                    score: index.score(&r.id, ViewAggregation::Mean)?,
                });
            }
        }
        Ok(HistoricalDataset { entries })
    }

    /// Replay scores for every reduction of `app`, in reduction order.
    pub fn true_scores(&self, app: &App) -> Result<Vec<UserScore>, DatasetError> {
        let index = self.survey_index();
        app.reductions
            .iter()
            .map(|r| Ok(index.score(&r.id, ViewAggregation::Mean)?))
            .collect()
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetFile, DatasetError> {
    let path = path.as_ref();
    let record: DatasetRecord = read_json(path)?;
    DatasetFile::from_record(record)
}

pub fn save_dataset(dataset: &DatasetFile, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_json(dataset, path.as_ref())
}

#[derive(Serialize, Deserialize)]
struct PriorFile<P> {
    schema_version: String,
    prior: P,
}

pub fn save_prior(prior: &PriorParams, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_json(
        &PriorFile {
            schema_version: PRIOR_SCHEMA_VERSION.to_string(),
            prior,
        },
        path.as_ref(),
    )
}

/// Loads a prior and checks it matches the feature dimension.
pub fn load_prior(path: impl AsRef<Path>) -> Result<PriorParams, DatasetError> {
    #[derive(Deserialize)]
    struct Probe {
        schema_version: String,
        prior: serde_json::Value,
    }
    let path = path.as_ref();
    let probe: Probe = read_json(path)?;
    check_version(&probe.schema_version, PRIOR_SCHEMA_VERSION)?;
    let prior: PriorParams = serde_json::from_value(probe.prior).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        pointer: "prior".into(),
        message: e.to_string(),
    })?;
    if prior.dim() != FEATURE_DIM {
        return Err(DatasetError::Dimension {
            field: "prior",
            expected: FEATURE_DIM,
            found: prior.dim(),
        });
    }
    Ok(prior)
}

#[derive(Serialize, Deserialize)]
struct TraceFile<T> {
    schema_version: String,
    trace: T,
}

pub fn save_trace(trace: &SessionTrace, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_json(
        &TraceFile {
            schema_version: TRACE_SCHEMA_VERSION.to_string(),
            trace,
        },
        path.as_ref(),
    )
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<SessionTrace, DatasetError> {
    let file: TraceFile<SessionTrace> = read_json(path.as_ref())?;
    check_version(&file.schema_version, TRACE_SCHEMA_VERSION)?;
    Ok(file.trace)
}

/// One evaluated cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub app_id: String,
    pub spec: Specification,
    pub budget: Budget,
    pub run: usize,
    pub recommendation: String,
    /// `None` when the normalization is undefined.
    pub rho: Option<f64>,
    pub queries: usize,
    /// Wall time, only when timing is enabled.
    pub ms: Option<u64>,
    pub flag: Option<String>,
}

/// Writes rows as CSV sorted by `(app, budget, run)`; ties keep input order.
pub fn export_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_results(rows, file)?;
    Ok(())
}

pub fn write_results<W: std::io::Write>(rows: &[ResultRow], sink: W) -> Result<(), DatasetError> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.app_id.as_str(), a.budget, a.run).cmp(&(b.app_id.as_str(), b.budget, b.run))
    });
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(RESULTS_HEADER)?;
    for row in sorted {
        let alpha = row.spec.alpha();
        writer.write_record([
            row.app_id.clone(),
            row.spec.lambda().to_string(),
            alpha.cpu().to_string(),
            alpha.mem().to_string(),
            alpha.net().to_string(),
            row.budget.to_string(),
            row.run.to_string(),
            row.recommendation.clone(),
            row.rho.map(|r| r.to_string()).unwrap_or_default(),
            row.queries.to_string(),
            row.ms.map(|m| m.to_string()).unwrap_or_default(),
            row.flag.clone().unwrap_or_default(),
        ])?;
    }
    writer.flush().map_err(|e| DatasetError::Csv(e.into()))?;
    Ok(())
}
