use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use redopt_core::dataset::{load_dataset, load_prior, save_prior, save_trace};
use redopt_core::harness::{
    accuracy_sweep, rho_curve, score_choice, write_curve, write_curve_svg, AccuracyRow,
};
use redopt_core::oracle::{Oracle, OracleError};
use redopt_core::synth::{population_weights, SYNTHETIC_LABEL};
use redopt_core::{
    export_results, fit_prior, leave_one_out_eval, objective, run_query_loop, App, DatasetError,
    DatasetFile, ExperimentConfig, HarnessError, ModelError, PriorParams, Reduction,
    ReplayOracle, SessionTrace, Specification, SyntheticOracle, UserScore, WeightVector,
    FEATURE_DIM,
};
use redopt_service::{serve, ServiceConfig, SessionManager};

use crate::{spec_from, Command, EvaluateArgs, FitPriorArgs, OracleKind, RecommendArgs, ServeArgs};

/// Noise level assumed by a flat prior.
const FLAT_NOISE_SD: f64 = 0.1;

/// A failed command and whether the caller or the program is at fault.
pub struct Failure {
    pub error: anyhow::Error,
    internal: bool,
}

impl Failure {
    pub fn user(error: impl Into<anyhow::Error>) -> Self {
        Self {
            error: error.into(),
            internal: false,
        }
    }

    pub fn internal(error: impl Into<anyhow::Error>) -> Self {
        Self {
            error: error.into(),
            internal: true,
        }
    }

    pub fn code(&self) -> u8 {
        if self.internal {
            2
        } else {
            1
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(err: DatasetError) -> Self {
        match err {
            DatasetError::Model(ref m) if !is_user_model_error(m) => Failure::internal(err),
            _ => Failure::user(err),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(err: ModelError) -> Self {
        if is_user_model_error(&err) {
            Failure::user(err)
        } else {
            Failure::internal(err)
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        match &err {
            HarnessError::Model { source, .. } if !is_user_model_error(source) => {
                Failure::internal(err)
            }
            HarnessError::Engine { .. } | HarnessError::LengthMismatch { .. } => {
                Failure::internal(err)
            }
            _ => Failure::user(err),
        }
    }
}

fn is_user_model_error(err: &ModelError) -> bool {
    matches!(
        err,
        ModelError::TooFewObservations { .. }
            | ModelError::InvalidPrior(_)
            | ModelError::DimensionMismatch { .. }
    )
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::user(anyhow!("cannot write {}: {e}", path.display()))
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::FitPrior(args) => fit_prior_cmd(args),
        Command::Recommend(args) => recommend_cmd(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Serve(args) => serve_cmd(args),
    }
}

fn fit_prior_cmd(args: FitPriorArgs) -> Result<(), Failure> {
    if !(args.scale.is_finite() && args.scale > 0.0) {
        return Err(Failure::user(anyhow!(
            "--scale must be a positive number, got {}",
            args.scale
        )));
    }
    let dataset = load_dataset(&args.history)?;
    if let Some(id) = &args.exclude_app {
        if dataset.app(id).is_none() {
            return Err(Failure::user(anyhow!("unknown app {id}")));
        }
    }
    let history = dataset.history(args.exclude_app.as_deref())?;
    let prior = fit_prior(&history, args.scale)?;
    save_prior(&prior, &args.out)?;
    log::info!(
        "fitted prior on {} observations, noise sd {:.4}",
        history.len(),
        prior.noise_sd()
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Picks the app to optimize from a dataset.
fn select_app<'a>(dataset: &'a DatasetFile, app_id: Option<&str>) -> Result<&'a App, Failure> {
    match app_id {
        Some(id) => dataset
            .app(id)
            .ok_or_else(|| Failure::user(anyhow!("unknown app {id}"))),
        None => match dataset.apps.as_slice() {
            [only] => Ok(only),
            apps => Err(Failure::user(anyhow!(
                "dataset has {} apps; choose one with --app-id ({})",
                apps.len(),
                apps.iter().map(|a| a.id.as_str()).collect::<Vec<_>>().join(", ")
            ))),
        },
    }
}

/// Loads `path`, or fits on `dataset` minus `exclude`, or falls back to flat.
fn resolve_prior(
    path: Option<&Path>,
    dataset: &DatasetFile,
    exclude: Option<&str>,
) -> Result<PriorParams, Failure> {
    if let Some(path) = path {
        return Ok(load_prior(path)?);
    }
    let history = dataset.history(exclude)?;
    match fit_prior(&history, redopt_core::DEFAULT_PRIOR_SCALE) {
        Ok(prior) => {
            log::info!("fitted prior on {} observations", history.len());
            Ok(prior)
        }
        Err(ModelError::TooFewObservations { got, .. }) => {
            log::warn!("only {got} historical observations; using a flat prior");
            Ok(PriorParams::flat(
                FEATURE_DIM,
                FLAT_NOISE_SD,
                redopt_core::DEFAULT_PRIOR_SCALE,
            )?)
        }
        Err(other) => Err(other.into()),
    }
}

/// Logs every answered query.
struct Logged<'a> {
    inner: &'a mut dyn Oracle,
    asked: usize,
}

impl Oracle for Logged<'_> {
    fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError> {
        self.asked += 1;
        let score = self.inner.query(reduction)?;
        log::info!(
            "oracle query {}: {} -> {:.4}",
            self.asked,
            reduction.id,
            score.value()
        );
        Ok(score)
    }
}

#[derive(Debug, Serialize)]
struct Report {
    app_id: String,
    spec: Specification,
    budget: usize,
    recommendation: String,
    estimated_score: f64,
    objective: f64,
    /// Objective under the true scores, when the oracle knows them all.
    true_objective: Option<f64>,
    rho: Option<f64>,
    flag: Option<&'static str>,
    trace: SessionTrace,
}

fn recommend_cmd(args: RecommendArgs) -> Result<(), Failure> {
    let spec = spec_from(args.lambda, args.alpha)?;
    let dataset = load_dataset(&args.app)?;
    let app = select_app(&dataset, args.app_id.as_deref())?;
    let prior = resolve_prior(args.prior.as_deref(), &dataset, Some(&app.id))?;
    let index = dataset.survey_index();

    let (mut inner, truth): (Box<dyn Oracle + '_>, Option<Vec<UserScore>>) = match args.oracle {
        OracleKind::Replay => {
            let missing: Vec<&str> = app
                .reductions
                .iter()
                .filter(|r| !index.covers(&r.id))
                .map(|r| r.id.as_str())
                .collect();
            if args.budget > 0 && !missing.is_empty() {
                return Err(Failure::user(anyhow!(
                    "app {} has no survey data for {}",
                    app.id,
                    missing.join(", ")
                )));
            }
            let truth = missing
                .is_empty()
                .then(|| dataset.true_scores(app))
                .transpose()?;
            (Box::new(ReplayOracle::new(&index)), truth)
        }
        OracleKind::Synthetic => {
            let weights = match &args.truth_weights {
                Some(path) => read_weights(path)?,
                None => population_weights(),
            };
            let truth = app
                .reductions
                .iter()
                .map(|r| weights.dot(r.features.as_slice()).map(UserScore::clamped))
                .collect::<Result<Vec<_>, _>>()?;
            let oracle = SyntheticOracle::new(weights, args.noise_sd, args.seed)
                .map_err(Failure::user)?;
            (Box::new(oracle), Some(truth))
        }
    };

    let mut oracle = Logged {
        inner: inner.as_mut(),
        asked: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let trace = run_query_loop(app, spec, args.budget, &prior, &mut oracle, &mut rng).map_err(
        |e| match e {
            redopt_core::EngineError::Oracle { .. } => Failure::user(e),
            other => Failure::internal(other),
        },
    )?;
    for warning in &trace.warnings {
        log::warn!("{warning}");
    }
    if let Some(path) = &args.trace_out {
        save_trace(&trace, path)?;
    }

    let chosen = trace
        .recommendation
        .clone()
        .ok_or_else(|| Failure::internal(anyhow!("session finished without a recommendation")))?;
    let reduction = app.reduction(&chosen).expect("recommendation belongs to the app");
    let estimate = trace
        .estimates
        .iter()
        .find(|e| e.reduction_id == chosen)
        .map(|e| e.score)
        .unwrap_or(UserScore::ZERO);
    let (true_objective, rho, flag) = match &truth {
        Some(truth) => {
            let pos = app
                .reductions
                .iter()
                .position(|r| r.id == chosen)
                .expect("recommendation belongs to the app");
            let outcome = score_choice(app, truth, &spec, &chosen);
            (
                Some(objective(truth[pos], &reduction.savings, &spec)),
                outcome.rho,
                outcome.flag,
            )
        }
        None => (None, None, None),
    };
    let report = Report {
        app_id: app.id.clone(),
        spec,
        budget: args.budget,
        recommendation: chosen,
        estimated_score: estimate.value(),
        objective: objective(estimate, &reduction.savings, &spec),
        true_objective,
        rho,
        flag,
        trace,
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if args.json {
        serde_json::to_writer_pretty(&mut out, &report).map_err(Failure::internal)?;
        writeln!(out).map_err(Failure::internal)?;
    } else {
        print_report(&mut out, &report, app).map_err(Failure::internal)?;
    }
    Ok(())
}

fn print_report(out: &mut impl Write, report: &Report, app: &App) -> std::io::Result<()> {
    writeln!(out, "app: {}", report.app_id)?;
    writeln!(out, "spec: {}", report.spec)?;
    writeln!(out, "recommendation: {}", report.recommendation)?;
    writeln!(out, "estimated score: {:.4}", report.estimated_score)?;
    writeln!(out, "objective J: {:.5}", report.objective)?;
    if let Some(j) = report.true_objective {
        writeln!(out, "true objective J: {j:.5}")?;
    }
    match (report.rho, report.flag) {
        (Some(rho), _) => writeln!(out, "rho: {rho:.4}")?,
        (None, Some(flag)) => writeln!(out, "rho: undefined ({flag})")?,
        (None, None) => writeln!(out, "rho: unavailable (oracle does not cover every reduction)")?,
    }
    writeln!(out, "original app J: {:.5}", app.original_objective(&report.spec))?;
    writeln!(out, "queries: {}", report.trace.steps.len())?;
    for (i, step) in report.trace.steps.iter().enumerate() {
        writeln!(out, "  {}. {} score {:.4}", i + 1, step.reduction_id, step.score.value())?;
    }
    Ok(())
}

fn read_weights(path: &Path) -> Result<WeightVector, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::user(anyhow!("cannot read {}: {e}", path.display())))?;
    let weights: WeightVector = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::user(anyhow!("{}: {e}", path.display())))?;
    if weights.dim() != FEATURE_DIM {
        return Err(Failure::user(anyhow!(
            "{}: expected {FEATURE_DIM} weights, found {}",
            path.display(),
            weights.dim()
        )));
    }
    Ok(weights)
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::user(anyhow!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::user(anyhow!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    results: String,
    rows: usize,
    /// Dataset description, flagged when the data is generated.
    dataset_description: Option<&'a str>,
    synthetic_data: bool,
    config: &'a ExperimentConfig,
    /// Curve file index, one per specification.
    curves: Vec<CurveFile>,
}

#[derive(Debug, Serialize)]
struct CurveFile {
    spec: Specification,
    csv: String,
    svg: String,
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), Failure> {
    let mut config = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let dataset = load_dataset(&args.dataset)?;
    for warning in dataset.warnings() {
        log::warn!("{warning}");
    }
    let rows = leave_one_out_eval(&dataset, &config)?;
    export_results(&rows, &args.out)?;
    log::info!("wrote {} rows to {}", rows.len(), args.out.display());

    let mut curves = Vec::new();
    if let Some(dir) = &args.curve_dir {
        std::fs::create_dir_all(dir).map_err(write_err(dir))?;
        for (i, spec) in config.specs.iter().enumerate() {
            let spec_rows: Vec<_> = rows.iter().filter(|r| r.spec == *spec).cloned().collect();
            let curve = rho_curve(&spec_rows)?;
            let csv = dir.join(format!("curve-{i}.csv"));
            let svg = dir.join(format!("curve-{i}.svg"));
            write_curve(&curve, BufWriter::new(File::create(&csv).map_err(write_err(&csv))?))?;
            write_curve_svg(
                &curve,
                &spec.to_string(),
                BufWriter::new(File::create(&svg).map_err(write_err(&svg))?),
            )?;
            curves.push(CurveFile {
                spec: *spec,
                csv: file_name(&csv),
                svg: file_name(&svg),
            });
        }
    }

    if let Some(path) = &args.accuracy_out {
        let rows = accuracy_sweep(&dataset, &config)?;
        write_accuracy(&rows, path)?;
    }

    let description = dataset.description.as_deref();
    let metadata = RunMetadata {
        results: file_name(&args.out),
        rows: rows.len(),
        dataset_description: description,
        synthetic_data: description.is_some_and(|d| d.starts_with(SYNTHETIC_LABEL)),
        config: &config,
        curves,
    };
    if metadata.synthetic_data {
        log::info!("dataset is synthetic; results are labeled as such");
    }
    let meta_path = metadata_path(&args.out);
    let body = serde_json::to_vec_pretty(&metadata).map_err(Failure::internal)?;
    std::fs::write(&meta_path, body).map_err(write_err(&meta_path))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

/// `results.csv` gets `results.meta.json` beside it.
pub fn metadata_path(out: &Path) -> PathBuf {
    out.with_extension("meta.json")
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_accuracy(rows: &[AccuracyRow], path: &Path) -> Result<(), Failure> {
    let file = File::create(path).map_err(write_err(path))?;
    let mut out = BufWriter::new(file);
    let io = write_err(path);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "app_id,budget,run,accuracy,queried")?;
        for row in rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.app_id, row.budget, row.run, row.accuracy, row.queried
            )?;
        }
        out.flush()
    };
    write().map_err(io)
}

fn serve_cmd(args: ServeArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.dataset)?;
    for warning in dataset.warnings() {
        log::warn!("{warning}");
    }
    let prior = resolve_prior(args.prior.as_deref(), &dataset, None)?;
    let config = ServiceConfig {
        session_dir: args.session_dir.clone(),
        rating_timeout: Duration::from_secs(args.rating_timeout),
        seed: args.seed,
        cors_origin: args.cors_origin.clone(),
        static_dir: args.static_dir.clone(),
        ..ServiceConfig::default()
    };
    let manager = Arc::new(SessionManager::new(dataset, prior, config).map_err(Failure::user)?);

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::internal)?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::user(anyhow!("cannot listen on {addr}: {e}")))?;
        let bound = listener.local_addr().map_err(Failure::internal)?;
        println!("listening on http://{bound}");
        serve(listener, manager, shutdown_signal())
            .await
            .context("server failed")
            .map_err(Failure::internal)
    })?;
    println!("stopped");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(err) = tokio::signal::ctrl_c().await {
            log::error!("cannot listen for ctrl-c: {err}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(err) => {
                log::error!("cannot listen for SIGTERM: {err}");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}
