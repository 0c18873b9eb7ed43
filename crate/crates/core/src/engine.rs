//! The budgeted query loop: Thompson sampling picks which reduction to ask
//! about, and the final choice combines observed scores with the posterior
//! mode for everything left unasked.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ard::{
    map_estimate, posterior_update, predict_score, sample_weights, ModelError, PriorParams,
    WeightVector,
};
use crate::domain::{argmax_by_value, App, Reduction, Specification, UserScore};
use crate::oracle::{Oracle, OracleError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no reductions to choose from")]
    NoCandidates,
    #[error("unknown reduction {0}")]
    UnknownReduction(String),
    #[error("reduction {0} was already queried")]
    AlreadyQueried(String),
    #[error("expected a score for {expected}, got {found}")]
    NotPending { expected: String, found: String },
    #[error("query budget exhausted")]
    BudgetExhausted,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("oracle failed: {source}")]
    Oracle {
        source: OracleError,
        /// Everything recorded before the failure.
        trace: Box<SessionTrace>,
    },
}

/// One observed score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub reduction_id: String,
    pub score: UserScore,
}

/// Objective of a candidate under some weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateValue {
    pub reduction_id: String,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub reduction_id: String,
    pub score: UserScore,
    /// Objectives of the candidates under the sampled weights that led to
    /// this query.
    pub sampled: Vec<CandidateValue>,
}

/// Final estimate of a reduction's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEstimate {
    pub reduction_id: String,
    pub score: UserScore,
    /// True when the score came from the oracle rather than the model.
    pub observed: bool,
}

/// Complete record of one run of the query loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub app_id: String,
    pub spec: Specification,
    /// Requested budget, before clamping to the number of reductions.
    pub budget: usize,
    pub steps: Vec<TraceStep>,
    pub recommendation: Option<String>,
    #[serde(default)]
    pub estimates: Vec<ScoreEstimate>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SessionTrace {
    pub fn records(&self) -> impl Iterator<Item = QueryRecord> + '_ {
        self.steps.iter().map(|s| QueryRecord {
            reduction_id: s.reduction_id.clone(),
            score: s.score,
        })
    }
}

/// Output of [`thompson_select`].
#[derive(Debug, Clone)]
pub struct Selection<'a> {
    pub reduction: &'a Reduction,
    pub sampled: Vec<CandidateValue>,
}

/// Output of [`optimize_reduction`].
#[derive(Debug, Clone)]
pub struct Recommendation<'a> {
    pub reduction: &'a Reduction,
    /// Estimated score for every reduction, in input order.
    pub estimates: Vec<ScoreEstimate>,
}

fn observations<'a>(observed: &'a [(&'a Reduction, UserScore)]) -> Vec<(&'a [f64], f64)> {
    observed
        .iter()
        .map(|(r, u)| (r.features.as_slice(), u.value()))
        .collect()
}

fn objectives<'a>(
    candidates: &[&'a Reduction],
    weights: &WeightVector,
    spec: &Specification,
) -> Result<Vec<(&'a Reduction, f64)>, ModelError> {
    candidates
        .iter()
        .map(|r| {
            let u = predict_score(weights, r.features.as_slice())?;
            Ok((*r, u.value() + spec.savings_value(&r.savings)))
        })
        .collect()
}

/// Draws weights from the posterior given `observed` and returns the
/// unqueried reduction that is best under the draw.
pub fn thompson_select<'a, R: Rng + ?Sized>(
    spec: &Specification,
    unqueried: &[&'a Reduction],
    observed: &[(&Reduction, UserScore)],
    prior: &PriorParams,
    rng: &mut R,
) -> Result<Selection<'a>, EngineError> {
    if unqueried.is_empty() {
        return Err(EngineError::NoCandidates);
    }
    let posterior = posterior_update(prior, &observations(observed))?;
    let draw = sample_weights(&posterior, rng)?;
    let values = objectives(unqueried, &draw, spec)?;
    let reduction = argmax_by_value(values.iter().copied()).ok_or(EngineError::NoCandidates)?;
    let sampled = values
        .into_iter()
        .map(|(r, objective)| CandidateValue {
            reduction_id: r.id.clone(),
            objective,
        })
        .collect();
    Ok(Selection { reduction, sampled })
}

/// Scores every reduction (observed score when queried, posterior-mode
/// prediction otherwise) and returns the best one overall.
pub fn optimize_reduction<'a>(
    spec: &Specification,
    all: &'a [Reduction],
    observed: &[(&Reduction, UserScore)],
    prior: &PriorParams,
) -> Result<Recommendation<'a>, EngineError> {
    if all.is_empty() {
        return Err(EngineError::NoCandidates);
    }
    let posterior = posterior_update(prior, &observations(observed))?;
    let mode = map_estimate(&posterior);
    let estimates = all
        .iter()
        .map(|r| {
            let known = observed.iter().find(|(q, _)| q.id == r.id).map(|(_, u)| *u);
            Ok(match known {
                Some(score) => ScoreEstimate {
                    reduction_id: r.id.clone(),
                    score,
                    observed: true,
                },
                None => ScoreEstimate {
                    reduction_id: r.id.clone(),
                    score: predict_score(&mode, r.features.as_slice())?,
                    observed: false,
                },
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let reduction = argmax_by_value(
        all.iter()
            .zip(&estimates)
            .map(|(r, e)| (r, e.score.value() + spec.savings_value(&r.savings))),
    )
    .ok_or(EngineError::NoCandidates)?;
    Ok(Recommendation {
        reduction,
        estimates,
    })
}

/// Step-by-step driver for one session, for callers that cannot block on an
/// oracle (the HTTP service) as well as for [`run_query_loop`].
#[derive(Debug, Clone)]
pub struct QuerySession<'a> {
    app: &'a App,
    spec: Specification,
    prior: &'a PriorParams,
    queries: usize,
    unqueried: Vec<&'a Reduction>,
    observed: Vec<(&'a Reduction, UserScore)>,
    pending: Option<(&'a Reduction, Vec<CandidateValue>)>,
    trace: SessionTrace,
}

impl<'a> QuerySession<'a> {
    /// Budgets above the number of reductions are clamped with a warning.
    pub fn new(
        app: &'a App,
        spec: Specification,
        budget: usize,
        prior: &'a PriorParams,
    ) -> Result<Self, EngineError> {
        if app.reductions.is_empty() {
            return Err(EngineError::NoCandidates);
        }
        let available = app.reductions.len();
        let mut warnings = Vec::new();
        if budget > available {
            let message = format!(
                "budget {budget} exceeds the {available} reductions of {}; clamped to {available}",
                app.id
            );
            log::warn!("{message}");
            warnings.push(message);
        }
        Ok(Self {
            app,
            spec,
            prior,
            queries: budget.min(available),
            unqueried: app.reductions.iter().collect(),
            observed: Vec::new(),
            pending: None,
            trace: SessionTrace {
                app_id: app.id.clone(),
                spec,
                budget,
                steps: Vec::new(),
                recommendation: None,
                estimates: Vec::new(),
                rho: None,
                warnings,
            },
        })
    }

    /// Number of queries this session will make.
    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn remaining(&self) -> usize {
        self.queries - self.trace.steps.len()
    }

    pub fn trace(&self) -> &SessionTrace {
        &self.trace
    }

    pub fn pending(&self) -> Option<&'a Reduction> {
        self.pending.as_ref().map(|(r, _)| *r)
    }

    /// Chooses the next reduction to query, or `None` once the budget is
    /// spent. Asking again before recording returns the same reduction.
    pub fn next_query<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
    ) -> Result<Option<&'a Reduction>, EngineError> {
        if let Some((r, _)) = &self.pending {
            return Ok(Some(*r));
        }
        if self.remaining() == 0 {
            return Ok(None);
        }
        let selection =
            thompson_select(&self.spec, &self.unqueried, &self.observed, self.prior, rng)?;
        self.pending = Some((selection.reduction, selection.sampled));
        Ok(Some(selection.reduction))
    }

    /// Records the score for the pending query.
    pub fn record(&mut self, reduction_id: &str, score: UserScore) -> Result<(), EngineError> {
        let (reduction, sampled) = match self.pending.take() {
            Some(p) if p.0.id == reduction_id => p,
            Some(p) => {
                let expected = p.0.id.clone();
                self.pending = Some(p);
                return Err(EngineError::NotPending {
                    expected,
                    found: reduction_id.to_string(),
                });
            }
            None => {
                return Err(if self.remaining() == 0 {
                    EngineError::BudgetExhausted
                } else if self.observed.iter().any(|(r, _)| r.id == reduction_id) {
                    EngineError::AlreadyQueried(reduction_id.to_string())
                } else {
                    EngineError::UnknownReduction(reduction_id.to_string())
                })
            }
        };
        self.unqueried.retain(|r| r.id != reduction.id);
        self.observed.push((reduction, score));
        self.trace.steps.push(TraceStep {
            reduction_id: reduction.id.clone(),
            score,
            sampled,
        });
        Ok(())
    }

    /// Runs the final optimization and returns the completed trace.
    pub fn finish(mut self) -> Result<SessionTrace, EngineError> {
        let rec = optimize_reduction(&self.spec, &self.app.reductions, &self.observed, self.prior)?;
        self.trace.recommendation = Some(rec.reduction.id.clone());
        self.trace.estimates = rec.estimates;
        Ok(self.trace)
    }

    pub fn into_partial_trace(self) -> SessionTrace {
        self.trace
    }
}

/// Runs the full query loop against `oracle` with `budget` queries.
///
/// A budget of zero relies on the prior alone; a budget covering every
/// reduction reduces to picking the best observed objective.
pub fn run_query_loop<R: Rng + ?Sized>(
    app: &App,
    spec: Specification,
    budget: usize,
    prior: &PriorParams,
    oracle: &mut dyn Oracle,
    rng: &mut R,
) -> Result<SessionTrace, EngineError> {
    let mut session = QuerySession::new(app, spec, budget, prior)?;
    while let Some(reduction) = session.next_query(rng)? {
        match oracle.query(reduction) {
            Ok(score) => session.record(&reduction.id, score)?,
            Err(source) => {
                return Err(EngineError::Oracle {
                    source,
                    trace: Box::new(session.into_partial_trace()),
                })
            }
        }
    }
    session.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{
        argmax_objective, FeatureVector, ReductionKind, ResourceSavings, ACTIVITY_METRICS,
        BIAS_INDEX, FEATURE_DIM, REDUCTION_METRICS,
    };
    use crate::oracle::SyntheticOracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reduction(id: &str, metric: f64, savings: (f64, f64, f64)) -> Reduction {
        let mut reduction_metrics = [0.0; REDUCTION_METRICS];
        reduction_metrics[0] = metric;
        Reduction {
            id: id.into(),
            app_id: "app".into(),
            kind: ReductionKind::Res200,
            views: vec!["v".into()],
            features: FeatureVector::new(reduction_metrics, [0.0; ACTIVITY_METRICS]).unwrap(),
            savings: ResourceSavings::new(savings.0, savings.1, savings.2).unwrap(),
            asset_refs: vec![],
        }
    }

    fn point_prior(weights: &[f64]) -> PriorParams {
        PriorParams::new(weights.to_vec(), vec![1e-9; weights.len()], 0.1, 1.0).unwrap()
    }

    fn truth() -> Vec<f64> {
        let mut w = vec![0.0; FEATURE_DIM];
        w[0] = -0.6;
        w[BIAS_INDEX] = 0.9;
        w
    }

    fn app() -> App {
        App {
            id: "app".into(),
            category: "news".into(),
            reductions: vec![
                reduction("a", 0.1, (0.0, 0.1, 0.2)),
                reduction("b", 0.5, (0.0, 0.3, 0.6)),
                reduction("c", 0.9, (0.1, 0.4, 0.9)),
            ],
            original_savings: ResourceSavings::NONE,
        }
    }

    #[test]
    fn point_mass_selection_is_exact_argmax() {
        let app = app();
        let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
        let prior = point_prior(&truth());
        let w = WeightVector::new(truth()).unwrap();
        let scored: Vec<_> = app
            .reductions
            .iter()
            .map(|r| (r, predict_score(&w, r.features.as_slice()).unwrap()))
            .collect();
        let expected = argmax_objective(&scored, &spec).unwrap();
        let candidates: Vec<&Reduction> = app.reductions.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pick = thompson_select(&spec, &candidates, &[], &prior, &mut rng).unwrap();
        assert_eq!(pick.reduction.id, expected.id);
        let rec = optimize_reduction(&spec, &app.reductions, &[], &prior).unwrap();
        assert_eq!(rec.reduction.id, expected.id);
    }

    #[test]
    fn single_candidate_is_returned() {
        let app = app();
        let spec = Specification::from_parts(1.0, 1.0, 0.0, 0.0).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let only = [&app.reductions[1]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pick = thompson_select(&spec, &only, &[], &prior, &mut rng).unwrap();
        assert_eq!(pick.reduction.id, "b");
        assert!(matches!(
            thompson_select(&spec, &[], &[], &prior, &mut rng),
            Err(EngineError::NoCandidates)
        ));
    }

    #[test]
    fn selection_probability_follows_the_posterior() {
        // Only "a" has the uncertain feature; both share a 0.5 bias and equal
        // savings, so "a" wins exactly when the sampled weight is positive.
        let a = reduction("a", 1.0, (0.0, 0.0, 0.5));
        let b = reduction("b", 0.0, (0.0, 0.0, 0.5));
        let mut mean = vec![0.0; FEATURE_DIM];
        mean[BIAS_INDEX] = 0.5;
        let mut stdev = vec![1e-9; FEATURE_DIM];
        stdev[0] = 1.0;
        let prior = PriorParams::new(mean, stdev, 0.1, 1.0).unwrap();
        let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
        let candidates = [&a, &b];
        let trials = 10_000;
        let wins = (0..trials)
            .filter(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                thompson_select(&spec, &candidates, &[], &prior, &mut rng)
                    .unwrap()
                    .reduction
                    .id
                    == "a"
            })
            .count();
        let p = wins as f64 / trials as f64;
        assert!((p - 0.5).abs() <= 0.02, "p = {p}");
    }

    #[test]
    fn fully_observed_matches_argmax_objective() {
        let app = app();
        let spec = Specification::from_parts(0.7, 0.2, 0.3, 0.5).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let scores = [0.9, 0.4, 0.1];
        let observed: Vec<_> = app
            .reductions
            .iter()
            .zip(scores)
            .map(|(r, s)| (r, UserScore::new(s).unwrap()))
            .collect();
        let rec = optimize_reduction(&spec, &app.reductions, &observed, &prior).unwrap();
        assert_eq!(rec.reduction.id, argmax_objective(&observed, &spec).unwrap().id);
        assert!(rec.estimates.iter().all(|e| e.observed));
    }

    #[test]
    fn offline_budget_recovers_brute_force() {
        let app = app();
        let spec = Specification::from_parts(1.0, 0.0, 0.5, 0.5).unwrap();
        let truth = WeightVector::new(truth()).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let mut oracle = SyntheticOracle::noiseless(truth.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trace = run_query_loop(&app, spec, 3, &prior, &mut oracle, &mut rng).unwrap();
        let scored: Vec<_> = app
            .reductions
            .iter()
            .map(|r| (r, predict_score(&truth, r.features.as_slice()).unwrap()))
            .collect();
        assert_eq!(
            trace.recommendation.as_deref(),
            Some(argmax_objective(&scored, &spec).unwrap().id.as_str())
        );
        assert_eq!(trace.steps.len(), 3);
    }

    struct CountingOracle<O> {
        inner: O,
        calls: Vec<String>,
    }

    impl<O: Oracle> Oracle for CountingOracle<O> {
        fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError> {
            self.calls.push(reduction.id.clone());
            self.inner.query(reduction)
        }
    }

    #[test]
    fn zero_budget_makes_no_calls() {
        let app = app();
        let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
        let prior = point_prior(&truth());
        let mut oracle = CountingOracle {
            inner: SyntheticOracle::noiseless(WeightVector::new(truth()).unwrap()),
            calls: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trace = run_query_loop(&app, spec, 0, &prior, &mut oracle, &mut rng).unwrap();
        assert!(oracle.calls.is_empty());
        assert!(trace.steps.is_empty());
        assert!(trace.recommendation.is_some());
    }

    #[test]
    fn oversized_budget_is_clamped_and_never_repeats() {
        let app = app();
        let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let mut oracle = CountingOracle {
            inner: SyntheticOracle::noiseless(WeightVector::new(truth()).unwrap()),
            calls: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trace = run_query_loop(&app, spec, 8, &prior, &mut oracle, &mut rng).unwrap();
        assert_eq!(oracle.calls.len(), 3);
        let mut unique = oracle.calls.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 3);
        assert_eq!(trace.warnings.len(), 1);
        assert_eq!(trace.budget, 8);
    }

    struct FailingOracle;

    impl Oracle for FailingOracle {
        fn query(&mut self, _: &Reduction) -> Result<UserScore, OracleError> {
            Err(OracleError::Closed)
        }
    }

    #[test]
    fn oracle_failure_keeps_partial_trace() {
        let app = app();
        let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        match run_query_loop(&app, spec, 2, &prior, &mut FailingOracle, &mut rng) {
            Err(EngineError::Oracle { trace, .. }) => {
                assert!(trace.steps.is_empty());
                assert!(trace.recommendation.is_none());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn session_rejects_out_of_order_records() {
        let app = app();
        let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let mut session = QuerySession::new(&app, spec, 1, &prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let first = session.next_query(&mut rng).unwrap().unwrap();
        assert_eq!(session.next_query(&mut rng).unwrap().unwrap().id, first.id);
        let other = app.reductions.iter().find(|r| r.id != first.id).unwrap();
        assert!(matches!(
            session.record(&other.id, UserScore::ONE),
            Err(EngineError::NotPending { .. })
        ));
        session.record(&first.id, UserScore::ONE).unwrap();
        assert!(session.next_query(&mut rng).unwrap().is_none());
        assert!(matches!(
            session.record(&first.id, UserScore::ONE),
            Err(EngineError::BudgetExhausted)
        ));
        let trace = session.finish().unwrap();
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn identical_inputs_give_identical_traces() {
        let app = app();
        let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let run = || {
            let mut oracle =
                SyntheticOracle::new(WeightVector::new(truth()).unwrap(), 0.05, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            run_query_loop(&app, spec, 2, &prior, &mut oracle, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
