//! Answers to "how good is reduction r?": recorded surveys, a known linear
//! ground truth, or a live person.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ard::{ModelError, WeightVector};
use crate::domain::{
    aggregate_views, normalize_score, DomainError, RawRating, Reduction, SurveyRecord, UserScore,
    ViewAggregation,
};

/// Default time a live session waits for a rating.
pub const DEFAULT_INTERACTIVE_TIMEOUT: Duration = Duration::from_secs(15 * 60);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("no survey records for reduction {0}")]
    NoSurveyData(String),
    #[error("invalid synthetic noise: {0}")]
    InvalidNoise(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("timed out after {0:?} waiting for a rating")]
    Timeout(Duration),
    #[error("session closed")]
    Closed,
    #[error("no query is pending")]
    NothingPending,
    #[error("rating is for {submitted} but {pending} is pending")]
    WrongReduction { pending: String, submitted: String },
    #[error("a rating for {0} was already submitted")]
    AlreadyAnswered(String),
}

/// Source of user-experience scores for the query loop.
pub trait Oracle {
    fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError>;
}

/// Ratings grouped by reduction, then by view.
#[derive(Debug, Clone, Default)]
pub struct SurveyIndex {
    ratings: HashMap<String, BTreeMap<String, Vec<RawRating>>>,
}

impl SurveyIndex {
    pub fn new<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = &'a SurveyRecord>,
    {
        let mut ratings: HashMap<String, BTreeMap<String, Vec<RawRating>>> = HashMap::new();
        for record in records {
            ratings
                .entry(record.reduction_id.clone())
                .or_default()
                .entry(record.view_id.clone())
                .or_default()
                .push(record.rating);
        }
        Self { ratings }
    }

    pub fn covers(&self, reduction_id: &str) -> bool {
        self.ratings.contains_key(reduction_id)
    }

    /// Mean rating per view, normalized, then combined across views.
    pub fn score(
        &self,
        reduction_id: &str,
        aggregation: ViewAggregation,
    ) -> Result<UserScore, OracleError> {
        let views = self
            .ratings
            .get(reduction_id)
            .ok_or_else(|| OracleError::NoSurveyData(reduction_id.to_string()))?;
        let per_view = views
            .values()
            .map(|ratings| {
                let sum: u32 = ratings.iter().map(|r| r.value() as u32).sum();
                normalize_score(sum as f64 / ratings.len() as f64)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(aggregate_views(&per_view, aggregation)?)
    }
}

/// Scores a reduction from recorded surveys.
pub fn replay_query(index: &SurveyIndex, reduction_id: &str) -> Result<UserScore, OracleError> {
    index.score(reduction_id, ViewAggregation::Mean)
}

#[derive(Debug, Clone)]
pub struct ReplayOracle<'a> {
    index: &'a SurveyIndex,
    aggregation: ViewAggregation,
}

impl<'a> ReplayOracle<'a> {
    pub fn new(index: &'a SurveyIndex) -> Self {
        Self {
            index,
            aggregation: ViewAggregation::Mean,
        }
    }

    pub fn with_aggregation(mut self, aggregation: ViewAggregation) -> Self {
        self.aggregation = aggregation;
        self
    }
}

impl Oracle for ReplayOracle<'_> {
    fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError> {
        self.index.score(&reduction.id, self.aggregation)
    }
}

/// `<truth, features> + N(0, noise_sd²)`, clamped into `[0, 1]`.
pub fn synthetic_query<R: Rng + ?Sized>(
    truth: &WeightVector,
    features: &[f64],
    noise_sd: f64,
    rng: &mut R,
) -> Result<UserScore, OracleError> {
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(OracleError::InvalidNoise(noise_sd));
    }
    let mean = truth.dot(features)?;
    if noise_sd == 0.0 {
        return Ok(UserScore::clamped(mean));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|_| OracleError::InvalidNoise(noise_sd))?;
    Ok(UserScore::clamped(mean + noise.sample(rng)))
}

/// Oracle backed by known weights.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    truth: WeightVector,
    noise_sd: f64,
    rng: ChaCha8Rng,
}

impl SyntheticOracle {
    pub fn new(truth: WeightVector, noise_sd: f64, seed: u64) -> Result<Self, OracleError> {
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(OracleError::InvalidNoise(noise_sd));
        }
        Ok(Self {
            truth,
            noise_sd,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn noiseless(truth: WeightVector) -> Self {
        Self {
            truth,
            noise_sd: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Oracle for SyntheticOracle {
    fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError> {
        synthetic_query(
            &self.truth,
            reduction.features.as_slice(),
            self.noise_sd,
            &mut self.rng,
        )
    }
}

/// A query waiting for a person to answer.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingQuery {
    pub reduction: Reduction,
    /// Zero-based position of this query within the session.
    pub step: usize,
}

#[derive(Debug, Default)]
struct ChannelState {
    pending: Option<PendingQuery>,
    answer: Option<RawRating>,
    closed: bool,
    asked: usize,
}

/// Rendezvous between a blocked query loop and whoever supplies ratings.
///
/// At most one query is pending at a time. The loop side calls [`ask`]; the
/// answering side reads [`pending`] and calls [`submit`] from any thread.
///
/// [`ask`]: RatingChannel::ask
/// [`pending`]: RatingChannel::pending
/// [`submit`]: RatingChannel::submit
#[derive(Debug, Default)]
pub struct RatingChannel {
    state: Mutex<ChannelState>,
    changed: Condvar,
}

impl RatingChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> Option<PendingQuery> {
        let state = self.state.lock().expect("rating channel poisoned");
        match (&state.pending, state.answer) {
            (Some(p), None) => Some(p.clone()),
            _ => None,
        }
    }

    /// Hands a rating to the waiting loop. Out-of-range ratings and ratings
    /// for anything but the pending reduction leave the query pending.
    pub fn submit(&self, reduction_id: &str, rating: i64) -> Result<(), OracleError> {
        let rating = RawRating::new(rating)?;
        let mut state = self.state.lock().expect("rating channel poisoned");
        if state.closed {
            return Err(OracleError::Closed);
        }
        let pending = state.pending.as_ref().ok_or(OracleError::NothingPending)?;
        if pending.reduction.id != reduction_id {
            return Err(OracleError::WrongReduction {
                pending: pending.reduction.id.clone(),
                submitted: reduction_id.to_string(),
            });
        }
        if state.answer.is_some() {
            return Err(OracleError::AlreadyAnswered(reduction_id.to_string()));
        }
        state.answer = Some(rating);
        self.changed.notify_all();
        Ok(())
    }

    /// Wakes any waiter and refuses further queries.
    pub fn close(&self) {
        let mut state = self.state.lock().expect("rating channel poisoned");
        state.closed = true;
        state.pending = None;
        self.changed.notify_all();
    }

    /// Makes `reduction` the pending query and returns its step index.
    pub fn publish(&self, reduction: &Reduction) -> Result<usize, OracleError> {
        let mut state = self.state.lock().expect("rating channel poisoned");
        if state.closed {
            return Err(OracleError::Closed);
        }
        let step = state.asked;
        state.pending = Some(PendingQuery {
            reduction: reduction.clone(),
            step,
        });
        state.answer = None;
        state.asked += 1;
        self.changed.notify_all();
        Ok(step)
    }

    /// Blocks until the published query is rated, the channel is closed, or
    /// `timeout` passes. Timing out closes the channel.
    pub fn wait_answer(&self, timeout: Duration) -> Result<RawRating, OracleError> {
        let deadline = Instant::now() + timeout;
        let mut state = self.state.lock().expect("rating channel poisoned");
        if state.pending.is_none() && !state.closed {
            return Err(OracleError::NothingPending);
        }
        loop {
            if state.closed {
                return Err(OracleError::Closed);
            }
            if let Some(rating) = state.answer.take() {
                state.pending = None;
                return Ok(rating);
            }
            let now = Instant::now();
            if now >= deadline {
                state.pending = None;
                state.closed = true;
                self.changed.notify_all();
                return Err(OracleError::Timeout(timeout));
            }
            state = self
                .changed
                .wait_timeout(state, deadline - now)
                .expect("rating channel poisoned")
                .0;
        }
    }

    /// [`publish`](Self::publish) then [`wait_answer`](Self::wait_answer).
    pub fn ask(&self, reduction: &Reduction, timeout: Duration) -> Result<RawRating, OracleError> {
        self.publish(reduction)?;
        self.wait_answer(timeout)
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("rating channel poisoned").closed
    }
}

/// Blocks until a person rates `reduction` through `channel`.
pub fn interactive_query(
    channel: &RatingChannel,
    reduction: &Reduction,
    timeout: Duration,
) -> Result<UserScore, OracleError> {
    channel.ask(reduction, timeout).map(RawRating::normalized)
}

/// Oracle that forwards each query to a [`RatingChannel`].
#[derive(Debug, Clone)]
pub struct InteractiveOracle<C> {
    channel: C,
    timeout: Duration,
}

impl<C: AsRef<RatingChannel>> InteractiveOracle<C> {
    pub fn new(channel: C, timeout: Duration) -> Self {
        Self { channel, timeout }
    }
}

impl<C: AsRef<RatingChannel>> Oracle for InteractiveOracle<C> {
    fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError> {
        interactive_query(self.channel.as_ref(), reduction, self.timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{FeatureVector, ReductionKind, ResourceSavings, BIAS_INDEX, FEATURE_DIM};
    use std::sync::Arc;

    fn survey(reduction: &str, view: &str, ratings: &[i64]) -> Vec<SurveyRecord> {
        ratings
            .iter()
            .enumerate()
            .map(|(i, r)| SurveyRecord {
                reduction_id: reduction.into(),
                view_id: view.into(),
                user_id: format!("u{i}"),
                rating: RawRating::new(*r).unwrap(),
            })
            .collect()
    }

    fn reduction(id: &str) -> Reduction {
        Reduction {
            id: id.into(),
            app_id: "app".into(),
            kind: ReductionKind::Res100,
            views: vec!["main".into()],
            features: FeatureVector::bias_only(),
            savings: ResourceSavings::NONE,
            asset_refs: vec![],
        }
    }

    #[test]
    fn replay_averages_users_then_normalizes() {
        let records = survey("hq", "main", &[7, 8, 7, 8, 7, 8, 7, 8, 7, 7]);
        let index = SurveyIndex::new(&records);
        let score = replay_query(&index, "hq").unwrap().value();
        assert!((score - 0.8).abs() < 1e-12, "{score}");
    }

    #[test]
    fn replay_single_rating_and_missing_records() {
        let records = survey("top", "main", &[9]);
        let index = SurveyIndex::new(&records);
        assert_eq!(replay_query(&index, "top").unwrap().value(), 1.0);
        assert_eq!(
            replay_query(&index, "other").unwrap_err(),
            OracleError::NoSurveyData("other".into())
        );
    }

    #[test]
    fn replay_aggregates_views() {
        let mut records = survey("r", "a", &[5, 5]);
        records.extend(survey("r", "b", &[9]));
        let index = SurveyIndex::new(&records);
        assert_eq!(index.score("r", ViewAggregation::Mean).unwrap().value(), 0.75);
        assert_eq!(index.score("r", ViewAggregation::SumClamped).unwrap().value(), 1.0);
    }

    #[test]
    fn synthetic_noiseless_equals_prediction() {
        let mut w = vec![0.0; FEATURE_DIM];
        w[BIAS_INDEX] = 0.35;
        let truth = WeightVector::new(w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FeatureVector::bias_only();
        let score = synthetic_query(&truth, f.as_slice(), 0.0, &mut rng).unwrap();
        assert_eq!(score.value(), 0.35);
        assert!(synthetic_query(&truth, f.as_slice(), -1.0, &mut rng).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_unbiased() {
        let truth = WeightVector::new(vec![0.5]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            synthetic_query(&truth, &[1.0], 0.1, &mut rng).unwrap()
        };
        assert_eq!(draw(9), draw(9));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| synthetic_query(&truth, &[1.0], 0.1, &mut rng).unwrap().value())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn interactive_round_trip() {
        let channel = Arc::new(RatingChannel::new());
        let asker = {
            let channel = Arc::clone(&channel);
            std::thread::spawn(move || {
                let mut oracle = InteractiveOracle::new(channel, Duration::from_secs(5));
                oracle.query(&reduction("r1"))
            })
        };
        let pending = loop {
            if let Some(p) = channel.pending() {
                break p;
            }
            std::thread::yield_now();
        };
        assert_eq!(pending.reduction.id, "r1");
        assert!(matches!(
            channel.submit("r1", 12),
            Err(OracleError::Domain(DomainError::InvalidRating(12)))
        ));
        assert!(matches!(
            channel.submit("r2", 4),
            Err(OracleError::WrongReduction { .. })
        ));
        assert_eq!(channel.pending().unwrap().reduction.id, "r1");
        channel.submit("r1", 4).unwrap();
        let score = asker.join().unwrap().unwrap();
        assert_eq!(score.value(), 0.375);
        assert!(channel.pending().is_none());
        assert_eq!(channel.submit("r1", 4).unwrap_err(), OracleError::NothingPending);
    }

    #[test]
    fn interactive_timeout_closes_channel() {
        let channel = RatingChannel::new();
        let err = interactive_query(&channel, &reduction("r"), Duration::from_millis(20)).unwrap_err();
        assert!(matches!(err, OracleError::Timeout(_)));
        assert_eq!(channel.submit("r", 5).unwrap_err(), OracleError::Closed);
    }
}
