//! Core vocabulary: specifications, savings, user-experience scores, feature
//! vectors, reductions and apps, plus the resource-aware objective.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the simplex constraint for specification weights.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Denominators smaller than this make the normalized objective undefined.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// Number of per-reduction metrics in a feature vector.
pub const REDUCTION_METRICS: usize = 10;
/// Number of per-activity metrics in a feature vector.
pub const ACTIVITY_METRICS: usize = 5;
/// Full feature dimension: reduction metrics, activity metrics and a bias term.
pub const FEATURE_DIM: usize = REDUCTION_METRICS + ACTIVITY_METRICS + 1;
/// Position of the constant bias term.
pub const BIAS_INDEX: usize = FEATURE_DIM - 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("{what} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("resource weights must sum to 1 (got {sum})")]
    OffSimplex { sum: f64 },
    #[error("rating {0} is outside 1..=9")]
    InvalidRating(i64),
    #[error("no candidates to choose from")]
    EmptyCandidates,
    #[error("no per-view scores to aggregate")]
    EmptyViews,
    #[error("reduction {0} modifies no views")]
    NoViews(String),
    #[error("duplicate reduction id {0}")]
    DuplicateReduction(String),
    #[error("optimal and original objective coincide; normalized objective is undefined")]
    DegenerateNormalization,
}

fn check_unit(what: &'static str, value: f64) -> Result<f64, DomainError> {
    if !value.is_finite() {
        return Err(DomainError::NonFinite { what, value });
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(DomainError::OutOfRange {
            what,
            value,
            min: 0.0,
            max: 1.0,
        });
    }
    Ok(value)
}

/// The three tracked resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Cpu,
    Mem,
    Net,
}

impl Resource {
    pub const ALL: [Resource; 3] = [Resource::Cpu, Resource::Mem, Resource::Net];
}

/// Relative importance of each resource. Components lie in `[0, 1]` and sum
/// to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct ResourceWeights {
    cpu: f64,
    mem: f64,
    net: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    cpu: f64,
    mem: f64,
    net: f64,
}

impl TryFrom<RawWeights> for ResourceWeights {
    type Error = DomainError;

    fn try_from(raw: RawWeights) -> Result<Self, Self::Error> {
        ResourceWeights::new(raw.cpu, raw.mem, raw.net)
    }
}

impl ResourceWeights {
    pub fn new(cpu: f64, mem: f64, net: f64) -> Result<Self, DomainError> {
        let cpu = check_unit("alpha.cpu", cpu)?;
        let mem = check_unit("alpha.mem", mem)?;
        let net = check_unit("alpha.net", net)?;
        let sum = cpu + mem + net;
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(DomainError::OffSimplex { sum });
        }
        Ok(Self { cpu, mem, net })
    }

    pub fn cpu(&self) -> f64 {
        self.cpu
    }

    pub fn mem(&self) -> f64 {
        self.mem
    }

    pub fn net(&self) -> f64 {
        self.net
    }

    pub fn get(&self, resource: Resource) -> f64 {
        match resource {
            Resource::Cpu => self.cpu,
            Resource::Mem => self.mem,
            Resource::Net => self.net,
        }
    }
}

/// A resource usage specification: `lambda` trades overall savings against
/// user experience and `alpha` splits that weight across resources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpecification")]
pub struct Specification {
    lambda: f64,
    alpha: ResourceWeights,
}

#[derive(Deserialize)]
struct RawSpecification {
    lambda: f64,
    alpha: ResourceWeights,
}

impl TryFrom<RawSpecification> for Specification {
    type Error = DomainError;

    fn try_from(raw: RawSpecification) -> Result<Self, Self::Error> {
        Specification::new(raw.lambda, raw.alpha)
    }
}

impl Specification {
    pub fn new(lambda: f64, alpha: ResourceWeights) -> Result<Self, DomainError> {
        if !lambda.is_finite() {
            return Err(DomainError::NonFinite {
                what: "lambda",
                value: lambda,
            });
        }
        if lambda < 0.0 {
            return Err(DomainError::OutOfRange {
                what: "lambda",
                value: lambda,
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        Ok(Self { lambda, alpha })
    }

    /// Shorthand for `Specification::new(lambda, ResourceWeights::new(..)?)`.
    pub fn from_parts(lambda: f64, cpu: f64, mem: f64, net: f64) -> Result<Self, DomainError> {
        Self::new(lambda, ResourceWeights::new(cpu, mem, net)?)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> &ResourceWeights {
        &self.alpha
    }

    /// `lambda * <alpha, w>`, the savings half of the objective.
    pub fn savings_value(&self, savings: &ResourceSavings) -> f64 {
        self.lambda
            * (self.alpha.cpu * savings.cpu
                + self.alpha.mem * savings.mem
                + self.alpha.net * savings.net)
    }
}

impl fmt::Display for Specification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lambda={} alpha=(cpu={}, mem={}, net={})",
            self.lambda, self.alpha.cpu, self.alpha.mem, self.alpha.net
        )
    }
}

/// Fractional reduction in each resource relative to the original app.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawSavings")]
pub struct ResourceSavings {
    cpu: f64,
    mem: f64,
    net: f64,
}

#[derive(Deserialize)]
struct RawSavings {
    cpu: f64,
    mem: f64,
    net: f64,
}

impl TryFrom<RawSavings> for ResourceSavings {
    type Error = DomainError;

    fn try_from(raw: RawSavings) -> Result<Self, Self::Error> {
        ResourceSavings::new(raw.cpu, raw.mem, raw.net)
    }
}

impl ResourceSavings {
    /// The original app saves nothing.
    pub const NONE: ResourceSavings = ResourceSavings {
        cpu: 0.0,
        mem: 0.0,
        net: 0.0,
    };

    pub fn new(cpu: f64, mem: f64, net: f64) -> Result<Self, DomainError> {
        Ok(Self {
            cpu: check_unit("savings.cpu", cpu)?,
            mem: check_unit("savings.mem", mem)?,
            net: check_unit("savings.net", net)?,
        })
    }

    /// Builds savings from percentages as reported by profilers (`8.3` → `0.083`).
    pub fn from_percent(cpu: f64, mem: f64, net: f64) -> Result<Self, DomainError> {
        Self::new(cpu / 100.0, mem / 100.0, net / 100.0)
    }

    pub fn cpu(&self) -> f64 {
        self.cpu
    }

    pub fn mem(&self) -> f64 {
        self.mem
    }

    pub fn net(&self) -> f64 {
        self.net
    }

    pub fn get(&self, resource: Resource) -> f64 {
        match resource {
            Resource::Cpu => self.cpu,
            Resource::Mem => self.mem,
            Resource::Net => self.net,
        }
    }
}

/// Fraction of the original app's user experience retained, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct UserScore(f64);

impl TryFrom<f64> for UserScore {
    type Error = DomainError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        UserScore::new(value)
    }
}

impl From<UserScore> for f64 {
    fn from(score: UserScore) -> f64 {
        score.0
    }
}

impl UserScore {
    pub const ZERO: UserScore = UserScore(0.0);
    pub const ONE: UserScore = UserScore(1.0);

    pub fn new(value: f64) -> Result<Self, DomainError> {
        check_unit("user score", value).map(UserScore)
    }

    /// Clamps an unbounded model output into `[0, 1]`. NaN maps to zero.
    pub fn clamped(value: f64) -> Self {
        if value.is_nan() {
            return UserScore(0.0);
        }
        UserScore(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A single 1–9 survey answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct RawRating(u8);

impl TryFrom<i64> for RawRating {
    type Error = DomainError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        RawRating::new(value)
    }
}

impl From<RawRating> for u8 {
    fn from(rating: RawRating) -> u8 {
        rating.0
    }
}

impl RawRating {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 9;
    /// Midpoint of the scale, "neutral".
    pub const NEUTRAL: u8 = 5;

    pub fn new(value: i64) -> Result<Self, DomainError> {
        if (Self::MIN as i64..=Self::MAX as i64).contains(&value) {
            Ok(RawRating(value as u8))
        } else {
            Err(DomainError::InvalidRating(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn normalized(self) -> UserScore {
        UserScore((self.0 as f64 - 1.0) / 8.0)
    }
}

/// Maps a rating (or an average of ratings) on the 1–9 scale onto `[0, 1]`.
///
/// 1 ("completely unusable") maps to 0 and 9 ("indistinguishable from the
/// original") maps to 1, affinely in between.
pub fn normalize_score(rating: f64) -> Result<UserScore, DomainError> {
    if !rating.is_finite() {
        return Err(DomainError::NonFinite {
            what: "rating",
            value: rating,
        });
    }
    if !(1.0..=9.0).contains(&rating) {
        return Err(DomainError::OutOfRange {
            what: "rating",
            value: rating,
            min: 1.0,
            max: 9.0,
        });
    }
    // (9 - 1) / 8 is exactly 1, so the top of the scale never overshoots.
    Ok(UserScore((rating - 1.0) / 8.0))
}

/// Named positions in the feature vector.
///
/// The first ten entries describe the reduction itself, the next five describe
/// the activity it modifies and the last one is a constant bias term.
pub mod feature {
    pub const RESOLUTION_RETAINED: usize = 0;
    pub const PIXELS_REMOVED: usize = 1;
    pub const IMAGES_AFFECTED: usize = 2;
    pub const IMAGE_REMOVED: usize = 3;
    pub const TRANSITION_REMOVED: usize = 4;
    pub const SCREEN_AREA_AFFECTED: usize = 5;
    pub const VIEWS_MODIFIED: usize = 6;
    pub const BYTES_SAVED: usize = 7;
    pub const ANIMATION_SECONDS_REMOVED: usize = 8;
    pub const RESOLUTION_STEPS: usize = 9;
    pub const TEXT_BLOCKS: usize = 10;
    pub const MEDIAN_FONT_SIZE: usize = 11;
    pub const IMAGE_COUNT: usize = 12;
    pub const VIEW_TREE_DEPTH: usize = 13;
    pub const INTERACTIVE_WIDGETS: usize = 14;
    pub const BIAS: usize = super::BIAS_INDEX;

    pub const NAMES: [&str; super::FEATURE_DIM] = [
        "resolution_retained",
        "pixels_removed",
        "images_affected",
        "image_removed",
        "transition_removed",
        "screen_area_affected",
        "views_modified",
        "bytes_saved",
        "animation_seconds_removed",
        "resolution_steps",
        "text_blocks",
        "median_font_size",
        "image_count",
        "view_tree_depth",
        "interactive_widgets",
        "bias",
    ];
}

/// Model input for one reduction: ten reduction metrics, five activity
/// metrics and a trailing bias of 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatures", into = "RawFeatures")]
pub struct FeatureVector([f64; FEATURE_DIM]);

#[derive(Serialize, Deserialize)]
struct RawFeatures {
    reduction: [f64; REDUCTION_METRICS],
    activity: [f64; ACTIVITY_METRICS],
}

impl TryFrom<RawFeatures> for FeatureVector {
    type Error = DomainError;

    fn try_from(raw: RawFeatures) -> Result<Self, Self::Error> {
        FeatureVector::new(raw.reduction, raw.activity)
    }
}

impl From<FeatureVector> for RawFeatures {
    fn from(features: FeatureVector) -> Self {
        let mut reduction = [0.0; REDUCTION_METRICS];
        let mut activity = [0.0; ACTIVITY_METRICS];
        reduction.copy_from_slice(&features.0[..REDUCTION_METRICS]);
        activity.copy_from_slice(&features.0[REDUCTION_METRICS..BIAS_INDEX]);
        RawFeatures {
            reduction,
            activity,
        }
    }
}

impl FeatureVector {
    pub fn new(
        reduction: [f64; REDUCTION_METRICS],
        activity: [f64; ACTIVITY_METRICS],
    ) -> Result<Self, DomainError> {
        let mut values = [0.0; FEATURE_DIM];
        values[..REDUCTION_METRICS].copy_from_slice(&reduction);
        values[REDUCTION_METRICS..BIAS_INDEX].copy_from_slice(&activity);
        values[BIAS_INDEX] = 1.0;
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(DomainError::NonFinite {
                what: "feature",
                value: bad,
            });
        }
        Ok(Self(values))
    }

    /// All metrics zero; only the bias is set.
    pub fn bias_only() -> Self {
        let mut values = [0.0; FEATURE_DIM];
        values[BIAS_INDEX] = 1.0;
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }
}

/// Reduction taxonomy: image removal, five target resolutions, transition
/// removal and the combined image-and-transition reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionKind {
    ImageRemoval,
    Res400,
    Res200,
    Res100,
    Res50,
    Res20,
    TransitionRemoval,
    ImageAndTransition,
}

impl ReductionKind {
    pub const ALL: [ReductionKind; 8] = [
        ReductionKind::ImageRemoval,
        ReductionKind::Res400,
        ReductionKind::Res200,
        ReductionKind::Res100,
        ReductionKind::Res50,
        ReductionKind::Res20,
        ReductionKind::TransitionRemoval,
        ReductionKind::ImageAndTransition,
    ];

    /// Target edge length in pixels for resolution reductions.
    pub fn target_resolution(self) -> Option<u32> {
        match self {
            ReductionKind::Res400 => Some(400),
            ReductionKind::Res200 => Some(200),
            ReductionKind::Res100 => Some(100),
            ReductionKind::Res50 => Some(50),
            ReductionKind::Res20 => Some(20),
            _ => None,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            ReductionKind::ImageRemoval => "images removed",
            ReductionKind::Res400 => "images downscaled to 400x400 px",
            ReductionKind::Res200 => "images downscaled to 200x200 px",
            ReductionKind::Res100 => "images downscaled to 100x100 px",
            ReductionKind::Res50 => "images downscaled to 50x50 px",
            ReductionKind::Res20 => "images downscaled to 20x20 px",
            ReductionKind::TransitionRemoval => "activity transitions removed",
            ReductionKind::ImageAndTransition => "images reduced and transitions removed",
        }
    }
}

impl fmt::Display for ReductionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.describe())
    }
}

/// A candidate variant of an app.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub id: String,
    pub app_id: String,
    pub kind: ReductionKind,
    pub views: Vec<String>,
    pub features: FeatureVector,
    pub savings: ResourceSavings,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub asset_refs: Vec<String>,
}

impl Reduction {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.views.is_empty() {
            return Err(DomainError::NoViews(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct App {
    pub id: String,
    pub category: String,
    pub reductions: Vec<Reduction>,
    #[serde(default)]
    pub original_savings: ResourceSavings,
}

impl App {
    pub fn validate(&self) -> Result<(), DomainError> {
        let mut seen = std::collections::HashSet::new();
        for reduction in &self.reductions {
            reduction.validate()?;
            if !seen.insert(reduction.id.as_str()) {
                return Err(DomainError::DuplicateReduction(reduction.id.clone()));
            }
        }
        Ok(())
    }

    pub fn reduction(&self, id: &str) -> Option<&Reduction> {
        self.reductions.iter().find(|r| r.id == id)
    }

    /// Objective of the unmodified app: full user experience, no savings.
    pub fn original_objective(&self, spec: &Specification) -> f64 {
        objective(UserScore::ONE, &self.original_savings, spec)
    }
}

/// One survey answer for one view of one reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub reduction_id: String,
    pub view_id: String,
    pub user_id: String,
    pub rating: RawRating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub app_id: String,
    pub reduction_id: String,
    pub features: FeatureVector,
    pub score: UserScore,
}

/// Scored reductions from previously studied apps, used to fit the prior.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HistoricalDataset {
    pub entries: Vec<HistoryEntry>,
}

impl HistoricalDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Resource-aware user experience `u + lambda * <alpha, w>`.
pub fn objective(score: UserScore, savings: &ResourceSavings, spec: &Specification) -> f64 {
    score.value() + spec.savings_value(savings)
}

/// Picks the highest-objective candidate. Equal objectives go to the
/// lexicographically smallest reduction id.
pub fn argmax_objective<'a>(
    candidates: &[(&'a Reduction, UserScore)],
    spec: &Specification,
) -> Result<&'a Reduction, DomainError> {
    argmax_by_value(
        candidates
            .iter()
            .map(|(r, u)| (*r, objective(*u, &r.savings, spec))),
    )
    .ok_or(DomainError::EmptyCandidates)
}

/// Shared argmax with the id tie-break; returns `None` on empty input.
pub(crate) fn argmax_by_value<'a, I>(values: I) -> Option<&'a Reduction>
where
    I: IntoIterator<Item = (&'a Reduction, f64)>,
{
    let mut best: Option<(&'a Reduction, f64)> = None;
    for (reduction, value) in values {
        best = match best {
            None => Some((reduction, value)),
            Some((current, current_value)) => {
                if value > current_value
                    || (value == current_value && reduction.id < current.id)
                {
                    Some((reduction, value))
                } else {
                    Some((current, current_value))
                }
            }
        };
    }
    best.map(|(r, _)| r)
}

/// `(J(r) - J(a)) / (J(r*) - J(a))`: 0 for the original app, 1 for the
/// optimum, negative for reductions worse than the original.
pub fn normalized_objective(
    value: f64,
    original_value: f64,
    optimal_value: f64,
) -> Result<f64, DomainError> {
    let denominator = optimal_value - original_value;
    if denominator.abs() < DEGENERATE_DENOMINATOR {
        return Err(DomainError::DegenerateNormalization);
    }
    Ok((value - original_value) / denominator)
}

/// How per-view scores combine into a reduction score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewAggregation {
    #[default]
    Mean,
    /// Plain sum, capped at 1.
    SumClamped,
}

pub fn aggregate_views(
    per_view: &[UserScore],
    mode: ViewAggregation,
) -> Result<UserScore, DomainError> {
    if per_view.is_empty() {
        return Err(DomainError::EmptyViews);
    }
    let sum: f64 = per_view.iter().map(|s| s.value()).sum();
    let value = match mode {
        ViewAggregation::Mean => sum / per_view.len() as f64,
        ViewAggregation::SumClamped => sum.min(1.0),
    };
    Ok(UserScore::clamped(value))
}

/// Query budget: a fixed count, or every reduction of the app.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Budget {
    Queries(usize),
    All,
}

impl Budget {
    pub fn resolve(self, reductions: usize) -> usize {
        match self {
            Budget::Queries(n) => n,
            Budget::All => reductions,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Queries(n) => write!(f, "{n}"),
            Budget::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(Budget::All);
        }
        s.parse()
            .map(Budget::Queries)
            .map_err(|_| format!("budget must be a nonnegative integer or \"all\", got {s:?}"))
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Budget::Queries(n) => serializer.serialize_u64(*n as u64),
            Budget::All => serializer.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Count(n) => Ok(Budget::Queries(n as usize)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}
