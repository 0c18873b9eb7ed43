//! Synthetic apps, surveys and regression problems with known ground truth.
//!
//! Scores follow a linear model in the reduction features with per-app
//! deviations, so a prior fitted on other apps is informative but not exact.
//! Savings are anti-correlated across resources: image reductions save
//! network and memory, transition removal saves CPU.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::ard::WeightVector;
use crate::dataset::DatasetFile;
use crate::domain::{
    feature, App, FeatureVector, RawRating, Reduction, ReductionKind, ResourceSavings,
    SurveyRecord, UserScore, ACTIVITY_METRICS, FEATURE_DIM, REDUCTION_METRICS,
};

/// Relative frequency of each kind, in [`ReductionKind::ALL`] order.
pub const KIND_WEIGHTS: [u32; 8] = [36, 5, 9, 13, 15, 15, 18, 28];

/// Label stored in generated datasets.
pub const SYNTHETIC_LABEL: &str = "synthetic";

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub apps: usize,
    pub min_reductions: usize,
    pub max_reductions: usize,
    pub min_views: usize,
    pub max_views: usize,
    pub raters: usize,
    /// Per-rater noise on the 1..9 scale.
    pub rater_sd: f64,
    /// Spread of per-app deviations from the population weights.
    pub app_sd: f64,
    /// Per-reduction noise not explained by the features.
    pub residual_sd: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            apps: 20,
            min_reductions: 5,
            max_reductions: 12,
            min_views: 2,
            max_views: 4,
            raters: 10,
            rater_sd: 0.6,
            app_sd: 0.25,
            residual_sd: 0.03,
            seed: 0,
        }
    }
}

/// Population-level score weights.
pub fn population_weights() -> WeightVector {
    let mut w = vec![0.0; FEATURE_DIM];
    w[feature::RESOLUTION_STEPS] = -0.70;
    w[feature::IMAGE_REMOVED] = 0.16;
    w[feature::TRANSITION_REMOVED] = -0.28;
    w[feature::SCREEN_AREA_AFFECTED] = -0.15;
    w[feature::TEXT_BLOCKS] = 0.12;
    w[feature::BIAS] = 0.86;
    WeightVector::new(w).expect("finite weights")
}

/// Coordinates that vary from app to app, with relative spread.
const APP_DEVIATIONS: [(usize, f64); 4] = [
    (feature::BIAS, 0.8),
    (feature::RESOLUTION_STEPS, 1.2),
    (feature::IMAGE_REMOVED, 1.0),
    (feature::TRANSITION_REMOVED, 1.0),
];

fn resolution_steps(kind: ReductionKind) -> f64 {
    match kind.target_resolution() {
        Some(t) => (400.0 / t as f64).log2() / 20f64.log2(),
        None if kind == ReductionKind::TransitionRemoval => 0.0,
        None => 1.0,
    }
}

fn touches_images(kind: ReductionKind) -> bool {
    kind != ReductionKind::TransitionRemoval
}

fn touches_transitions(kind: ReductionKind) -> bool {
    matches!(
        kind,
        ReductionKind::TransitionRemoval | ReductionKind::ImageAndTransition
    )
}

fn removes_images(kind: ReductionKind) -> bool {
    matches!(
        kind,
        ReductionKind::ImageRemoval | ReductionKind::ImageAndTransition
    )
}

struct Draft {
    kind: ReductionKind,
    views: Vec<usize>,
    features: FeatureVector,
    savings: ResourceSavings,
}

fn draft_reduction<R: Rng + ?Sized>(
    kind: ReductionKind,
    view_metrics: &[[f64; ACTIVITY_METRICS]],
    rng: &mut R,
) -> Draft {
    let mut views: Vec<usize> = (0..view_metrics.len()).collect();
    views.shuffle(rng);
    views.truncate(rng.random_range(1..=view_metrics.len().min(3)));
    views.sort_unstable();

    let mut activity = [0.0; ACTIVITY_METRICS];
    for &v in &views {
        for (a, m) in activity.iter_mut().zip(view_metrics[v]) {
            *a += m / views.len() as f64;
        }
    }

    let steps = resolution_steps(kind);
    let images = if touches_images(kind) {
        rng.random_range(0.3..1.0)
    } else {
        0.0
    };
    let retained = match kind.target_resolution() {
        Some(t) => t as f64 / 400.0,
        None if touches_images(kind) => 0.0,
        None => 1.0,
    };
    let transition = touches_transitions(kind);
    let area = if touches_images(kind) {
        rng.random_range(0.1..0.7)
    } else {
        rng.random_range(0.05..0.3)
    };

    let mut cpu: f64 = rng.random_range(0.0..0.03);
    let mut mem: f64 = 0.0;
    let mut net: f64 = 0.0;
    if touches_images(kind) {
        net += images * (0.55 + 0.42 * steps);
        mem += images * (0.10 + 0.35 * steps);
    }
    if transition {
        cpu += rng.random_range(0.15..0.45);
        mem += rng.random_range(0.0..0.15);
    }
    let savings =
        ResourceSavings::new(cpu.min(1.0), mem.min(1.0), net.min(1.0)).expect("savings in range");

    let mut reduction = [0.0; REDUCTION_METRICS];
    reduction[feature::RESOLUTION_RETAINED] = retained;
    reduction[feature::PIXELS_REMOVED] = images * (1.0 - retained * retained);
    reduction[feature::IMAGES_AFFECTED] = images;
    reduction[feature::IMAGE_REMOVED] = if removes_images(kind) { 1.0 } else { 0.0 };
    reduction[feature::TRANSITION_REMOVED] = if transition { 1.0 } else { 0.0 };
    reduction[feature::SCREEN_AREA_AFFECTED] = area;
    reduction[feature::VIEWS_MODIFIED] = views.len() as f64 / 4.0;
    reduction[feature::BYTES_SAVED] = net;
    reduction[feature::ANIMATION_SECONDS_REMOVED] = if transition {
        rng.random_range(0.3..1.5)
    } else {
        0.0
    };
    reduction[feature::RESOLUTION_STEPS] = steps;

    Draft {
        kind,
        views,
        features: FeatureVector::new(reduction, activity).expect("finite features"),
        savings,
    }
}

fn app_weights<R: Rng + ?Sized>(app_sd: f64, rng: &mut R) -> WeightVector {
    let mut w = population_weights().as_slice().to_vec();
    if app_sd > 0.0 {
        let normal = Normal::new(0.0, app_sd).expect("positive sd");
        for (index, spread) in APP_DEVIATIONS {
            w[index] += spread * normal.sample(rng);
        }
    }
    WeightVector::new(w).expect("finite weights")
}

fn pick_kinds<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<ReductionKind> {
    let dist = WeightedIndex::new(KIND_WEIGHTS).expect("positive weights");
    let mut kinds: Vec<ReductionKind> = (0..count)
        .map(|_| ReductionKind::ALL[dist.sample(rng)])
        .collect();
    if !kinds.iter().any(|k| k.target_resolution().is_some() || *k == ReductionKind::ImageRemoval)
    {
        kinds[0] = ReductionKind::ALL[rng.random_range(0..6)];
    }
    if !kinds.contains(&ReductionKind::TransitionRemoval) {
        let slot = if kinds.len() > 1 { 1 } else { 0 };
        kinds[slot] = ReductionKind::TransitionRemoval;
    }
    kinds
}

/// A generated app along with the true score of each reduction.
#[derive(Debug, Clone)]
pub struct SyntheticApp {
    pub app: App,
    pub weights: WeightVector,
    pub true_scores: Vec<UserScore>,
}

fn generate_app<R: Rng + ?Sized>(index: usize, config: &CorpusConfig, rng: &mut R) -> SyntheticApp {
    let app_id = format!("app{index:02}");
    let view_count = rng.random_range(config.min_views..=config.max_views);
    let view_metrics: Vec<[f64; ACTIVITY_METRICS]> = (0..view_count)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    let count = rng.random_range(config.min_reductions..=config.max_reductions);
    let weights = app_weights(config.app_sd, rng);
    let residual = Normal::new(0.0, config.residual_sd.max(f64::MIN_POSITIVE)).expect("sd");

    let mut reductions = Vec::with_capacity(count);
    let mut true_scores = Vec::with_capacity(count);
    for (k, kind) in pick_kinds(count, rng).into_iter().enumerate() {
        let draft = draft_reduction(kind, &view_metrics, rng);
        let mean = weights.dot(draft.features.as_slice()).expect("dimension");
        let noise = if config.residual_sd > 0.0 {
            residual.sample(rng)
        } else {
            0.0
        };
        true_scores.push(UserScore::clamped(mean + noise));
        reductions.push(Reduction {
            id: format!("{app_id}/r{k:02}"),
            app_id: app_id.clone(),
            kind: draft.kind,
            views: draft.views.iter().map(|v| format!("view{v}")).collect(),
            features: draft.features,
            savings: draft.savings,
            asset_refs: Vec::new(),
        });
    }
    SyntheticApp {
        app: App {
            id: app_id,
            category: SYNTHETIC_LABEL.to_string(),
            reductions,
            original_savings: ResourceSavings::NONE,
        },
        weights,
        true_scores,
    }
}

fn survey_app<R: Rng + ?Sized>(
    synthetic: &SyntheticApp,
    config: &CorpusConfig,
    rng: &mut R,
) -> Vec<SurveyRecord> {
    let rater = Normal::new(0.0, config.rater_sd.max(f64::MIN_POSITIVE)).expect("sd");
    let mut records = Vec::new();
    for (reduction, truth) in synthetic.app.reductions.iter().zip(&synthetic.true_scores) {
        for view in &reduction.views {
            for user in 0..config.raters {
                let noise = if config.rater_sd > 0.0 {
                    rater.sample(rng)
                } else {
                    0.0
                };
                let raw = (1.0 + 8.0 * truth.value() + noise).round().clamp(1.0, 9.0) as i64;
                records.push(SurveyRecord {
                    reduction_id: reduction.id.clone(),
                    view_id: view.clone(),
                    user_id: format!("user{user:02}"),
                    rating: RawRating::new(raw).expect("clamped rating"),
                });
            }
        }
    }
    records
}

/// Generated apps with their hidden truth, plus the survey a replay oracle sees.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub apps: Vec<SyntheticApp>,
    pub dataset: DatasetFile,
}

pub fn generate_corpus(config: &CorpusConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let apps: Vec<SyntheticApp> = (0..config.apps)
        .map(|i| generate_app(i, config, &mut rng))
        .collect();
    let surveys = apps
        .iter()
        .flat_map(|a| survey_app(a, config, &mut rng))
        .collect();
    let mut dataset = DatasetFile::new(apps.iter().map(|a| a.app.clone()).collect(), surveys)
        .expect("generated dataset is consistent");
    dataset.description = Some(format!(
        "{SYNTHETIC_LABEL} corpus: {} apps, seed {}, linear ground truth with per-app deviations",
        config.apps, config.seed
    ));
    SyntheticCorpus { apps, dataset }
}

/// A single app with `2..=max_reductions` reductions whose scores are exactly
/// linear in the features under the returned weights.
pub fn random_instance<R: Rng + ?Sized>(
    max_reductions: usize,
    rng: &mut R,
) -> (App, WeightVector) {
    let config = CorpusConfig {
        min_reductions: 2.min(max_reductions),
        max_reductions,
        app_sd: 0.15,
        residual_sd: 0.0,
        ..CorpusConfig::default()
    };
    let synthetic = generate_app(0, &config, rng);
    (synthetic.app, synthetic.weights)
}

/// Standard normal design with an intercept in the last column and
/// `y = X w + noise`, where `w` is zero outside `active`.
pub fn sparse_regression<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    active: &[(usize, f64)],
    noise_sd: f64,
    rng: &mut R,
) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x = DMatrix::from_fn(n, dim, |_, j| {
        if j + 1 == dim {
            1.0
        } else {
            normal.sample(rng)
        }
    });
    let mut w = vec![0.0; dim];
    for &(j, value) in active {
        w[j] = value;
    }
    let clean = &x * DVector::from_column_slice(&w);
    let y = DVector::from_fn(n, |i, _| clean[i] + noise_sd * normal.sample(rng));
    (x, y, w)
}
