use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redopt_core::dataset::{load_prior, load_trace, save_dataset, save_prior, save_trace};
use redopt_core::engine::EngineError;
use redopt_core::oracle::{Oracle, OracleError};
use redopt_core::synth::{generate_corpus, random_instance, CorpusConfig};
use redopt_core::{
    argmax_objective, load_dataset, posterior_extend, posterior_update, run_query_loop,
    PriorParams, Reduction, ResourceWeights, Specification, SyntheticOracle, UserScore,
    FEATURE_DIM,
};

fn prior_strategy(dim: usize) -> impl Strategy<Value = PriorParams> {
    (
        prop::collection::vec(-1.0..1.0f64, dim),
        prop::collection::vec(0.05..2.0f64, dim),
        0.05..0.5f64,
        1.0..30.0f64,
    )
        .prop_map(|(m, s, n, scale)| PriorParams::new(m, s, n, scale).unwrap())
}

fn data_strategy(dim: usize, max: usize) -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    prop::collection::vec(
        (prop::collection::vec(-1.0..1.0f64, dim), 0.0..1.0f64),
        0..max,
    )
}

fn as_refs(data: &[(Vec<f64>, f64)]) -> Vec<(&[f64], f64)> {
    data.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
}

/// Closed form with explicit LU inverses.
fn explicit_posterior(prior: &PriorParams, data: &[(Vec<f64>, f64)]) -> (DVector<f64>, DMatrix<f64>) {
    let d = prior.dim();
    let sigma0 = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            prior.scale() * prior.stdev()[i].powi(2)
        } else {
            0.0
        }
    });
    let sigma0_inv = sigma0.try_inverse().unwrap();
    let phi = DMatrix::from_fn(data.len(), d, |i, j| data[i].0[j]);
    let y = DVector::from_iterator(data.len(), data.iter().map(|(_, y)| *y));
    let beta = 1.0 / prior.noise_sd().powi(2);
    let cov = (&sigma0_inv + phi.transpose() * &phi * beta).try_inverse().unwrap();
    let mean = &cov * (sigma0_inv * DVector::from_column_slice(prior.mean()) + phi.transpose() * y * beta);
    (mean, cov)
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_matches_explicit_inverse(
        (prior, data) in (1usize..6).prop_flat_map(|d| (prior_strategy(d), data_strategy(d, 12)))
    ) {
        let post = posterior_update(&prior, &as_refs(&data)).unwrap();
        let (mean, cov) = explicit_posterior(&prior, &data);
        prop_assert!((post.mean() - mean).amax() < 1e-8);
        prop_assert!(max_abs_diff(post.covariance(), &cov) < 1e-8);
    }

    #[test]
    fn sequential_equals_batch(
        (prior, first, second) in (1usize..6).prop_flat_map(|d| (prior_strategy(d), data_strategy(d, 8), data_strategy(d, 8)))
    ) {
        let all: Vec<_> = first.iter().chain(&second).cloned().collect();
        let batch = posterior_update(&prior, &as_refs(&all)).unwrap();
        let mid = posterior_update(&prior, &as_refs(&first)).unwrap();
        let chained = posterior_extend(&mid, prior.noise_sd(), &as_refs(&second)).unwrap();
        prop_assert!((batch.mean() - chained.mean()).amax() < 1e-8);
        prop_assert!(max_abs_diff(batch.covariance(), chained.covariance()) < 1e-8);
    }

    #[test]
    fn covariance_shrinks_in_loewner_order(
        (prior, data, extra) in (1usize..6).prop_flat_map(|d| (
            prior_strategy(d),
            data_strategy(d, 8),
            (prop::collection::vec(-1.0..1.0f64, d), 0.0..1.0f64),
        ))
    ) {
        let before = posterior_update(&prior, &as_refs(&data)).unwrap();
        let mut more = data.clone();
        more.push(extra);
        let after = posterior_update(&prior, &as_refs(&more)).unwrap();
        let diff = before.covariance() - after.covariance();
        let eig = SymmetricEigen::new((&diff + diff.transpose()) * 0.5);
        prop_assert!(eig.eigenvalues.min() >= -1e-10, "{}", eig.eigenvalues.min());
    }

    #[test]
    fn offline_run_recovers_brute_force(seed in any::<u64>(), lambda in 0.0..4.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (app, truth) = random_instance(15, &mut rng);
        let (a, b) = (a.min(b), a.max(b));
        let spec = Specification::new(lambda, ResourceWeights::new(a, b - a, 1.0 - b).unwrap()).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let mut oracle = SyntheticOracle::noiseless(truth.clone());
        let trace = run_query_loop(&app, spec, app.reductions.len(), &prior, &mut oracle, &mut rng).unwrap();

        let scored: Vec<(&Reduction, UserScore)> = app
            .reductions
            .iter()
            .map(|r| (r, UserScore::clamped(truth.dot(r.features.as_slice()).unwrap())))
            .collect();
        let best = argmax_objective(&scored, &spec).unwrap();
        prop_assert_eq!(trace.recommendation.as_deref(), Some(best.id.as_str()));
    }

    #[test]
    fn query_count_and_no_repeats(seed in any::<u64>(), budget in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (app, truth) = random_instance(12, &mut rng);
        let spec = Specification::from_parts(1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let mut oracle = CountingOracle { inner: SyntheticOracle::new(truth, 0.05, seed).unwrap(), seen: Vec::new() };
        let trace = run_query_loop(&app, spec, budget, &prior, &mut oracle, &mut rng).unwrap();
        let expected = budget.min(app.reductions.len());
        prop_assert_eq!(oracle.seen.len(), expected);
        prop_assert_eq!(trace.steps.len(), expected);
        let unique: HashSet<_> = oracle.seen.iter().collect();
        prop_assert_eq!(unique.len(), expected);
        for step in &trace.steps {
            prop_assert!((0.0..=1.0).contains(&step.score.value()));
        }
        prop_assert_eq!(trace.warnings.is_empty(), budget <= app.reductions.len());
    }

    #[test]
    fn traces_are_deterministic(seed in any::<u64>(), budget in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (app, truth) = random_instance(10, &mut rng);
        let spec = Specification::from_parts(2.0, 0.2, 0.3, 0.5).unwrap();
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let run = || {
            let mut oracle = SyntheticOracle::new(truth.clone(), 0.1, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            run_query_loop(&app, spec, budget, &prior, &mut oracle, &mut rng).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn alpha_off_simplex_is_rejected(c in 0.0..1.0f64, m in 0.0..1.0f64, off in 1e-8..0.5f64, up in any::<bool>()) {
        prop_assume!(c + m <= 1.0);
        let n = 1.0 - c - m + if up { off } else { -off };
        prop_assume!(n >= 0.0);
        prop_assert!(ResourceWeights::new(c, m, n).is_err());
    }

    #[test]
    fn prior_round_trips_exactly(prior in prior_strategy(FEATURE_DIM)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        save_prior(&prior, &path).unwrap();
        prop_assert_eq!(load_prior(&path).unwrap(), prior);
    }
}

struct CountingOracle {
    inner: SyntheticOracle,
    seen: Vec<String>,
}

impl Oracle for CountingOracle {
    fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError> {
        self.seen.push(reduction.id.clone());
        self.inner.query(reduction)
    }
}

#[test]
fn dataset_and_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&CorpusConfig {
        apps: 3,
        seed: 9,
        ..CorpusConfig::default()
    });
    let path = dir.path().join("d.json");
    save_dataset(&corpus.dataset, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), corpus.dataset);

    let app = &corpus.dataset.apps[0];
    let index = corpus.dataset.survey_index();
    let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
    let mut oracle = redopt_core::ReplayOracle::new(&index);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = Specification::from_parts(1.0, 0.0, 0.0, 1.0).unwrap();
    let trace = run_query_loop(app, spec, 3, &prior, &mut oracle, &mut rng).unwrap();
    let trace_path = dir.path().join("t.json");
    save_trace(&trace, &trace_path).unwrap();
    assert_eq!(load_trace(&trace_path).unwrap(), trace);
}

#[test]
fn failing_oracle_surfaces_partial_trace() {
    struct Flaky(usize);
    impl Oracle for Flaky {
        fn query(&mut self, _: &Reduction) -> Result<UserScore, OracleError> {
            if self.0 == 0 {
                return Err(OracleError::Closed);
            }
            self.0 -= 1;
            Ok(UserScore::new(0.5).unwrap())
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (app, _) = random_instance(8, &mut rng);
    let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
    let spec = Specification::from_parts(1.0, 0.0, 1.0, 0.0).unwrap();
    let budget = app.reductions.len();
    match run_query_loop(&app, spec, budget, &prior, &mut Flaky(1), &mut rng) {
        Err(EngineError::Oracle { trace, .. }) if budget > 1 => {
            assert_eq!(trace.steps.len(), 1);
        }
        other => assert!(budget <= 1, "{other:?}"),
    }
}
