//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Reference values are computed here independently of the library.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redopt_core::harness::{accuracy_sweep, is_non_decreasing, summarize, PriorMode};
use redopt_core::synth::{generate_corpus, random_instance, sparse_regression, CorpusConfig};
use redopt_core::{
    fit_ard, load_dataset, objective, posterior_extend, posterior_update, run_query_loop,
    ArdConfig, Budget, ExperimentConfig, PriorParams, ReplayOracle, ResultRow, Specification,
    SyntheticOracle, ViewAggregation, FEATURE_DIM,
};

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

/// Ten seeded corpora of twenty apps: 200 held-out instances.
const CORPORA: u64 = 10;

fn corpora() -> Vec<redopt_core::DatasetFile> {
    (0..CORPORA)
        .map(|seed| {
            generate_corpus(&CorpusConfig {
                seed,
                ..CorpusConfig::default()
            })
            .dataset
        })
        .collect()
}

fn sweep(
    sets: &[redopt_core::DatasetFile],
    base: &ExperimentConfig,
) -> Vec<ResultRow> {
    sets.iter()
        .enumerate()
        .flat_map(|(seed, dataset)| {
            let config = ExperimentConfig {
                seed: seed as u64,
                ..base.clone()
            };
            redopt_core::leave_one_out_eval(dataset, &config).expect("evaluation runs")
        })
        .collect()
}

fn mean_rho(rows: &[ResultRow], budget: Budget) -> f64 {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| r.budget == budget)
        .filter_map(|r| r.rho)
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn spec(lambda: f64, cpu: f64, mem: f64, net: f64) -> Specification {
    Specification::from_parts(lambda, cpu, mem, net).unwrap()
}

/// Hand objective for the table1 fixture straight from the JSON.
fn table1() -> Verdict {
    let path = workspace().join("fixtures/table1.json");
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let mut ratings: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in raw["surveys"].as_array().unwrap() {
        ratings
            .entry(s["reduction_id"].as_str().unwrap().to_string())
            .or_default()
            .push(s["rating"].as_f64().unwrap());
    }
    let (lambda, a_mem, a_net) = (0.5, 0.5, 0.5);
    let mut hand = BTreeMap::new();
    for r in raw["apps"][0]["reductions"].as_array().unwrap() {
        let id = r["id"].as_str().unwrap();
        let list = &ratings[id];
        let u = (list.iter().sum::<f64>() / list.len() as f64 - 1.0) / 8.0;
        let w = &r["savings_percent"];
        let j = u + lambda * (a_mem * w["mem"].as_f64().unwrap() + a_net * w["net"].as_f64().unwrap()) / 100.0;
        hand.insert(id.to_string(), j);
    }
    let expected = [
        ("high-quality", 1.00075),
        ("medium-quality", 0.738),
        ("low-quality", 0.38975),
        ("image-removal", 0.57975),
    ];

    let dataset = load_dataset(&path).unwrap();
    let index = dataset.survey_index();
    let app = &dataset.apps[0];
    let s = spec(lambda, 0.0, a_mem, a_net);
    let mut worst: f64 = 0.0;
    for (id, want) in expected {
        let r = app.reduction(id).unwrap();
        let lib = objective(index.score(id, ViewAggregation::Mean).unwrap(), &r.savings, &s);
        worst = worst.max((lib - want).abs()).max((hand[id] - want).abs());
    }
    let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
    let mut oracle = ReplayOracle::new(&index);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = run_query_loop(app, s, 4, &prior, &mut oracle, &mut rng).unwrap();
    let chosen = trace.recommendation.unwrap_or_default();
    verdict(
        worst < 1e-9 && chosen == "high-quality",
        format!("max |J - expected| = {worst:.1e}, argmax {chosen}"),
    )
}

fn offline_equivalence() -> Verdict {
    let mut hits = 0;
    let total = 500;
    for seed in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (app, truth) = random_instance(15, &mut rng);
        let lambda = rng.random_range(0.0..4.0);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (a, b) = (a.min(b), a.max(b));
        let s = spec(lambda, a, b - a, 1.0 - b);
        let prior = PriorParams::flat(FEATURE_DIM, 0.1, 20.0).unwrap();
        let mut oracle = SyntheticOracle::noiseless(truth.clone());
        let trace = run_query_loop(&app, s, app.reductions.len(), &prior, &mut oracle, &mut rng).unwrap();

        // Brute force: ties resolve to the smaller id.
        let mut best: Option<(f64, &str)> = None;
        for r in &app.reductions {
            let x = r.features.as_slice();
            let u: f64 = truth.as_slice().iter().zip(x).map(|(w, x)| w * x).sum::<f64>().clamp(0.0, 1.0);
            let w = &r.savings;
            let j = u + lambda * (a * w.cpu() + (b - a) * w.mem() + (1.0 - b) * w.net());
            best = match best {
                Some((bj, bid)) if bj > j || (bj == j && bid < r.id.as_str()) => Some((bj, bid)),
                _ => Some((j, r.id.as_str())),
            };
        }
        if trace.recommendation.as_deref() == best.map(|b| b.1) {
            hits += 1;
        }
    }
    verdict(hits == total, format!("{hits}/{total} match brute force"))
}

fn posterior_closed_form() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = FEATURE_DIM;
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stdev: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..2.0)).collect();
        let noise = rng.random_range(0.05..0.5);
        let scale = rng.random_range(1.0..30.0);
        let prior = PriorParams::new(mean.clone(), stdev.clone(), noise, scale).unwrap();
        let n = rng.random_range(1..20);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let data: Vec<(&[f64], f64)> = xs.iter().map(|x| x.as_slice()).zip(ys.iter().copied()).collect();

        let s0 = DMatrix::from_fn(d, d, |i, j| if i == j { scale * stdev[i] * stdev[i] } else { 0.0 });
        let s0_inv = s0.try_inverse().unwrap();
        let phi = DMatrix::from_fn(n, d, |i, j| xs[i][j]);
        let y = DVector::from_column_slice(&ys);
        let beta = 1.0 / (noise * noise);
        let cov = (&s0_inv + phi.transpose() * &phi * beta).try_inverse().unwrap();
        let mu = &cov * (&s0_inv * DVector::from_column_slice(&mean) + phi.transpose() * &y * beta);

        let batch = posterior_update(&prior, &data).unwrap();
        let split = n / 2;
        let first = posterior_update(&prior, &data[..split]).unwrap();
        let seq = posterior_extend(&first, noise, &data[split..]).unwrap();
        worst = worst
            .max((batch.mean() - &mu).amax())
            .max((batch.covariance() - &cov).amax())
            .max((seq.mean() - batch.mean()).amax())
            .max((seq.covariance() - batch.covariance()).amax());
    }
    verdict(worst < 1e-8, format!("max elementwise error {worst:.1e} over 100 instances"))
}

fn ard_recovery() -> Verdict {
    let active = [(0usize, 0.6), (6, -0.4), (FEATURE_DIM - 1, 0.5)];
    let config = ArdConfig {
        intercept: Some(FEATURE_DIM - 1),
        ..ArdConfig::default()
    };
    let mut worst_err: f64 = 0.0;
    let mut worst_ratio = f64::INFINITY;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, truth) = sparse_regression(200, FEATURE_DIM, &active, 0.05, &mut rng);
        let fit = fit_ard(&x, &y, &config).unwrap();
        let (mut min_active, mut max_inactive) = (f64::INFINITY, 0.0_f64);
        for j in 0..FEATURE_DIM {
            if active.iter().any(|&(k, _)| k == j) {
                worst_err = worst_err.max((fit.mean[j] - truth[j]).abs());
                min_active = min_active.min(fit.stdev[j]);
            } else {
                max_inactive = max_inactive.max(fit.stdev[j]);
            }
        }
        worst_ratio = worst_ratio.min(min_active / max_inactive);
    }
    verdict(
        worst_err <= 0.1 && worst_ratio >= 5.0,
        format!("max |mu - truth| {worst_err:.4}, min sigma ratio {worst_ratio:.1} over 10 seeds"),
    )
}

fn budget_monotonicity(sets: &[redopt_core::DatasetFile]) -> Verdict {
    let rows = sweep(
        sets,
        &ExperimentConfig {
            specs: vec![spec(1.0, 0.0, 0.0, 1.0)],
            budgets: vec![Budget::Queries(0), Budget::Queries(2), Budget::Queries(4), Budget::All],
            runs: 1,
            ..ExperimentConfig::default()
        },
    );
    let (r0, r2, r4, rall) = (
        mean_rho(&rows, Budget::Queries(0)),
        mean_rho(&rows, Budget::Queries(2)),
        mean_rho(&rows, Budget::Queries(4)),
        mean_rho(&rows, Budget::All),
    );
    let n = rows.iter().filter(|r| r.budget == Budget::All).count();
    verdict(
        r2 >= r0 - 0.01 && r4 >= 0.85 && rall == 1.0,
        format!("{n} instances: rho(0)={r0:.3} rho(2)={r2:.3} rho(4)={r4:.3} rho(all)={rall}"),
    )
}

fn prior_value(sets: &[redopt_core::DatasetFile]) -> Verdict {
    let base = ExperimentConfig {
        specs: vec![spec(1.0, 0.0, 0.0, 1.0)],
        budgets: vec![Budget::Queries(0)],
        runs: 1,
        ..ExperimentConfig::default()
    };
    let fitted = mean_rho(&sweep(sets, &base), Budget::Queries(0));
    let flat = mean_rho(
        &sweep(
            sets,
            &ExperimentConfig {
                prior: PriorMode::Flat { noise_sd: 0.1 },
                ..base
            },
        ),
        Budget::Queries(0),
    );
    verdict(
        fitted - flat >= 0.1,
        format!("rho(0) fitted {fitted:.3} vs flat {flat:.3}"),
    )
}

fn spec_sensitivity(sets: &[redopt_core::DatasetFile]) -> Verdict {
    let cpu = spec(3.0, 1.0, 0.0, 0.0);
    let net = spec(3.0, 0.0, 0.0, 1.0);
    let b4 = Budget::Queries(4);
    let base = ExperimentConfig {
        budgets: vec![b4],
        runs: 1,
        ..ExperimentConfig::default()
    };
    let crossed = mean_rho(
        &sweep(
            sets,
            &ExperimentConfig {
                specs: vec![cpu],
                evaluate_under: Some(net),
                ..base.clone()
            },
        ),
        b4,
    );
    let matched = mean_rho(
        &sweep(
            sets,
            &ExperimentConfig {
                specs: vec![net],
                ..base
            },
        ),
        b4,
    );
    verdict(
        crossed < 0.5 && matched >= 0.85,
        format!("CPU picks under network: {crossed:.3}; network picks: {matched:.3}"),
    )
}

fn accuracy(sets: &[redopt_core::DatasetFile]) -> Verdict {
    let third = 1.0 / 3.0;
    let config = ExperimentConfig {
        specs: vec![spec(1.0, third, third, third)],
        budgets: (0..=6).map(Budget::Queries).chain([Budget::All]).collect(),
        runs: 1,
        ..ExperimentConfig::default()
    };
    let mut rows = Vec::new();
    for (seed, dataset) in sets.iter().enumerate() {
        let config = ExperimentConfig {
            seed: seed as u64,
            ..config.clone()
        };
        rows.extend(accuracy_sweep(dataset, &config).unwrap());
    }
    let all_exact = rows
        .iter()
        .filter(|r| r.budget == Budget::All)
        .all(|r| r.accuracy == 1.0);
    let curve = summarize(rows.iter().map(|r| (r.budget, r.accuracy)));
    let shape: Vec<String> = curve.iter().map(|p| format!("{}={:.3}", p.budget, p.mean)).collect();
    verdict(
        all_exact && is_non_decreasing(&curve, 0.02),
        format!("{} instances: {}", rows.len() / curve.len(), shape.join(" ")),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"specs": [{"lambda": 1, "alpha": {"cpu": 0, "mem": 0, "net": 1}},
                      {"lambda": 3, "alpha": {"cpu": 1, "mem": 0, "net": 0}}],
            "budgets": [0, 2, "all"], "runs": 2, "seed": 11}"#,
    )
    .unwrap();
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_redopt"))
            .args(["evaluate", "--dataset"])
            .arg(workspace().join("fixtures/synthetic20.json"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    match (run("a.csv"), run("b.csv")) {
        (Ok(a), Ok(b)) => verdict(
            a == b && !a.is_empty(),
            format!("{} bytes, identical: {}", a.len(), a == b),
        ),
        (Err(e), _) | (_, Err(e)) => verdict(false, format!("evaluate failed: {e}")),
    }
}

fn main() {
    let sets = corpora();
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("table1_objectives_and_argmax", Duration::from_secs(1), Box::new(table1)),
        ("offline_variant_matches_brute_force", Duration::from_secs(30), Box::new(offline_equivalence)),
        ("posterior_closed_form_and_sequential", Duration::from_secs(10), Box::new(posterior_closed_form)),
        ("ard_recovers_sparse_truth", Duration::from_secs(30), Box::new(ard_recovery)),
        ("budget_monotonicity", Duration::from_secs(300), Box::new(|| budget_monotonicity(&sets))),
        ("fitted_prior_beats_flat_at_zero_queries", Duration::from_secs(120), Box::new(|| prior_value(&sets))),
        ("specification_sensitivity", Duration::from_secs(120), Box::new(|| spec_sensitivity(&sets))),
        ("binarized_accuracy_curve", Duration::from_secs(120), Box::new(|| accuracy(&sets))),
        ("evaluate_is_byte_deterministic", Duration::from_secs(300), Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, limit, check) in &criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let ok = v.ok && elapsed <= *limit;
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name}: {} ({:.2}s, limit {}s)",
            if ok { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
