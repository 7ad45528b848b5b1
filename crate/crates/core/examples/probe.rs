//! Scratch timing and accuracy probe for the acceptance-criteria configs.

use std::time::Instant;

use hetfx_core::forest::{calibration_from_predictions, fit_causal_forest};
use hetfx_core::inference::{blp, clan, BlpWeights};
use hetfx_core::nuisance::center;
use hetfx_core::params::ForestParams;
use hetfx_core::stats;
use hetfx_core::synth::{generate, DgpConfig, OutcomeSpec, PropensitySurface, TauSurface};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    (a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
        .sqrt()
}

fn probe2(outcome: OutcomeSpec, label: &str, num_trees: usize, min_leaf: usize) {
    let config = DgpConfig {
        n_municipalities: 200,
        workers_per_municipality: 100,
        tau: TauSurface::Threshold {
            base: 0.05,
            jump: 0.10,
        },
        propensity: PropensitySurface::Random,
        outcome,
        ..DgpConfig::default()
    };
    let t0 = Instant::now();
    let data = generate(&config, 42).unwrap();
    let nuisance = ForestParams::regression_default();
    let sample = center(&data.frame, &nuisance, 42).unwrap();
    let t1 = Instant::now();
    println!("[c2 {label}] generate+center: {:?}", t1 - t0);
    let causal = ForestParams {
        num_trees,
        min_leaf,
        ..ForestParams::causal_default()
    };
    let forest =
        fit_causal_forest(&data.frame, &sample.y_tilde, &sample.w_tilde, &causal, 46).unwrap();
    let t2 = Instant::now();
    println!("[c2 {label}] causal fit ({num_trees} trees, min_leaf {min_leaf}): {:?}", t2 - t1);
    let est = forest
        .cate_estimates(&data.frame, &sample.y_tilde, &sample.w_tilde)
        .unwrap();
    let t3 = Instant::now();
    println!("[c2 {label}] oob estimates: {:?}", t3 - t2);

    let tau_bar_true = stats::mean(&data.truth.tau);
    let constant = vec![tau_bar_true; data.truth.tau.len()];
    let r_forest = rmse(&est.tau, &data.truth.tau);
    let r_const = rmse(&constant, &data.truth.tau);
    let result = blp(
        &data.frame,
        &est.tau,
        &sample.e_hat,
        &["years_affiliated".to_string()],
        BlpWeights::Balanced,
        false,
    )
    .unwrap();
    let slope = &result.terms[0];
    println!(
        "[c2 {label}] rmse forest {:.5} const {:.5} ratio {:.3}; slope {:.4} t {:.2}",
        r_forest,
        r_const,
        r_forest / r_const,
        slope.estimate,
        slope.t_stat,
    );
}

fn probe34(n_munis: usize, workers: usize, num_trees: usize, min_leaf: usize) {
    // criterion 3: default linear-tau DGP at N = 50k
    let config = DgpConfig {
        n_municipalities: n_munis,
        workers_per_municipality: workers,
        ..DgpConfig::default()
    };
    let t0 = Instant::now();
    let data = generate(&config, 314).unwrap();
    let nuisance = ForestParams::regression_default();
    let sample = center(&data.frame, &nuisance, 314).unwrap();
    let t1 = Instant::now();
    println!("[c3] generate+center N={}: {:?}", data.frame.n_rows(), t1 - t0);
    let causal = ForestParams {
        num_trees,
        min_leaf,
        ..ForestParams::causal_default()
    };
    let forest =
        fit_causal_forest(&data.frame, &sample.y_tilde, &sample.w_tilde, &causal, 318).unwrap();
    let t2 = Instant::now();
    println!("[c3] causal fit ({num_trees} trees, min_leaf {min_leaf}): {:?}", t2 - t1);
    let est = forest
        .cate_estimates(&data.frame, &sample.y_tilde, &sample.w_tilde)
        .unwrap();
    let t3 = Instant::now();
    println!("[c3] oob estimates: {:?}", t3 - t2);
    let report =
        calibration_from_predictions(&data.frame, &sample.y_tilde, &sample.w_tilde, &est.tau)
            .unwrap();
    println!(
        "[c3] mfp {:.3} (t {:.1}) dfp {:?} tau_bar {:.4} sd(tau_hat) {:.4} sd(truth) {:.4}",
        report.mean_forest.estimate,
        report.mean_forest.t_stat,
        report.differential.as_ref().map(|c| (c.estimate, c.t_stat)),
        report.tau_bar,
        stats::population_sd(&est.tau),
        stats::population_sd(&data.truth.tau),
    );

    // criterion 4: null DGP, same machinery
    let config = DgpConfig {
        tau: TauSurface::Null,
        ..config
    };
    let data = generate(&config, 414).unwrap();
    let sample = center(&data.frame, &nuisance, 414).unwrap();
    let forest =
        fit_causal_forest(&data.frame, &sample.y_tilde, &sample.w_tilde, &causal, 418).unwrap();
    let est = forest
        .cate_estimates(&data.frame, &sample.y_tilde, &sample.w_tilde)
        .unwrap();
    let result = blp(
        &data.frame,
        &est.tau,
        &sample.e_hat,
        &[],
        BlpWeights::Balanced,
        false,
    )
    .unwrap();
    let profile = clan(&data.frame, &est.tau, &[], &[]).unwrap();
    println!(
        "[c4] ate {:.5} (se {:.5}) clan tau gap {:.5} sd(tau_hat) {:.5}",
        result.intercept.estimate,
        result.intercept.standard_error,
        profile.tau.gap,
        stats::population_sd(&est.tau),
    );
}

fn probe8(reps: usize, nuisance_trees: usize) {
    let config = DgpConfig {
        n_municipalities: 200,
        workers_per_municipality: 25,
        tau: TauSurface::Constant { value: 0.10 },
        propensity: PropensitySurface::Random,
        ..DgpConfig::default()
    };
    // a fixed raw query point: a fairly typical worker
    let x0 = vec![41.3, 0.0, 0.0, 1.0, 8.5, 0.0, 1.0, 0.0, 0.0, 0.0, 4.8, 3.2];
    let nuisance = ForestParams {
        num_trees: nuisance_trees,
        ..ForestParams::regression_default()
    };
    let causal = ForestParams {
        num_trees: 500,
        ..ForestParams::causal_default()
    };
    let t0 = Instant::now();
    let mut covered = 0usize;
    let mut ses = Vec::new();
    let mut errs = Vec::new();
    for rep in 0..reps {
        let seed = 9000 + 17 * rep as u64;
        let data = generate(&config, seed).unwrap();
        let sample = center(&data.frame, &nuisance, seed).unwrap();
        let forest =
            fit_causal_forest(&data.frame, &sample.y_tilde, &sample.w_tilde, &causal, seed + 4)
                .unwrap();
        let tau = forest
            .estimate_cate(&sample.y_tilde, &sample.w_tilde, &x0)
            .unwrap();
        let se = forest
            .estimate_variance(&sample.y_tilde, &sample.w_tilde, &x0)
            .unwrap();
        if (tau - 0.10).abs() <= 1.96 * se {
            covered += 1;
        }
        ses.push(se);
        errs.push(tau - 0.10);
    }
    let elapsed = t0.elapsed();
    let emp_sd = stats::population_sd(&errs);
    println!(
        "[c8] {reps} reps in {:?} ({:?}/rep): coverage {}/{} mean se {:.4} emp sd {:.4} mean err {:.4}",
        elapsed,
        elapsed / reps as u32,
        covered,
        reps,
        stats::mean(&ses),
        emp_sd,
        stats::mean(&errs),
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    if which == "2" || which == "all" {
        probe2(OutcomeSpec::Binary { base: 0.45 }, "binary", 2000, 200);
    }
    if which == "2w" {
        probe2(
            OutcomeSpec::Wage {
                level: 1.5,
                noise_sd: 0.25,
            },
            "wage",
            2000,
            5,
        );
    }
    if which == "3" || which == "all" {
        probe34(500, 100, 2000, 5);
    }
    if which == "8" || which == "all" {
        probe8(10, 200);
    }
}
