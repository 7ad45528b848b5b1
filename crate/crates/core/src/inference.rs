//! Inference on heterogeneous effects built from forest CATE estimates: the
//! best linear predictor (BLP) of τ̂ on chosen covariates, and
//! classification analysis (CLAN) comparing covariate profiles across
//! quartiles of the estimated effect distribution.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::frame::{AnalysisFrame, ColumnKind, ColumnSource};
use crate::stats;
use crate::wls::wls_cluster;

/// Regression weights for the BLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlpWeights {
    /// ê(x)(1 − ê(x)): emphasizes rows where treatment assignment carries
    /// the most information.
    Balanced,
    /// ê(x) itself.
    RawPropensity,
    /// Unweighted.
    None,
}

/// One reported coefficient of the BLP regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlpTerm {
    pub name: String,
    pub estimate: f64,
    pub standard_error: f64,
    pub t_stat: f64,
    /// Two-sided p-value against zero under a normal reference.
    pub p_value: f64,
    /// For standardized dummy columns: the estimate expressed per 0→1 flip
    /// of the original indicator, i.e. divided by sqrt(p(1−p)) from the
    /// frozen column moments.
    pub rescaled_estimate: Option<f64>,
    pub rescaled_standard_error: Option<f64>,
}

/// Best linear predictor of the estimated CATE on a set of covariates, with
/// cluster-robust inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlpResult {
    /// The intercept; because every regressor is weighted-demeaned, this is
    /// exactly the weighted mean of τ̂ (the chosen weighting's ATE).
    pub intercept: BlpTerm,
    pub terms: Vec<BlpTerm>,
    /// Weighted mean of τ̂ under the regression weights.
    pub weighted_tau_mean: f64,
    pub weights: BlpWeights,
    pub cluster_fe: bool,
    pub n_rows: usize,
    pub n_clusters: usize,
}

/// Divides a coefficient estimated on a standardized dummy by the binary
/// standard deviation sqrt(p(1−p)), converting it to a per-flip effect.
pub fn rescale_dummy(value: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParam(format!(
            "dummy share p = {p} must lie strictly inside (0, 1)"
        )));
    }
    Ok(value / (p * (1.0 - p)).sqrt())
}

/// Regresses τ̂ on an intercept and the named feature columns.
///
/// * Regressors are demeaned with the regression weights, which pins the
///   intercept to the weighted mean of τ̂ exactly.
/// * `cluster_fe` additionally within-demeans regressors and response by
///   cluster (weighted, with the grand mean added back), so slopes are
///   identified from within-cluster variation only.
/// * Standard errors are CR1 cluster-robust on the frame's clusters.
/// * Coefficients on standardized dummy columns are additionally reported
///   per 0→1 flip of the underlying indicator.
pub fn blp(
    frame: &AnalysisFrame,
    tau_hat: &[f64],
    e_hat: &[f64],
    feature_names: &[String],
    weights: BlpWeights,
    cluster_fe: bool,
) -> Result<BlpResult> {
    let n = frame.n_rows();
    if tau_hat.len() != n {
        return Err(Error::LengthMismatch {
            context: format!("tau_hat has {} rows, frame has {n}", tau_hat.len()),
        });
    }
    if tau_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "CATE estimates".into(),
        });
    }
    let omega = regression_weights(weights, e_hat, n)?;

    // Pull the named columns and their metadata.
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(feature_names.len());
    let mut metas = Vec::with_capacity(feature_names.len());
    for name in feature_names {
        let j = frame
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        columns.push(frame.feature(j).to_vec());
        metas.push(frame.columns()[j].clone());
    }
    let mut response = tau_hat.to_vec();

    if cluster_fe {
        for col in &mut columns {
            within_demean(col, &omega, frame)?;
        }
        within_demean(&mut response, &omega, frame)?;
    }
    for col in &mut columns {
        let m = weighted_mean(col, &omega);
        for v in col.iter_mut() {
            *v -= m;
        }
    }

    let mut design: Vec<Vec<f64>> = Vec::with_capacity(columns.len() + 1);
    design.push(vec![1.0; n]);
    design.extend(columns);
    let mut names: Vec<&str> = Vec::with_capacity(design.len());
    names.push("intercept");
    for name in feature_names {
        names.push(name);
    }

    let fit = wls_cluster(
        &design,
        &names,
        &response,
        Some(&omega),
        frame.cluster(),
        frame.n_clusters(),
    )?;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let term = |k: usize, name: &str, meta: Option<&crate::frame::ColumnMeta>| -> BlpTerm {
        let estimate = fit.coefficients[k];
        let standard_error = fit.standard_errors[k];
        let t_stat = estimate / standard_error;
        let p_value = 2.0 * (1.0 - normal.cdf(t_stat.abs()));
        let rescale = meta.and_then(|m| {
            (m.kind == ColumnKind::Dummy && m.source == ColumnSource::Standardized && m.sd > 0.0)
                .then_some(m.sd)
        });
        BlpTerm {
            name: name.to_string(),
            estimate,
            standard_error,
            t_stat,
            p_value,
            rescaled_estimate: rescale.map(|sd| estimate / sd),
            rescaled_standard_error: rescale.map(|sd| standard_error / sd),
        }
    };

    let intercept = term(0, "intercept", None);
    let terms: Vec<BlpTerm> = metas
        .iter()
        .enumerate()
        .map(|(j, m)| term(j + 1, &m.name, Some(m)))
        .collect();
    let weighted_tau_mean = weighted_mean(&response, &omega);
    Ok(BlpResult {
        intercept,
        terms,
        weighted_tau_mean,
        weights,
        cluster_fe,
        n_rows: n,
        n_clusters: frame.n_clusters(),
    })
}

fn regression_weights(weights: BlpWeights, e_hat: &[f64], n: usize) -> Result<Vec<f64>> {
    match weights {
        BlpWeights::None => Ok(vec![1.0; n]),
        BlpWeights::Balanced | BlpWeights::RawPropensity => {
            if e_hat.len() != n {
                return Err(Error::LengthMismatch {
                    context: format!("e_hat has {} rows, frame has {n}", e_hat.len()),
                });
            }
            if e_hat.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                return Err(Error::InvalidParam(
                    "propensity weights need e_hat strictly inside (0, 1)".into(),
                ));
            }
            Ok(e_hat
                .iter()
                .map(|&e| match weights {
                    BlpWeights::Balanced => e * (1.0 - e),
                    BlpWeights::RawPropensity => e,
                    BlpWeights::None => unreachable!(),
                })
                .collect())
        }
    }
}

fn weighted_mean(values: &[f64], omega: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values.iter().zip(omega) {
        num += v * w;
        den += w;
    }
    num / den
}

/// Weighted within-cluster demeaning with the weighted grand mean added
/// back, so the overall level is preserved.
fn within_demean(values: &mut [f64], omega: &[f64], frame: &AnalysisFrame) -> Result<()> {
    let n_clusters = frame.n_clusters();
    let mut num = vec![0.0; n_clusters];
    let mut den = vec![0.0; n_clusters];
    for (i, &c) in frame.cluster().iter().enumerate() {
        num[c] += omega[i] * values[i];
        den[c] += omega[i];
    }
    for c in 0..n_clusters {
        if den[c] <= 0.0 {
            return Err(Error::Estimation(format!(
                "cluster `{}` has zero total weight",
                frame.cluster_labels()[c]
            )));
        }
    }
    let grand = weighted_mean(values, omega);
    for (i, &c) in frame.cluster().iter().enumerate() {
        values[i] = values[i] - num[c] / den[c] + grand;
    }
    Ok(())
}

/// Within-quartile moments of one variable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClanQuartile {
    pub mean: f64,
    /// Population standard deviation within the quartile.
    pub sd: f64,
}

/// CLAN profile of one variable across the four τ̂ quartiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClanFeature {
    pub name: String,
    pub quartiles: [ClanQuartile; 4],
    /// Mean in the top quartile minus mean in the bottom quartile.
    pub gap: f64,
}

/// Classification analysis: rows are sorted by estimated effect (ties broken
/// by row order), cut into quartiles, and each requested variable is
/// profiled per quartile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClanResult {
    /// τ̂ itself, profiled across its own quartiles.
    pub tau: ClanFeature,
    pub features: Vec<ClanFeature>,
    /// Additional caller-supplied row vectors (e.g. ê, ŷ, bias) profiled
    /// the same way.
    pub extras: Vec<ClanFeature>,
    pub quartile_sizes: [usize; 4],
}

/// Runs CLAN over the named frame columns plus any extra aligned vectors.
/// Quartile k (1-based) covers sorted positions `floor((k−1)n/4)` to
/// `floor(kn/4)`; at least 4 rows are required.
pub fn clan(
    frame: &AnalysisFrame,
    tau_hat: &[f64],
    feature_names: &[String],
    extras: &[(String, Vec<f64>)],
) -> Result<ClanResult> {
    let n = frame.n_rows();
    if tau_hat.len() != n {
        return Err(Error::LengthMismatch {
            context: format!("tau_hat has {} rows, frame has {n}", tau_hat.len()),
        });
    }
    if n < 4 {
        return Err(Error::Estimation(format!(
            "classification analysis needs at least 4 rows, got {n}"
        )));
    }
    if tau_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "CATE estimates".into(),
        });
    }
    for (name, values) in extras {
        if values.len() != n {
            return Err(Error::LengthMismatch {
                context: format!("extra `{name}` has {} rows, frame has {n}", values.len()),
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tau_hat[a].total_cmp(&tau_hat[b]).then(a.cmp(&b)));
    let bounds: [usize; 5] = core::array::from_fn(|k| k * n / 4);
    let quartile_sizes: [usize; 4] = core::array::from_fn(|k| bounds[k + 1] - bounds[k]);

    let profile = |name: &str, values: &[f64]| -> ClanFeature {
        let quartiles: [ClanQuartile; 4] = core::array::from_fn(|k| {
            let slice: Vec<f64> = order[bounds[k]..bounds[k + 1]]
                .iter()
                .map(|&i| values[i])
                .collect();
            ClanQuartile {
                mean: stats::mean(&slice),
                sd: stats::population_sd(&slice),
            }
        });
        ClanFeature {
            name: name.to_string(),
            gap: quartiles[3].mean - quartiles[0].mean,
            quartiles,
        }
    };

    let tau = profile("tau_hat", tau_hat);
    let mut features = Vec::with_capacity(feature_names.len());
    for name in feature_names {
        let col = frame.feature_by_name(name)?;
        features.push(profile(name, col));
    }
    let extras_out: Vec<ClanFeature> = extras
        .iter()
        .map(|(name, values)| profile(name, values))
        .collect();
    Ok(ClanResult {
        tau,
        features,
        extras: extras_out,
        quartile_sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::ColumnSpec;
    use crate::transform::standardize;

    /// Frame with a continuous column, a raw dummy, and simple clusters.
    fn fixture(n: usize, n_clusters: usize) -> AnalysisFrame {
        let x1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.731).sin()).collect();
        let d: Vec<f64> = (0..n).map(|i| ((i * 7) % 3 == 0) as usize as f64).collect();
        let clusters: Vec<String> = (0..n).map(|i| format!("c{}", i % n_clusters)).collect();
        AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1"), ColumnSpec::dummy("male")],
            vec![x1, d],
            vec![0.0; n],
            (0..n).map(|i| (i % 2) as f64).collect(),
            &clusters,
            vec![0.0; n],
            None,
        )
        .unwrap()
    }

    fn flat_propensity(n: usize) -> Vec<f64> {
        vec![0.4; n]
    }

    #[test]
    fn intercept_equals_the_weighted_mean_of_tau_exactly() {
        let frame = fixture(200, 8);
        let tau: Vec<f64> = (0..200).map(|i| (i as f64 * 0.17).cos() * 2.0).collect();
        let e: Vec<f64> = (0..200).map(|i| 0.2 + 0.6 * ((i % 10) as f64 / 10.0)).collect();
        for weights in [BlpWeights::Balanced, BlpWeights::RawPropensity, BlpWeights::None] {
            let result = blp(
                &frame,
                &tau,
                &e,
                &["x1".to_string(), "male".to_string()],
                weights,
                false,
            )
            .unwrap();
            let omega: Vec<f64> = match weights {
                BlpWeights::Balanced => e.iter().map(|v| v * (1.0 - v)).collect(),
                BlpWeights::RawPropensity => e.clone(),
                BlpWeights::None => vec![1.0; 200],
            };
            let want = weighted_mean(&tau, &omega);
            assert!(
                (result.intercept.estimate - want).abs() < 1e-10,
                "intercept {} vs weighted mean {want}",
                result.intercept.estimate
            );
            assert!((result.weighted_tau_mean - want).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_linear_heterogeneity_is_recovered_exactly() {
        let frame = fixture(120, 6);
        let tau: Vec<f64> = frame.feature(0).iter().map(|x| 0.7 + 2.0 * x).collect();
        let result = blp(
            &frame,
            &tau,
            &flat_propensity(120),
            &["x1".to_string()],
            BlpWeights::None,
            false,
        )
        .unwrap();
        assert!((result.terms[0].estimate - 2.0).abs() < 1e-8);
        assert!((result.intercept.estimate - stats::mean(&tau)).abs() < 1e-8);
        // perfect fit: the cluster-robust variance collapses
        assert!(result.terms[0].standard_error < 1e-8);
    }

    #[test]
    fn constant_tau_yields_zero_slopes_and_the_constant_intercept() {
        let frame = fixture(100, 5);
        let tau = vec![0.25; 100];
        let result = blp(
            &frame,
            &tau,
            &flat_propensity(100),
            &["x1".to_string(), "male".to_string()],
            BlpWeights::Balanced,
            false,
        )
        .unwrap();
        assert!((result.intercept.estimate - 0.25).abs() < 1e-12);
        for term in &result.terms {
            assert!(term.estimate.abs() < 1e-12);
        }
    }

    #[test]
    fn cluster_fixed_effects_absorb_per_cluster_shifts() {
        let frame = fixture(240, 8);
        let tau: Vec<f64> = frame.feature(0).iter().map(|x| 1.5 * x).collect();
        let shifted: Vec<f64> = tau
            .iter()
            .zip(frame.cluster())
            .map(|(t, &c)| t + (c as f64) * 10.0)
            .collect();
        let base = blp(
            &frame,
            &tau,
            &flat_propensity(240),
            &["x1".to_string()],
            BlpWeights::None,
            true,
        )
        .unwrap();
        let moved = blp(
            &frame,
            &shifted,
            &flat_propensity(240),
            &["x1".to_string()],
            BlpWeights::None,
            true,
        )
        .unwrap();
        assert!(
            (base.terms[0].estimate - moved.terms[0].estimate).abs() < 1e-8,
            "within slope moved: {} vs {}",
            base.terms[0].estimate,
            moved.terms[0].estimate
        );
    }

    #[test]
    fn standardized_dummy_terms_report_a_per_flip_rescaling() {
        let mut frame = fixture(200, 8);
        frame = standardize(&frame, &["male".to_string()]).unwrap();
        let meta = &frame.columns()[frame.column_index("male").unwrap()];
        assert_eq!(meta.source, ColumnSource::Standardized);
        let sd = meta.sd;
        let tau: Vec<f64> = frame
            .feature(frame.column_index("male").unwrap())
            .iter()
            .map(|z| 0.1 + 0.05 * z)
            .collect();
        let result = blp(
            &frame,
            &tau,
            &flat_propensity(200),
            &["male".to_string()],
            BlpWeights::None,
            false,
        )
        .unwrap();
        let term = &result.terms[0];
        let rescaled = term.rescaled_estimate.expect("standardized dummy");
        assert!((rescaled - term.estimate / sd).abs() < 1e-15);
        assert!(
            (term.rescaled_standard_error.unwrap() - term.standard_error / sd).abs() < 1e-15
        );
        // continuous or raw columns carry no rescaling
        let raw = blp(
            &frame,
            &tau,
            &flat_propensity(200),
            &["x1".to_string()],
            BlpWeights::None,
            false,
        )
        .unwrap();
        assert!(raw.terms[0].rescaled_estimate.is_none());
    }

    #[test]
    fn rescale_dummy_matches_the_binary_standard_deviation() {
        assert!((rescale_dummy(0.1, 0.5).unwrap() - 0.2).abs() < 1e-15);
        // round trip: multiplying back by sqrt(p(1-p)) restores the value
        let p = 0.19;
        let v = 0.0371;
        let back = rescale_dummy(v, p).unwrap() * (p * (1.0 - p)).sqrt();
        assert!((back - v).abs() < 1e-15);
        assert!(rescale_dummy(1.0, 0.0).is_err());
        assert!(rescale_dummy(1.0, 1.0).is_err());
    }

    #[test]
    fn missing_blp_column_is_reported_by_name() {
        let frame = fixture(50, 5);
        let err = blp(
            &frame,
            &vec![0.0; 50],
            &flat_propensity(50),
            &["nope".to_string()],
            BlpWeights::None,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingColumn(name) if name == "nope"));
    }

    #[test]
    fn clan_quartiles_of_one_through_eight_are_the_textbook_blocks() {
        let frame = fixture(8, 4);
        let tau: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let result = clan(&frame, &tau, &[], &[]).unwrap();
        assert_eq!(result.quartile_sizes, [2, 2, 2, 2]);
        let means: Vec<f64> = result.tau.quartiles.iter().map(|q| q.mean).collect();
        assert_eq!(means, vec![1.5, 3.5, 5.5, 7.5]);
        assert_eq!(result.tau.gap, 6.0);
    }

    #[test]
    fn clan_handles_sizes_not_divisible_by_four() {
        let frame = fixture(10, 5);
        let tau: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let result = clan(&frame, &tau, &[], &[]).unwrap();
        assert_eq!(result.quartile_sizes, [2, 3, 2, 3]);
    }

    #[test]
    fn clan_is_invariant_to_monotone_transforms_of_tau() {
        let frame = fixture(100, 5);
        let tau: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 10.0).collect();
        let warped: Vec<f64> = tau.iter().map(|t| (t * 0.3).exp() + 5.0).collect();
        let names = vec!["x1".to_string(), "male".to_string()];
        let a = clan(&frame, &tau, &names, &[]).unwrap();
        let b = clan(&frame, &warped, &names, &[]).unwrap();
        for (fa, fb) in a.features.iter().zip(&b.features) {
            for k in 0..4 {
                assert_eq!(fa.quartiles[k].mean, fb.quartiles[k].mean);
                assert_eq!(fa.quartiles[k].sd, fb.quartiles[k].sd);
            }
        }
    }

    #[test]
    fn clan_breaks_ties_by_row_order() {
        let frame = fixture(8, 4);
        let tau = vec![1.0; 8]; // all tied: quartiles are consecutive row blocks
        let x_profile = clan(&frame, &tau, &["x1".to_string()], &[]).unwrap();
        let col = frame.feature(0);
        let want_q1 = (col[0] + col[1]) / 2.0;
        assert!((x_profile.features[0].quartiles[0].mean - want_q1).abs() < 1e-15);
    }

    #[test]
    fn clan_profiles_extra_vectors_alongside_columns() {
        let frame = fixture(40, 4);
        let tau: Vec<f64> = (0..40).map(|v| v as f64).collect();
        let e_hat: Vec<f64> = (0..40).map(|v| 0.2 + 0.01 * v as f64).collect();
        let result = clan(
            &frame,
            &tau,
            &[],
            &[("e_hat".to_string(), e_hat.clone())],
        )
        .unwrap();
        assert_eq!(result.extras.len(), 1);
        assert_eq!(result.extras[0].name, "e_hat");
        // tau is already sorted, so the first quartile is the first 10 rows
        let want = stats::mean(&e_hat[0..10]);
        assert!((result.extras[0].quartiles[0].mean - want).abs() < 1e-15);
    }

    #[test]
    fn clan_rejects_fewer_than_four_rows() {
        let frame = fixture(8, 4);
        let small = frame
            .filter_rows(&[true, true, true, false, false, false, false, false])
            .unwrap();
        let err = clan(&small, &vec![1.0, 2.0, 3.0], &[], &[]).unwrap_err();
        assert!(matches!(err, Error::Estimation(_)));
    }
}
