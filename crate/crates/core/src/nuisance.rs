//! Nuisance estimation and diagnostics around the causal forest: local
//! centering (residualizing outcome and treatment on covariates),
//! conditional-mean surfaces per treatment arm, overlap diagnostics on the
//! estimated propensity, and the confounding-bias diagnostic built from
//! them.
//!
//! All per-row predictions here are out-of-bag at the cluster level, so a
//! municipality's own outcomes never enter the nuisance values subtracted
//! from its rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::regression::{fit_regression_forest, ForestTarget};
use crate::frame::AnalysisFrame;
use crate::params::ForestParams;
use crate::stats::{self, Histogram};

/// Estimated propensities are clipped into this closed interval before
/// centering, which bounds |W̃| away from zero.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// Residualized data ready for the causal forest, plus the nuisance
/// predictions that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CenteredSample {
    /// Ỹᵢ = Yᵢ − ŷ₋ᵢ(xᵢ).
    pub y_tilde: Vec<f64>,
    /// W̃ᵢ = Wᵢ − êᵢ, with ê the clipped out-of-bag propensity.
    pub w_tilde: Vec<f64>,
    /// Clipped out-of-bag propensity ê₋ᵢ(xᵢ) ∈ [0.01, 0.99].
    pub e_hat: Vec<f64>,
    /// Out-of-bag conditional outcome mean ŷ₋ᵢ(xᵢ).
    pub y_hat: Vec<f64>,
    /// Number of rows whose raw propensity prediction fell outside the clip
    /// interval — a quick overlap health indicator.
    pub clipped: usize,
}

/// Residualizes outcome and treatment with out-of-bag regression-forest
/// predictions. The outcome forest uses `seed`, the propensity forest
/// `seed + 1`.
pub fn center(
    frame: &AnalysisFrame,
    params: &ForestParams,
    seed: u64,
) -> Result<CenteredSample> {
    let y_model = fit_regression_forest(frame, ForestTarget::Outcome, params, seed)?;
    let w_model =
        fit_regression_forest(frame, ForestTarget::Treatment, params, seed.wrapping_add(1))?;
    let y_hat = y_model.predict_oob(frame)?;
    let e_raw = w_model.predict_oob(frame)?;

    let (lo, hi) = PROPENSITY_CLIP;
    let mut clipped = 0usize;
    let e_hat: Vec<f64> = e_raw
        .iter()
        .map(|&e| {
            if e < lo || e > hi {
                clipped += 1;
            }
            e.clamp(lo, hi)
        })
        .collect();

    let y_tilde: Vec<f64> = frame.y().iter().zip(&y_hat).map(|(y, p)| y - p).collect();
    let w_tilde: Vec<f64> = frame.w().iter().zip(&e_hat).map(|(w, e)| w - e).collect();
    Ok(CenteredSample {
        y_tilde,
        w_tilde,
        e_hat,
        y_hat,
        clipped,
    })
}

/// Arm-specific conditional outcome means μ̂₀(x) = E[Y|X=x, W=0] and
/// μ̂₁(x) = E[Y|X=x, W=1], predicted at every row of the frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalMeans {
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    /// Overall treated share of the frame.
    pub w_bar: f64,
}

/// Fits one regression forest per treatment arm (control on `seed`, treated
/// on `seed + 1`) and predicts both surfaces at every row. Rows of an arm's
/// own training subset get out-of-bag predictions; rows of the other arm are
/// predicted by the full forest.
pub fn fit_conditional_means(
    frame: &AnalysisFrame,
    params: &ForestParams,
    seed: u64,
) -> Result<ConditionalMeans> {
    let treated_rows = frame.w().iter().filter(|w| **w == 1.0).count();
    if treated_rows == 0 || treated_rows == frame.n_rows() {
        return Err(Error::DegenerateTreatment {
            context: "conditional means need both treated and control rows".into(),
        });
    }
    let control_mask: Vec<bool> = frame.w().iter().map(|w| *w == 0.0).collect();
    let treated_mask: Vec<bool> = frame.w().iter().map(|w| *w == 1.0).collect();
    let mu0_hat = arm_surface(frame, &control_mask, params, seed)?;
    let mu1_hat = arm_surface(frame, &treated_mask, params, seed.wrapping_add(1))?;
    Ok(ConditionalMeans {
        mu0_hat,
        mu1_hat,
        w_bar: treated_rows as f64 / frame.n_rows() as f64,
    })
}

fn arm_surface(
    frame: &AnalysisFrame,
    mask: &[bool],
    params: &ForestParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let arm = frame.filter_rows(mask)?;
    let model = fit_regression_forest(&arm, ForestTarget::Outcome, params, seed)?;
    let oob = model.predict_oob(&arm)?;
    let mut out = vec![0.0; frame.n_rows()];
    let mut point = Vec::new();
    let mut k = 0usize;
    for i in 0..frame.n_rows() {
        if mask[i] {
            out[i] = oob[k];
            k += 1;
        } else {
            frame.row_features(i, &mut point);
            out[i] = model.predict(&point);
        }
    }
    Ok(out)
}

/// Per-row confounding-bias diagnostic and its scale-free version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasEstimate {
    /// bᵢ = (êᵢ − w̄) · ( w̄·(μ̂₀ᵢ − μ̄₀) + (1−w̄)·(μ̂₁ᵢ − μ̄₁) ).
    pub b: Vec<f64>,
    /// bᵢ divided by the population standard deviation of the outcome.
    pub scaled: Vec<f64>,
    pub sd_y: f64,
}

/// Summary statistics of the scaled bias diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasSummary {
    pub mean_abs_scaled: f64,
    /// Fraction of rows with |b|/sd(Y) ≥ 0.05.
    pub share_at_least_5pct: f64,
    pub max_abs_scaled: f64,
}

impl BiasEstimate {
    pub fn summary(&self) -> BiasSummary {
        let n = self.scaled.len() as f64;
        let abs: Vec<f64> = self.scaled.iter().map(|v| v.abs()).collect();
        BiasSummary {
            mean_abs_scaled: abs.iter().sum::<f64>() / n,
            share_at_least_5pct: abs.iter().filter(|v| **v >= 0.05).count() as f64 / n,
            max_abs_scaled: abs.iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// Computes the confounding-bias diagnostic: how much a unit's propensity
/// deviation, interacted with its baseline-outcome deviation, could move the
/// estimate if the forest failed to adjust for it. Arm means μ̄₀, μ̄₁ are
/// taken over all rows of the supplied surfaces.
pub fn bias(
    e_hat: &[f64],
    mu0_hat: &[f64],
    mu1_hat: &[f64],
    w_bar: f64,
    y: &[f64],
) -> Result<BiasEstimate> {
    let n = y.len();
    if e_hat.len() != n || mu0_hat.len() != n || mu1_hat.len() != n {
        return Err(Error::LengthMismatch {
            context: "bias diagnostic inputs must share one length".into(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyFrame {
            context: "bias diagnostic".into(),
        });
    }
    if !(0.0..=1.0).contains(&w_bar) {
        return Err(Error::InvalidParam(format!(
            "treated share w_bar = {w_bar} outside [0, 1]"
        )));
    }
    let sd_y = stats::population_sd(y);
    if sd_y <= 0.0 {
        return Err(Error::ZeroVariance {
            column: "outcome".into(),
        });
    }
    let mu0_bar = stats::mean(mu0_hat);
    let mu1_bar = stats::mean(mu1_hat);
    let b: Vec<f64> = (0..n)
        .map(|i| {
            (e_hat[i] - w_bar)
                * (w_bar * (mu0_hat[i] - mu0_bar) + (1.0 - w_bar) * (mu1_hat[i] - mu1_bar))
        })
        .collect();
    let scaled: Vec<f64> = b.iter().map(|v| v / sd_y).collect();
    Ok(BiasEstimate { b, scaled, sd_y })
}

/// Histogram of estimated propensities over [0, 1] — the standard overlap
/// picture.
pub fn propensity_histogram(e_hat: &[f64], bins: usize) -> Result<Histogram> {
    stats::histogram(e_hat, 0.0, 1.0, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::tree::stream_rng;
    use crate::frame::ColumnSpec;
    use rand::Rng;

    fn nuisance_params(num_trees: usize) -> ForestParams {
        ForestParams {
            num_trees,
            min_leaf: 5,
            subsample_rate: 0.5,
            mtry: None,
            max_depth: None,
            honesty_fraction: 0.5,
            boost_stages: 0,
        }
    }

    /// Confounded frame: treatment probability and outcome level both rise
    /// in x1.
    fn confounded_frame(n: usize, n_clusters: usize, seed: u64) -> AnalysisFrame {
        let mut rng = stream_rng(seed, 777);
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut clusters = Vec::new();
        for i in 0..n {
            let a = rng.gen::<f64>() * 2.0 - 1.0;
            let b = rng.gen::<f64>() * 2.0 - 1.0;
            let e = 0.3 + 0.4 * (a > 0.0) as usize as f64;
            let wi = if rng.gen_bool(e) { 1.0 } else { 0.0 };
            let yi = a + 0.5 * wi + 0.3 * (rng.gen::<f64>() - 0.5);
            x1.push(a);
            x2.push(b);
            y.push(yi);
            w.push(wi);
            clusters.push(format!("m{}", i % n_clusters));
        }
        AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1"), ColumnSpec::continuous("x2")],
            vec![x1, x2],
            y,
            w,
            &clusters,
            vec![0.0; n],
            None,
        )
        .unwrap()
    }

    #[test]
    fn bias_formula_matches_a_hand_computed_value() {
        // arm surfaces already centered: mu-bars are zero
        let e_hat = vec![0.6, 0.4];
        let mu0 = vec![1.0, -1.0];
        let mu1 = vec![2.0, -2.0];
        let y = vec![0.0, 1.0]; // population sd = 0.5
        let est = bias(&e_hat, &mu0, &mu1, 0.5, &y).unwrap();
        // row 0: (0.6-0.5) * (0.5*1 + 0.5*2) = 0.15
        assert!((est.b[0] - 0.15).abs() < 1e-12);
        // row 1: (0.4-0.5) * (0.5*(-1) + 0.5*(-2)) = 0.15
        assert!((est.b[1] - 0.15).abs() < 1e-12);
        assert!((est.scaled[0] - 0.3).abs() < 1e-12);
        assert_eq!(est.sd_y, 0.5);
        let summary = est.summary();
        assert_eq!(summary.share_at_least_5pct, 1.0);
        assert!((summary.max_abs_scaled - 0.3).abs() < 1e-12);
    }

    #[test]
    fn bias_is_zero_when_propensity_is_flat() {
        let e_hat = vec![0.5; 4];
        let mu0 = vec![1.0, 2.0, 3.0, 4.0];
        let mu1 = vec![4.0, 3.0, 2.0, 1.0];
        let y = vec![0.0, 1.0, 2.0, 3.0];
        let est = bias(&e_hat, &mu0, &mu1, 0.5, &y).unwrap();
        assert!(est.b.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn centering_clips_propensities_and_subtracts_them_exactly() {
        let frame = confounded_frame(1500, 30, 3);
        let sample = center(&frame, &nuisance_params(80), 5).unwrap();
        let (lo, hi) = PROPENSITY_CLIP;
        for i in 0..frame.n_rows() {
            assert!(sample.e_hat[i] >= lo && sample.e_hat[i] <= hi);
            assert_eq!(sample.w_tilde[i], frame.w()[i] - sample.e_hat[i]);
            assert_eq!(sample.y_tilde[i], frame.y()[i] - sample.y_hat[i]);
        }
        // residualizing removes most of the confounded outcome variance
        let raw_var = stats::population_variance(frame.y());
        let res_var = stats::population_variance(&sample.y_tilde);
        assert!(res_var < raw_var);
    }

    #[test]
    fn extreme_propensities_are_counted_as_clipped() {
        // deterministic treatment in half the space forces raw predictions
        // outside the clip interval
        let mut rng = stream_rng(9, 1);
        let n = 1200;
        let mut x1 = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut clusters = Vec::new();
        for i in 0..n {
            let a = rng.gen::<f64>() * 2.0 - 1.0;
            let wi = if a > 0.0 { 1.0 } else { 0.0 }; // perfectly separable
            x1.push(a);
            w.push(wi);
            y.push(rng.gen::<f64>());
            clusters.push(format!("m{}", i % 24));
        }
        let frame = AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1")],
            vec![x1],
            y,
            w,
            &clusters,
            vec![0.0; n],
            None,
        )
        .unwrap();
        let sample = center(&frame, &nuisance_params(80), 7).unwrap();
        assert!(
            sample.clipped > n / 2,
            "separable treatment should clip most rows, clipped = {}",
            sample.clipped
        );
    }

    #[test]
    fn centering_is_deterministic_for_a_fixed_seed() {
        let frame = confounded_frame(600, 20, 11);
        let a = center(&frame, &nuisance_params(40), 13).unwrap();
        let b = center(&frame, &nuisance_params(40), 13).unwrap();
        assert_eq!(a.y_tilde, b.y_tilde);
        assert_eq!(a.w_tilde, b.w_tilde);
        assert_eq!(a.clipped, b.clipped);
    }

    #[test]
    fn conditional_means_separate_the_two_arms() {
        // y = 2 for treated, 0 for control, no covariate signal
        let mut rng = stream_rng(21, 5);
        let n = 1000;
        let mut x1 = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut clusters = Vec::new();
        for i in 0..n {
            let wi = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            x1.push(rng.gen::<f64>());
            w.push(wi);
            y.push(2.0 * wi);
            clusters.push(format!("m{}", i % 20));
        }
        let frame = AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1")],
            vec![x1],
            y,
            w.clone(),
            &clusters,
            vec![0.0; n],
            None,
        )
        .unwrap();
        let means = fit_conditional_means(&frame, &nuisance_params(60), 17).unwrap();
        for i in 0..n {
            assert!(means.mu0_hat[i].abs() < 1e-9);
            assert!((means.mu1_hat[i] - 2.0).abs() < 1e-9);
        }
        let treated = w.iter().filter(|v| **v == 1.0).count() as f64;
        assert!((means.w_bar - treated / n as f64).abs() < 1e-15);
    }

    #[test]
    fn conditional_means_require_both_arms() {
        let mut frame_w = confounded_frame(100, 5, 31);
        // rebuild with all-control treatment
        frame_w = AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1"), ColumnSpec::continuous("x2")],
            vec![frame_w.feature(0).to_vec(), frame_w.feature(1).to_vec()],
            frame_w.y().to_vec(),
            vec![0.0; frame_w.n_rows()],
            &(0..frame_w.n_rows())
                .map(|i| format!("m{}", i % 5))
                .collect::<Vec<_>>(),
            frame_w.margin().to_vec(),
            None,
        )
        .unwrap();
        assert!(matches!(
            fit_conditional_means(&frame_w, &nuisance_params(10), 1),
            Err(Error::DegenerateTreatment { .. })
        ));
    }

    #[test]
    fn propensity_histogram_covers_the_unit_interval() {
        let e = vec![0.1, 0.2, 0.5, 0.5, 0.9];
        let h = propensity_histogram(&e, 10).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert_eq!(h.edges.first().copied(), Some(0.0));
        assert_eq!(h.edges.last().copied(), Some(1.0));
    }
}
