//! Dataset transforms: inverse hyperbolic sine, margin bandwidth filtering,
//! standardization, leave-one-out cluster mean encoding, and row subsampling.

use crate::error::{Error, Result};
use crate::frame::{AnalysisFrame, ColumnKind, ColumnMeta, ColumnSource};
use crate::stats;

/// Inverse hyperbolic sine, ln(v + sqrt(v^2 + 1)). Defined for every real
/// (handles zeros and negatives, unlike a log transform), which is why wage
/// outcomes use it.
pub fn arsinh(v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "arsinh input".into(),
        });
    }
    Ok(v.asinh())
}

/// Keeps exactly the rows with |margin| <= h (closed interval).
pub fn bandwidth_filter(frame: &AnalysisFrame, h: f64) -> Result<AnalysisFrame> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParam(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let keep: Vec<bool> = frame.margin().iter().map(|m| m.abs() <= h).collect();
    frame.filter_rows(&keep).map_err(|e| match e {
        Error::EmptyFrame { .. } => Error::EmptyFrame {
            context: format!("bandwidth filter |margin| <= {h}"),
        },
        other => other,
    })
}

/// Standardizes the named columns to mean 0, sd 1 using the population sd
/// (divide by N). The pre-standardization moments are frozen into the column
/// metadata the first time a column is standardized, so dummy estimates can
/// later be rescaled to natural units; re-standardizing is a numerical no-op
/// and keeps the frozen moments.
pub fn standardize(frame: &AnalysisFrame, cols: &[String]) -> Result<AnalysisFrame> {
    let mut out = frame.clone();
    for name in cols {
        let j = out
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        let values = out.feature(j);
        let m = stats::mean(values);
        let sd = stats::population_sd(values);
        if sd <= 0.0 {
            return Err(Error::ZeroVariance {
                column: name.clone(),
            });
        }
        let scaled: Vec<f64> = values.iter().map(|v| (v - m) / sd).collect();
        let old = out.columns()[j].clone();
        let meta = if old.source == ColumnSource::Standardized {
            old
        } else {
            ColumnMeta {
                source: ColumnSource::Standardized,
                mean: m,
                sd,
                ..old
            }
        };
        out.set_column(j, meta, scaled);
    }
    Ok(out)
}

/// Standardizes every feature column that has not been standardized yet.
pub fn standardize_all(frame: &AnalysisFrame) -> Result<AnalysisFrame> {
    let cols: Vec<String> = frame
        .columns()
        .iter()
        .filter(|c| c.source != ColumnSource::Standardized)
        .map(|c| c.name.clone())
        .collect();
    standardize(frame, &cols)
}

/// Report produced by [`mean_encode_cluster`].
#[derive(Debug, Clone)]
pub struct MeanEncodeReport {
    pub frame: AnalysisFrame,
    /// Rows in singleton clusters that fell back to the global
    /// leave-one-out mean.
    pub singleton_rows: usize,
}

/// Leave-one-out means of `values` over the listed rows, one per row, built
/// from prefix and suffix partial sums so the excluded value is never read.
/// The subtraction trick `(total - v_i) / (m - 1)` is only mathematically
/// equivalent: its rounding depends on `v_i`, which would leak a row's own
/// value into its encoding at the last couple of bits.
fn loo_means(values: &[f64], rows: &[u32]) -> Vec<f64> {
    let m = rows.len();
    debug_assert!(m >= 2, "leave-one-out means need a peer row");
    let mut suffix = vec![0.0; m + 1];
    for j in (0..m).rev() {
        suffix[j] = suffix[j + 1] + values[rows[j] as usize];
    }
    let mut out = Vec::with_capacity(m);
    let mut prefix = 0.0;
    for j in 0..m {
        out.push((prefix + suffix[j + 1]) / (m - 1) as f64);
        prefix += values[rows[j] as usize];
    }
    out
}

/// Appends three cluster-context features: the leave-one-out within-cluster
/// mean of the outcome, the leave-one-out within-cluster mean of the
/// treatment, and the log cluster size. Row i's own (y_i, w_i) never enter
/// its encoding — not even through rounding; rows in singleton clusters fall
/// back to the global leave-one-out mean and are counted in the report.
pub fn mean_encode_cluster(frame: &AnalysisFrame) -> Result<MeanEncodeReport> {
    let n = frame.n_rows();
    if n < 2 {
        return Err(Error::EmptyFrame {
            context: "mean encoding (leave-one-out means need a peer row)".into(),
        });
    }
    let y = frame.y();
    let w = frame.w();

    let all_rows: Vec<u32> = (0..n as u32).collect();
    let global_y_loo = loo_means(y, &all_rows);
    let global_w_loo = loo_means(w, &all_rows);

    let mut enc_y = vec![0.0; n];
    let mut enc_w = vec![0.0; n];
    let mut log_size = vec![0.0; n];
    let mut singletons = 0usize;
    for rows in frame.cluster_rows() {
        if rows.len() == 1 {
            let i = rows[0] as usize;
            singletons += 1;
            enc_y[i] = global_y_loo[i];
            enc_w[i] = global_w_loo[i];
        } else {
            let cluster_y = loo_means(y, rows);
            let cluster_w = loo_means(w, rows);
            for (j, &r) in rows.iter().enumerate() {
                enc_y[r as usize] = cluster_y[j];
                enc_w[r as usize] = cluster_w[j];
            }
        }
        let size = (rows.len() as f64).ln();
        for &r in rows {
            log_size[r as usize] = size;
        }
    }

    let mut out = frame.clone();
    for (name, values) in [
        ("cluster_y_loo", enc_y),
        ("cluster_w_loo", enc_w),
        ("cluster_log_size", log_size),
    ] {
        let meta = ColumnMeta {
            name: name.to_string(),
            kind: ColumnKind::Continuous,
            source: ColumnSource::MeanEncoded,
            mean: stats::mean(&values),
            sd: stats::population_sd(&values),
        };
        out.push_column(meta, values)?;
    }
    Ok(MeanEncodeReport {
        frame: out,
        singleton_rows: singletons,
    })
}

/// Keeps the rows for which `keep` returns true. The predicate receives the
/// row index; callers resolve column access however they like.
pub fn subsample<F: FnMut(usize) -> bool>(
    frame: &AnalysisFrame,
    mut keep: F,
) -> Result<AnalysisFrame> {
    let mask: Vec<bool> = (0..frame.n_rows()).map(|i| keep(i)).collect();
    frame.filter_rows(&mask).map_err(|e| match e {
        Error::EmptyFrame { .. } => Error::EmptyFrame {
            context: "subsample predicate".into(),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::ColumnSpec;

    fn frame_with(
        x1: Vec<f64>,
        y: Vec<f64>,
        w: Vec<f64>,
        clusters: Vec<&str>,
        margin: Vec<f64>,
    ) -> AnalysisFrame {
        let keys: Vec<String> = clusters.into_iter().map(|s| s.to_string()).collect();
        AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1")],
            vec![x1],
            y,
            w,
            &keys,
            margin,
            None,
        )
        .unwrap()
    }

    #[test]
    fn arsinh_of_one_matches_ln_one_plus_sqrt_two() {
        // ln(1 + sqrt(2)) = 0.8813735870195430
        assert!((arsinh(1.0).unwrap() - 0.8813735870195430).abs() < 1e-12);
    }

    #[test]
    fn arsinh_is_odd_and_strictly_increasing_on_a_grid() {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let v = -50.0 + 0.1 * k as f64;
            let a = arsinh(v).unwrap();
            assert!(a > prev, "not increasing at v = {v}");
            prev = a;
            let neg = arsinh(-v).unwrap();
            assert!((a + neg).abs() < 1e-12, "not odd at v = {v}");
        }
    }

    #[test]
    fn arsinh_rejects_non_finite() {
        assert!(arsinh(f64::NAN).is_err());
        assert!(arsinh(f64::INFINITY).is_err());
    }

    #[test]
    fn bandwidth_keeps_closed_interval() {
        // margins are cluster-level, so give every row its own cluster
        let f = frame_with(
            vec![0.0; 5],
            vec![0.0; 5],
            vec![0.0, 1.0, 0.0, 1.0, 0.0],
            vec!["a", "b", "c", "d", "e"],
            vec![-6.0, -3.0, 0.5, 4.9, 5.0],
        );
        let wide = bandwidth_filter(&f, 5.0).unwrap();
        assert_eq!(wide.n_rows(), 4); // -3, 0.5, 4.9, 5.0 (boundary kept)
        let narrow = bandwidth_filter(&f, 2.5).unwrap();
        assert_eq!(narrow.n_rows(), 1); // only 0.5
    }

    #[test]
    fn bandwidth_composition_equals_min_bandwidth() {
        let margins = vec![-4.0, -2.0, -1.0, 0.5, 1.5, 3.0, 4.5];
        let n = margins.len();
        let clusters: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let f = AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1")],
            vec![(0..n).map(|i| i as f64).collect()],
            vec![0.0; n],
            (0..n).map(|i| (i % 2) as f64).collect(),
            &clusters,
            margins,
            None,
        )
        .unwrap();
        for (h1, h2) in [(5.0, 2.0), (2.0, 5.0), (3.0, 3.0)] {
            let composed = bandwidth_filter(&bandwidth_filter(&f, h1).unwrap(), h2).unwrap();
            let direct = bandwidth_filter(&f, h1.min(h2)).unwrap();
            assert_eq!(composed.n_rows(), direct.n_rows());
            assert_eq!(composed.margin(), direct.margin());
        }
    }

    #[test]
    fn empty_bandwidth_result_is_an_error() {
        let f = frame_with(
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec!["a", "b"],
            vec![8.0, -9.0],
        );
        let err = bandwidth_filter(&f, 1.0).unwrap_err();
        assert!(matches!(err, Error::EmptyFrame { .. }));
    }

    #[test]
    fn standardize_one_two_three() {
        let f = frame_with(
            vec![1.0, 2.0, 3.0],
            vec![0.0; 3],
            vec![0.0, 1.0, 0.0],
            vec!["a", "b", "c"],
            vec![0.0; 3],
        );
        let s = standardize(&f, &["x1".into()]).unwrap();
        let got = s.feature(0);
        // population sd of [1,2,3] is sqrt(2/3); (1-2)/sd = -1.224744871391589
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "got {g}, expected {e}");
        }
        let meta = &s.columns()[0];
        assert_eq!(meta.source, ColumnSource::Standardized);
        assert!((meta.mean - 2.0).abs() < 1e-15);
        assert!((meta.sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn standardize_is_idempotent_and_keeps_frozen_moments() {
        let f = frame_with(
            vec![3.0, 5.0, 9.0, 12.0],
            vec![0.0; 4],
            vec![0.0, 1.0, 0.0, 1.0],
            vec!["a", "b", "c", "d"],
            vec![0.0; 4],
        );
        let once = standardize(&f, &["x1".into()]).unwrap();
        let twice = standardize(&once, &["x1".into()]).unwrap();
        for (a, b) in once.feature(0).iter().zip(twice.feature(0)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(once.columns()[0].mean, twice.columns()[0].mean);
        assert_eq!(once.columns()[0].sd, twice.columns()[0].sd);
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let f = frame_with(
            vec![2.0, 2.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec!["a", "b"],
            vec![0.0, 0.0],
        );
        let err = standardize(&f, &["x1".into()]).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { column } if column == "x1"));
    }

    #[test]
    fn loo_means_leave_own_row_out() {
        // one cluster of three rows, y = [1, 0, 1] -> loo means [0.5, 1.0, 0.5]
        let f = frame_with(
            vec![0.0; 3],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec!["a", "a", "a"],
            vec![0.0; 3],
        );
        let enc = mean_encode_cluster(&f).unwrap();
        assert_eq!(enc.singleton_rows, 0);
        let got = enc.frame.feature_by_name("cluster_y_loo").unwrap();
        for (g, e) in got.iter().zip([0.5, 1.0, 0.5]) {
            assert!((g - e).abs() < 1e-15);
        }
        let size = enc.frame.feature_by_name("cluster_log_size").unwrap();
        assert!((size[0] - 3.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn singleton_cluster_falls_back_to_the_global_loo_mean() {
        let f = frame_with(
            vec![0.0; 3],
            vec![1.0, 0.0, 4.0],
            vec![1.0, 0.0, 1.0],
            vec!["a", "a", "lone"],
            vec![0.0, 0.0, 1.0],
        );
        let enc = mean_encode_cluster(&f).unwrap();
        assert_eq!(enc.singleton_rows, 1);
        let got = enc.frame.feature_by_name("cluster_y_loo").unwrap();
        // the fallback is still leave-one-out: the frame-wide mean of the
        // other rows, so the singleton never sees its own outcome either
        let global_loo = (1.0 + 0.0) / 2.0;
        assert!((got[2] - global_loo).abs() < 1e-15);
        let size = enc.frame.feature_by_name("cluster_log_size").unwrap();
        assert!((size[2] - 0.0).abs() < 1e-15); // ln(1) = 0
    }

    #[test]
    fn mean_encoding_ignores_own_row_perturbation() {
        let base = frame_with(
            vec![0.0; 4],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec!["a", "a", "a", "a"],
            vec![0.0; 4],
        );
        let perturbed = frame_with(
            vec![0.0; 4],
            vec![1.0, 2.0, 3.0, 104.0], // row 3's own outcome changed
            vec![1.0, 0.0, 1.0, 0.0],
            vec!["a", "a", "a", "a"],
            vec![0.0; 4],
        );
        let e0 = mean_encode_cluster(&base).unwrap();
        let e1 = mean_encode_cluster(&perturbed).unwrap();
        let a = e0.frame.feature_by_name("cluster_y_loo").unwrap()[3];
        let b = e1.frame.feature_by_name("cluster_y_loo").unwrap()[3];
        assert!((a - b).abs() < 1e-15, "row 3's encoding must not see y[3]");
        // ... while the other rows' encodings do move
        let c = e0.frame.feature_by_name("cluster_y_loo").unwrap()[0];
        let d = e1.frame.feature_by_name("cluster_y_loo").unwrap()[0];
        assert!((c - d).abs() > 1.0);
    }

    #[test]
    fn subsample_by_predicate_keeps_matching_rows() {
        let f = frame_with(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0; 4],
            vec![0.0, 1.0, 0.0, 1.0],
            vec!["a", "b", "c", "d"],
            vec![0.0; 4],
        );
        let x1 = f.feature(0).to_vec();
        let g = subsample(&f, |i| x1[i] >= 2.0).unwrap();
        assert_eq!(g.n_rows(), 3);
        let err = subsample(&f, |_| false).unwrap_err();
        assert!(matches!(err, Error::EmptyFrame { .. }));
    }
}
