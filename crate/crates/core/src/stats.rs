//! Small numeric helpers used across the crate: means, population moments,
//! Pearson correlation, and a fixed-range histogram.

use crate::error::{Error, Result};

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance (divide by N, not N - 1).
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divide by N, not N - 1).
pub fn population_sd(values: &[f64]) -> f64 {
    population_variance(values).sqrt()
}

/// Weighted mean; weights must be non-negative with a positive sum.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::LengthMismatch {
            context: format!(
                "weighted_mean: {} values vs {} weights",
                values.len(),
                weights.len()
            ),
        });
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Estimation(
            "weighted_mean: weights sum to zero".into(),
        ));
    }
    Ok(values
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / wsum)
}

/// Pearson correlation; errors when either argument has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            context: format!("pearson: {} vs {} values", a.len(), b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyFrame {
            context: "pearson".into(),
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa <= 0.0 {
        return Err(Error::ZeroVariance {
            column: "pearson lhs".into(),
        });
    }
    if sbb <= 0.0 {
        return Err(Error::ZeroVariance {
            column: "pearson rhs".into(),
        });
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Equal-width histogram over a closed range `[lo, hi]`.
///
/// Values equal to `hi` land in the last bin; values outside the range are
/// a validation error because callers always derive the range from the data
/// (or a hard domain such as `[0, 1]` for propensities).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges from `lo` to `hi`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub sd: f64,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidParam("histogram: bins must be >= 1".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParam(format!(
            "histogram: invalid range [{lo}, {hi}]"
        )));
    }
    if values.is_empty() {
        return Err(Error::EmptyFrame {
            context: "histogram".into(),
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("histogram value at index {i}"),
            });
        }
        if v < lo || v > hi {
            return Err(Error::InvalidParam(format!(
                "histogram: value {v} at index {i} outside [{lo}, {hi}]"
            )));
        }
        let mut bin = ((v - lo) / width) as usize;
        if bin >= bins {
            bin = bins - 1; // v == hi (or float rounding at the top edge)
        }
        counts[bin] += 1;
    }
    let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
    Ok(Histogram {
        edges,
        counts,
        mean: mean(values),
        sd: population_sd(values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_sd_divides_by_n() {
        // sd of [1, 2, 3] with the population convention is sqrt(2/3)
        let sd = population_sd(&[1.0, 2.0, 3.0]);
        assert!((sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn histogram_counts_sum_to_n_and_top_edge_is_closed() {
        let values = [0.0, 0.1, 0.5, 0.999, 1.0, 1.0];
        let h = histogram(&values, 0.0, 1.0, 4).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), values.len() as u64);
        assert_eq!(h.counts[3], 3); // 0.999 and both 1.0 values
        assert_eq!(h.edges.len(), 5);
    }

    #[test]
    fn histogram_rejects_out_of_range() {
        let err = histogram(&[1.5], 0.0, 1.0, 4).unwrap_err();
        assert!(matches!(err, Error::InvalidParam(_)));
    }

    #[test]
    fn pearson_of_identical_series_is_one() {
        let a = [1.0, 2.0, 4.0, 8.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_of_negated_series_is_minus_one() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-12);
    }
}
