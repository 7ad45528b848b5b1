//! Weighted least squares with cluster-robust (CR1) standard errors.
//!
//! The design is passed column-major and never materialized as an n×k
//! matrix: the normal equations and the cluster score vectors are
//! accumulated in one pass, so memory stays O(k²) regardless of n. Columns
//! are equilibrated to unit weighted norm before solving, which keeps the
//! normal equations well-conditioned even when regressors live on wildly
//! different scales.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative residual-norm threshold below which a column counts as linearly
/// dependent on the columns before it.
const RANK_TOL: f64 = 1e-10;

/// A fitted weighted least squares regression with CR1 cluster-robust
/// covariance.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coefficients: Vec<f64>,
    /// Square roots of the sandwich diagonal.
    pub standard_errors: Vec<f64>,
    /// Full k×k cluster-robust covariance matrix.
    pub covariance: Vec<Vec<f64>>,
    pub n_rows: usize,
    pub n_clusters: usize,
}

/// Fits y on the given columns by weighted least squares and reports CR1
/// cluster-robust standard errors:
///
/// V = c · (X'ΩX)⁻¹ [ Σ_g s_g s_g' ] (X'ΩX)⁻¹,  s_g = Σ_{i∈g} ωᵢ eᵢ xᵢ,
///
/// with the small-sample factor c = G/(G−1) · (N−1)/(N−k). When every
/// cluster is a single row this reduces algebraically to the HC1
/// heteroskedasticity-robust estimator.
///
/// `weights` of `None` means equal weights; zero weights drop rows from the
/// fit. `cluster` must hold dense ids in `0..n_clusters`.
pub fn wls_cluster(
    columns: &[Vec<f64>],
    names: &[&str],
    y: &[f64],
    weights: Option<&[f64]>,
    cluster: &[usize],
    n_clusters: usize,
) -> Result<WlsFit> {
    let (n, k) = check_design(columns, names, y)?;
    if cluster.len() != n {
        return Err(Error::LengthMismatch {
            context: format!("cluster ids ({}) vs rows ({n})", cluster.len()),
        });
    }
    if n_clusters < 2 {
        return Err(Error::Estimation(format!(
            "cluster-robust variance needs at least 2 clusters, got {n_clusters}"
        )));
    }
    if let Some(c) = cluster.iter().find(|c| **c >= n_clusters) {
        return Err(Error::Estimation(format!(
            "cluster id {c} out of range 0..{n_clusters}"
        )));
    }
    let omega = resolve_weights(weights, n)?;
    let scales = column_scales(columns, &omega, names)?;

    let (beta, bread_inv) = solve_normal_equations(columns, y, &omega, &scales)?;

    // Cluster score vectors in the scaled coordinate system.
    let mut scores = vec![DVector::<f64>::zeros(k); n_clusters];
    for i in 0..n {
        if omega[i] == 0.0 {
            continue;
        }
        let mut fitted = 0.0;
        for j in 0..k {
            fitted += columns[j][i] * beta[j];
        }
        let we = omega[i] * (y[i] - fitted);
        let s = &mut scores[cluster[i]];
        for j in 0..k {
            s[j] += we * columns[j][i] / scales[j];
        }
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for s in &scores {
        // full rank-1 update: the symmetric (`syger`) variant touches only
        // one triangle, which would corrupt the sandwich product below
        meat.ger(1.0, s, s, 1.0);
    }

    let g = n_clusters as f64;
    let nf = n as f64;
    let c = g / (g - 1.0) * (nf - 1.0) / (nf - k as f64);
    let sandwich = &bread_inv * meat * &bread_inv * c;

    let mut covariance = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            covariance[a][b] = sandwich[(a, b)] / (scales[a] * scales[b]);
        }
    }
    let standard_errors = (0..k).map(|j| covariance[j][j].max(0.0).sqrt()).collect();
    Ok(WlsFit {
        coefficients: beta,
        standard_errors,
        covariance,
        n_rows: n,
        n_clusters,
    })
}

/// Ordinary least squares coefficients only — used where a fit is needed in
/// an inner loop and no covariance is wanted.
pub fn ols_solve(columns: &[Vec<f64>], names: &[&str], y: &[f64]) -> Result<Vec<f64>> {
    let (n, _) = check_design(columns, names, y)?;
    let omega = vec![1.0; n];
    let scales = column_scales(columns, &omega, names)?;
    let (beta, _) = solve_normal_equations(columns, y, &omega, &scales)?;
    Ok(beta)
}

fn check_design(columns: &[Vec<f64>], names: &[&str], y: &[f64]) -> Result<(usize, usize)> {
    let k = columns.len();
    if k == 0 {
        return Err(Error::InvalidParam("regression needs at least one column".into()));
    }
    if names.len() != k {
        return Err(Error::LengthMismatch {
            context: format!("{} column names for {k} columns", names.len()),
        });
    }
    let n = y.len();
    if n < k {
        return Err(Error::Estimation(format!(
            "{n} rows cannot identify {k} coefficients"
        )));
    }
    for (j, col) in columns.iter().enumerate() {
        if col.len() != n {
            return Err(Error::LengthMismatch {
                context: format!("column `{}` has {} rows, y has {n}", names[j], col.len()),
            });
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("regression column `{}`", names[j]),
            });
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "regression response".into(),
        });
    }
    Ok((n, k))
}

fn resolve_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::LengthMismatch {
                    context: format!("weights ({}) vs rows ({n})", w.len()),
                });
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidParam(
                    "regression weights must be finite and non-negative".into(),
                ));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidParam("regression weights sum to zero".into()));
            }
            Ok(w.to_vec())
        }
    }
}

/// Weighted norms used to equilibrate columns, plus the rank screen: a
/// column whose residual after (modified Gram-Schmidt) projection on the
/// previous columns is below `RANK_TOL` of its own norm is collinear, and
/// every such column is reported by name.
fn column_scales(columns: &[Vec<f64>], omega: &[f64], names: &[&str]) -> Result<Vec<f64>> {
    let k = columns.len();
    let n = omega.len();
    let wnorm = |col: &[f64]| -> f64 {
        col.iter()
            .zip(omega)
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt()
    };
    let mut scales = Vec::with_capacity(k);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut offenders: Vec<String> = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let orig = wnorm(col);
        if orig <= 0.0 {
            offenders.push(names[j].to_string());
            scales.push(1.0);
            continue;
        }
        scales.push(orig);
        let mut v: Vec<f64> = col.iter().zip(omega).map(|(c, w)| c * w.sqrt()).collect();
        // two MGS sweeps for numerical safety
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for i in 0..n {
                    v[i] -= dot * b[i];
                }
            }
        }
        let resid = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if resid <= RANK_TOL * orig {
            offenders.push(names[j].to_string());
            continue;
        }
        for a in &mut v {
            *a /= resid;
        }
        basis.push(v);
    }
    if !offenders.is_empty() {
        return Err(Error::RankDeficient { columns: offenders });
    }
    Ok(scales)
}

/// Solves the equilibrated normal equations; returns coefficients on the
/// original column scale and the inverse of the scaled X'ΩX (the sandwich
/// bread).
fn solve_normal_equations(
    columns: &[Vec<f64>],
    y: &[f64],
    omega: &[f64],
    scales: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = y.len();
    let k = columns.len();
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for a in 0..k {
        let ca = &columns[a];
        for b in a..k {
            let cb = &columns[b];
            let mut acc = 0.0;
            for i in 0..n {
                acc += omega[i] * ca[i] * cb[i];
            }
            let v = acc / (scales[a] * scales[b]);
            xtx[(a, b)] = v;
            xtx[(b, a)] = v;
        }
        let mut acc = 0.0;
        for i in 0..n {
            acc += omega[i] * ca[i] * y[i];
        }
        xty[a] = acc / scales[a];
    }
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Estimation("normal equations are not positive definite".into()))?;
    let beta_scaled = chol.solve(&xty);
    let bread_inv = chol.inverse();
    let beta: Vec<f64> = (0..k).map(|j| beta_scaled[j] / scales[j]).collect();
    Ok((beta, bread_inv))
}
