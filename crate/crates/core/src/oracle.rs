//! Small, independent reference implementations used to cross-check the
//! production estimators in tests.
//!
//! Nothing here shares code with the estimation modules: the solver is
//! hand-rolled Gaussian elimination rather than a factorization from the
//! linear-algebra dependency, and the effect oracle works from an explicit
//! leaf assignment rather than trained trees. Both are deliberately capped
//! to tiny problems — they exist to verify, not to scale.

use crate::error::{Error, Result};

/// Largest instance `oracle_ols` accepts.
const MAX_OLS_ROWS: usize = 200;
const MAX_OLS_COLS: usize = 5;
/// Largest instance `oracle_cate_small` accepts.
const MAX_CATE_ROWS: usize = 500;

/// Ordinary least squares on a tiny dense design, solved by forming the
/// normal equations and running Gaussian elimination with partial pivoting.
/// Weighted problems can be checked by pre-scaling each row of `columns`
/// and `y` by the square root of its weight.
pub fn oracle_ols(columns: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let k = columns.len();
    let n = y.len();
    if k == 0 || k > MAX_OLS_COLS {
        return Err(Error::InvalidParam(format!(
            "oracle handles 1..={MAX_OLS_COLS} columns, got {k}"
        )));
    }
    if n == 0 || n > MAX_OLS_ROWS {
        return Err(Error::InvalidParam(format!(
            "oracle handles 1..={MAX_OLS_ROWS} rows, got {n}"
        )));
    }
    for col in columns {
        if col.len() != n {
            return Err(Error::LengthMismatch {
                context: "oracle design".into(),
            });
        }
    }
    if n < k {
        return Err(Error::Estimation(format!(
            "need at least as many rows as columns ({n} < {k})"
        )));
    }

    // normal equations: A = X'X (k×k), b = X'y
    let mut a = vec![vec![0.0f64; k]; k];
    let mut b = vec![0.0f64; k];
    for r in 0..k {
        for c in r..k {
            let mut s = 0.0;
            for i in 0..n {
                s += columns[r][i] * columns[c][i];
            }
            a[r][c] = s;
            a[c][r] = s;
        }
        let mut s = 0.0;
        for i in 0..n {
            s += columns[r][i] * y[i];
        }
        b[r] = s;
    }

    // Equilibrate to unit diagonal so the pivot threshold is scale-free.
    let mut diag = vec![0.0f64; k];
    for j in 0..k {
        if !(a[j][j] > 0.0) || !a[j][j].is_finite() {
            return Err(Error::Estimation(format!(
                "oracle column {j} has zero or non-finite scale"
            )));
        }
        diag[j] = a[j][j].sqrt();
    }
    for r in 0..k {
        for c in 0..k {
            a[r][c] /= diag[r] * diag[c];
        }
        b[r] /= diag[r];
    }

    // Gaussian elimination with partial pivoting on the augmented system.
    for col in 0..k {
        let mut pivot = col;
        let mut best = a[col][col].abs();
        for row in (col + 1)..k {
            if a[row][col].abs() > best {
                best = a[row][col].abs();
                pivot = row;
            }
        }
        if best < 1e-12 {
            return Err(Error::Estimation(
                "oracle normal equations are singular".into(),
            ));
        }
        if pivot != col {
            a.swap(pivot, col);
            b.swap(pivot, col);
        }
        let diag = a[col][col];
        for row in (col + 1)..k {
            let factor = a[row][col] / diag;
            if factor == 0.0 {
                continue;
            }
            for c in col..k {
                a[row][c] -= factor * a[col][c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut beta = vec![0.0f64; k];
    for row in (0..k).rev() {
        let mut s = b[row];
        for c in (row + 1)..k {
            s -= a[row][c] * beta[c];
        }
        beta[row] = s / a[row][row];
    }
    // undo the equilibration
    for j in 0..k {
        beta[j] /= diag[j];
    }
    Ok(beta)
}

/// Per-leaf effect estimates from an explicit leaf assignment: for each
/// leaf, the ratio of the summed residual cross-moment to the summed
/// squared treatment residual over the rows assigned to it.
pub fn oracle_cate_small(
    y_tilde: &[f64],
    w_tilde: &[f64],
    leaf_of: &[usize],
    n_leaves: usize,
) -> Result<Vec<f64>> {
    let n = y_tilde.len();
    if n == 0 || n > MAX_CATE_ROWS {
        return Err(Error::InvalidParam(format!(
            "oracle handles 1..={MAX_CATE_ROWS} rows, got {n}"
        )));
    }
    if w_tilde.len() != n || leaf_of.len() != n {
        return Err(Error::LengthMismatch {
            context: "oracle leaf assignment".into(),
        });
    }
    if n_leaves == 0 {
        return Err(Error::InvalidParam("need at least one leaf".into()));
    }
    let mut num = vec![0.0f64; n_leaves];
    let mut den = vec![0.0f64; n_leaves];
    let mut count = vec![0usize; n_leaves];
    for i in 0..n {
        let leaf = leaf_of[i];
        if leaf >= n_leaves {
            return Err(Error::InvalidParam(format!(
                "row {i} assigned to leaf {leaf}, but only {n_leaves} leaves exist"
            )));
        }
        num[leaf] += y_tilde[i] * w_tilde[i];
        den[leaf] += w_tilde[i] * w_tilde[i];
        count[leaf] += 1;
    }
    let mut out = Vec::with_capacity(n_leaves);
    for leaf in 0..n_leaves {
        if count[leaf] == 0 {
            return Err(Error::Estimation(format!("leaf {leaf} received no rows")));
        }
        if den[leaf] <= 0.0 {
            return Err(Error::DegenerateTreatment {
                context: format!("oracle leaf {leaf}"),
            });
        }
        out.push(num[leaf] / den[leaf]);
    }
    Ok(out)
}
