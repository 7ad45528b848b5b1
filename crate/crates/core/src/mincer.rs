//! Worker ability extraction from a wage panel: a Mincer-style log-wage
//! regression with worker and year fixed effects, estimated by alternating
//! within-demeaning. The worker fixed effect — wage level net of year
//! effects and an age profile — is the ability proxy attached to the
//! analysis frame.
//!
//! Identification notes that shape the implementation:
//! * Worker-constant regressors (schooling, sex, …) are absorbed by the
//!   worker effect and must not be included.
//! * Linear age is **never** identified alongside worker and year effects:
//!   age = year − birth year splits exactly into a year function plus a
//!   worker function, on balanced and unbalanced panels alike (the
//!   age–period–cohort problem). The profile therefore starts at the
//!   quadratic, centered at a fixed normalization age, with the linear
//!   trend absorbed into the year effects — so requesting a linear-only
//!   profile is rejected up front. Quadratic and higher powers are
//!   identified through their year × cohort cross-terms, which are additive
//!   in neither dimension once the panel spans several cohorts.
//! * A single-cohort panel makes even the quadratic a pure year function;
//!   the fit detects the absorbed column and reports it by name instead of
//!   returning noise.
//! * Wages earned in treated periods can carry the very effect under study,
//!   so the pretreatment variant restricts the sample to untreated periods.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{AnalysisFrame, ColumnKind, ColumnMeta, ColumnSource};
use crate::stats;
use crate::wls::ols_solve;

/// The age polynomial is centered here: worker effects carry each worker's
/// wage level as of the profile's value at this age.
const PROFILE_CENTER_AGE: f64 = 40.0;
/// Convergence tolerance for the alternating-means iterations (demeaning
/// and fixed-effect recovery): largest mean subtracted in one sweep.
const FE_TOL: f64 = 1e-12;
const MAX_FE_ITERS: usize = 10_000;
/// A demeaned column whose norm falls below this fraction of its original
/// norm has been absorbed by the fixed effects.
const ABSORB_TOL: f64 = 1e-8;

/// Long wage panel: one row per worker-year observation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WagePanel {
    pub worker: Vec<i64>,
    pub year: Vec<i32>,
    /// Wage already on the regression scale (e.g. inverse hyperbolic sine).
    pub log_wage: Vec<f64>,
    pub age: Vec<f64>,
    /// 1.0 when the observation falls in a period where the worker's
    /// municipality was under a treated administration, else 0.0.
    pub treated_period: Vec<f64>,
}

impl WagePanel {
    pub fn len(&self) -> usize {
        self.worker.len()
    }

    pub fn is_empty(&self) -> bool {
        self.worker.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.worker.len();
        if n == 0 {
            return Err(Error::EmptyFrame {
                context: "wage panel".into(),
            });
        }
        if self.year.len() != n
            || self.log_wage.len() != n
            || self.age.len() != n
            || self.treated_period.len() != n
        {
            return Err(Error::LengthMismatch {
                context: "wage panel columns".into(),
            });
        }
        if self
            .log_wage
            .iter()
            .chain(&self.age)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite {
                context: "wage panel".into(),
            });
        }
        if let Some(i) = self
            .treated_period
            .iter()
            .position(|v| *v != 0.0 && *v != 1.0)
        {
            return Err(Error::NonBinaryDummy {
                column: "treated_period".into(),
                row: i,
                value: self.treated_period[i],
            });
        }
        Ok(())
    }
}

/// Which panel rows feed the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MincerVariant {
    /// All observations, with a treated-period indicator among the
    /// regressors to absorb level shifts in treated spells.
    Full,
    /// Only untreated-period observations, so treatment effects on wages
    /// cannot leak into the ability proxy. The treated-period indicator is
    /// dropped (it is identically zero here).
    PretreatmentOnly,
}

/// Worker ability estimates and the regression behind them. The `worker`,
/// `fe`, and `n_obs` vectors cover every worker appearing in the panel,
/// sorted by worker id; workers with fewer than two usable observations get
/// a fixed effect of 0 (the normalized mean) and are listed in `excluded`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbilityEstimates {
    pub worker: Vec<i64>,
    /// Worker fixed effects, normalized to mean zero over included workers.
    pub fe: Vec<f64>,
    /// Usable (selected-variant) observations per worker.
    pub n_obs: Vec<usize>,
    /// Workers whose fixed effect could not be estimated.
    pub excluded: Vec<i64>,
    pub variant: MincerVariant,
    /// Year effects (year, γ̂), sorted by year. The overall wage level lives
    /// here, since the worker effects are mean-zero.
    pub gamma: Vec<(i32, f64)>,
    pub coefficients: Vec<f64>,
    pub coefficient_names: Vec<String>,
    /// Fixed normalization age the polynomial is centered at.
    pub age_center: f64,
    /// Largest number of alternating-demeaning sweeps any column needed.
    pub iterations: usize,
}

impl AbilityEstimates {
    /// Fixed effect for one worker, if the worker appeared in the panel.
    pub fn fe_for(&self, worker: i64) -> Option<f64> {
        self.worker
            .binary_search(&worker)
            .ok()
            .map(|k| self.fe[k])
    }
}

/// Fits the Mincer regression
///
/// log w_it = α_i + γ_t + Σ_{p=2..} β_p (age_it − 40)^p [+ δ·treated_it] + ε_it
///
/// by partialling out the two fixed effects: the outcome and every regressor
/// are demeaned by worker and year with alternating sweeps until the means
/// stop moving, then one OLS on the demeaned data gives the coefficients
/// (Frisch–Waugh). Fixed effects are recovered by alternating means on the
/// residuals and normalized so the worker effects average zero.
///
/// `age_powers` is the highest power of centered age: 0 fits no profile,
/// 2–4 fit quadratic through quartic. 1 is rejected — the linear term is
/// not identified next to worker and year effects (see the module notes), so
/// the profile is normalized to have zero slope at the centering age.
pub fn fit_mincer(
    panel: &WagePanel,
    variant: MincerVariant,
    age_powers: usize,
) -> Result<AbilityEstimates> {
    panel.validate()?;
    if age_powers > 4 {
        return Err(Error::InvalidParam(format!(
            "age polynomial degree {age_powers} exceeds 4"
        )));
    }
    if age_powers == 1 {
        return Err(Error::InvalidParam(
            "a linear age profile is not identified with worker and year effects \
             (age–period–cohort collinearity); use 0 or a degree of 2 to 4"
                .into(),
        ));
    }

    // Count usable observations for every worker in the panel.
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for i in 0..panel.len() {
        counts.entry(panel.worker[i]).or_insert(0);
        let usable = match variant {
            MincerVariant::Full => true,
            MincerVariant::PretreatmentOnly => panel.treated_period[i] == 0.0,
        };
        if usable {
            *counts.get_mut(&panel.worker[i]).unwrap() += 1;
        }
    }
    let used: Vec<usize> = (0..panel.len())
        .filter(|&i| {
            let usable = match variant {
                MincerVariant::Full => true,
                MincerVariant::PretreatmentOnly => panel.treated_period[i] == 0.0,
            };
            usable && counts[&panel.worker[i]] >= 2
        })
        .collect();
    if used.is_empty() {
        return Err(Error::Estimation(
            "no worker has two usable wage observations".into(),
        ));
    }

    // Intern workers and years over the fitted rows.
    let mut wid_of: BTreeMap<i64, usize> = BTreeMap::new();
    let mut yid_of: BTreeMap<i32, usize> = BTreeMap::new();
    for &i in &used {
        let next = wid_of.len();
        wid_of.entry(panel.worker[i]).or_insert(next);
        let next = yid_of.len();
        yid_of.entry(panel.year[i]).or_insert(next);
    }
    let wid: Vec<usize> = used.iter().map(|&i| wid_of[&panel.worker[i]]).collect();
    let yid: Vec<usize> = used.iter().map(|&i| yid_of[&panel.year[i]]).collect();
    let n_w = wid_of.len();
    let n_y = yid_of.len();
    let y: Vec<f64> = used.iter().map(|&i| panel.log_wage[i]).collect();

    // Regressors: centered age powers (quadratic up), plus the treated
    // indicator for the full variant.
    let ages: Vec<f64> = used.iter().map(|&i| panel.age[i]).collect();
    let age_center = PROFILE_CENTER_AGE;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for p in 2..=age_powers {
        columns.push(ages.iter().map(|a| (a - age_center).powi(p as i32)).collect());
        names.push(format!("age_c{p}"));
    }
    if variant == MincerVariant::Full {
        columns.push(used.iter().map(|&i| panel.treated_period[i]).collect());
        names.push("treated_period".to_string());
    }
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();

    // Partial the fixed effects out of the outcome and every regressor,
    // then run a single OLS on the fully demeaned data.
    let k = columns.len();
    let mut beta = vec![0.0; k];
    let mut iterations = 0usize;
    if k > 0 {
        let mut yd = y.clone();
        iterations = demean_to_convergence(&mut yd, &wid, &yid, n_w, n_y)?;
        let mut xd = columns.clone();
        let mut absorbed = Vec::new();
        for j in 0..k {
            let orig_norm = l2_norm(&xd[j]);
            let sweeps = demean_to_convergence(&mut xd[j], &wid, &yid, n_w, n_y)?;
            iterations = iterations.max(sweeps);
            if l2_norm(&xd[j]) < ABSORB_TOL * orig_norm.max(f64::MIN_POSITIVE) {
                absorbed.push(names[j].clone());
            }
        }
        if !absorbed.is_empty() {
            return Err(Error::RankDeficient { columns: absorbed });
        }
        beta = ols_solve(&xd, &name_refs, &yd)?;
    }

    // Back out the fixed effects from the residual y − Xβ by alternating
    // means, then normalize the worker effects to mean zero.
    let mut resid = y.clone();
    for j in 0..k {
        for (r, v) in resid.iter_mut().zip(&columns[j]) {
            *r -= beta[j] * v;
        }
    }
    let (mut alpha, mut gamma) = recover_fixed_effects(&resid, &wid, &yid, n_w, n_y)?;
    let alpha_mean = stats::mean(&alpha);
    for a in alpha.iter_mut() {
        *a -= alpha_mean;
    }
    for g in gamma.iter_mut() {
        *g += alpha_mean;
    }

    // Assemble per-worker output over every panel worker, sorted by id.
    let mut worker = Vec::with_capacity(counts.len());
    let mut fe = Vec::with_capacity(counts.len());
    let mut n_obs = Vec::with_capacity(counts.len());
    let mut excluded = Vec::new();
    for (&w, &count) in &counts {
        worker.push(w);
        n_obs.push(count);
        match wid_of.get(&w) {
            Some(&id) => fe.push(alpha[id]),
            None => {
                fe.push(0.0);
                excluded.push(w);
            }
        }
    }
    let mut gamma_pairs: Vec<(i32, f64)> =
        yid_of.iter().map(|(&year, &id)| (year, gamma[id])).collect();
    gamma_pairs.sort_by_key(|(year, _)| *year);

    Ok(AbilityEstimates {
        worker,
        fe,
        n_obs,
        excluded,
        variant,
        gamma: gamma_pairs,
        coefficients: beta,
        coefficient_names: names,
        age_center,
        iterations,
    })
}

/// Joins standardized ability onto a frame by worker id. Rows whose worker
/// never appeared in the panel get the mean ability (zero); their count is
/// reported. The new column keeps `Ability` provenance with the raw
/// (pre-standardization) moments frozen in its metadata.
pub struct AbilityAttachReport {
    pub frame: AnalysisFrame,
    /// Rows whose worker id had no ability estimate.
    pub unmatched_rows: usize,
}

pub fn attach_ability(
    frame: &AnalysisFrame,
    estimates: &AbilityEstimates,
) -> Result<AbilityAttachReport> {
    let worker_ids = frame.worker_ids().ok_or_else(|| Error::MissingColumn(
        "worker id (frame was built without worker identifiers)".into(),
    ))?;
    let mut unmatched_rows = 0usize;
    let raw: Vec<f64> = worker_ids
        .iter()
        .map(|w| match estimates.fe_for(*w) {
            Some(v) => v,
            None => {
                unmatched_rows += 1;
                0.0
            }
        })
        .collect();
    let mean = stats::mean(&raw);
    let sd = stats::population_sd(&raw);
    if sd <= 0.0 {
        return Err(Error::ZeroVariance {
            column: "ability".into(),
        });
    }
    let values: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
    let mut out = frame.clone();
    out.push_column(
        ColumnMeta {
            name: "ability".to_string(),
            kind: ColumnKind::Continuous,
            source: ColumnSource::Ability,
            mean,
            sd,
        },
        values,
    )?;
    Ok(AbilityAttachReport {
        frame: out,
        unmatched_rows,
    })
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One alternating-projection sweep: subtract worker means, then year means.
/// Returns the largest absolute mean subtracted.
fn sweep(values: &mut [f64], wid: &[usize], yid: &[usize], n_w: usize, n_y: usize) -> f64 {
    let mut moved = 0.0f64;
    let mut sum = vec![0.0; n_w];
    let mut cnt = vec![0usize; n_w];
    for (v, &w) in values.iter().zip(wid) {
        sum[w] += v;
        cnt[w] += 1;
    }
    for (s, &c) in sum.iter_mut().zip(&cnt) {
        *s /= c.max(1) as f64;
        moved = moved.max(s.abs());
    }
    for (v, &w) in values.iter_mut().zip(wid) {
        *v -= sum[w];
    }
    let mut sum = vec![0.0; n_y];
    let mut cnt = vec![0usize; n_y];
    for (v, &t) in values.iter().zip(yid) {
        sum[t] += v;
        cnt[t] += 1;
    }
    for (s, &c) in sum.iter_mut().zip(&cnt) {
        *s /= c.max(1) as f64;
        moved = moved.max(s.abs());
    }
    for (v, &t) in values.iter_mut().zip(yid) {
        *v -= sum[t];
    }
    moved
}

/// Repeats `sweep` until no subtracted mean exceeds `FE_TOL` relative to the
/// column's initial magnitude; returns the number of sweeps used.
fn demean_to_convergence(
    values: &mut [f64],
    wid: &[usize],
    yid: &[usize],
    n_w: usize,
    n_y: usize,
) -> Result<usize> {
    let scale = 1.0 + values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut last = f64::INFINITY;
    for iter in 1..=MAX_FE_ITERS {
        last = sweep(values, wid, yid, n_w, n_y);
        if last < FE_TOL * scale {
            return Ok(iter);
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_FE_ITERS,
        last_delta: last,
    })
}

/// Solves r_it ≈ α_i + γ_t by alternating means until neither effect moves
/// by more than `FE_TOL`.
fn recover_fixed_effects(
    resid: &[f64],
    wid: &[usize],
    yid: &[usize],
    n_w: usize,
    n_y: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut alpha = vec![0.0; n_w];
    let mut gamma = vec![0.0; n_y];
    let mut w_cnt = vec![0usize; n_w];
    let mut y_cnt = vec![0usize; n_y];
    for &w in wid {
        w_cnt[w] += 1;
    }
    for &t in yid {
        y_cnt[t] += 1;
    }
    for iter in 1..=MAX_FE_ITERS {
        let mut delta = 0.0f64;
        let mut sum = vec![0.0; n_w];
        for i in 0..resid.len() {
            sum[wid[i]] += resid[i] - gamma[yid[i]];
        }
        for w in 0..n_w {
            let new = sum[w] / w_cnt[w] as f64;
            delta = delta.max((new - alpha[w]).abs());
            alpha[w] = new;
        }
        let mut sum = vec![0.0; n_y];
        for i in 0..resid.len() {
            sum[yid[i]] += resid[i] - alpha[wid[i]];
        }
        for t in 0..n_y {
            let new = sum[t] / y_cnt[t] as f64;
            delta = delta.max((new - gamma[t]).abs());
            gamma[t] = new;
        }
        if delta < FE_TOL {
            return Ok((alpha, gamma));
        }
        if iter == MAX_FE_ITERS {
            return Err(Error::NoConvergence {
                iterations: iter,
                last_delta: delta,
            });
        }
    }
    unreachable!("loop returns or errors at the cap");
}
