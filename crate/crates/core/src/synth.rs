//! Synthetic close-election data generator with exact ground truth.
//!
//! Each municipality holds a leadership election decided by a margin drawn
//! inside a narrow band, so winning is as good as random (optionally tilted
//! by municipal composition to create confounding on purpose). Workers
//! inherit their municipality's treatment status. Worker covariates follow a
//! three-factor latent model — organizational attachment, human capital, and
//! age/experience — with fixed loadings, which keeps every implied
//! correlation matrix positive semi-definite by construction. Treatment
//! effect, propensity, and baseline surfaces are evaluated on the latent
//! standardized scale, so the generator can report exact per-row truth.
//!
//! The generator also emits a wage panel per worker (unbalanced through
//! staggered entry, spanning several birth cohorts) for the
//! ability-extraction stage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::forest::tree::stream_rng;
use crate::frame::{AnalysisFrame, ColumnSpec};
use crate::mincer::WagePanel;
use rand::Rng;

/// Municipality RNG streams live far above the forest tree streams.
const MUNI_STREAM_BASE: u64 = 1 << 42;
/// Elections are decided inside ±MARGIN_BAND percentage points.
const MARGIN_BAND: f64 = 10.0;

/// Conditional treatment-effect surface, evaluated on the latent
/// standardized covariate scale (the Gaussian that generated each
/// covariate, before location/scale/clamping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauSurface {
    /// No effect anywhere.
    Null,
    Constant { value: f64 },
    /// base + jump·1{z_aff > 0}: a sharp step at the median of the
    /// affiliation scale. Because the observed `years_affiliated` column is
    /// a monotone map of z_aff whose clamp bounds lie strictly away from
    /// zero, the step is an exact function of the observed covariate.
    Threshold { base: f64, jump: f64 },
    /// base + affiliation_slope·z_aff + age_slope·z_age.
    Linear {
        base: f64,
        affiliation_slope: f64,
        age_slope: f64,
    },
    /// base + gain·(σ(4·z_aff) − 1/2): a smooth step in attachment.
    Sigmoid { base: f64, gain: f64 },
}

impl TauSurface {
    fn value(&self, z_aff: f64, z_age: f64) -> f64 {
        match self {
            TauSurface::Null => 0.0,
            TauSurface::Constant { value } => *value,
            TauSurface::Threshold { base, jump } => {
                base + if z_aff > 0.0 { *jump } else { 0.0 }
            }
            TauSurface::Linear {
                base,
                affiliation_slope,
                age_slope,
            } => base + affiliation_slope * z_aff + age_slope * z_age,
            TauSurface::Sigmoid { base, gain } => {
                base + gain * (1.0 / (1.0 + (-4.0 * z_aff).exp()) - 0.5)
            }
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            TauSurface::Null => vec![],
            TauSurface::Constant { value } => vec![*value],
            TauSurface::Threshold { base, jump } => vec![*base, *jump],
            TauSurface::Linear {
                base,
                affiliation_slope,
                age_slope,
            } => vec![*base, *affiliation_slope, *age_slope],
            TauSurface::Sigmoid { base, gain } => vec![*base, *gain],
        }
    }
}

/// How election margins relate to municipal composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensitySurface {
    /// Margins are pure uniform draws: winning is a fair coin.
    Random,
    /// Margins are shifted by `lean` times the municipality's attachment
    /// climate, confounding treatment with worker composition.
    Confounded { lean: f64 },
}

impl PropensitySurface {
    fn lean(&self) -> f64 {
        match self {
            PropensitySurface::Random => 0.0,
            PropensitySurface::Confounded { lean } => *lean,
        }
    }
}

/// Outcome family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeSpec {
    /// Employment indicator from a linear probability surface: the success
    /// probability is clamped to [0.005, 0.995] per arm and the reported
    /// true effect is the difference of the clamped arms, so truth stays
    /// exact even at the boundary.
    Binary { base: f64 },
    /// Earnings on the inverse-hyperbolic-sine scale: the systematic wage is
    /// log-normal and the treatment effect is additive after the arsinh
    /// transform.
    Wage { level: f64, noise_sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_municipalities: usize,
    pub workers_per_municipality: usize,
    pub tau: TauSurface,
    pub propensity: PropensitySurface,
    pub outcome: OutcomeSpec,
    /// Standard deviation of the municipality fixed effect in the outcome.
    pub municipality_fe_sd: f64,
    /// Panel length in years (start inclusive, election two years before
    /// the end).
    pub panel_years: usize,
    pub panel_start_year: i32,
    /// Idiosyncratic wage noise (arsinh scale) in the panel.
    pub panel_noise_sd: f64,
    /// Additive wage shift (arsinh scale) in treated periods — what the
    /// pretreatment ability variant exists to avoid.
    pub treated_wage_effect: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_municipalities: 200,
            workers_per_municipality: 100,
            tau: TauSurface::Linear {
                base: 0.10,
                affiliation_slope: 0.05,
                age_slope: -0.02,
            },
            propensity: PropensitySurface::Random,
            outcome: OutcomeSpec::Binary { base: 0.45 },
            municipality_fe_sd: 0.05,
            panel_years: 9,
            panel_start_year: 2006,
            panel_noise_sd: 0.25,
            treated_wage_effect: 0.05,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_municipalities < 2 {
            return Err(Error::InvalidParam(
                "need at least 2 municipalities".into(),
            ));
        }
        if self.workers_per_municipality == 0 || self.workers_per_municipality >= 100_000 {
            return Err(Error::InvalidParam(
                "workers per municipality must be in 1..100000 (worker ids are m*100000+j)"
                    .into(),
            ));
        }
        if self.panel_years < 7 {
            return Err(Error::InvalidParam(
                "panel needs at least 7 years so every staggered entrant has two \
                 pretreatment observations"
                    .into(),
            ));
        }
        let mut params = self.tau.params();
        params.push(self.propensity.lean());
        params.push(self.municipality_fe_sd);
        params.push(self.panel_noise_sd);
        params.push(self.treated_wage_effect);
        match self.outcome {
            OutcomeSpec::Binary { base } => params.push(base),
            OutcomeSpec::Wage { level, noise_sd } => {
                params.push(level);
                params.push(noise_sd);
            }
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "generator configuration".into(),
            });
        }
        if self.municipality_fe_sd < 0.0 || self.panel_noise_sd < 0.0 {
            return Err(Error::InvalidParam(
                "standard deviations must be non-negative".into(),
            ));
        }
        if let OutcomeSpec::Wage { noise_sd, .. } = self.outcome {
            if noise_sd < 0.0 {
                return Err(Error::InvalidParam(
                    "standard deviations must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    fn election_year(&self) -> i32 {
        self.panel_start_year + self.panel_years as i32 - 2
    }
}

/// Exact per-row ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    /// True conditional treatment effect at each row.
    pub tau: Vec<f64>,
    /// Ex-ante probability that the row's municipality is treated.
    pub propensity: Vec<f64>,
    /// True control-arm conditional outcome mean.
    pub mu0: Vec<f64>,
    /// Municipality fixed effect in the outcome.
    pub municipality_fe: Vec<f64>,
    /// Election margin (duplicated from the frame for convenience).
    pub margin: Vec<f64>,
    /// True worker ability (the wage-panel worker effect).
    pub ability: Vec<f64>,
}

/// A generated dataset: analysis frame, per-row truth, and the wage panel.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub frame: AnalysisFrame,
    pub truth: SynthTruth,
    pub panel: WagePanel,
}

/// Covariate roster: (name, kind, loadings [attachment, human capital,
/// age/experience], location/scale/clamp for continuous or share for
/// dummies, gated on employment).
struct CovariateDef {
    name: &'static str,
    dummy: bool,
    load: [f64; 3],
    /// Continuous: (mean, sd, lo, hi). Dummy: (share, _, _, _).
    shape: (f64, f64, f64, f64),
    gated: bool,
}

const ROSTER: [CovariateDef; 12] = [
    CovariateDef { name: "age",                    dummy: false, load: [0.00,  0.00,  0.85], shape: (41.3, 11.3, 18.0, 65.0), gated: false },
    CovariateDef { name: "hs_incomplete",          dummy: true,  load: [0.00, -0.70,  0.00], shape: (0.42, 0.0, 0.0, 0.0),    gated: false },
    CovariateDef { name: "university",             dummy: true,  load: [0.00,  0.70,  0.00], shape: (0.19, 0.0, 0.0, 0.0),    gated: false },
    CovariateDef { name: "male",                   dummy: true,  load: [0.15, -0.10,  0.00], shape: (0.65, 0.0, 0.0, 0.0),    gated: false },
    CovariateDef { name: "years_affiliated",       dummy: false, load: [0.70,  0.00,  0.25], shape: (8.5, 6.4, 0.0, 20.0),    gated: false },
    CovariateDef { name: "newly_affiliated",       dummy: true,  load: [-0.55, 0.00, -0.35], shape: (0.056, 0.0, 0.0, 0.0),   gated: false },
    CovariateDef { name: "employed_lag",           dummy: true,  load: [0.00,  0.45,  0.20], shape: (0.473, 0.0, 0.0, 0.0),   gated: false },
    CovariateDef { name: "government_lag",         dummy: true,  load: [0.15,  0.35,  0.00], shape: (0.234, 0.0, 0.0, 0.0),   gated: true },
    CovariateDef { name: "blue_collar_lag",        dummy: true,  load: [0.00, -0.55,  0.10], shape: (0.269, 0.0, 0.0, 0.0),   gated: true },
    CovariateDef { name: "manager_lag",            dummy: true,  load: [0.20,  0.55,  0.00], shape: (0.045, 0.0, 0.0, 0.0),   gated: true },
    CovariateDef { name: "tenure_lag",             dummy: false, load: [0.00,  0.20,  0.50], shape: (4.8, 4.2, 0.0, 30.0),    gated: true },
    CovariateDef { name: "establishment_size_lag", dummy: false, load: [0.00,  0.35,  0.00], shape: (3.2, 1.5, 0.1, 9.0),     gated: true },
];

/// Index of `years_affiliated` and `age` in the roster (their latent scales
/// feed the effect surfaces).
const IDX_AGE: usize = 0;
const IDX_AFFILIATED: usize = 4;
const IDX_EMPLOYED: usize = 6;

/// One municipality's generated block, kept in a struct so the parallel map
/// can be collected in municipality order.
struct MuniBlock {
    columns: Vec<Vec<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
    cluster: Vec<String>,
    margin: Vec<f64>,
    worker_ids: Vec<i64>,
    tau: Vec<f64>,
    propensity: Vec<f64>,
    mu0: Vec<f64>,
    municipality_fe: Vec<f64>,
    ability: Vec<f64>,
    panel: WagePanel,
}

/// Generates the full synthetic dataset. Every municipality draws from its
/// own RNG stream, so output is reproducible for a fixed seed, independent
/// of thread count, and the first m municipalities are identical across
/// runs that differ only in `n_municipalities`.
pub fn generate(config: &DgpConfig, seed: u64) -> Result<SynthData> {
    config.validate()?;
    let blocks: Vec<MuniBlock> = (0..config.n_municipalities)
        .into_par_iter()
        .map(|m| generate_municipality(config, seed, m))
        .collect();

    let n = config.n_municipalities * config.workers_per_municipality;
    let d = ROSTER.len();
    let mut columns: Vec<Vec<f64>> = (0..d).map(|_| Vec::with_capacity(n)).collect();
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    let mut margin = Vec::with_capacity(n);
    let mut worker_ids = Vec::with_capacity(n);
    let mut truth = SynthTruth {
        tau: Vec::with_capacity(n),
        propensity: Vec::with_capacity(n),
        mu0: Vec::with_capacity(n),
        municipality_fe: Vec::with_capacity(n),
        margin: Vec::with_capacity(n),
        ability: Vec::with_capacity(n),
    };
    let mut panel = WagePanel::default();
    for block in blocks {
        for (j, col) in block.columns.into_iter().enumerate() {
            columns[j].extend(col);
        }
        y.extend(block.y);
        w.extend(block.w);
        cluster.extend(block.cluster);
        margin.extend(block.margin.iter().copied());
        worker_ids.extend(block.worker_ids);
        truth.tau.extend(block.tau);
        truth.propensity.extend(block.propensity);
        truth.mu0.extend(block.mu0);
        truth.municipality_fe.extend(block.municipality_fe);
        truth.margin.extend(block.margin);
        truth.ability.extend(block.ability);
        panel.worker.extend(block.panel.worker);
        panel.year.extend(block.panel.year);
        panel.log_wage.extend(block.panel.log_wage);
        panel.age.extend(block.panel.age);
        panel.treated_period.extend(block.panel.treated_period);
    }

    let specs: Vec<ColumnSpec> = ROSTER
        .iter()
        .map(|def| {
            if def.dummy {
                ColumnSpec::dummy(def.name)
            } else {
                ColumnSpec::continuous(def.name)
            }
        })
        .collect();
    let frame = AnalysisFrame::from_parts(
        specs,
        columns,
        y,
        w,
        &cluster,
        margin,
        Some(worker_ids),
    )?;
    Ok(SynthData {
        frame,
        truth,
        panel,
    })
}

fn generate_municipality(config: &DgpConfig, seed: u64, m: usize) -> MuniBlock {
    let mut rng = stream_rng(seed, MUNI_STREAM_BASE + m as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        normal.inverse_cdf(rng.gen::<f64>().clamp(1e-16, 1.0 - 1e-16))
    };
    let thresholds: Vec<f64> = ROSTER
        .iter()
        .map(|def| {
            if def.dummy {
                normal.inverse_cdf(def.shape.0)
            } else {
                0.0
            }
        })
        .collect();

    // Municipality-level draws, in fixed order.
    let climate = z(&mut rng); // attachment/human-capital climate
    let fe = config.municipality_fe_sd * z(&mut rng);
    let margin_value =
        rng.gen_range(-MARGIN_BAND..MARGIN_BAND) + config.propensity.lean() * climate;
    let treated = margin_value > 0.0;
    let propensity_truth =
        ((MARGIN_BAND + config.propensity.lean() * climate) / (2.0 * MARGIN_BAND)).clamp(0.0, 1.0);

    let n = config.workers_per_municipality;
    let d = ROSTER.len();
    let election_year = config.election_year();
    let mut block = MuniBlock {
        columns: (0..d).map(|_| Vec::with_capacity(n)).collect(),
        y: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
        cluster: Vec::with_capacity(n),
        margin: Vec::with_capacity(n),
        worker_ids: Vec::with_capacity(n),
        tau: Vec::with_capacity(n),
        propensity: Vec::with_capacity(n),
        mu0: Vec::with_capacity(n),
        municipality_fe: Vec::with_capacity(n),
        ability: Vec::with_capacity(n),
        panel: WagePanel::default(),
    };

    for j in 0..n {
        // Worker latent factors, shifted by the municipal climate.
        let attachment = 0.35 * climate + (1.0f64 - 0.35 * 0.35).sqrt() * z(&mut rng);
        let human_capital = 0.20 * climate + (1.0f64 - 0.20 * 0.20).sqrt() * z(&mut rng);
        let experience = z(&mut rng);
        let ability_idio = z(&mut rng);
        let factors = [attachment, human_capital, experience];

        // Latent standardized scale per covariate, then the observed value.
        let mut z_latent = [0.0f64; 12];
        let mut values = [0.0f64; 12];
        for (c, def) in ROSTER.iter().enumerate() {
            let loaded: f64 = def
                .load
                .iter()
                .zip(&factors)
                .map(|(l, f)| l * f)
                .sum();
            let idio = (1.0 - def.load.iter().map(|l| l * l).sum::<f64>()).sqrt();
            z_latent[c] = loaded + idio * z(&mut rng);
            values[c] = if def.dummy {
                (z_latent[c] < thresholds[c]) as usize as f64
            } else {
                let (mean, sd, lo, hi) = def.shape;
                (mean + sd * z_latent[c]).clamp(lo, hi)
            };
        }
        // Employment-gated covariates vanish for the non-employed.
        if values[IDX_EMPLOYED] == 0.0 {
            for (c, def) in ROSTER.iter().enumerate() {
                if def.gated {
                    values[c] = 0.0;
                }
            }
        }

        let tau = config.tau.value(z_latent[IDX_AFFILIATED], z_latent[IDX_AGE]);
        let ability = 0.5 * human_capital + 0.3 * attachment + 0.4 * ability_idio;

        // Outcome.
        let u = rng.gen::<f64>();
        let eps_wage = z(&mut rng);
        let (y_value, tau_truth, mu0_truth) = match config.outcome {
            OutcomeSpec::Binary { base } => {
                let p0 = base + 0.10 * human_capital + 0.06 * attachment + 0.04 * experience + fe;
                let p0c = p0.clamp(0.005, 0.995);
                let p1c = (p0 + tau).clamp(0.005, 0.995);
                let p = if treated { p1c } else { p0c };
                (((p - u) > 0.0) as usize as f64, p1c - p0c, p0c)
            }
            OutcomeSpec::Wage { level, noise_sd } => {
                let systematic_wage =
                    (level + 0.30 * human_capital + 0.12 * attachment + fe).exp();
                let mu0 = systematic_wage.asinh();
                let y = mu0
                    + noise_sd * eps_wage
                    + if treated { tau } else { 0.0 };
                (y, tau, mu0)
            }
        };

        let worker_id = (m as i64) * 100_000 + j as i64;
        for (c, v) in values.iter().enumerate() {
            block.columns[c].push(*v);
        }
        block.y.push(y_value);
        block.w.push(if treated { 1.0 } else { 0.0 });
        block.cluster.push(format!("{m:05}"));
        block.margin.push(margin_value);
        block.worker_ids.push(worker_id);
        block.tau.push(tau_truth);
        block.propensity.push(propensity_truth);
        block.mu0.push(mu0_truth);
        block.municipality_fe.push(fe);
        block.ability.push(ability);

        // Wage panel with staggered entry. The wage profile is a calendar
        // trend plus quadratic age curvature around 40 — the form identified
        // under two-way fixed effects (a linear age term would be absorbed
        // into the worker and year effects and poison the ability truth).
        let entry = rng.gen_range(0..4u8) as i32;
        let age_now = values[IDX_AGE];
        for t in 0..config.panel_years as i32 {
            if t < entry {
                continue;
            }
            let year = config.panel_start_year + t;
            let age_then = age_now - (election_year - year) as f64;
            let treated_period = treated && year >= election_year;
            let ac = age_then - 40.0;
            let wage = 1.9
                + ability
                + 0.015 * (year - config.panel_start_year) as f64
                - 0.0008 * ac * ac
                + if treated_period {
                    config.treated_wage_effect
                } else {
                    0.0
                }
                + config.panel_noise_sd * z(&mut rng);
            block.panel.worker.push(worker_id);
            block.panel.year.push(year);
            block.panel.log_wage.push(wage);
            block.panel.age.push(age_then);
            block.panel.treated_period.push(if treated_period { 1.0 } else { 0.0 });
        }
    }
    block
}
