//! Heterogeneous treatment-effect estimation for clustered observational
//! designs, built around honest causal forests.
//!
//! The crate covers the full estimation pipeline:
//!
//! - [`frame`]: a validated rectangular dataset with cluster structure,
//!   column provenance metadata, and an optional panel linkage key.
//! - [`transform`]: bandwidth filtering, standardization, leave-one-out
//!   cluster mean encoding, and deterministic subsampling.
//! - [`forest`]: regression forests for nuisance surfaces and honest causal
//!   forests with cluster-aware subsampling, little-bag variance estimates,
//!   and a calibration test for the fitted effects.
//! - [`nuisance`]: local centering (cross-fit outcome and propensity
//!   residuals) and an observable-bias diagnostic built from conditional
//!   arm means.
//! - [`wls`]: weighted least squares with cluster-robust standard errors,
//!   shared by the calibration and projection stages.
//! - [`inference`]: the best linear projection of fitted effects onto
//!   interpretable covariates, and sorted-group (quartile) profiling.
//! - [`mincer`]: two-way fixed-effects wage regressions that extract worker
//!   ability from panel data, with a pretreatment-only variant.
//! - [`synth`]: a close-elections data generator with exact per-row ground
//!   truth, for calibration studies and end-to-end tests.
//! - [`oracle`]: tiny independent reference implementations used by tests.
//!
//! Every randomized component takes an explicit seed and draws from
//! dedicated RNG streams, so results are reproducible and independent of
//! thread count.

pub mod error;
pub mod forest;
pub mod frame;
pub mod inference;
pub mod mincer;
pub mod nuisance;
pub mod oracle;
pub mod params;
pub mod stats;
pub mod synth;
pub mod transform;
pub mod wls;

pub use error::{Error, ErrorCategory, Result};
pub use forest::{
    calibration_from_predictions, fit_causal_forest, fit_forced_partition,
    fit_regression_forest, CalibrationCoefficient, CalibrationReport, CateEstimates,
    CausalForest, CausalTree, ForestSnapshot, ForestTarget, RegressionForestModel, SpecNode,
};
pub use frame::{AnalysisFrame, ColumnKind, ColumnMeta, ColumnSource, ColumnSpec};
pub use inference::{blp, clan, rescale_dummy, BlpResult, BlpTerm, BlpWeights, ClanFeature, ClanResult};
pub use mincer::{attach_ability, fit_mincer, AbilityEstimates, MincerVariant, WagePanel};
pub use nuisance::{bias, center, fit_conditional_means, BiasEstimate, BiasSummary, CenteredSample, ConditionalMeans};
pub use params::ForestParams;
pub use synth::{generate, DgpConfig, OutcomeSpec, PropensitySurface, SynthData, SynthTruth, TauSurface};
pub use wls::{wls_cluster, WlsFit};
