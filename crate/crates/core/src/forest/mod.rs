//! Forest estimators: shared tree plumbing, regression forests for nuisance
//! functions, and the honest causal forest.

pub mod causal;
pub mod regression;
pub mod tree;

pub use causal::{
    calibration_from_predictions, fit_causal_forest, fit_forced_partition, CalibrationCoefficient,
    CalibrationReport, CateEstimates, CausalForest, CausalTree, ForestSnapshot, SpecNode,
};
pub use regression::{fit_regression_forest, ForestTarget, RegressionForestModel, RegressionTree};
pub use tree::Node;
