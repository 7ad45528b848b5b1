//! Shared forest hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestParams {
    pub num_trees: usize,
    /// Minimum rows per leaf. For honest causal trees this binds on the
    /// estimate set (and, during split search, on the split set).
    pub min_leaf: usize,
    /// Fraction of clusters drawn (without replacement) for each tree.
    pub subsample_rate: f64,
    /// Features tried per split; defaults to ceil(sqrt(d)).
    pub mtry: Option<usize>,
    /// None grows until leaf constraints stop splitting; Some(0) keeps a
    /// single root leaf.
    pub max_depth: Option<usize>,
    /// Fraction of each tree's in-bag clusters assigned to the split set;
    /// the remainder estimates leaf effects. Only causal forests honor this.
    /// 0.0 puts every in-bag row in the estimate set and is only valid with
    /// max_depth = Some(0) or a forced partition.
    pub honesty_fraction: f64,
    /// Regression forests only: 0 or 1 residual boosting stages.
    pub boost_stages: usize,
}

impl ForestParams {
    /// Defaults for nuisance regression forests.
    pub fn regression_default() -> Self {
        ForestParams {
            num_trees: 500,
            min_leaf: 5,
            subsample_rate: 0.5,
            mtry: None,
            max_depth: None,
            honesty_fraction: 0.5,
            boost_stages: 0,
        }
    }

    /// Defaults for the honest causal forest.
    pub fn causal_default() -> Self {
        ForestParams {
            num_trees: 2000,
            ..Self::regression_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 {
            return Err(Error::InvalidParam("num_trees must be >= 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidParam("min_leaf must be >= 1".into()));
        }
        if !(self.subsample_rate > 0.0 && self.subsample_rate <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "subsample_rate must be in (0, 1], got {}",
                self.subsample_rate
            )));
        }
        if !(0.0..1.0).contains(&self.honesty_fraction) {
            return Err(Error::InvalidParam(format!(
                "honesty_fraction must be in [0, 1), got {}",
                self.honesty_fraction
            )));
        }
        if let Some(m) = self.mtry {
            if m == 0 {
                return Err(Error::InvalidParam("mtry must be >= 1".into()));
            }
        }
        if self.boost_stages > 1 {
            return Err(Error::InvalidParam(
                "boost_stages must be 0 or 1".into(),
            ));
        }
        Ok(())
    }

    /// Features tried per split for a frame with `d` features.
    pub fn mtry_for(&self, d: usize) -> usize {
        match self.mtry {
            Some(m) => m.min(d),
            None => ((d as f64).sqrt().ceil() as usize).clamp(1, d),
        }
    }
}
