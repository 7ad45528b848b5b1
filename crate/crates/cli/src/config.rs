//! TOML pipeline configuration.
//!
//! Every analysis choice lives here — input binding, filters, forest
//! hyperparameters, inference options — so a run is fully described by one
//! file plus its required seed. There are deliberately no wall-clock or
//! entropy defaults: the same file always means the same run.

use std::path::{Path, PathBuf};

use hetfx_core::{BlpWeights, DgpConfig, ForestParams, MincerVariant};
use serde::{Deserialize, Serialize};

use crate::csvio::FrameSchema;
use crate::error::{io_config, CliError, CliResult};
use crate::predicate::Expr;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed. Stage seeds derive from it; there is no default.
    pub seed: u64,
    pub input: InputConfig,
    #[serde(default)]
    pub filters: FiltersConfig,
    #[serde(default)]
    pub mincer: MincerConfig,
    /// Nuisance (centering) forest overrides, over the regression defaults.
    #[serde(default)]
    pub nuisance: ForestOverrides,
    /// Causal forest overrides, over the causal defaults.
    #[serde(default)]
    pub causal: ForestOverrides,
    #[serde(default)]
    pub blp: BlpConfig,
    #[serde(default)]
    pub clan: ClanConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Frame CSV path; mutually exclusive with `synthetic`.
    pub frame: Option<PathBuf>,
    /// Wage panel CSV path (needed by the mincer stage with file input).
    pub panel: Option<PathBuf>,
    /// Synthetic generator settings; mutually exclusive with `frame`.
    pub synthetic: Option<DgpConfig>,
    /// Column-role map; required with `frame`, ignored with `synthetic`.
    pub schema: Option<FrameSchema>,
    /// Single-character field delimiter for all CSV input and output.
    pub delimiter: String,
    /// Drop (and count) rows with unparseable, non-finite, or non-binary
    /// cells instead of aborting.
    pub drop_invalid: bool,
}

impl InputConfig {
    pub fn delimiter_byte(&self) -> CliResult<u8> {
        let bytes = self.delimiter.as_bytes();
        if bytes.len() != 1 {
            return Err(CliError::Config(format!(
                "delimiter must be a single byte, got `{}`",
                self.delimiter
            )));
        }
        Ok(bytes[0])
    }
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            frame: None,
            panel: None,
            synthetic: None,
            schema: None,
            delimiter: ",".into(),
            drop_invalid: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiltersConfig {
    /// Vote-margin bandwidth: keep rows with |margin| ≤ h.
    pub bandwidth: Option<f64>,
    /// Predicate expressions applied in order after the bandwidth filter.
    pub subsample: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MincerConfig {
    /// Whether to estimate worker ability from the panel and attach it as a
    /// feature before the forests run.
    pub enabled: bool,
    pub variant: MincerVariant,
    /// Degree of the age polynomial: 0 (no profile) or 2–4. A linear term
    /// is not identified next to worker and year effects.
    pub age_powers: usize,
}

impl Default for MincerConfig {
    fn default() -> Self {
        MincerConfig {
            enabled: false,
            variant: MincerVariant::Full,
            age_powers: 3,
        }
    }
}

/// Optional overrides applied on top of a [`ForestParams`] default set.
/// Absent fields keep the defaults, so configs state only what they change.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestOverrides {
    pub num_trees: Option<usize>,
    pub min_leaf: Option<usize>,
    pub subsample_rate: Option<f64>,
    pub mtry: Option<usize>,
    pub max_depth: Option<u32>,
    pub honesty_fraction: Option<f64>,
    pub boost_stages: Option<usize>,
}

impl ForestOverrides {
    pub fn over(&self, mut base: ForestParams) -> ForestParams {
        if let Some(v) = self.num_trees {
            base.num_trees = v;
        }
        if let Some(v) = self.min_leaf {
            base.min_leaf = v;
        }
        if let Some(v) = self.subsample_rate {
            base.subsample_rate = v;
        }
        if let Some(v) = self.mtry {
            base.mtry = Some(v);
        }
        if let Some(v) = self.max_depth {
            base.max_depth = Some(v as usize);
        }
        if let Some(v) = self.honesty_fraction {
            base.honesty_fraction = v;
        }
        if let Some(v) = self.boost_stages {
            base.boost_stages = v;
        }
        base
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlpConfig {
    pub weights: BlpWeights,
    /// Absorb cluster fixed effects in the BLP regression.
    pub cluster_fe: bool,
    /// Covariates entering the BLP; all frame features when absent.
    pub features: Option<Vec<String>>,
}

impl Default for BlpConfig {
    fn default() -> Self {
        BlpConfig {
            weights: BlpWeights::Balanced,
            cluster_fe: false,
            features: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClanConfig {
    /// Covariates profiled across τ̂ quartiles; all frame features when
    /// absent.
    pub features: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Columns in the correlation matrix; all frame features when absent.
    pub correlation_columns: Option<Vec<String>>,
    /// Extra single-column histogram emitted by `report`.
    pub histogram_column: Option<String>,
    /// Optional vertical marker on that histogram.
    pub histogram_marker: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Bins for every emitted histogram.
    pub histogram_bins: usize,
    /// Whether `pipeline` also persists the fitted causal forest.
    pub write_model: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            histogram_bins: 30,
            write_model: false,
        }
    }
}

impl PipelineConfig {
    /// Parses and validates a config from TOML text.
    pub fn parse(text: &str) -> CliResult<PipelineConfig> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; returns the parsed config plus the raw text so
    /// callers can hash exactly what was on disk.
    pub fn load(path: &Path) -> CliResult<(PipelineConfig, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_config(&format!("read config {}", path.display()), e))?;
        let config = Self::parse(&text)?;
        Ok((config, text))
    }

    pub fn validate(&self) -> CliResult<()> {
        match (&self.input.frame, &self.input.synthetic) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "input declares both `frame` and `synthetic`; pick one".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "input declares neither `frame` nor `synthetic`".into(),
                ))
            }
            (Some(_), None) => {
                let schema = self.input.schema.as_ref().ok_or_else(|| {
                    CliError::Config("file input needs an `input.schema` table".into())
                })?;
                schema.validate()?;
            }
            (None, Some(dgp)) => {
                dgp.validate().map_err(CliError::Core)?;
            }
        }
        self.input.delimiter_byte()?;

        if let Some(h) = self.filters.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(CliError::Config(format!(
                    "filters.bandwidth must be a positive number, got {h}"
                )));
            }
        }
        for text in &self.filters.subsample {
            Expr::parse(text)?;
        }

        if self.mincer.enabled
            && self.input.panel.is_none()
            && self.input.synthetic.is_none()
        {
            return Err(CliError::Config(
                "mincer.enabled needs `input.panel` (or synthetic input)".into(),
            ));
        }
        if self.mincer.enabled && !matches!(self.mincer.age_powers, 0 | 2..=4) {
            return Err(CliError::Config(format!(
                "mincer.age_powers must be 0 or 2 to 4 (a linear age term is \
                 collinear with worker and year effects), got {}",
                self.mincer.age_powers
            )));
        }

        if self.output.histogram_bins < 2 {
            return Err(CliError::Config(
                "output.histogram_bins must be at least 2".into(),
            ));
        }

        // Forest parameters are validated by the estimators, but catching
        // nonsense here attributes it to the config file.
        self.nuisance
            .over(ForestParams::regression_default())
            .validate()
            .map_err(|e| CliError::Config(format!("nuisance: {e}")))?;
        self.causal
            .over(ForestParams::causal_default())
            .validate()
            .map_err(|e| CliError::Config(format!("causal: {e}")))?;
        Ok(())
    }

    pub fn nuisance_params(&self) -> ForestParams {
        self.nuisance.over(ForestParams::regression_default())
    }

    pub fn causal_params(&self) -> ForestParams {
        self.causal.over(ForestParams::causal_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
        seed = 11

        [input]
        delimiter = ","
        [input.synthetic]
        n_municipalities = 40
        workers_per_municipality = 25
        [input.synthetic.tau]
        kind = "constant"
        value = 0.1

        [filters]
        bandwidth = 5.0
        subsample = ["employed_lag == 1 && government_lag == 0"]

        [mincer]
        enabled = true
        variant = "pretreatment_only"
        age_powers = 3

        [nuisance]
        num_trees = 120

        [causal]
        num_trees = 250
        min_leaf = 10

        [blp]
        weights = "none"
        cluster_fe = true

        [clan]
        features = ["age", "university"]

        [output]
        histogram_bins = 25
    "#;

    #[test]
    fn full_config_parses_with_overrides_applied() {
        let config = PipelineConfig::parse(FULL).unwrap();
        assert_eq!(config.seed, 11);
        assert_eq!(config.nuisance_params().num_trees, 120);
        assert_eq!(config.nuisance_params().min_leaf, 5);
        assert_eq!(config.causal_params().num_trees, 250);
        assert_eq!(config.causal_params().min_leaf, 10);
        assert!(matches!(config.blp.weights, BlpWeights::None));
        assert!(config.blp.cluster_fe);
        assert_eq!(config.clan.features.as_deref().unwrap().len(), 2);
        let dgp = config.input.synthetic.as_ref().unwrap();
        assert_eq!(dgp.n_municipalities, 40);
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let err = PipelineConfig::parse("[input]\nframe = \"x.csv\"\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn frame_and_synthetic_are_mutually_exclusive() {
        let text = r#"
            seed = 1
            [input]
            frame = "x.csv"
            [input.schema]
            outcome = "y"
            treatment = "w"
            cluster = "m"
            margin = "margin"
            continuous = ["age"]
            [input.synthetic]
        "#;
        let err = PipelineConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("pick one"), "{err}");
    }

    #[test]
    fn file_input_without_schema_is_rejected() {
        let text = "seed = 1\n[input]\nframe = \"x.csv\"\n";
        let err = PipelineConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("schema"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\nbogus = true\n[input]\n[input.synthetic]\n";
        let err = PipelineConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn bad_predicates_and_bandwidths_fail_validation() {
        let bad_pred = "seed = 1\n[input]\n[input.synthetic]\n[filters]\nsubsample = [\"age <\"]\n";
        assert_eq!(PipelineConfig::parse(bad_pred).unwrap_err().exit_code(), 2);
        let bad_h = "seed = 1\n[input]\n[input.synthetic]\n[filters]\nbandwidth = -1.0\n";
        assert_eq!(PipelineConfig::parse(bad_h).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn mincer_without_a_panel_source_is_rejected() {
        let text = r#"
            seed = 1
            [input]
            frame = "x.csv"
            [input.schema]
            outcome = "y"
            treatment = "w"
            cluster = "m"
            margin = "margin"
            continuous = ["age"]
            [mincer]
            enabled = true
        "#;
        let err = PipelineConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("panel"), "{err}");
    }

    #[test]
    fn bad_forest_overrides_are_attributed_to_the_section() {
        let text = "seed = 1\n[input]\n[input.synthetic]\n[causal]\nsubsample_rate = 1.5\n";
        let err = PipelineConfig::parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("causal"), "{err}");
    }

    #[test]
    fn synthetic_defaults_fill_unstated_fields() {
        let config = PipelineConfig::parse("seed = 3\n[input]\n[input.synthetic]\n").unwrap();
        let dgp = config.input.synthetic.unwrap();
        assert_eq!(dgp.n_municipalities, 200);
        assert_eq!(dgp.panel_years, 9);
    }
}
