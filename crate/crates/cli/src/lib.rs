//! Command-line front end for the `hetfx-core` estimation library:
//! configuration parsing, CSV/SVG input-output, forest persistence, and the
//! staged pipeline that strings the estimators together into report tables.
//!
//! The library half exists so integration tests can drive the exact code the
//! binary runs; `main.rs` is a thin argument-parsing shell around
//! [`pipeline`].

pub mod config;
pub mod csvio;
pub mod error;
pub mod figures;
pub mod forestfile;
pub mod pipeline;
pub mod predicate;

pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
