//! Causal-forest persistence: a JSON-lines file whose first line is a
//! header (format tag, version, training-data digest, feature names, and
//! the forest's structural snapshot) followed by one tree per line.
//!
//! The digest ties a model file to the exact frame it was trained on, so a
//! later `diagnose`/`blp`/`clan` invocation that reconstructs a different
//! frame fails loudly instead of scoring the wrong data.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use hetfx_core::{AnalysisFrame, CausalForest, CausalTree, ForestSnapshot};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_config, CliError, CliResult};

pub const FOREST_FORMAT: &str = "hetfx-causal-forest";
pub const FOREST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestHeader {
    pub format: String,
    pub version: u32,
    /// Hex SHA-256 of the training frame's canonical byte serialization.
    pub data_sha256: String,
    /// Feature names in training order; prediction frames must match.
    pub feature_names: Vec<String>,
    pub snapshot: ForestSnapshot,
}

/// Canonical digest of a frame's contents: dimensions, column names, and
/// every cell's exact bits, in row order.
pub fn frame_digest(frame: &AnalysisFrame) -> String {
    let mut hasher = Sha256::new();
    hasher.update((frame.n_rows() as u64).to_le_bytes());
    hasher.update((frame.n_features() as u64).to_le_bytes());
    for meta in frame.columns() {
        hasher.update(meta.name.as_bytes());
        hasher.update([0u8]);
    }
    for i in 0..frame.n_rows() {
        hasher.update(frame.cluster_labels()[frame.cluster()[i]].as_bytes());
        hasher.update([0u8]);
        hasher.update(frame.margin()[i].to_le_bytes());
        hasher.update(frame.y()[i].to_le_bytes());
        hasher.update(frame.w()[i].to_le_bytes());
        for j in 0..frame.n_features() {
            hasher.update(frame.xij(i, j).to_le_bytes());
        }
    }
    if let Some(ids) = frame.worker_ids() {
        for id in ids {
            hasher.update(id.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

/// Hex SHA-256 of arbitrary bytes (config hashing, manifest entries).
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Serializes a fitted forest to JSON-lines bytes.
pub fn render_forest(forest: &CausalForest, frame: &AnalysisFrame) -> Vec<u8> {
    let header = ForestHeader {
        format: FOREST_FORMAT.to_string(),
        version: FOREST_VERSION,
        data_sha256: frame_digest(frame),
        feature_names: frame.columns().iter().map(|c| c.name.clone()).collect(),
        snapshot: forest.snapshot(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for tree in &forest.trees {
        out.extend_from_slice(&serde_json::to_vec(tree).expect("tree serializes"));
        out.push(b'\n');
    }
    out
}

/// Loads and structurally validates a forest file. The caller audits the
/// data digest separately once it has reconstructed the frame.
pub fn load_forest(path: &Path) -> CliResult<(CausalForest, ForestHeader)> {
    let file =
        std::fs::File::open(path).map_err(|e| io_config(&format!("open {}", path.display()), e))?;
    read_forest(BufReader::new(file), &path.display().to_string())
}

fn read_forest<R: Read>(reader: BufReader<R>, origin: &str) -> CliResult<(CausalForest, ForestHeader)> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CliError::Validation(format!("{origin}: model file is empty")))?
        .map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
    let header: ForestHeader = serde_json::from_str(&header_line)
        .map_err(|e| CliError::Validation(format!("{origin}: malformed model header: {e}")))?;
    if header.format != FOREST_FORMAT {
        return Err(CliError::Validation(format!(
            "{origin}: not a causal-forest model file (format `{}`)",
            header.format
        )));
    }
    if header.version != FOREST_VERSION {
        return Err(CliError::Validation(format!(
            "{origin}: unsupported model version {} (expected {FOREST_VERSION})",
            header.version
        )));
    }

    let mut trees: Vec<CausalTree> = Vec::with_capacity(header.snapshot.n_trees);
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let tree: CausalTree = serde_json::from_str(&line).map_err(|e| {
            CliError::Validation(format!("{origin}: malformed tree on line {}: {e}", k + 2))
        })?;
        trees.push(tree);
    }
    let forest = CausalForest::restore(header.snapshot.clone(), trees)
        .map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
    Ok((forest, header))
}

/// Confirms a reconstructed frame matches the model's training data.
pub fn audit_digest(header: &ForestHeader, frame: &AnalysisFrame) -> CliResult<()> {
    let names: Vec<&str> = frame.columns().iter().map(|c| c.name.as_str()).collect();
    let expected: Vec<&str> = header.feature_names.iter().map(String::as_str).collect();
    if names != expected {
        return Err(CliError::Validation(format!(
            "frame columns {names:?} do not match the model's training columns {expected:?}"
        )));
    }
    let digest = frame_digest(frame);
    if digest != header.data_sha256 {
        return Err(CliError::Validation(format!(
            "frame digest {digest} does not match the model's training digest {} — \
             the configuration no longer reconstructs the training data",
            header.data_sha256
        )));
    }
    Ok(())
}
