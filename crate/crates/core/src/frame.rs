//! The analysis frame: one row per worker-election observation, with an
//! outcome, a binary treatment, a cluster (municipality) id, a cluster-level
//! vote margin, and a feature matrix described by column metadata.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    /// Binary indicator; raw values must be exactly 0 or 1.
    Dummy,
}

/// Where a column's current values came from. Transform operations update
/// this so later stages know, e.g., which columns were standardized and can
/// be rescaled back to natural units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnSource {
    Raw,
    Standardized,
    MeanEncoded,
    Ability,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    pub source: ColumnSource,
    /// Mean of the values. Once a column is standardized this freezes at the
    /// pre-standardization mean so estimates can be rescaled to natural units.
    pub mean: f64,
    /// Population standard deviation, frozen analogously. For a raw dummy
    /// with share p this equals sqrt(p(1-p)).
    pub sd: f64,
}

/// Column name and kind supplied when building a frame; moments are computed
/// during construction.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn continuous(name: &str) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Continuous,
        }
    }

    pub fn dummy(name: &str) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Dummy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisFrame {
    columns: Vec<ColumnMeta>,
    /// Column-major feature storage: `x[j][i]` is feature j of row i.
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    /// Binary treatment stored as 0.0 / 1.0.
    w: Vec<f64>,
    /// Dense cluster index per row, numbered in order of first appearance.
    cluster: Vec<usize>,
    cluster_labels: Vec<String>,
    /// Row lists per cluster id.
    cluster_rows: Vec<Vec<u32>>,
    /// Vote margin (percentage points), identical for all rows of a cluster.
    margin: Vec<f64>,
    /// Optional worker identifier used to join ability estimates.
    worker_ids: Option<Vec<i64>>,
}

impl AnalysisFrame {
    /// Builds and validates a frame from raw parts. `x` is column-major and
    /// must match `specs` in length; cluster keys are interned into dense ids
    /// in order of first appearance.
    pub fn from_parts(
        specs: Vec<ColumnSpec>,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        w: Vec<f64>,
        cluster_keys: &[String],
        margin: Vec<f64>,
        worker_ids: Option<Vec<i64>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyFrame {
                context: "frame construction".into(),
            });
        }
        if specs.len() != x.len() {
            return Err(Error::LengthMismatch {
                context: format!("{} column specs vs {} columns", specs.len(), x.len()),
            });
        }
        for (spec, col) in specs.iter().zip(&x) {
            if col.len() != n {
                return Err(Error::LengthMismatch {
                    context: format!(
                        "column `{}` has {} rows, outcome has {}",
                        spec.name,
                        col.len(),
                        n
                    ),
                });
            }
        }
        for (what, len) in [
            ("treatment", w.len()),
            ("cluster", cluster_keys.len()),
            ("margin", margin.len()),
        ] {
            if len != n {
                return Err(Error::LengthMismatch {
                    context: format!("{what} has {len} rows, outcome has {n}"),
                });
            }
        }
        if let Some(ids) = &worker_ids {
            if ids.len() != n {
                return Err(Error::LengthMismatch {
                    context: format!("worker ids have {} rows, outcome has {}", ids.len(), n),
                });
            }
        }

        let mut names = HashMap::with_capacity(specs.len());
        for (j, spec) in specs.iter().enumerate() {
            if names.insert(spec.name.clone(), j).is_some() {
                return Err(Error::DuplicateColumn(spec.name.clone()));
            }
        }

        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("outcome, row {i}"),
                });
            }
        }
        for (i, v) in w.iter().enumerate() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::NonBinaryTreatment { row: i, value: *v });
            }
        }
        for (i, v) in margin.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("margin, row {i}"),
                });
            }
        }
        for (spec, col) in specs.iter().zip(&x) {
            for (i, v) in col.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("column `{}`, row {}", spec.name, i),
                    });
                }
                if spec.kind == ColumnKind::Dummy && *v != 0.0 && *v != 1.0 {
                    return Err(Error::NonBinaryDummy {
                        column: spec.name.clone(),
                        row: i,
                        value: *v,
                    });
                }
            }
        }

        // Intern clusters in first-appearance order.
        let mut ids = HashMap::new();
        let mut cluster = Vec::with_capacity(n);
        let mut cluster_labels = Vec::new();
        for key in cluster_keys {
            let next = cluster_labels.len();
            let id = *ids.entry(key.clone()).or_insert_with(|| {
                cluster_labels.push(key.clone());
                next
            });
            cluster.push(id);
        }

        // Margin must be constant within a cluster.
        let mut first_margin = vec![f64::NAN; cluster_labels.len()];
        for (i, &c) in cluster.iter().enumerate() {
            if first_margin[c].is_nan() {
                first_margin[c] = margin[i];
            } else if first_margin[c] != margin[i] {
                return Err(Error::InconsistentMargin {
                    cluster: cluster_labels[c].clone(),
                });
            }
        }

        let columns = specs
            .into_iter()
            .zip(&x)
            .map(|(spec, col)| ColumnMeta {
                name: spec.name,
                kind: spec.kind,
                source: ColumnSource::Raw,
                mean: stats::mean(col),
                sd: stats::population_sd(col),
            })
            .collect();

        let mut frame = AnalysisFrame {
            columns,
            x,
            y,
            w,
            cluster,
            cluster_labels,
            cluster_rows: Vec::new(),
            margin,
            worker_ids,
        };
        frame.rebuild_cluster_rows();
        Ok(frame)
    }

    fn rebuild_cluster_rows(&mut self) {
        let mut rows = vec![Vec::new(); self.cluster_labels.len()];
        for (i, &c) in self.cluster.iter().enumerate() {
            rows[c].push(i as u32);
        }
        self.cluster_rows = rows;
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.x[j]
    }

    pub fn feature_by_name(&self, name: &str) -> Result<&[f64]> {
        self.column_index(name)
            .map(|j| self.x[j].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// Dense cluster id per row.
    pub fn cluster(&self) -> &[usize] {
        &self.cluster
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    /// Rows belonging to each cluster id.
    pub fn cluster_rows(&self) -> &[Vec<u32>] {
        &self.cluster_rows
    }

    pub fn margin(&self) -> &[f64] {
        &self.margin
    }

    pub fn worker_ids(&self) -> Option<&[i64]> {
        self.worker_ids.as_deref()
    }

    /// Copies row `i` of the feature matrix into `out`.
    pub fn row_features(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.x.iter().map(|col| col[i]));
    }

    /// Value of feature `j` at row `i`.
    #[inline]
    pub fn xij(&self, i: usize, j: usize) -> f64 {
        self.x[j][i]
    }

    /// Keeps exactly the rows with `keep[i] == true`. Column moments are
    /// recomputed for non-standardized columns; standardized columns keep
    /// their frozen pre-standardization moments. Worker ids and cluster
    /// labels shrink consistently.
    pub fn filter_rows(&self, keep: &[bool]) -> Result<AnalysisFrame> {
        if keep.len() != self.n_rows() {
            return Err(Error::LengthMismatch {
                context: format!("{} mask entries vs {} rows", keep.len(), self.n_rows()),
            });
        }
        let kept: Vec<usize> = (0..self.n_rows()).filter(|&i| keep[i]).collect();
        if kept.is_empty() {
            return Err(Error::EmptyFrame {
                context: "row filter".into(),
            });
        }
        let take = |v: &[f64]| kept.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let x: Vec<Vec<f64>> = self.x.iter().map(|col| take(col)).collect();
        let cluster_keys: Vec<String> = kept
            .iter()
            .map(|&i| self.cluster_labels[self.cluster[i]].clone())
            .collect();

        let mut columns = self.columns.clone();
        for (meta, col) in columns.iter_mut().zip(&x) {
            if meta.source != ColumnSource::Standardized {
                meta.mean = stats::mean(col);
                meta.sd = stats::population_sd(col);
            }
        }

        let mut ids = HashMap::new();
        let mut cluster = Vec::with_capacity(kept.len());
        let mut cluster_labels = Vec::new();
        for key in &cluster_keys {
            let next = cluster_labels.len();
            let id = *ids.entry(key.clone()).or_insert_with(|| {
                cluster_labels.push(key.clone());
                next
            });
            cluster.push(id);
        }

        let mut frame = AnalysisFrame {
            columns,
            x,
            y: take(&self.y),
            w: take(&self.w),
            cluster,
            cluster_labels,
            cluster_rows: Vec::new(),
            margin: take(&self.margin),
            worker_ids: self
                .worker_ids
                .as_ref()
                .map(|ids| kept.iter().map(|&i| ids[i]).collect()),
        };
        frame.rebuild_cluster_rows();
        Ok(frame)
    }

    /// Appends a column with explicit metadata (used by transforms that add
    /// derived columns such as mean encodings or ability).
    pub fn push_column(&mut self, meta: ColumnMeta, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_rows() {
            return Err(Error::LengthMismatch {
                context: format!(
                    "new column `{}` has {} rows, frame has {}",
                    meta.name,
                    values.len(),
                    self.n_rows()
                ),
            });
        }
        if self.column_index(&meta.name).is_some() {
            return Err(Error::DuplicateColumn(meta.name));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("column `{}`, row {}", meta.name, i),
                });
            }
        }
        self.columns.push(meta);
        self.x.push(values);
        Ok(())
    }

    /// Replaces the values of column `j` in place and updates its metadata.
    pub(crate) fn set_column(&mut self, j: usize, meta: ColumnMeta, values: Vec<f64>) {
        self.columns[j] = meta;
        self.x[j] = values;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_frame() -> AnalysisFrame {
        // Two clusters, four rows.
        AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1"), ColumnSpec::dummy("d1")],
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 1.0]],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0, 0.0],
            &["a".into(), "a".into(), "b".into(), "b".into()],
            vec![2.5, 2.5, -1.0, -1.0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn interns_clusters_in_first_appearance_order() {
        let f = toy_frame();
        assert_eq!(f.cluster(), &[0, 0, 1, 1]);
        assert_eq!(f.cluster_labels(), &["a".to_string(), "b".to_string()]);
        assert_eq!(f.cluster_rows()[1], vec![2, 3]);
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let err = AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1")],
            vec![vec![1.0, 2.0]],
            vec![0.0, 1.0],
            vec![0.0, 0.5],
            &["a".into(), "a".into()],
            vec![0.0, 0.0],
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::NonBinaryTreatment { row: 1, value } if value == 0.5
        ));
    }

    #[test]
    fn rejects_margin_that_varies_within_cluster() {
        let err = AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1")],
            vec![vec![1.0, 2.0]],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            &["a".into(), "a".into()],
            vec![0.0, 0.1],
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InconsistentMargin { .. }));
    }

    #[test]
    fn dummy_meta_sd_is_sqrt_p_one_minus_p() {
        let f = toy_frame();
        let meta = &f.columns()[1];
        // share p = 0.5 -> sd = 0.5
        assert!((meta.sd - 0.5).abs() < 1e-15);
        assert!((meta.mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn filter_rows_shrinks_cluster_set() {
        let f = toy_frame();
        let g = f.filter_rows(&[true, true, false, false]).unwrap();
        assert_eq!(g.n_rows(), 2);
        assert_eq!(g.n_clusters(), 1);
        assert_eq!(g.cluster_labels(), &["a".to_string()]);
    }

    #[test]
    fn filter_to_nothing_is_an_error() {
        let f = toy_frame();
        let err = f.filter_rows(&[false; 4]).unwrap_err();
        assert!(matches!(err, Error::EmptyFrame { .. }));
    }
}
