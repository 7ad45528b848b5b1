//! CSV ingestion and emission.
//!
//! Input files need a header row; `#`-prefixed lines are comments; the
//! delimiter is configurable (comma by default). Floats are written with
//! Rust's shortest round-trip formatting, so a load → write → load cycle
//! preserves every finite cell bit-exactly.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use hetfx_core::{AnalysisFrame, CenteredSample, ColumnSpec, WagePanel};
use serde::{Deserialize, Serialize};

use crate::error::{io_config, CliError, CliResult};

/// Column-role map describing how a frame CSV's headers bind to the
/// analysis roles. Features keep the order they have in the file's header,
/// so loading what [`render_frame`] wrote reproduces the frame exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct FrameSchema {
    pub outcome: String,
    pub treatment: String,
    pub cluster: String,
    pub margin: String,
    #[serde(default)]
    pub worker_id: Option<String>,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub dummies: Vec<String>,
}

impl FrameSchema {
    /// Schema matching the synthetic generator's emitted frame CSV.
    pub fn synthetic() -> FrameSchema {
        FrameSchema {
            outcome: "y".into(),
            treatment: "w".into(),
            cluster: "municipality".into(),
            margin: "margin".into(),
            worker_id: Some("worker_id".into()),
            continuous: vec![
                "age".into(),
                "years_affiliated".into(),
                "tenure_lag".into(),
                "establishment_size_lag".into(),
            ],
            dummies: vec![
                "hs_incomplete".into(),
                "university".into(),
                "male".into(),
                "newly_affiliated".into(),
                "employed_lag".into(),
                "government_lag".into(),
                "blue_collar_lag".into(),
                "manager_lag".into(),
            ],
        }
    }

    /// All role headers the schema expects to find in the file.
    fn required_headers(&self) -> Vec<&str> {
        let mut out = vec![
            self.outcome.as_str(),
            self.treatment.as_str(),
            self.cluster.as_str(),
            self.margin.as_str(),
        ];
        if let Some(wid) = &self.worker_id {
            out.push(wid.as_str());
        }
        out.extend(self.continuous.iter().map(String::as_str));
        out.extend(self.dummies.iter().map(String::as_str));
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        let mut seen = BTreeSet::new();
        for name in self.required_headers() {
            if name.is_empty() {
                return Err(CliError::Config("schema names an empty column".into()));
            }
            if !seen.insert(name) {
                return Err(CliError::Config(format!(
                    "schema assigns column `{name}` to more than one role"
                )));
            }
        }
        if self.continuous.is_empty() && self.dummies.is_empty() {
            return Err(CliError::Config(
                "schema declares no feature columns".into(),
            ));
        }
        Ok(())
    }

}

/// One feature column resolved against a header: position, spec, kind.
struct FeatureCol {
    at: usize,
    spec: ColumnSpec,
    dummy: bool,
}

/// A loaded frame plus the count of rows dropped under `drop_invalid`.
#[derive(Debug)]
pub struct LoadedFrame {
    pub frame: AnalysisFrame,
    pub dropped: usize,
}

/// Reads a frame CSV against a schema. Invalid rows (unparseable or
/// non-finite cells, non-binary treatment or dummy values) abort with the
/// 1-based data row number unless `drop_invalid` is set, in which case they
/// are dropped and counted. Frame-level invariants (duplicate headers,
/// inconsistent within-cluster margins, empty result) always abort.
pub fn load_frame(
    path: &Path,
    schema: &FrameSchema,
    delimiter: u8,
    drop_invalid: bool,
) -> CliResult<LoadedFrame> {
    schema.validate()?;
    let mut reader = reader(path, delimiter)?;

    let headers = reader
        .headers()
        .map_err(|e| CliError::Config(format!("{}: cannot read header: {e}", path.display())))?
        .clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (j, name) in headers.iter().enumerate() {
        if index.insert(name, j).is_some() {
            return Err(CliError::Config(format!(
                "{}: duplicate column `{name}` in header",
                path.display()
            )));
        }
    }
    let col = |name: &str| -> CliResult<usize> {
        index.get(name).copied().ok_or_else(|| {
            CliError::Config(format!(
                "{}: schema column `{name}` missing from header",
                path.display()
            ))
        })
    };

    let outcome_at = col(&schema.outcome)?;
    let treatment_at = col(&schema.treatment)?;
    let cluster_at = col(&schema.cluster)?;
    let margin_at = col(&schema.margin)?;
    let worker_at = schema
        .worker_id
        .as_deref()
        .map(|name| col(name))
        .transpose()?;
    let mut features: Vec<FeatureCol> = Vec::new();
    for name in &schema.continuous {
        features.push(FeatureCol {
            at: col(name)?,
            spec: ColumnSpec::continuous(name),
            dummy: false,
        });
    }
    for name in &schema.dummies {
        features.push(FeatureCol {
            at: col(name)?,
            spec: ColumnSpec::dummy(name),
            dummy: true,
        });
    }
    // Keep the file's column order so load(render(frame)) returns the
    // frame's features in their original positions.
    features.sort_by_key(|f| f.at);

    let n_features = features.len();
    let mut x: Vec<Vec<f64>> = vec![Vec::new(); n_features];
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut cluster = Vec::new();
    let mut margin = Vec::new();
    let mut workers: Vec<i64> = Vec::new();
    let mut dropped = 0usize;

    // Reused per-row scratch so a dropped row leaves no residue.
    let mut row_x = vec![0.0; n_features];

    for (data_row, record) in reader.records().enumerate() {
        let row_no = data_row + 1;
        let record = record.map_err(|e| {
            CliError::Validation(format!("{}: row {row_no}: {e}", path.display()))
        })?;
        let parsed = parse_row(
            &record,
            row_no,
            outcome_at,
            treatment_at,
            margin_at,
            worker_at,
            &features,
            schema,
            &mut row_x,
        );
        match parsed {
            Ok((yi, wi, mi, widi)) => {
                y.push(yi);
                w.push(wi);
                margin.push(mi);
                cluster.push(
                    record
                        .get(cluster_at)
                        .unwrap_or_default()
                        .trim()
                        .to_string(),
                );
                if let Some(id) = widi {
                    workers.push(id);
                }
                for (dest, v) in x.iter_mut().zip(&row_x) {
                    dest.push(*v);
                }
            }
            Err(problem) => {
                if drop_invalid {
                    dropped += 1;
                } else {
                    return Err(CliError::Validation(format!(
                        "{}: {problem} (set drop_invalid to skip such rows)",
                        path.display()
                    )));
                }
            }
        }
    }

    let frame = AnalysisFrame::from_parts(
        features.into_iter().map(|f| f.spec).collect(),
        x,
        y,
        w,
        &cluster,
        margin,
        worker_at.map(|_| workers),
    )?;
    Ok(LoadedFrame { frame, dropped })
}

/// Parses one record into (y, w, margin, worker_id), filling `row_x` with
/// the feature values. Any per-row defect returns a message naming the row.
#[allow(clippy::too_many_arguments)]
fn parse_row(
    record: &csv::StringRecord,
    row_no: usize,
    outcome_at: usize,
    treatment_at: usize,
    margin_at: usize,
    worker_at: Option<usize>,
    features: &[FeatureCol],
    schema: &FrameSchema,
    row_x: &mut [f64],
) -> Result<(f64, f64, f64, Option<i64>), String> {
    let cell = |at: usize, name: &str| -> Result<f64, String> {
        let raw = record
            .get(at)
            .ok_or_else(|| format!("row {row_no}: missing cell for `{name}`"))?
            .trim();
        let v: f64 = raw
            .parse()
            .map_err(|_| format!("row {row_no}: `{name}` value `{raw}` is not a number"))?;
        if !v.is_finite() {
            return Err(format!("row {row_no}: `{name}` value `{raw}` is not finite"));
        }
        Ok(v)
    };
    let binary = |at: usize, name: &str| -> Result<f64, String> {
        let v = cell(at, name)?;
        if v != 0.0 && v != 1.0 {
            return Err(format!(
                "row {row_no}: `{name}` value {v} is not binary (expected 0 or 1)"
            ));
        }
        Ok(v)
    };

    let yi = cell(outcome_at, &schema.outcome)?;
    let wi = binary(treatment_at, &schema.treatment)?;
    let mi = cell(margin_at, &schema.margin)?;
    let widi = match worker_at {
        Some(at) => {
            let name = schema.worker_id.as_deref().unwrap_or("worker_id");
            let raw = record
                .get(at)
                .ok_or_else(|| format!("row {row_no}: missing cell for `{name}`"))?
                .trim();
            let id: i64 = raw
                .parse()
                .map_err(|_| format!("row {row_no}: `{name}` value `{raw}` is not an integer"))?;
            Some(id)
        }
        None => None,
    };
    for (k, feat) in features.iter().enumerate() {
        row_x[k] = if feat.dummy {
            binary(feat.at, &feat.spec.name)?
        } else {
            cell(feat.at, &feat.spec.name)?
        };
    }
    Ok((yi, wi, mi, widi))
}

/// Formats a float with Rust's shortest round-trip representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Renders a frame back to CSV bytes under the same schema layout used to
/// load it: role columns first (worker id, cluster, margin, outcome,
/// treatment), then every feature in frame order.
pub fn render_frame(frame: &AnalysisFrame, schema: &FrameSchema, delimiter: u8) -> Vec<u8> {
    let mut wtr = writer(delimiter);
    let mut header: Vec<String> = Vec::new();
    if let Some(wid) = &schema.worker_id {
        header.push(wid.clone());
    }
    header.extend([
        schema.cluster.clone(),
        schema.margin.clone(),
        schema.outcome.clone(),
        schema.treatment.clone(),
    ]);
    header.extend(frame.columns().iter().map(|c| c.name.clone()));
    wtr.write_record(&header).expect("in-memory csv write");

    let worker_ids = frame.worker_ids();
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..frame.n_rows() {
        record.clear();
        if schema.worker_id.is_some() {
            let ids = worker_ids.expect("schema promises worker ids");
            record.push(ids[i].to_string());
        }
        record.push(frame.cluster_labels()[frame.cluster()[i]].clone());
        record.push(fmt_f64(frame.margin()[i]));
        record.push(fmt_f64(frame.y()[i]));
        record.push(fmt_f64(frame.w()[i]));
        for j in 0..frame.n_features() {
            record.push(fmt_f64(frame.xij(i, j)));
        }
        wtr.write_record(&record).expect("in-memory csv write");
    }
    finish(wtr)
}

/// Renders a wage panel as CSV (`worker_id, year, log_wage, age,
/// treated_period`).
pub fn render_panel(panel: &WagePanel, delimiter: u8) -> Vec<u8> {
    let mut wtr = writer(delimiter);
    wtr.write_record(["worker_id", "year", "log_wage", "age", "treated_period"])
        .expect("in-memory csv write");
    for i in 0..panel.len() {
        wtr.write_record([
            panel.worker[i].to_string(),
            panel.year[i].to_string(),
            fmt_f64(panel.log_wage[i]),
            fmt_f64(panel.age[i]),
            fmt_f64(panel.treated_period[i]),
        ])
        .expect("in-memory csv write");
    }
    finish(wtr)
}

/// Reads a wage panel CSV written by [`render_panel`] (extra columns are
/// ignored so externally produced panels with controls still load).
pub fn load_panel(path: &Path, delimiter: u8) -> CliResult<WagePanel> {
    let mut reader = reader(path, delimiter)?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Config(format!("{}: cannot read header: {e}", path.display())))?
        .clone();
    let find = |name: &str| -> CliResult<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Config(format!(
                "{}: panel column `{name}` missing from header",
                path.display()
            ))
        })
    };
    let worker_at = find("worker_id")?;
    let year_at = find("year")?;
    let wage_at = find("log_wage")?;
    let age_at = find("age")?;
    let treated_at = find("treated_period")?;

    let mut panel = WagePanel {
        worker: Vec::new(),
        year: Vec::new(),
        log_wage: Vec::new(),
        age: Vec::new(),
        treated_period: Vec::new(),
    };
    for (data_row, record) in reader.records().enumerate() {
        let row_no = data_row + 1;
        let record = record.map_err(|e| {
            CliError::Validation(format!("{}: row {row_no}: {e}", path.display()))
        })?;
        let cell = |at: usize, name: &str| -> CliResult<f64> {
            let raw = record.get(at).unwrap_or_default().trim();
            raw.parse().map_err(|_| {
                CliError::Validation(format!(
                    "{}: row {row_no}: `{name}` value `{raw}` is not a number",
                    path.display()
                ))
            })
        };
        panel
            .worker
            .push(cell(worker_at, "worker_id")? as i64);
        panel.year.push(cell(year_at, "year")? as i32);
        panel.log_wage.push(cell(wage_at, "log_wage")?);
        panel.age.push(cell(age_at, "age")?);
        panel.treated_period.push(cell(treated_at, "treated_period")?);
    }
    Ok(panel)
}

/// Renders centered residuals (`y_tilde, w_tilde, e_hat, y_hat`) to CSV.
pub fn render_residuals(sample: &CenteredSample, delimiter: u8) -> Vec<u8> {
    let mut wtr = writer(delimiter);
    wtr.write_record(["y_tilde", "w_tilde", "e_hat", "y_hat"])
        .expect("in-memory csv write");
    for i in 0..sample.y_tilde.len() {
        wtr.write_record([
            fmt_f64(sample.y_tilde[i]),
            fmt_f64(sample.w_tilde[i]),
            fmt_f64(sample.e_hat[i]),
            fmt_f64(sample.y_hat[i]),
        ])
        .expect("in-memory csv write");
    }
    finish(wtr)
}

/// Reads residuals written by [`render_residuals`]. The clip count is not
/// persisted; it returns as zero and matters only for train-time reporting.
pub fn load_residuals(path: &Path, delimiter: u8) -> CliResult<CenteredSample> {
    let mut reader = reader(path, delimiter)?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Config(format!("{}: cannot read header: {e}", path.display())))?
        .clone();
    let expected = ["y_tilde", "w_tilde", "e_hat", "y_hat"];
    let at: Vec<usize> = expected
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == *name).ok_or_else(|| {
                CliError::Config(format!(
                    "{}: residual column `{name}` missing from header",
                    path.display()
                ))
            })
        })
        .collect::<CliResult<_>>()?;
    let mut cols: [Vec<f64>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for (data_row, record) in reader.records().enumerate() {
        let row_no = data_row + 1;
        let record = record.map_err(|e| {
            CliError::Validation(format!("{}: row {row_no}: {e}", path.display()))
        })?;
        for (k, dest) in cols.iter_mut().enumerate() {
            let raw = record.get(at[k]).unwrap_or_default().trim();
            let v: f64 = raw.parse().map_err(|_| {
                CliError::Validation(format!(
                    "{}: row {row_no}: `{}` value `{raw}` is not a number",
                    path.display(),
                    expected[k]
                ))
            })?;
            dest.push(v);
        }
    }
    let [y_tilde, w_tilde, e_hat, y_hat] = cols;
    Ok(CenteredSample {
        y_tilde,
        w_tilde,
        e_hat,
        y_hat,
        clipped: 0,
    })
}

/// Renders the ground-truth table emitted alongside a synthetic frame.
pub fn render_truth(truth: &hetfx_core::SynthTruth, delimiter: u8) -> Vec<u8> {
    let mut wtr = writer(delimiter);
    wtr.write_record([
        "tau",
        "propensity",
        "mu0",
        "municipality_fe",
        "margin",
        "ability",
    ])
    .expect("in-memory csv write");
    for i in 0..truth.tau.len() {
        wtr.write_record([
            fmt_f64(truth.tau[i]),
            fmt_f64(truth.propensity[i]),
            fmt_f64(truth.mu0[i]),
            fmt_f64(truth.municipality_fe[i]),
            fmt_f64(truth.margin[i]),
            fmt_f64(truth.ability[i]),
        ])
        .expect("in-memory csv write");
    }
    finish(wtr)
}

/// Generic table writer: a header plus stringly rows, quoted as needed.
pub fn render_table(header: &[&str], rows: &[Vec<String>], delimiter: u8) -> Vec<u8> {
    let mut wtr = writer(delimiter);
    wtr.write_record(header).expect("in-memory csv write");
    for row in rows {
        wtr.write_record(row).expect("in-memory csv write");
    }
    finish(wtr)
}

fn reader(path: &Path, delimiter: u8) -> CliResult<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)
        .map_err(|e| io_config(&format!("open {}", path.display()), e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn writer(delimiter: u8) -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(Vec::new())
}

fn finish(wtr: csv::Writer<Vec<u8>>) -> Vec<u8> {
    wtr.into_inner().expect("in-memory csv flush")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn small_schema() -> FrameSchema {
        FrameSchema {
            outcome: "y".into(),
            treatment: "w".into(),
            cluster: "muni".into(),
            margin: "margin".into(),
            worker_id: None,
            continuous: vec!["age".into()],
            dummies: vec!["male".into()],
        }
    }

    #[test]
    fn well_formed_file_loads_every_row() {
        let f = write_temp(
            "# synthetic excerpt\n\
             muni,margin,y,w,age,male\n\
             a,2.0,1.0,1,30,1\n\
             a,2.0,0.0,0,40,0\n\
             b,-1.5,1.0,0,50,1\n\
             b,-1.5,0.5,1,35,0\n\
             b,-1.5,0.25,0,61,1\n",
        );
        let loaded = load_frame(f.path(), &small_schema(), b',', false).unwrap();
        assert_eq!(loaded.frame.n_rows(), 5);
        assert_eq!(loaded.dropped, 0);
        assert_eq!(loaded.frame.n_clusters(), 2);
        assert_eq!(loaded.frame.feature_by_name("age").unwrap()[2], 50.0);
    }

    #[test]
    fn non_binary_treatment_names_the_offending_row() {
        let f = write_temp(
            "muni,margin,y,w,age,male\n\
             a,2.0,1.0,1,30,1\n\
             a,2.0,0.0,0,40,0\n\
             b,-1.5,1.0,2,50,1\n",
        );
        let err = load_frame(f.path(), &small_schema(), b',', false).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("row 3"), "{err}");
        assert!(err.to_string().contains("not binary"), "{err}");
    }

    #[test]
    fn drop_invalid_skips_bad_rows_and_counts_them() {
        let f = write_temp(
            "muni,margin,y,w,age,male\n\
             a,2.0,1.0,1,30,1\n\
             a,2.0,oops,0,40,0\n\
             a,2.0,0.0,2,41,0\n\
             a,2.0,0.0,0,39,1\n\
             b,-1.5,1.0,0,50,1\n\
             b,-1.5,0.5,1,NaN,0\n\
             b,-1.5,0.25,0,61,1\n",
        );
        let loaded = load_frame(f.path(), &small_schema(), b',', true).unwrap();
        assert_eq!(loaded.dropped, 3);
        assert_eq!(loaded.frame.n_rows(), 4);
    }

    #[test]
    fn missing_schema_column_is_a_config_error() {
        let f = write_temp("muni,margin,y,w,age\na,2.0,1.0,1,30\n");
        let err = load_frame(f.path(), &small_schema(), b',', false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("male"), "{err}");
    }

    #[test]
    fn duplicate_header_is_rejected() {
        let f = write_temp("muni,margin,y,w,age,age,male\na,2.0,1.0,1,30,30,1\n");
        let err = load_frame(f.path(), &small_schema(), b',', false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn inconsistent_margin_is_never_droppable() {
        let f = write_temp(
            "muni,margin,y,w,age,male\n\
             a,2.0,1.0,1,30,1\n\
             a,2.5,0.0,0,40,0\n",
        );
        let err = load_frame(f.path(), &small_schema(), b',', true).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("margin"), "{err}");
    }

    #[test]
    fn alternate_delimiter_round_trips() {
        let f = write_temp(
            "muni;margin;y;w;age;male\n\
             a;2.0;1.0;1;30;1\n\
             b;-1.5;0.5;0;42.25;0\n",
        );
        let loaded = load_frame(f.path(), &small_schema(), b';', false).unwrap();
        let bytes = render_frame(&loaded.frame, &small_schema(), b';');
        let f2 = write_temp(std::str::from_utf8(&bytes).unwrap());
        let again = load_frame(f2.path(), &small_schema(), b';', false).unwrap();
        assert_eq!(again.frame.n_rows(), 2);
        assert_eq!(again.frame.feature_by_name("age").unwrap()[1], 42.25);
    }

    #[test]
    fn load_write_load_round_trip_is_bit_exact() {
        // Awkward values: negative zero, subnormal, many digits, huge.
        let f = write_temp(
            "muni,margin,y,w,age,male\n\
             a,2.0,-0.0,1,0.1,1\n\
             a,2.0,5e-324,0,0.30000000000000004,0\n\
             b,-1.75,1e300,0,12345.678901234567,1\n\
             b,-1.75,-2.2250738585072014e-308,1,1.7976931348623157e308,0\n",
        );
        let schema = small_schema();
        let first = load_frame(f.path(), &schema, b',', false).unwrap().frame;
        let bytes = render_frame(&first, &schema, b',');
        let f2 = write_temp(std::str::from_utf8(&bytes).unwrap());
        let second = load_frame(f2.path(), &schema, b',', false).unwrap().frame;

        assert_eq!(first.n_rows(), second.n_rows());
        for i in 0..first.n_rows() {
            assert_eq!(first.y()[i].to_bits(), second.y()[i].to_bits());
            assert_eq!(first.w()[i].to_bits(), second.w()[i].to_bits());
            assert_eq!(first.margin()[i].to_bits(), second.margin()[i].to_bits());
            for j in 0..first.n_features() {
                assert_eq!(first.xij(i, j).to_bits(), second.xij(i, j).to_bits());
            }
        }
    }

    #[test]
    fn synthetic_frame_round_trips_through_csv() {
        let config = hetfx_core::DgpConfig {
            n_municipalities: 12,
            workers_per_municipality: 18,
            ..Default::default()
        };
        let data = hetfx_core::generate(&config, 7).unwrap();
        let schema = FrameSchema::synthetic();
        let bytes = render_frame(&data.frame, &schema, b',');
        let f = write_temp(std::str::from_utf8(&bytes).unwrap());
        let loaded = load_frame(f.path(), &schema, b',', false).unwrap().frame;

        assert_eq!(loaded.n_rows(), data.frame.n_rows());
        assert_eq!(loaded.n_features(), data.frame.n_features());
        assert_eq!(loaded.worker_ids().unwrap(), data.frame.worker_ids().unwrap());
        assert_eq!(loaded.cluster_labels(), data.frame.cluster_labels());
        for i in 0..loaded.n_rows() {
            assert_eq!(loaded.y()[i].to_bits(), data.frame.y()[i].to_bits());
            assert_eq!(loaded.margin()[i].to_bits(), data.frame.margin()[i].to_bits());
            for j in 0..loaded.n_features() {
                assert_eq!(loaded.xij(i, j).to_bits(), data.frame.xij(i, j).to_bits());
            }
        }
        // Column order matches the synthetic schema declaration.
        let names: Vec<&str> = loaded.columns().iter().map(|c| c.name.as_str()).collect();
        let expected: Vec<&str> = data
            .frame
            .columns()
            .iter()
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn panel_and_residual_files_round_trip() {
        let panel = WagePanel {
            worker: vec![10, 10, 11],
            year: vec![2006, 2007, 2006],
            log_wage: vec![1.25, 1.5, -0.75],
            age: vec![30.0, 31.0, 44.5],
            treated_period: vec![0.0, 1.0, 0.0],
        };
        let f = write_temp(std::str::from_utf8(&render_panel(&panel, b',')).unwrap());
        let loaded = load_panel(f.path(), b',').unwrap();
        assert_eq!(loaded.worker, panel.worker);
        assert_eq!(loaded.year, panel.year);
        assert_eq!(loaded.log_wage, panel.log_wage);

        let sample = CenteredSample {
            y_tilde: vec![0.5, -0.25],
            w_tilde: vec![0.5, -0.5],
            e_hat: vec![0.5, 0.5],
            y_hat: vec![0.125, 0.375],
            clipped: 3,
        };
        let f = write_temp(std::str::from_utf8(&render_residuals(&sample, b',')).unwrap());
        let loaded = load_residuals(f.path(), b',').unwrap();
        assert_eq!(loaded.y_tilde, sample.y_tilde);
        assert_eq!(loaded.w_tilde, sample.w_tilde);
        assert_eq!(loaded.e_hat, sample.e_hat);
        assert_eq!(loaded.y_hat, sample.y_hat);
        assert_eq!(loaded.clipped, 0);
    }
}
