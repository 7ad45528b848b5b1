//! Staged pipeline orchestration shared by every subcommand.
//!
//! Estimation runs entirely in memory and all output files are staged in an
//! [`OutputBundle`]; nothing touches the output directory until every stage
//! has succeeded, so a failed run leaves no partial outputs behind. Errors
//! carry the failing stage's name.
//!
//! Each run writes a deterministic `manifest.json` — config hash, seed,
//! stage row counts, headline results, and the SHA-256 of every emitted
//! file — plus a `run.log` sidecar with wall-clock timings. Timings live in
//! the sidecar precisely so the manifest stays byte-identical across
//! repeated runs of the same config and seed.
//!
//! Seed plan, derived from the single config seed: the synthetic generator
//! uses the seed itself (municipality streams), centering uses `seed` and
//! `seed+1` (outcome and propensity forests), conditional means use
//! `seed+2` and `seed+3` (per-arm forests), and the causal forest uses
//! `seed+4`. Tree and grouping streams are disjoint from municipality
//! streams by construction, so sharing the base seed is safe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hetfx_core::nuisance::propensity_histogram;
use hetfx_core::stats::Histogram;
use hetfx_core::transform::{bandwidth_filter, mean_encode_cluster, standardize_all, subsample};
use hetfx_core::{
    attach_ability, bias, blp, center, clan, fit_causal_forest, fit_conditional_means,
    fit_mincer, generate, AbilityEstimates, AnalysisFrame, BiasSummary, BlpResult,
    CalibrationReport, CateEstimates, CausalForest, CenteredSample, ClanFeature, ClanResult,
    ColumnSpec, MincerVariant, SynthTruth, WagePanel,
};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::csvio::{self, fmt_f64, FrameSchema};
use crate::error::{io_config, CliError, CliResult};
use crate::figures;
use crate::forestfile;
use crate::predicate::Expr;

pub const MANIFEST_FORMAT: &str = "hetfx-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Offsets added to the config seed for each seeded stage.
pub const SEED_CONDITIONAL_MEANS: u64 = 2;
pub const SEED_CAUSAL_FOREST: u64 = 4;

/// In-memory staging for output files, flushed only on full success.
#[derive(Debug, Default)]
pub struct OutputBundle {
    files: BTreeMap<String, Vec<u8>>,
}

impl OutputBundle {
    pub fn insert(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.keys().map(String::as_str).collect()
    }

    /// Writes every staged file under `dir`. If any write fails, files
    /// already written by this call are removed again.
    pub fn write_all(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| io_config(&format!("create {}", dir.display()), e))?;
        let mut written: Vec<PathBuf> = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Err(e) = std::fs::write(&path, bytes) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(io_config(&format!("write {}", path.display()), e));
            }
            written.push(path);
        }
        Ok(())
    }
}

/// What a subcommand hands back for terminal display.
#[derive(Debug)]
pub struct RunReport {
    pub lines: Vec<String>,
}

/// The fully transformed analysis frame plus aligned side products.
#[derive(Debug)]
pub struct Prepared {
    pub frame: AnalysisFrame,
    /// Ground truth filtered in lockstep with the frame (synthetic input).
    pub truth: Option<SynthTruth>,
    /// Wage panel (synthetic input, or loaded when the mincer stage is on).
    pub panel: Option<WagePanel>,
    pub schema: FrameSchema,
    pub dropped_rows: usize,
    pub singleton_rows: usize,
    pub unmatched_rows: usize,
    /// Features that became constant after filtering (for example the
    /// restriction's own dummy) and were removed before standardization.
    pub constant_columns: Vec<String>,
    /// Row count after each executed stage, in order.
    pub stage_rows: Vec<(&'static str, usize)>,
}

fn staged<T>(stage: &str, result: hetfx_core::Result<T>) -> CliResult<T> {
    result.map_err(|e| CliError::from(e).in_stage(stage))
}

/// Removes features whose values are constant across the (possibly filtered)
/// sample. A restriction predicate such as `employed_lag == 1` necessarily
/// pins its own dummy, and a constant column carries no information while
/// making standardization ill-defined, so it is dropped and reported rather
/// than treated as an error.
fn drop_constant_features(frame: &AnalysisFrame) -> CliResult<(AnalysisFrame, Vec<String>)> {
    let constant: Vec<String> = frame
        .columns()
        .iter()
        .filter(|meta| meta.sd == 0.0)
        .map(|meta| meta.name.clone())
        .collect();
    if constant.is_empty() {
        return Ok((frame.clone(), constant));
    }
    if constant.len() == frame.n_features() {
        return Err(CliError::Validation(
            "every feature is constant in the filtered sample".into(),
        ));
    }
    let mut specs = Vec::new();
    let mut x = Vec::new();
    for (j, meta) in frame.columns().iter().enumerate() {
        if meta.sd != 0.0 {
            specs.push(ColumnSpec {
                name: meta.name.clone(),
                kind: meta.kind,
            });
            x.push(frame.feature(j).to_vec());
        }
    }
    let cluster_keys: Vec<String> = frame
        .cluster()
        .iter()
        .map(|&c| frame.cluster_labels()[c].clone())
        .collect();
    let rebuilt = AnalysisFrame::from_parts(
        specs,
        x,
        frame.y().to_vec(),
        frame.w().to_vec(),
        &cluster_keys,
        frame.margin().to_vec(),
        frame.worker_ids().map(|ids| ids.to_vec()),
    )
    .map_err(CliError::from)?;
    Ok((rebuilt, constant))
}

fn filter_truth(truth: &SynthTruth, keep: &[bool]) -> SynthTruth {
    let pick = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(v, _)| *v)
            .collect()
    };
    SynthTruth {
        tau: pick(&truth.tau),
        propensity: pick(&truth.propensity),
        mu0: pick(&truth.mu0),
        municipality_fe: pick(&truth.municipality_fe),
        margin: pick(&truth.margin),
        ability: pick(&truth.ability),
    }
}

/// Runs load → bandwidth → subsample → mean encoding → standardization →
/// ability attach, per the config. Filters are applied to the ground-truth
/// vectors in lockstep so synthetic runs keep row-aligned truth.
pub fn prepare(config: &PipelineConfig) -> CliResult<Prepared> {
    let delimiter = config.input.delimiter_byte()?;
    let mut stage_rows: Vec<(&'static str, usize)> = Vec::new();

    // Load.
    let (mut frame, mut truth, panel, schema, dropped_rows) =
        if let Some(dgp) = &config.input.synthetic {
            let data = staged("load", generate(dgp, config.seed))?;
            (
                data.frame,
                Some(data.truth),
                Some(data.panel),
                FrameSchema::synthetic(),
                0,
            )
        } else {
            let path = config.input.frame.as_ref().ok_or_else(|| {
                CliError::Config("input declares neither `frame` nor `synthetic`".into())
            })?;
            let schema = config
                .input
                .schema
                .clone()
                .ok_or_else(|| CliError::Config("file input needs an `input.schema` table".into()))?;
            let loaded = csvio::load_frame(path, &schema, delimiter, config.input.drop_invalid)
                .map_err(|e| e.in_stage("load"))?;
            let panel = match (&config.input.panel, config.mincer.enabled) {
                (Some(path), true) => Some(
                    csvio::load_panel(path, delimiter).map_err(|e| e.in_stage("load"))?,
                ),
                _ => None,
            };
            (loaded.frame, None, panel, schema, loaded.dropped)
        };
    stage_rows.push(("load", frame.n_rows()));

    // Bandwidth filter.
    if let Some(h) = config.filters.bandwidth {
        let keep: Vec<bool> = frame.margin().iter().map(|m| m.abs() <= h).collect();
        frame = staged("bandwidth", bandwidth_filter(&frame, h))?;
        truth = truth.map(|t| filter_truth(&t, &keep));
        stage_rows.push(("bandwidth", frame.n_rows()));
    }

    // Subsample predicates, in order.
    for text in &config.filters.subsample {
        let expr = Expr::parse(text)?;
        let keep = expr.mask(&frame).map_err(|e| e.in_stage("subsample"))?;
        frame = staged("subsample", subsample(&frame, |i| keep[i]))?;
        truth = truth.map(|t| filter_truth(&t, &keep));
        stage_rows.push(("subsample", frame.n_rows()));
    }

    // Filters can pin a feature (restriction dummies always end up
    // constant); drop such columns before the moment-based transforms.
    let (swept, constant_columns) = drop_constant_features(&frame)
        .map_err(|e| e.in_stage("drop_constant"))?;
    frame = swept;

    // Cluster mean encoding, then standardization of every feature.
    let encoded = staged("mean_encode", mean_encode_cluster(&frame))?;
    let singleton_rows = encoded.singleton_rows;
    frame = encoded.frame;
    stage_rows.push(("mean_encode", frame.n_rows()));
    frame = staged("standardize", standardize_all(&frame))?;
    stage_rows.push(("standardize", frame.n_rows()));

    // Worker-ability attach (already standardized by the estimator).
    let mut unmatched_rows = 0;
    if config.mincer.enabled {
        let panel_ref = panel.as_ref().ok_or_else(|| {
            CliError::Config("mincer.enabled needs `input.panel` (or synthetic input)".into())
        })?;
        let estimates = staged(
            "mincer",
            fit_mincer(panel_ref, config.mincer.variant, config.mincer.age_powers),
        )?;
        let report = staged("mincer", attach_ability(&frame, &estimates))?;
        unmatched_rows = report.unmatched_rows;
        frame = report.frame;
        stage_rows.push(("mincer", frame.n_rows()));
    }

    if let Some(t) = &truth {
        debug_assert_eq!(t.tau.len(), frame.n_rows(), "truth tracks the frame");
    }

    Ok(Prepared {
        frame,
        truth,
        panel,
        schema,
        dropped_rows,
        singleton_rows,
        unmatched_rows,
        constant_columns,
        stage_rows,
    })
}

/// Prepared data plus fitted nuisance residuals and the causal forest.
pub struct Fitted {
    pub prepared: Prepared,
    pub sample: CenteredSample,
    pub forest: CausalForest,
}

/// Runs preparation, local centering, and the causal forest fit.
pub fn fit(config: &PipelineConfig) -> CliResult<Fitted> {
    let prepared = prepare(config)?;
    let sample = staged(
        "nuisance",
        center(&prepared.frame, &config.nuisance_params(), config.seed),
    )?;
    let forest = staged(
        "causal_forest",
        fit_causal_forest(
            &prepared.frame,
            &sample.y_tilde,
            &sample.w_tilde,
            &config.causal_params(),
            config.seed.wrapping_add(SEED_CAUSAL_FOREST),
        ),
    )?;
    Ok(Fitted {
        prepared,
        sample,
        forest,
    })
}

/// Reconstructs the frame from config, loads a persisted forest and
/// residuals, audits that they all describe the same data, and scores
/// out-of-bag effect estimates.
pub fn rescore(
    config: &PipelineConfig,
    model: &Path,
    residuals: &Path,
) -> CliResult<(Prepared, CenteredSample, CausalForest, CateEstimates)> {
    let prepared = prepare(config)?;
    let (forest, header) = forestfile::load_forest(model)?;
    forestfile::audit_digest(&header, &prepared.frame).map_err(|e| e.in_stage("audit"))?;
    let sample = csvio::load_residuals(residuals, config.input.delimiter_byte()?)?;
    let estimates = staged(
        "estimates",
        forest.cate_estimates(&prepared.frame, &sample.y_tilde, &sample.w_tilde),
    )?;
    Ok((prepared, sample, forest, estimates))
}

// ---------------------------------------------------------------------------
// Manifest and run log
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ManifestDoc<'a> {
    format: &'static str,
    version: u32,
    command: &'a str,
    seed: u64,
    config_sha256: &'a str,
    stages: Vec<StageRow<'a>>,
    counts: &'a BTreeMap<&'static str, u64>,
    results: &'a BTreeMap<&'static str, f64>,
    outputs: BTreeMap<&'a str, String>,
}

#[derive(Serialize)]
struct StageRow<'a> {
    name: &'a str,
    rows: u64,
}

/// Collects manifest fields during a run and finalizes the bundle: hashes
/// every staged file into `manifest.json`, appends the (unhashed) timing
/// sidecar, writes everything, and reports what was written.
pub struct Runner {
    command: &'static str,
    seed: u64,
    config_sha256: String,
    started: Instant,
    stages: Vec<(String, u64)>,
    counts: BTreeMap<&'static str, u64>,
    results: BTreeMap<&'static str, f64>,
    highlights: Vec<String>,
}

impl Runner {
    pub fn new(command: &'static str, config: &PipelineConfig, config_text: &str) -> Runner {
        Runner {
            command,
            seed: config.seed,
            config_sha256: forestfile::sha256_hex(config_text.as_bytes()),
            started: Instant::now(),
            stages: Vec::new(),
            counts: BTreeMap::new(),
            results: BTreeMap::new(),
            highlights: Vec::new(),
        }
    }

    pub fn note_stages(&mut self, rows: &[(&'static str, usize)]) {
        for (name, n) in rows {
            self.stages.push((name.to_string(), *n as u64));
        }
    }

    pub fn count(&mut self, key: &'static str, value: usize) {
        self.counts.insert(key, value as u64);
    }

    pub fn result(&mut self, key: &'static str, value: f64) {
        self.results.insert(key, value);
    }

    pub fn highlight(&mut self, line: String) {
        self.highlights.push(line);
    }

    /// Hashes the bundle into the manifest, adds the sidecar log, writes
    /// everything under `out_dir`, and returns the display report.
    pub fn finish(self, mut bundle: OutputBundle, out_dir: &Path) -> CliResult<RunReport> {
        let manifest = ManifestDoc {
            format: MANIFEST_FORMAT,
            version: MANIFEST_VERSION,
            command: self.command,
            seed: self.seed,
            config_sha256: &self.config_sha256,
            stages: self
                .stages
                .iter()
                .map(|(name, rows)| StageRow { name, rows: *rows })
                .collect(),
            counts: &self.counts,
            results: &self.results,
            outputs: bundle
                .files
                .iter()
                .map(|(name, bytes)| (name.as_str(), forestfile::sha256_hex(bytes)))
                .collect(),
        };
        let mut manifest_bytes =
            serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        manifest_bytes.push(b'\n');
        bundle.insert("manifest.json", manifest_bytes);

        // Wall-clock timing is real observability but would break manifest
        // reproducibility, so it lives in an unhashed sidecar.
        let mut log = String::new();
        log.push_str(&format!("command: {}\n", self.command));
        log.push_str(&format!("threads: {}\n", rayon::current_num_threads()));
        log.push_str(&format!(
            "elapsed_ms: {}\n",
            self.started.elapsed().as_millis()
        ));
        for (name, rows) in &self.stages {
            log.push_str(&format!("stage {name}: {rows} rows\n"));
        }
        bundle.insert("run.log", log.into_bytes());

        bundle.write_all(out_dir)?;

        let mut lines = self.highlights;
        for name in bundle.names() {
            lines.push(format!("wrote {}", out_dir.join(name).display()));
        }
        Ok(RunReport { lines })
    }
}

// ---------------------------------------------------------------------------
// Table rendering
// ---------------------------------------------------------------------------

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// BLP table: intercept, one row per covariate, then calibration rows when
/// a report is supplied.
pub fn blp_table(
    result: &BlpResult,
    calibration: Option<&CalibrationReport>,
    delimiter: u8,
) -> Vec<u8> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let term_row = |term: &hetfx_core::BlpTerm| -> Vec<String> {
        vec![
            term.name.clone(),
            fmt_f64(term.estimate),
            fmt_f64(term.standard_error),
            fmt_f64(term.t_stat),
            fmt_f64(term.p_value),
            if term.rescaled_estimate.is_some() { "1" } else { "0" }.to_string(),
            opt(term.rescaled_estimate),
            opt(term.rescaled_standard_error),
        ]
    };
    rows.push(term_row(&result.intercept));
    for term in &result.terms {
        rows.push(term_row(term));
    }
    if let Some(report) = calibration {
        let mut calib_row = |name: &str, c: &hetfx_core::CalibrationCoefficient| {
            rows.push(vec![
                name.to_string(),
                fmt_f64(c.estimate),
                fmt_f64(c.standard_error),
                fmt_f64(c.t_stat),
                fmt_f64(c.p_value),
                String::new(),
                String::new(),
                String::new(),
            ]);
        };
        calib_row("mean_forest_prediction", &report.mean_forest);
        if let Some(diff) = &report.differential {
            calib_row("differential_forest_prediction", diff);
        }
    }
    csvio::render_table(
        &[
            "term",
            "estimate",
            "standard_error",
            "t_stat",
            "p_value",
            "is_dummy",
            "rescaled_estimate",
            "rescaled_standard_error",
        ],
        &rows,
        delimiter,
    )
}

/// CLAN table: τ̂ itself, each profiled feature, then extras.
pub fn clan_table(result: &ClanResult, delimiter: u8) -> Vec<u8> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let feature_row = |f: &ClanFeature| -> Vec<String> {
        let mut row = vec![f.name.clone()];
        for q in &f.quartiles {
            row.push(fmt_f64(q.mean));
            row.push(fmt_f64(q.sd));
        }
        row.push(fmt_f64(f.gap));
        row
    };
    rows.push(feature_row(&result.tau));
    for f in &result.features {
        rows.push(feature_row(f));
    }
    for f in &result.extras {
        rows.push(feature_row(f));
    }
    csvio::render_table(
        &[
            "feature", "q1_mean", "q1_sd", "q2_mean", "q2_sd", "q3_mean", "q3_sd", "q4_mean",
            "q4_sd", "gap_q4_q1",
        ],
        &rows,
        delimiter,
    )
}

/// Per-worker ability table.
pub fn ability_table(estimates: &AbilityEstimates, delimiter: u8) -> Vec<u8> {
    let variant = match estimates.variant {
        MincerVariant::Full => "full",
        MincerVariant::PretreatmentOnly => "pretreatment_only",
    };
    let rows: Vec<Vec<String>> = estimates
        .worker
        .iter()
        .zip(&estimates.fe)
        .zip(&estimates.n_obs)
        .map(|((worker, fe), n_obs)| {
            vec![
                worker.to_string(),
                fmt_f64(*fe),
                n_obs.to_string(),
                variant.to_string(),
            ]
        })
        .collect();
    csvio::render_table(&["worker_id", "ability", "n_obs", "variant"], &rows, delimiter)
}

/// Per-row effect estimates with identifiers for joining back to the data.
pub fn cate_table(
    frame: &AnalysisFrame,
    estimates: &CateEstimates,
    delimiter: u8,
) -> Vec<u8> {
    let mut header: Vec<&str> = Vec::new();
    if frame.worker_ids().is_some() {
        header.push("worker_id");
    }
    header.extend(["cluster", "margin", "tau_hat", "se"]);
    let rows: Vec<Vec<String>> = (0..frame.n_rows())
        .map(|i| {
            let mut row = Vec::with_capacity(header.len());
            if let Some(ids) = frame.worker_ids() {
                row.push(ids[i].to_string());
            }
            row.push(frame.cluster_labels()[frame.cluster()[i]].clone());
            row.push(fmt_f64(frame.margin()[i]));
            row.push(fmt_f64(estimates.tau[i]));
            row.push(opt(estimates.se.as_ref().map(|se| se[i])));
            row
        })
        .collect();
    csvio::render_table(&header, &rows, delimiter)
}

fn histogram_pair(bundle: &mut OutputBundle, stem: &str, hist: &Histogram, title: &str, x_label: &str, marker: Option<f64>, delimiter: u8) {
    bundle.insert(
        &format!("{stem}.csv"),
        figures::histogram_csv(hist, delimiter),
    );
    bundle.insert(
        &format!("{stem}.svg"),
        figures::histogram_svg(hist, title, x_label, marker).into_bytes(),
    );
}

// ---------------------------------------------------------------------------
// Subcommand drivers
// ---------------------------------------------------------------------------

/// `simulate`: write the synthetic frame, panel, and truth tables.
pub fn run_simulate(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let dgp = config.input.synthetic.as_ref().ok_or_else(|| {
        CliError::Config("simulate needs an `input.synthetic` table".into())
    })?;
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("simulate", config, config_text);
    let data = staged("load", generate(dgp, config.seed))?;

    runner.note_stages(&[("load", data.frame.n_rows())]);
    runner.count("n_rows", data.frame.n_rows());
    runner.count("n_clusters", data.frame.n_clusters());
    runner.count("panel_rows", data.panel.len());

    let schema = FrameSchema::synthetic();
    let mut bundle = OutputBundle::default();
    bundle.insert("frame.csv", csvio::render_frame(&data.frame, &schema, delimiter));
    bundle.insert("panel.csv", csvio::render_panel(&data.panel, delimiter));
    bundle.insert("truth.csv", csvio::render_truth(&data.truth, delimiter));

    runner.highlight(format!(
        "simulated {} rows in {} municipalities (panel: {} rows)",
        data.frame.n_rows(),
        data.frame.n_clusters(),
        data.panel.len()
    ));
    runner.finish(bundle, out_dir)
}

/// `train`: prepare, center, fit, and persist the causal forest.
pub fn run_train(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("train", config, config_text);
    let fitted = fit(config)?;

    runner.note_stages(&fitted.prepared.stage_rows);
    note_prepared_counts(&mut runner, &fitted.prepared);
    runner.count("clipped_rows", fitted.sample.clipped);
    runner.count("num_trees", fitted.forest.params.num_trees);

    let mut bundle = OutputBundle::default();
    bundle.insert(
        "model.jsonl",
        forestfile::render_forest(&fitted.forest, &fitted.prepared.frame),
    );
    bundle.insert(
        "residuals.csv",
        csvio::render_residuals(&fitted.sample, delimiter),
    );

    #[derive(Serialize)]
    struct TrainDoc {
        n_rows: usize,
        n_clusters: usize,
        clipped_rows: usize,
        params: hetfx_core::ForestParams,
        data_sha256: String,
    }
    let doc = TrainDoc {
        n_rows: fitted.prepared.frame.n_rows(),
        n_clusters: fitted.prepared.frame.n_clusters(),
        clipped_rows: fitted.sample.clipped,
        params: fitted.forest.params.clone(),
        data_sha256: forestfile::frame_digest(&fitted.prepared.frame),
    };
    let mut doc_bytes = serde_json::to_vec_pretty(&doc).expect("train doc serializes");
    doc_bytes.push(b'\n');
    bundle.insert("train.json", doc_bytes);

    runner.highlight(format!(
        "trained {} trees on {} rows ({} clusters), {} propensity rows clipped",
        fitted.forest.params.num_trees,
        fitted.prepared.frame.n_rows(),
        fitted.prepared.frame.n_clusters(),
        fitted.sample.clipped
    ));
    runner.finish(bundle, out_dir)
}

fn note_prepared_counts(runner: &mut Runner, prepared: &Prepared) {
    runner.count("n_rows", prepared.frame.n_rows());
    runner.count("n_clusters", prepared.frame.n_clusters());
    runner.count("dropped_rows", prepared.dropped_rows);
    runner.count("singleton_rows", prepared.singleton_rows);
    if prepared.unmatched_rows > 0 {
        runner.count("unmatched_rows", prepared.unmatched_rows);
    }
    if !prepared.constant_columns.is_empty() {
        runner.count("constant_columns_dropped", prepared.constant_columns.len());
        runner.highlight(format!(
            "dropped constant feature(s) after filtering: {}",
            prepared.constant_columns.join(", ")
        ));
    }
}

/// `diagnose`: propensity histogram, bias diagnostic, calibration test.
pub fn run_diagnose(
    config: &PipelineConfig,
    config_text: &str,
    model: &Path,
    residuals: &Path,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("diagnose", config, config_text);
    let (prepared, sample, _forest, estimates) = rescore(config, model, residuals)?;
    let mut bundle = OutputBundle::default();
    let (summary, _calibration) = diagnostics_into(
        &mut runner,
        &mut bundle,
        config,
        &prepared,
        &sample,
        &estimates,
        delimiter,
    )?;

    runner.note_stages(&prepared.stage_rows);
    note_prepared_counts(&mut runner, &prepared);
    runner.highlight(summary);
    runner.finish(bundle, out_dir)
}

/// Shared diagnostics emission (used by `diagnose` and `pipeline`): writes
/// propensity and bias histograms plus `calibration.csv` and
/// `diagnostics.json`, returning a one-line summary and the calibration
/// report for reuse in the BLP table.
fn diagnostics_into(
    runner: &mut Runner,
    bundle: &mut OutputBundle,
    config: &PipelineConfig,
    prepared: &Prepared,
    sample: &CenteredSample,
    estimates: &CateEstimates,
    delimiter: u8,
) -> CliResult<(String, CalibrationReport)> {
    let bins = config.output.histogram_bins;
    let frame = &prepared.frame;

    let prop_hist = staged("diagnostics", propensity_histogram(&sample.e_hat, bins))?;
    histogram_pair(
        bundle,
        "propensity_hist",
        &prop_hist,
        "Estimated propensity scores",
        "e_hat",
        None,
        delimiter,
    );

    let means = staged(
        "diagnostics",
        fit_conditional_means(
            frame,
            &config.nuisance_params(),
            config.seed.wrapping_add(SEED_CONDITIONAL_MEANS),
        ),
    )?;
    let bias_estimate = staged(
        "diagnostics",
        bias(
            &sample.e_hat,
            &means.mu0_hat,
            &means.mu1_hat,
            means.w_bar,
            frame.y(),
        ),
    )?;
    let bias_hist = figures::histogram_over_range(&bias_estimate.scaled, bins)?;
    histogram_pair(
        bundle,
        "bias_hist",
        &bias_hist,
        "Scaled prediction bias",
        "b_hat / sd(y)",
        Some(0.0),
        delimiter,
    );

    let calibration = staged(
        "diagnostics",
        hetfx_core::calibration_from_predictions(
            frame,
            &sample.y_tilde,
            &sample.w_tilde,
            &estimates.tau,
        ),
    )?;
    let mut calib_rows: Vec<Vec<String>> = vec![vec![
        "mean_forest_prediction".into(),
        fmt_f64(calibration.mean_forest.estimate),
        fmt_f64(calibration.mean_forest.standard_error),
        fmt_f64(calibration.mean_forest.t_stat),
        fmt_f64(calibration.mean_forest.p_value),
    ]];
    if let Some(diff) = &calibration.differential {
        calib_rows.push(vec![
            "differential_forest_prediction".into(),
            fmt_f64(diff.estimate),
            fmt_f64(diff.standard_error),
            fmt_f64(diff.t_stat),
            fmt_f64(diff.p_value),
        ]);
    }
    bundle.insert(
        "calibration.csv",
        csvio::render_table(
            &["coefficient", "estimate", "standard_error", "t_stat", "p_value"],
            &calib_rows,
            delimiter,
        ),
    );

    let bias_summary = bias_estimate.summary();

    #[derive(Serialize)]
    struct DiagnosticsDoc<'a> {
        n_rows: usize,
        n_clusters: usize,
        clipped_rows: usize,
        propensity_mean: f64,
        propensity_sd: f64,
        bias: &'a BiasSummary,
        calibration: &'a CalibrationReport,
    }
    let doc = DiagnosticsDoc {
        n_rows: frame.n_rows(),
        n_clusters: frame.n_clusters(),
        clipped_rows: sample.clipped,
        propensity_mean: prop_hist.mean,
        propensity_sd: prop_hist.sd,
        bias: &bias_summary,
        calibration: &calibration,
    };
    let mut doc_bytes = serde_json::to_vec_pretty(&doc).expect("diagnostics serialize");
    doc_bytes.push(b'\n');
    bundle.insert("diagnostics.json", doc_bytes);

    runner.result("mean_forest_prediction", calibration.mean_forest.estimate);
    if let Some(diff) = &calibration.differential {
        runner.result("differential_forest_prediction", diff.estimate);
    }
    runner.result("tau_bar", calibration.tau_bar);
    runner.result("bias_share_at_least_5pct", bias_summary.share_at_least_5pct);
    runner.count("clipped_rows", sample.clipped);

    let summary = format!(
        "mean forest prediction {:.3}, differential {}, |bias|/sd(y) >= 5% share {:.3}",
        calibration.mean_forest.estimate,
        calibration
            .differential
            .as_ref()
            .map(|d| format!("{:.3}", d.estimate))
            .unwrap_or_else(|| "n/a".into()),
        bias_summary.share_at_least_5pct
    );
    Ok((summary, calibration))
}

fn feature_list(config_list: &Option<Vec<String>>, frame: &AnalysisFrame) -> CliResult<Vec<String>> {
    match config_list {
        Some(names) => {
            for name in names {
                if frame.column_index(name).is_none() {
                    return Err(CliError::Config(format!(
                        "configured feature `{name}` is not in the frame"
                    )));
                }
            }
            Ok(names.clone())
        }
        None => Ok(frame.columns().iter().map(|c| c.name.clone()).collect()),
    }
}

/// `blp`: best linear projection of τ̂ on covariates.
pub fn run_blp(
    config: &PipelineConfig,
    config_text: &str,
    model: &Path,
    residuals: &Path,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("blp", config, config_text);
    let (prepared, sample, _forest, estimates) = rescore(config, model, residuals)?;

    let features = feature_list(&config.blp.features, &prepared.frame)?;
    let result = staged(
        "blp",
        blp(
            &prepared.frame,
            &estimates.tau,
            &sample.e_hat,
            &features,
            config.blp.weights,
            config.blp.cluster_fe,
        ),
    )?;

    let mut bundle = OutputBundle::default();
    bundle.insert("blp.csv", blp_table(&result, None, delimiter));

    runner.note_stages(&prepared.stage_rows);
    note_prepared_counts(&mut runner, &prepared);
    runner.result("ate", result.intercept.estimate);
    runner.result("ate_se", result.intercept.standard_error);
    runner.highlight(format!(
        "ate {:.4} (se {:.4}, t {:.2}) over {} rows",
        result.intercept.estimate,
        result.intercept.standard_error,
        result.intercept.t_stat,
        result.n_rows
    ));
    runner.finish(bundle, out_dir)
}

/// `clan`: covariate means by τ̂ quartile.
pub fn run_clan(
    config: &PipelineConfig,
    config_text: &str,
    model: &Path,
    residuals: &Path,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("clan", config, config_text);
    let (prepared, _sample, _forest, estimates) = rescore(config, model, residuals)?;

    let features = feature_list(&config.clan.features, &prepared.frame)?;
    let result = staged("clan", clan(&prepared.frame, &estimates.tau, &features, &[]))?;

    let mut bundle = OutputBundle::default();
    bundle.insert("clan.csv", clan_table(&result, delimiter));

    runner.note_stages(&prepared.stage_rows);
    note_prepared_counts(&mut runner, &prepared);
    runner.result("tau_gap_q4_q1", result.tau.gap);
    runner.highlight(format!(
        "tau_hat quartile gap (q4 − q1): {:.4}",
        result.tau.gap
    ));
    runner.finish(bundle, out_dir)
}

/// `mincer`: estimate worker ability from the panel and emit the table.
pub fn run_mincer(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("mincer", config, config_text);

    let panel = if let Some(dgp) = &config.input.synthetic {
        staged("load", generate(dgp, config.seed))?.panel
    } else {
        let path = config.input.panel.as_ref().ok_or_else(|| {
            CliError::Config("mincer needs `input.panel` (or synthetic input)".into())
        })?;
        csvio::load_panel(path, delimiter).map_err(|e| e.in_stage("load"))?
    };
    runner.note_stages(&[("load", panel.len())]);

    let estimates = staged(
        "mincer",
        fit_mincer(&panel, config.mincer.variant, config.mincer.age_powers),
    )?;
    runner.count("workers", estimates.worker.len());
    runner.count("excluded_workers", estimates.excluded.len());
    runner.count("iterations", estimates.iterations);

    let mut bundle = OutputBundle::default();
    bundle.insert("ability.csv", ability_table(&estimates, delimiter));

    runner.highlight(format!(
        "estimated ability for {} workers ({} excluded) in {} sweeps",
        estimates.worker.len(),
        estimates.excluded.len(),
        estimates.iterations
    ));
    runner.finish(bundle, out_dir)
}

/// `report`: correlation matrix plus an optional single-column histogram,
/// over the prepared (filtered, encoded, standardized) frame.
pub fn run_report(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("report", config, config_text);
    let prepared = prepare(config)?;

    let columns = feature_list(&config.report.correlation_columns, &prepared.frame)?;
    let mut bundle = OutputBundle::default();
    bundle.insert(
        "correlation.csv",
        figures::correlation_csv(&prepared.frame, &columns, delimiter)?,
    );

    if let Some(name) = &config.report.histogram_column {
        let j = prepared.frame.column_index(name).ok_or_else(|| {
            CliError::Config(format!("histogram column `{name}` is not in the frame"))
        })?;
        let hist =
            figures::histogram_over_range(prepared.frame.feature(j), config.output.histogram_bins)?;
        histogram_pair(
            &mut bundle,
            &format!("{name}_hist"),
            &hist,
            name,
            name,
            config.report.histogram_marker,
            delimiter,
        );
    }

    runner.note_stages(&prepared.stage_rows);
    note_prepared_counts(&mut runner, &prepared);
    runner.highlight(format!(
        "correlation matrix over {} columns from {} rows",
        columns.len(),
        prepared.frame.n_rows()
    ));
    runner.finish(bundle, out_dir)
}

/// `pipeline`: the full run — fit, diagnostics, BLP (with calibration rows),
/// CLAN, per-row estimates, and the τ̂ histogram with an ATE marker.
pub fn run_pipeline(
    config: &PipelineConfig,
    config_text: &str,
    out_dir: &Path,
) -> CliResult<RunReport> {
    let delimiter = config.input.delimiter_byte()?;
    let mut runner = Runner::new("pipeline", config, config_text);

    let fitted = fit(config)?;
    let estimates = staged(
        "estimates",
        fitted.forest.cate_estimates(
            &fitted.prepared.frame,
            &fitted.sample.y_tilde,
            &fitted.sample.w_tilde,
        ),
    )?;

    let mut bundle = OutputBundle::default();

    // Diagnostics (propensity, bias, calibration); the calibration report
    // is reused inside the BLP table.
    let (summary, calibration) = diagnostics_into(
        &mut runner,
        &mut bundle,
        config,
        &fitted.prepared,
        &fitted.sample,
        &estimates,
        delimiter,
    )?;
    runner.highlight(summary);

    // BLP with calibration rows.
    let features = feature_list(&config.blp.features, &fitted.prepared.frame)?;
    let blp_result = staged(
        "blp",
        blp(
            &fitted.prepared.frame,
            &estimates.tau,
            &fitted.sample.e_hat,
            &features,
            config.blp.weights,
            config.blp.cluster_fe,
        ),
    )?;
    bundle.insert(
        "blp.csv",
        blp_table(&blp_result, Some(&calibration), delimiter),
    );

    // CLAN.
    let clan_features = feature_list(&config.clan.features, &fitted.prepared.frame)?;
    let clan_result = staged(
        "clan",
        clan(&fitted.prepared.frame, &estimates.tau, &clan_features, &[]),
    )?;
    bundle.insert("clan.csv", clan_table(&clan_result, delimiter));

    // Per-row estimates and the effect histogram with the ATE marker.
    bundle.insert(
        "cate.csv",
        cate_table(&fitted.prepared.frame, &estimates, delimiter),
    );
    let tau_hist = figures::histogram_over_range(&estimates.tau, config.output.histogram_bins)?;
    histogram_pair(
        &mut bundle,
        "tau_hist",
        &tau_hist,
        "Estimated treatment effects",
        "tau_hat",
        Some(blp_result.intercept.estimate),
        delimiter,
    );

    if config.output.write_model {
        bundle.insert(
            "model.jsonl",
            forestfile::render_forest(&fitted.forest, &fitted.prepared.frame),
        );
        bundle.insert(
            "residuals.csv",
            csvio::render_residuals(&fitted.sample, delimiter),
        );
    }

    runner.note_stages(&fitted.prepared.stage_rows);
    note_prepared_counts(&mut runner, &fitted.prepared);
    runner.result("ate", blp_result.intercept.estimate);
    runner.result("ate_se", blp_result.intercept.standard_error);
    runner.highlight(format!(
        "ate {:.4} (se {:.4}, t {:.2}); tau_bar {:.4}",
        blp_result.intercept.estimate,
        blp_result.intercept.standard_error,
        blp_result.intercept.t_stat,
        estimates.tau_bar
    ));
    runner.finish(bundle, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;

    fn tiny_config(extra: &str) -> (PipelineConfig, String) {
        let text = format!(
            "seed = 17\n\
             [input]\n\
             [input.synthetic]\n\
             n_municipalities = 24\n\
             workers_per_municipality = 15\n\
             [input.synthetic.tau]\n\
             kind = \"constant\"\n\
             value = 0.1\n\
             [nuisance]\n\
             num_trees = 60\n\
             [causal]\n\
             num_trees = 80\n\
             {extra}"
        );
        (PipelineConfig::parse(&text).unwrap(), text)
    }

    #[test]
    fn prepare_filters_truth_in_lockstep_with_the_frame() {
        let (config, _) = tiny_config(
            "[filters]\nbandwidth = 5.0\nsubsample = [\"employed_lag == 1\"]\n",
        );
        let prepared = prepare(&config).unwrap();
        let truth = prepared.truth.as_ref().unwrap();
        assert_eq!(truth.tau.len(), prepared.frame.n_rows());
        // Margins survive standardization untouched; check the lockstep
        // filter via the frame's own margin column.
        for (m_frame, m_truth) in prepared.frame.margin().iter().zip(&truth.margin) {
            assert_eq!(m_frame, m_truth);
        }
        assert!(prepared
            .frame
            .margin()
            .iter()
            .all(|m| m.abs() <= 5.0));
        // The restriction pinned its own dummy, which was then dropped.
        assert_eq!(prepared.constant_columns, vec!["employed_lag".to_string()]);
        assert!(prepared.frame.column_index("employed_lag").is_none());
        // Stage bookkeeping saw every stage.
        let names: Vec<&str> = prepared.stage_rows.iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            vec!["load", "bandwidth", "subsample", "mean_encode", "standardize"]
        );
    }

    #[test]
    fn prepare_standardizes_every_feature() {
        let (config, _) = tiny_config("");
        let prepared = prepare(&config).unwrap();
        for meta in prepared.frame.columns() {
            assert_eq!(
                meta.source,
                hetfx_core::ColumnSource::Standardized,
                "column `{}`",
                meta.name
            );
        }
        // Encoded columns were appended before standardization.
        assert!(prepared.frame.column_index("cluster_y_loo").is_some());
        assert!(prepared.frame.column_index("cluster_log_size").is_some());
    }

    #[test]
    fn mincer_stage_appends_a_standardized_ability_column() {
        let (config, _) = tiny_config("[mincer]\nenabled = true\n");
        let prepared = prepare(&config).unwrap();
        let j = prepared.frame.column_index("ability").expect("ability column");
        let meta = &prepared.frame.columns()[j];
        assert_eq!(meta.source, hetfx_core::ColumnSource::Ability);
        let values = prepared.frame.feature(j);
        let mean = hetfx_core::stats::mean(values);
        let sd = hetfx_core::stats::population_sd(values);
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((sd - 1.0).abs() < 1e-10, "sd {sd}");
    }

    #[test]
    fn empty_bandwidth_fails_with_the_stage_name() {
        let (config, _) = tiny_config("[filters]\nbandwidth = 1e-9\n");
        let err = prepare(&config).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("bandwidth"), "{err}");
    }

    #[test]
    fn output_bundle_writes_everything_or_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = OutputBundle::default();
        bundle.insert("a.txt", b"alpha".to_vec());
        bundle.insert("b.txt", b"beta".to_vec());
        bundle.write_all(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("a.txt")).unwrap(), b"alpha");
        assert_eq!(std::fs::read(dir.path().join("b.txt")).unwrap(), b"beta");
    }

    #[test]
    fn train_and_rescore_agree_end_to_end() {
        let (config, text) = tiny_config("");
        let dir = tempfile::tempdir().unwrap();
        run_train(&config, &text, dir.path()).unwrap();
        assert!(dir.path().join("model.jsonl").exists());
        assert!(dir.path().join("residuals.csv").exists());
        assert!(dir.path().join("manifest.json").exists());

        let (_prepared, _sample, forest, estimates) = rescore(
            &config,
            &dir.path().join("model.jsonl"),
            &dir.path().join("residuals.csv"),
        )
        .unwrap();
        assert_eq!(estimates.tau.len(), 24 * 15);
        assert_eq!(forest.params.num_trees, 80);
        assert!(estimates.tau_bar.is_finite());
    }

    #[test]
    fn rescore_rejects_a_model_trained_on_different_data() {
        let (config, text) = tiny_config("");
        let dir = tempfile::tempdir().unwrap();
        run_train(&config, &text, dir.path()).unwrap();

        // Same file set, different seed → different frame → digest mismatch.
        let (other, _) = tiny_config("");
        let mut other = other;
        other.seed = 18;
        let err = rescore(
            &other,
            &dir.path().join("model.jsonl"),
            &dir.path().join("residuals.csv"),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("audit"), "{err}");
    }
}
