//! Deterministic figure emission: histogram CSV/SVG pairs and the Pearson
//! correlation matrix. SVG output is plain shapes in a fixed 800×600
//! viewbox — identical input bytes in, identical figure bytes out.

use hetfx_core::stats::{self, Histogram};
use hetfx_core::AnalysisFrame;

use crate::csvio::{fmt_f64, render_table};
use crate::error::{CliError, CliResult};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 25.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 65.0;

/// Builds a histogram over the data's own range, widening a degenerate
/// (constant) range by ±0.5 so the single occupied bin still renders.
pub fn histogram_over_range(values: &[f64], bins: usize) -> CliResult<Histogram> {
    if values.is_empty() {
        return Err(CliError::Validation(
            "histogram over an empty vector".into(),
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    Ok(stats::histogram(values, lo, hi, bins)?)
}

/// Histogram CSV: one row per bin with `bin_lo, bin_hi, count`.
pub fn histogram_csv(hist: &Histogram, delimiter: u8) -> Vec<u8> {
    let rows: Vec<Vec<String>> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(k, count)| {
            vec![
                fmt_f64(hist.edges[k]),
                fmt_f64(hist.edges[k + 1]),
                count.to_string(),
            ]
        })
        .collect();
    render_table(&["bin_lo", "bin_hi", "count"], &rows, delimiter)
}

/// Histogram SVG: bars over the bin edges, axis frame, optional vertical
/// marker line (exactly one `class="marker"` element when requested).
pub fn histogram_svg(hist: &Histogram, title: &str, x_label: &str, marker: Option<f64>) -> String {
    let lo = hist.edges[0];
    let hi = *hist.edges.last().expect("histogram has edges");
    let max_count = hist.counts.iter().copied().max().unwrap_or(0).max(1);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |v: f64| MARGIN_LEFT + (v - lo) / (hi - lo) * plot_w;
    let y_of = |count: u64| MARGIN_TOP + plot_h * (1.0 - count as f64 / max_count as f64);

    let mut svg = String::with_capacity(4096);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect x=\"0\" y=\"0\" width=\"800\" height=\"600\" fill=\"#ffffff\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"28\" font-family=\"sans-serif\" font-size=\"18\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    for (k, &count) in hist.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let x0 = x_of(hist.edges[k]);
        let x1 = x_of(hist.edges[k + 1]);
        let y = y_of(count);
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"#4878a8\" stroke=\"#ffffff\" stroke-width=\"0.5\"/>\n",
            x0,
            y,
            x1 - x0,
            MARGIN_TOP + plot_h - y
        ));
    }

    if let Some(at) = marker {
        let x = x_of(at.clamp(lo, hi));
        svg.push_str(&format!(
            "<line class=\"marker\" x1=\"{x:.2}\" y1=\"{MARGIN_TOP:.2}\" x2=\"{x:.2}\" \
             y2=\"{:.2}\" stroke=\"#e07a28\" stroke-width=\"2\"/>\n",
            MARGIN_TOP + plot_h
        ));
    }

    // Axis frame and end labels.
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
         stroke=\"#202020\" stroke-width=\"1\"/>\n",
        MARGIN_TOP + plot_h,
        WIDTH - MARGIN_RIGHT,
        MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT:.2}\" y1=\"{MARGIN_TOP:.2}\" x2=\"{MARGIN_LEFT:.2}\" \
         y2=\"{:.2}\" stroke=\"#202020\" stroke-width=\"1\"/>\n",
        MARGIN_TOP + plot_h
    ));
    for (v, anchor) in [(lo, "start"), (hi, "end")] {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
             text-anchor=\"{anchor}\">{}</text>\n",
            x_of(v),
            MARGIN_TOP + plot_h + 20.0,
            trim_label(v)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"end\">{max_count}</text>\n",
        MARGIN_LEFT - 8.0,
        MARGIN_TOP + 5.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"end\">0</text>\n",
        MARGIN_LEFT - 8.0,
        MARGIN_TOP + plot_h + 5.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 20.0,
        escape(x_label)
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Pearson correlation matrix over the named feature columns: symmetric,
/// exact unit diagonal, emitted as CSV with a leading name column.
pub fn correlation_csv(
    frame: &AnalysisFrame,
    names: &[String],
    delimiter: u8,
) -> CliResult<Vec<u8>> {
    if names.len() < 2 {
        return Err(CliError::Config(
            "correlation matrix needs at least two columns".into(),
        ));
    }
    let cols: Vec<&[f64]> = names
        .iter()
        .map(|name| {
            frame
                .column_index(name)
                .map(|j| frame.feature(j))
                .ok_or_else(|| {
                    CliError::Config(format!("correlation column `{name}` is not in the frame"))
                })
        })
        .collect::<CliResult<_>>()?;

    let k = cols.len();
    let mut r = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        r[i][i] = 1.0;
        for j in 0..i {
            let v = stats::pearson(cols[i], cols[j])?;
            r[i][j] = v;
            r[j][i] = v;
        }
    }

    let mut header: Vec<&str> = vec!["column"];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = (0..k)
        .map(|i| {
            let mut row = Vec::with_capacity(k + 1);
            row.push(names[i].clone());
            row.extend(r[i].iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    Ok(render_table(&header, &rows, delimiter))
}

/// Short label for axis ends: shortest round-trip is overkill for display,
/// but stays deterministic.
fn trim_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
