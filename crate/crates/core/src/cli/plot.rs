//! Dependency-free SVG charts for histogram CSVs and refinement traces.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::refine::RefinementTrace;

use super::CliError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One histogram row; `hi` is `None` for the overflow bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: Option<f64>,
    pub count: u64,
}

#[derive(Debug, serde::Deserialize)]
struct BinRow {
    bin_lo: f64,
    bin_hi: String,
    count: u64,
}

/// Parses a `bin_lo,bin_hi,count` CSV; errors carry the offending line.
pub fn read_histogram_csv(path: &Path) -> Result<Vec<Bin>, CliError> {
    let bad = |line: u64, msg: &dyn std::fmt::Display| CliError::Usage(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(0, &e))?;
    let headers = reader.headers().map_err(|e| bad(1, &e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["bin_lo", "bin_hi", "count"] {
        return Err(bad(1, &"expected header bin_lo,bin_hi,count"));
    }
    let mut bins = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.position().map_or(0, |p| p.line()), &e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: BinRow = record.deserialize(Some(&headers)).map_err(|e| bad(line, &e))?;
        let hi = match row.bin_hi.trim() {
            "inf" => None,
            s => Some(s.parse::<f64>().map_err(|e| bad(line, &e))?),
        };
        if hi.is_some_and(|h| h <= row.bin_lo) {
            return Err(bad(line, &"bin_hi must exceed bin_lo"));
        }
        bins.push(Bin { lo: row.bin_lo, hi, count: row.count });
    }
    if bins.is_empty() {
        return Err(bad(1, &"histogram has no bins"));
    }
    Ok(bins)
}

/// `(iteration, loss)` points of a trace; errors if no loss was recorded.
pub fn trace_series(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let trace: RefinementTrace = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), e.line())))?;
    let points: Vec<(f64, f64)> = trace.entries.iter().filter_map(|e| Some((e.iteration as f64, e.loss?))).collect();
    if points.is_empty() {
        return Err(CliError::Usage(format!("{}: trace has no loss values", path.display())));
    }
    Ok(points)
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn axes(out: &mut String, x_label: &str, y_label: &str, x_range: (f64, f64), y_max: f64) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 2.0 + 10.0);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = x0 + f * (x1 - x0);
        let y = y0 - f * (y0 - y1);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + 16.0, tick(x_range.0 + f * (x_range.1 - x_range.0)));
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, tick(f * y_max));
    }
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN / 2.0 + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN / 2.0 - 150.0;
        let _ = writeln!(out, r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, x + 14.0, escape(name));
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() { format!("{v:.0}") } else { format!("{v:.2}") }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart with one bar per bin per series; several series overlay with
/// partial opacity. The overflow bin is drawn one bin-width past the range.
pub fn histogram_svg(series: &[(String, Vec<Bin>)]) -> String {
    let width = series
        .iter()
        .flat_map(|(_, b)| b.iter().filter_map(|b| Some(b.hi? - b.lo)))
        .fold(f64::INFINITY, f64::min);
    let width = if width.is_finite() { width } else { 1.0 };
    let x_max = series
        .iter()
        .flat_map(|(_, b)| b.iter().map(|b| b.hi.unwrap_or(b.lo + width)))
        .fold(0.0, f64::max);
    let y_max = series.iter().flat_map(|(_, b)| b.iter().map(|b| b.count)).max().unwrap_or(1).max(1) as f64;
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 2.0 + 10.0);
    let sx = |v: f64| x0 + v / x_max * (x1 - x0);
    let sy = |c: f64| y0 - c / y_max * (y0 - y1);

    let mut out = String::new();
    header(&mut out, "Epipolar distance histogram");
    axes(&mut out, "distance to epipolar line (px)", "matches", (0.0, x_max), y_max);
    let opacity = if series.len() > 1 { 0.5 } else { 0.9 };
    for (i, (_, bins)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for b in bins {
            let hi = b.hi.unwrap_or(b.lo + width);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="{opacity}"/>"#,
                sx(b.lo),
                sy(b.count as f64),
                (sx(hi) - sx(b.lo)).max(0.5),
                y0 - sy(b.count as f64)
            );
        }
    }
    legend(&mut out, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Line chart of `(x, y)` series.
pub fn line_svg(series: &[(String, Vec<(f64, f64)>)], title: &str, x_label: &str, y_label: &str) -> String {
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let x_max = points.clone().map(|p| p.0).fold(0.0, f64::max).max(1.0);
    let y_max = points.map(|p| p.1).fold(0.0, f64::max);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 2.0 + 10.0);
    let sx = |v: f64| x0 + v / x_max * (x1 - x0);
    let sy = |v: f64| y0 - v.max(0.0) / y_max * (y0 - y1);

    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, x_label, y_label, (0.0, x_max), y_max);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, COLORS[i % COLORS.len()], path.join(" "));
    }
    legend(&mut out, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

fn series_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Renders histogram CSVs (bars, overlaid when several) or trace JSONs
/// (loss curves) to one SVG. Nothing is written if any input is invalid.
pub fn cmd_plot(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("plot needs at least one input".into()));
    }
    let is_csv = |p: &PathBuf| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let svg = if inputs.iter().all(is_csv) {
        let series = inputs.iter().map(|p| Ok((series_name(p), read_histogram_csv(p)?))).collect::<Result<Vec<_>, CliError>>()?;
        histogram_svg(&series)
    } else if inputs.iter().any(is_csv) {
        return Err(CliError::Usage("cannot mix histogram CSVs and traces in one plot".into()));
    } else {
        let series = inputs.iter().map(|p| Ok((series_name(p), trace_series(p)?))).collect::<Result<Vec<_>, CliError>>()?;
        line_svg(&series, "Refinement loss", "iteration", "loss")
    };
    std::fs::write(out, svg).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn one_bar_per_bin() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "h.csv", "bin_lo,bin_hi,count\n0,0.5,3\n0.5,1,1\n1,inf,2\n");
        let out = dir.path().join("h.svg");
        cmd_plot(&[csv.clone()], &out).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        // Background and legend swatch are the two extra rects.
        assert_eq!(svg.matches("<rect").count(), 3 + 2);
        cmd_plot(&[csv], &dir.path().join("again.svg")).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("again.svg")).unwrap(), svg);
    }

    #[test]
    fn pre_post_overlay_has_two_series() {
        let dir = tempfile::tempdir().unwrap();
        let pre = write(dir.path(), "pre.csv", "bin_lo,bin_hi,count\n0,0.5,1\n0.5,1,4\n1,inf,0\n");
        let post = write(dir.path(), "post.csv", "bin_lo,bin_hi,count\n0,0.5,5\n0.5,1,0\n1,inf,0\n");
        let out = dir.path().join("o.svg");
        cmd_plot(&[pre, post], &out).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert_eq!(svg.matches("fill-opacity=\"0.5\"").count(), 6);
        assert!(svg.contains(">pre<") && svg.contains(">post<"));
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "bad.csv", "bin_lo,bin_hi,count\n0,0.5,3\n0.5,x,1\n");
        let out = dir.path().join("bad.svg");
        match cmd_plot(&[csv], &out) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("bad.csv:3"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(!out.exists());
    }

    #[test]
    fn empty_trace_is_an_error_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let trace = write(
            dir.path(),
            "trace.json",
            r#"{"entries":[],"best_iteration":0,"best_latent":[],"final_latent":[],"latent_shape":[6],"seed_attempts":1}"#,
        );
        let out = dir.path().join("t.svg");
        assert!(matches!(cmd_plot(&[trace], &out), Err(CliError::Usage(_))));
        assert!(!out.exists());
    }

    #[test]
    fn trace_plots_as_polyline() {
        let dir = tempfile::tempdir().unwrap();
        let trace = write(
            dir.path(),
            "trace.json",
            r#"{"entries":[{"iteration":0,"loss":2.0,"epipolar":2.0,"rgb":0.0,"matches":10},{"iteration":1,"loss":1.0,"epipolar":1.0,"rgb":0.0,"matches":10}],"best_iteration":1,"best_latent":[],"final_latent":[],"latent_shape":[6],"seed_attempts":1}"#,
        );
        let out = dir.path().join("t.svg");
        cmd_plot(&[trace], &out).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap().matches("<polyline").count(), 1);
    }
}
