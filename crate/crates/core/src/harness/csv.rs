//! Metrics CSV and the plot-ready report derived from it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ExperimentConfig, MetricsRow};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 10] = [
    "scheme",
    "k",
    "bits_per_dim",
    "kept_dims",
    "trials",
    "missing_rate",
    "avg_latency_ms",
    "avg_uplink_mbits",
    "downlink_bits",
    "ci95_missing",
];

/// Decimal rendering with 6 significant digits; scientific outside
/// `[1e-5, 1e15)`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `# key=value` config header, column header, one line per row.
pub fn render_csv(rows: &[MetricsRow], config: &ExperimentConfig) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no metrics rows to export"));
    }
    let mut out = String::from("# semdas metrics; embeddings and channel parameters below\n");
    for line in config.to_text().lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str(&CSV_COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.k,
            r.bits_per_dim,
            r.kept_dims,
            r.trials,
            format_sig6(r.missing_rate),
            format_sig6(r.avg_latency_ms),
            format_sig6(r.avg_uplink_mbits),
            r.downlink_bits,
            format_sig6(r.ci95_missing),
        );
    }
    Ok(out)
}

pub fn export_csv(rows: &[MetricsRow], config: &ExperimentConfig, path: impl AsRef<Path>) -> Result<()> {
    let text = render_csv(rows, config)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads rows back from [`render_csv`] output; `#` lines are skipped.
pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !saw_header {
            if fields != CSV_COLUMNS {
                return Err(err(
                    line_no,
                    format!("expected header {:?}", CSV_COLUMNS.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if fields.len() != CSV_COLUMNS.len() {
            return Err(err(
                line_no,
                format!("expected {} fields, got {}", CSV_COLUMNS.len(), fields.len()),
            ));
        }
        fn field<T: std::str::FromStr>(f: &str, name: &str, line: usize, path: &Path) -> Result<T> {
            f.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad {name} {f:?}"),
            })
        }
        rows.push(MetricsRow {
            scheme: fields[0].to_string(),
            k: field(fields[1], "k", line_no, path)?,
            bits_per_dim: field(fields[2], "bits_per_dim", line_no, path)?,
            kept_dims: field(fields[3], "kept_dims", line_no, path)?,
            trials: field(fields[4], "trials", line_no, path)?,
            missing_rate: field(fields[5], "missing_rate", line_no, path)?,
            avg_latency_ms: field(fields[6], "avg_latency_ms", line_no, path)?,
            avg_uplink_mbits: field(fields[7], "avg_uplink_mbits", line_no, path)?,
            downlink_bits: field(fields[8], "downlink_bits", line_no, path)?,
            ci95_missing: field(fields[9], "ci95_missing", line_no, path)?,
        });
    }
    if !saw_header {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no CSV header found".into(),
        });
    }
    Ok(rows)
}

/// Two-column `latency_ms,missing_rate` blocks, one per (scheme, d, b),
/// points ordered by k. Blocks are separated by a blank line.
pub fn report(rows: &[MetricsRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        (&a.scheme, a.kept_dims, a.bits_per_dim, a.k).cmp(&(&b.scheme, b.kept_dims, b.bits_per_dim, b.k))
    });
    let mut out = String::new();
    let mut current: Option<(&str, usize, u32)> = None;
    for r in &rows {
        let key = (r.scheme.as_str(), r.kept_dims, r.bits_per_dim);
        if current != Some(key) {
            if current.is_some() {
                out.push('\n');
            }
            let _ = writeln!(
                out,
                "# scheme={} kept_dims={} bits_per_dim={}\nlatency_ms,missing_rate",
                r.scheme, r.kept_dims, r.bits_per_dim
            );
            current = Some(key);
        }
        let _ = writeln!(
            out,
            "{},{}",
            format_sig6(r.avg_latency_ms),
            format_sig6(r.missing_rate)
        );
    }
    out
}
