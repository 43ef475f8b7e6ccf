//! CSV and metadata emission. The CSV dialect is fixed: comma separators,
//! '.' decimal point, lowercase scientific notation with 17 significant
//! digits, a header row, and LF line endings, so identical configs produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// 17-significant-digit scientific rendering used for every float column.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Long-format per-trial rows: `trial,algorithm,t,metric,value`.
pub const TRACE_HEADER: &str = "trial,algorithm,t,metric,value";

/// Aggregate rows: `algorithm,t,metric,mean,p10,p90`.
pub const AGGREGATE_HEADER: &str = "algorithm,t,metric,mean,p10,p90";

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub trial: usize,
    pub algorithm: String,
    pub t: usize,
    pub metric: &'static str,
    pub value: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 48 + 32);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.trial,
            row.algorithm,
            row.t,
            row.metric,
            format_value(row.value)
        ));
    }
    out
}

/// Mean and percentile band of one metric at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggRow {
    pub t: usize,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

pub fn aggregate_csv(
    aggregates: &BTreeMap<String, BTreeMap<&'static str, Vec<AggRow>>>,
) -> String {
    let mut out = String::new();
    out.push_str(AGGREGATE_HEADER);
    out.push('\n');
    for (algorithm, metrics) in aggregates {
        for (metric, rows) in metrics {
            for row in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    algorithm,
                    row.t,
                    metric,
                    format_value(row.mean),
                    format_value(row.p10),
                    format_value(row.p90)
                ));
            }
        }
    }
    out
}

/// Linear-interpolation percentile of already-sorted values.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}
