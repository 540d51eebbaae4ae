//! Report records and their JSON / CSV serialization.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::metrics::{flops, flops_saved, kv_bytes, CostModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Environment variable that replaces the default output directory.
pub const OUT_DIR_ENV: &str = "ASYMTOK_OUT_DIR";

pub const DEFAULT_OUT_DIR: &str = "asymtok-out";

/// Output directory: explicit flag, then config, then the environment
/// variable, then [`DEFAULT_OUT_DIR`].
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config).map(Path::to_path_buf).unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUT_DIR.into())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

/// One row per (sample, method, policy, ratio). `n_full` and `n_kept` are
/// the token counts the cost columns are derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    /// `prune` or `evict`.
    pub experiment: String,
    pub sample: usize,
    pub method: String,
    pub policy: String,
    pub gap: Option<f64>,
    pub keep_ratio: Option<f64>,
    pub num_vision: usize,
    pub num_text: usize,
    pub kept_vision: usize,
    pub mse: f64,
    pub spearman: Option<f64>,
    pub n_full: u64,
    pub n_kept: u64,
    pub flops_full: u128,
    pub flops_pruned: u128,
    pub flops_saved: f64,
    pub kv_bytes_full: u128,
    pub kv_bytes_pruned: u128,
    pub edit_distance: Option<usize>,
    pub evictions: Option<usize>,
    pub peak_cache: Option<usize>,
    pub text_budget: Option<usize>,
}

impl ReportRecord {
    pub fn new(experiment: &str, sample: usize, method: &str, policy: &str) -> Self {
        Self {
            experiment: experiment.into(),
            sample,
            method: method.into(),
            policy: policy.into(),
            gap: None,
            keep_ratio: None,
            num_vision: 0,
            num_text: 0,
            kept_vision: 0,
            mse: 0.0,
            spearman: None,
            n_full: 0,
            n_kept: 0,
            flops_full: 0,
            flops_pruned: 0,
            flops_saved: 0.0,
            kv_bytes_full: 0,
            kv_bytes_pruned: 0,
            edit_distance: None,
            evictions: None,
            peak_cache: None,
            text_budget: None,
        }
    }

    /// Fills every cost column from the two token counts.
    pub fn set_costs(&mut self, cost: &CostModel, n_full: u64, n_kept: u64) -> Result<()> {
        self.n_full = n_full;
        self.n_kept = n_kept;
        self.flops_full = flops(n_full, cost).total;
        self.flops_pruned = flops(n_kept, cost).total;
        self.flops_saved = flops_saved(n_full, n_kept, cost)?;
        self.kv_bytes_full = kv_bytes(n_full, cost);
        self.kv_bytes_pruned = kv_bytes(n_kept, cost);
        Ok(())
    }

    /// True when the cost columns agree with a fresh computation.
    pub fn costs_consistent(&self, cost: &CostModel) -> bool {
        let mut fresh = self.clone();
        fresh.set_costs(cost, self.n_full, self.n_kept).is_ok() && fresh == *self
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema_version: u32,
    kind: &'a str,
    records: &'a [T],
}

#[derive(Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    kind: String,
    records: Vec<T>,
}

/// Writes rows as pretty JSON (with schema version) or RFC-4180 CSV.
/// Output depends only on the rows.
pub fn write_rows<T: Serialize, W: Write>(rows: &[T], kind: &str, format: Format, mut w: W) -> Result<()> {
    ensure!(!rows.is_empty(), Input, "refusing to write an empty {kind} report");
    match format {
        Format::Json => {
            let env = EnvelopeOut { schema_version: REPORT_SCHEMA_VERSION, kind, records: rows };
            serde_json::to_writer_pretty(&mut w, &env)?;
            w.write_all(b"\n")?;
        }
        Format::Csv => {
            let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(w);
            for r in rows {
                csv.serialize(r)?;
            }
            csv.flush()?;
        }
    }
    Ok(())
}

pub fn emit_rows<T: Serialize>(rows: &[T], kind: &str, path: &Path, format: Format) -> Result<()> {
    ensure!(!rows.is_empty(), Input, "refusing to write an empty {kind} report");
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rows(rows, kind, format, f)
}

pub fn emit_report(records: &[ReportRecord], path: &Path, format: Format) -> Result<()> {
    emit_rows(records, "records", path, format)
}

pub fn parse_report_json(text: &str) -> Result<Vec<ReportRecord>> {
    let env: Envelope<ReportRecord> = serde_json::from_str(text)?;
    ensure!(
        env.schema_version == REPORT_SCHEMA_VERSION,
        Input,
        "unsupported report schema_version {}",
        env.schema_version
    );
    ensure!(env.kind == "records", Input, "expected a records report, found {}", env.kind);
    Ok(env.records)
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Reads a report written by [`emit_report`]; the format follows the extension.
pub fn read_report(path: &Path) -> Result<Vec<ReportRecord>> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_report_csv(&text),
        _ => parse_report_json(&text),
    }
}

/// Means over the records sharing (experiment, method, policy, keep ratio).
/// Adaptive policies pool all their per-sample ratios in one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub method: String,
    pub policy: String,
    pub keep_ratio: Option<f64>,
    pub count: usize,
    pub mean_keep_ratio: Option<f64>,
    pub mean_mse: f64,
    pub mean_spearman: Option<f64>,
    pub mean_flops_saved: f64,
    pub mean_edit_distance: Option<f64>,
    pub total_evictions: Option<usize>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(records: &[ReportRecord]) -> Result<Vec<SummaryRow>> {
    ensure!(!records.is_empty(), Input, "no records to summarize");
    let mut groups: BTreeMap<(String, String, String, Option<u64>), Vec<&ReportRecord>> = BTreeMap::new();
    for r in records {
        let ratio_key = if r.policy == "uniform" { r.keep_ratio.map(f64::to_bits) } else { None };
        groups.entry((r.experiment.clone(), r.method.clone(), r.policy.clone(), ratio_key)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((experiment, method, policy, ratio), rs)| SummaryRow {
            experiment,
            method,
            policy,
            keep_ratio: ratio.map(f64::from_bits),
            count: rs.len(),
            mean_keep_ratio: mean(rs.iter().filter_map(|r| r.keep_ratio)),
            mean_mse: mean(rs.iter().map(|r| r.mse)).unwrap_or(0.0),
            mean_spearman: mean(rs.iter().filter_map(|r| r.spearman)),
            mean_flops_saved: mean(rs.iter().map(|r| r.flops_saved)).unwrap_or(0.0),
            mean_edit_distance: mean(rs.iter().filter_map(|r| r.edit_distance.map(|d| d as f64))),
            total_evictions: rs.iter().map(|r| r.evictions).sum(),
        })
        .collect())
}
