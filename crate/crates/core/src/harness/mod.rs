//! Synthetic corpora, brute-force oracles, experiment orchestration and reports.

mod experiment;
mod oracle;
mod report;
mod synth;

pub use experiment::{
    experiment_model, gap_stats, run_eviction_eval, run_pruning_eval, EvictionExperiment, EvictionRun,
    ExperimentConfig, GapStats, HistogramBin, HistogramSpec, OccupancyRow, Scorer, ScorerSource, TaggedEvent,
    EXPERIMENT_SCHEMA_VERSION,
};
pub use oracle::{average_ranks, loo_oracle, loo_oracle_masked, spearman};
pub use report::{
    emit_report, emit_rows, parse_report_csv, parse_report_json, read_report, resolve_out_dir, summarize, write_rows,
    Format, ReportRecord, SummaryRow, DEFAULT_OUT_DIR, OUT_DIR_ENV, REPORT_SCHEMA_VERSION,
};
pub use synth::{generate_corpus, generate_labeled, generate_sample, CorpusSpec, SyntheticTaskSpec, TokenRole};
