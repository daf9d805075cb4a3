use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use mmpack::curation::{attach_scores, filter_by_threshold, FilterStats, ScoreTable};
use mmpack::ingest::{read_shard, write_shard, Shard};

use super::{
    ensure_dir, exit_code_for, expand_glob, file_name, write_atomically, write_report, Failure,
};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow {
    pub input: PathBuf,
    pub output: PathBuf,
    pub stats: FilterStats,
    /// Incomplete samples dropped while reading.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSummary {
    pub metric: String,
    pub threshold: f64,
    pub rows: Vec<FilterRow>,
    pub failures: Vec<Failure>,
    pub unmatched_score_rows: Option<usize>,
}

impl FilterSummary {
    pub fn totals(&self) -> FilterStats {
        self.rows
            .iter()
            .fold(FilterStats::default(), |acc, r| FilterStats {
                kept: acc.kept + r.stats.kept,
                dropped: acc.dropped + r.stats.dropped,
                missing: acc.missing + r.stats.missing,
            })
    }

    pub fn exit_code(&self) -> i32 {
        exit_code_for(&self.failures)
    }
}

impl fmt::Display for FilterSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "{}: kept {} dropped {} missing-score {} skipped {}",
                file_name(&r.input),
                r.stats.kept,
                r.stats.dropped,
                r.stats.missing,
                r.skipped
            )?;
        }
        for fail in &self.failures {
            writeln!(f, "FAILED {}: {}", fail.path.display(), fail.message)?;
        }
        let t = self.totals();
        write!(
            f,
            "filter {} >= {}: {} shards, kept {} dropped {} missing-score {}",
            self.metric,
            self.threshold,
            self.rows.len(),
            t.kept,
            t.dropped,
            t.missing
        )
    }
}

pub fn run(cfg: &RunConfig) -> Result<FilterSummary, CliError> {
    let threshold = cfg.threshold.ok_or_else(|| {
        CliError::Usage("filter needs a threshold (--threshold or `threshold =`)".into())
    })?;
    let inputs = expand_glob(cfg.input()?)?;
    if inputs.is_empty() {
        return Err(CliError::Usage(format!(
            "no shards matched {}",
            cfg.input()?
        )));
    }
    let output = cfg.output()?;
    ensure_dir(output)?;
    let table = cfg.scores.as_deref().map(ScoreTable::read).transpose()?;

    let results: Vec<Result<(FilterRow, Vec<String>), CliError>> = cfg.pool()?.install(|| {
        inputs
            .par_iter()
            .map(|input| filter_one(input, output, cfg, threshold, table.as_ref()))
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut matched_score_uids = std::collections::HashSet::new();
    for (input, result) in inputs.iter().zip(results) {
        match result {
            Ok((row, matched)) => {
                matched_score_uids.extend(matched);
                rows.push(row);
            }
            Err(e) => failures.push(Failure::new(input, &e)),
        }
    }
    let summary = FilterSummary {
        metric: cfg.metric.to_string(),
        threshold,
        unmatched_score_rows: table.as_ref().map(|t| t.len() - matched_score_uids.len()),
        rows,
        failures,
    };
    let report = cfg
        .report
        .clone()
        .unwrap_or_else(|| output.join("filter-report.jsonl"));
    write_report(&report, &report_rows(&summary))?;
    Ok(summary)
}

fn filter_one(
    input: &Path,
    output: &Path,
    cfg: &RunConfig,
    threshold: f64,
    table: Option<&ScoreTable>,
) -> Result<(FilterRow, Vec<String>), CliError> {
    let read = read_shard(input)?;
    let shard_id = read.shard.shard_id;
    let skipped = read.skipped.len();
    let mut matched = Vec::new();
    let samples: Vec<_> = match table {
        Some(table) => {
            let with_scores: Vec<_> = attach_scores(read.shard.samples, table).collect();
            matched.extend(
                with_scores
                    .iter()
                    .filter(|s| table.get(&s.uid).is_some())
                    .map(|s| s.uid.clone()),
            );
            with_scores
        }
        None => read.shard.samples,
    };
    let mut filter = filter_by_threshold(samples, cfg.metric.clone(), threshold);
    let kept: Vec<_> = filter.by_ref().collect();
    let stats = filter.stats();
    let dest = output.join(input.file_name().unwrap_or_default());
    let shard = Shard::new(shard_id, kept)?;
    write_atomically(&dest, |tmp| {
        write_shard(&shard, tmp).map_err(CliError::from)
    })?;
    Ok((
        FilterRow {
            input: input.to_owned(),
            output: dest,
            stats,
            skipped,
        },
        matched,
    ))
}

fn report_rows(s: &FilterSummary) -> Vec<serde_json::Value> {
    let mut rows: Vec<_> = s
        .rows
        .iter()
        .map(|r| {
            json!({
                "kind": "shard",
                "status": "ok",
                "input": r.input,
                "output": r.output,
                "kept": r.stats.kept,
                "dropped": r.stats.dropped,
                "missing_score": r.stats.missing,
                "skipped": r.skipped,
            })
        })
        .collect();
    rows.extend(s.failures.iter().map(
        |f| json!({ "kind": "shard", "status": "failed", "input": f.path, "error": f.message }),
    ));
    let t = s.totals();
    rows.push(json!({
        "kind": "total",
        "metric": s.metric,
        "threshold": s.threshold,
        "shards_ok": s.rows.len(),
        "shards_failed": s.failures.len(),
        "kept": t.kept,
        "dropped": t.dropped,
        "missing_score": t.missing,
        "unmatched_score_rows": s.unmatched_score_rows,
    }));
    rows
}
