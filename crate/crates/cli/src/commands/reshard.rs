use std::cell::RefCell;
use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rayon::prelude::*;
use serde_json::json;

use mmpack::curation::{select_by_uid_set, Coverage, UidSet};
use mmpack::ingest::{read_shard, write_shard, CaptionSample, Shard};

use super::{ensure_dir, exit_code_for, expand_glob, write_atomically, write_report, Failure};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ReshardSummary {
    pub coverage: Coverage,
    pub scanned: usize,
    /// Matches whose uid had already been emitted from an earlier shard.
    pub duplicates: usize,
    pub outputs: Vec<(PathBuf, usize)>,
    pub failures: Vec<Failure>,
}

impl ReshardSummary {
    pub fn exit_code(&self) -> i32 {
        exit_code_for(&self.failures)
    }
}

impl fmt::Display for ReshardSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (path, n) in &self.outputs {
            writeln!(f, "{}: {n} samples", path.display())?;
        }
        for fail in &self.failures {
            writeln!(f, "FAILED {}: {}", fail.path.display(), fail.message)?;
        }
        write!(
            f,
            "reshard: scanned {} samples, keep-set {} uids, matched {}, unmatched {}, wrote {} shards",
            self.scanned,
            self.coverage.requested,
            self.coverage.matched,
            self.coverage.unmatched,
            self.outputs.len()
        )
    }
}

/// Shards in path order, read `batch` at a time on the pool. Unreadable
/// shards are skipped and recorded.
struct ShardStream<'a> {
    pending: VecDeque<PathBuf>,
    ready: VecDeque<Shard>,
    batch: usize,
    pool: &'a rayon::ThreadPool,
    failures: Rc<RefCell<Vec<Failure>>>,
}

impl Iterator for ShardStream<'_> {
    type Item = Shard;

    fn next(&mut self) -> Option<Shard> {
        while self.ready.is_empty() {
            if self.pending.is_empty() {
                return None;
            }
            let n = self.batch.min(self.pending.len());
            let paths: Vec<PathBuf> = self.pending.drain(..n).collect();
            let read: Vec<_> = self
                .pool
                .install(|| paths.par_iter().map(|p| read_shard(p)).collect());
            for (path, result) in paths.iter().zip(read) {
                match result {
                    Ok(r) => self.ready.push_back(r.shard),
                    Err(e) => self
                        .failures
                        .borrow_mut()
                        .push(Failure::new(path, &CliError::from(e))),
                }
            }
        }
        self.ready.pop_front()
    }
}

pub fn run(cfg: &RunConfig) -> Result<ReshardSummary, CliError> {
    let uid_path = cfg.uid_set.as_deref().ok_or_else(|| {
        CliError::Usage("reshard needs a uid set (--uid-set or `uid_set =`)".into())
    })?;
    let keep = UidSet::read(uid_path)?;
    let inputs = expand_glob(cfg.input()?)?;
    if inputs.is_empty() {
        return Err(CliError::Usage(format!(
            "no shards matched {}",
            cfg.input()?
        )));
    }
    let output = cfg.output()?;
    ensure_dir(output)?;
    let pool = cfg.pool()?;

    let failures = Rc::new(RefCell::new(Vec::new()));
    let stream = ShardStream {
        pending: inputs.into(),
        ready: VecDeque::new(),
        batch: cfg.workers,
        pool: &pool,
        failures: Rc::clone(&failures),
    };
    let mut selector = select_by_uid_set(stream, &keep);
    let mut outputs = Vec::new();
    let mut buffer: Vec<CaptionSample> = Vec::with_capacity(cfg.shard_capacity.min(1 << 16));
    // uids may repeat across input shards; the first copy wins
    let mut emitted = HashSet::new();
    let mut duplicates = 0;
    for sample in selector.by_ref() {
        if !emitted.insert(sample.uid.clone()) {
            duplicates += 1;
            continue;
        }
        buffer.push(sample);
        if buffer.len() == cfg.shard_capacity {
            outputs.push(flush(
                output,
                &cfg.prefix,
                outputs.len(),
                std::mem::take(&mut buffer),
            )?);
        }
    }
    if !buffer.is_empty() {
        outputs.push(flush(output, &cfg.prefix, outputs.len(), buffer)?);
    }
    let summary = ReshardSummary {
        coverage: selector.coverage(),
        scanned: selector.scanned(),
        duplicates,
        outputs,
        failures: failures.take(),
    };
    let report = cfg
        .report
        .clone()
        .unwrap_or_else(|| output.join("reshard-report.jsonl"));
    write_report(&report, &report_rows(&summary))?;
    Ok(summary)
}

fn flush(
    dir: &Path,
    prefix: &str,
    index: usize,
    samples: Vec<CaptionSample>,
) -> Result<(PathBuf, usize), CliError> {
    let dest = dir.join(format!("{prefix}-{index:06}.tar"));
    let shard = Shard::new(index as u64, samples)?;
    write_atomically(&dest, |tmp| {
        write_shard(&shard, tmp).map_err(CliError::from)
    })?;
    Ok((dest, shard.len()))
}

fn report_rows(s: &ReshardSummary) -> Vec<serde_json::Value> {
    let mut rows: Vec<_> = s
        .outputs
        .iter()
        .map(|(path, n)| json!({ "kind": "output", "path": path, "samples": n }))
        .collect();
    rows.extend(s.failures.iter().map(
        |f| json!({ "kind": "shard", "status": "failed", "input": f.path, "error": f.message }),
    ));
    rows.push(json!({
        "kind": "total",
        "scanned": s.scanned,
        "requested": s.coverage.requested,
        "matched": s.coverage.matched,
        "unmatched": s.coverage.unmatched,
        "duplicates": s.duplicates,
        "output_shards": s.outputs.len(),
        "shards_failed": s.failures.len(),
    }));
    rows
}
