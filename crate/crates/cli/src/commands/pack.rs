use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use mmpack::ingest::read_shard;
use mmpack::lengths::{PackerConfig, TokenizerPort};
use mmpack::packer::{pack_shard, PackReport};
use mmpack::packstore::{write_container, ContainerParams, EXTENSION};

use super::{ensure_dir, exit_code_for, expand_glob, write_atomically, write_report, Failure};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedShard {
    pub input: PathBuf,
    pub output: PathBuf,
    pub shard_id: u64,
    pub skipped: usize,
    pub report: PackReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackSummary {
    pub shards: Vec<PackedShard>,
    pub failures: Vec<Failure>,
    pub total: PackReport,
    pub report_path: PathBuf,
}

impl PackSummary {
    pub fn exit_code(&self) -> i32 {
        exit_code_for(&self.failures)
    }
}

pub fn output_name(prefix: &str, shard_id: u64) -> String {
    format!("{prefix}-{shard_id:06}.{EXTENSION}")
}

impl fmt::Display for PackSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.shards {
            writeln!(
                f,
                "{} -> {}: {} samples in {} sequences, padding {:.4}",
                s.input.display(),
                s.output.display(),
                s.report.sample_count,
                s.report.bin_count,
                s.report.padding_ratio
            )?;
        }
        for fail in &self.failures {
            writeln!(f, "FAILED {}: {}", fail.path.display(), fail.message)?;
        }
        let t = &self.total;
        writeln!(f, "shards packed      {}", self.shards.len())?;
        writeln!(f, "samples            {}", t.sample_count)?;
        writeln!(f, "truncated samples  {}", t.truncated_samples)?;
        writeln!(
            f,
            "sequences          {} (lower bound {})",
            t.bin_count, t.lower_bound
        )?;
        writeln!(f, "content tokens     {}", t.total_content_tokens)?;
        writeln!(f, "pad tokens         {}", t.total_pad_tokens)?;
        writeln!(f, "padding ratio      {:.6}", t.padding_ratio)?;
        writeln!(f, "naive padding      {:.6}", t.naive_padding_ratio)?;
        writeln!(f, "samples/sequence   {:.3}", t.samples_per_bin_mean)?;
        write!(f, "report             {}", self.report_path.display())
    }
}

pub fn run(cfg: &RunConfig) -> Result<PackSummary, CliError> {
    let inputs = expand_glob(cfg.input()?)?;
    if inputs.is_empty() {
        return Err(CliError::Usage(format!(
            "no shards matched {}",
            cfg.input()?
        )));
    }
    let output = cfg.output()?;
    let tok = cfg.load_tokenizer()?;
    let packer = cfg.packer_config(tok.as_ref())?;
    let params = ContainerParams::new(packer.context_length, packer.visual_tokens_per_image)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    // Output names derive from shard ids, so two inputs with one id would collide.
    let mut ids: HashMap<u64, &Path> = HashMap::new();
    for input in &inputs {
        let id = mmpack::ingest::shard_id_from_path(input);
        if let Some(prev) = ids.insert(id, input) {
            return Err(CliError::Usage(format!(
                "{} and {} both map to shard id {id}",
                prev.display(),
                input.display()
            )));
        }
    }
    ensure_dir(output)?;

    let results: Vec<Result<PackedShard, CliError>> = cfg.pool()?.install(|| {
        inputs
            .par_iter()
            .map(|input| pack_one(input, output, &cfg.prefix, tok.as_ref(), &packer, params))
            .collect()
    });

    let mut shards = Vec::new();
    let mut failures = Vec::new();
    for (input, result) in inputs.iter().zip(results) {
        match result {
            Ok(s) => shards.push(s),
            Err(e) => failures.push(Failure::new(input, &e)),
        }
    }
    let total = shards.iter().fold(
        PackReport::from_counts(packer.context_length, 0, 0, 0, 0),
        |acc, s| acc.merge(&s.report),
    );
    let report_path = cfg
        .report
        .clone()
        .unwrap_or_else(|| output.join(format!("{}-report.jsonl", cfg.prefix)));
    let summary = PackSummary {
        shards,
        failures,
        total,
        report_path,
    };
    write_report(&summary.report_path, &report_rows(&summary))?;
    Ok(summary)
}

fn pack_one(
    input: &Path,
    output: &Path,
    prefix: &str,
    tok: &(dyn TokenizerPort + Send + Sync),
    packer: &PackerConfig,
    params: ContainerParams,
) -> Result<PackedShard, CliError> {
    let read = read_shard(input)?;
    let shard_id = read.shard.shard_id;
    let (seqs, report) = pack_shard(read.shard, tok, packer)?;
    let dest = output.join(output_name(prefix, shard_id));
    write_atomically(&dest, |tmp| {
        write_container(&seqs, params, tmp).map_err(CliError::from)
    })?;
    Ok(PackedShard {
        input: input.to_owned(),
        output: dest,
        shard_id,
        skipped: read.skipped.len(),
        report,
    })
}

fn with_report(mut row: Value, report: &PackReport) -> Value {
    if let (Value::Object(row), Ok(Value::Object(fields))) =
        (&mut row, serde_json::to_value(report))
    {
        row.extend(fields);
    }
    row
}

fn report_rows(s: &PackSummary) -> Vec<Value> {
    let mut rows: Vec<_> = s
        .shards
        .iter()
        .map(|p| {
            with_report(
                json!({
                    "kind": "shard",
                    "status": "ok",
                    "input": p.input,
                    "output": p.output,
                    "shard_id": p.shard_id,
                    "skipped": p.skipped,
                }),
                &p.report,
            )
        })
        .collect();
    rows.extend(s.failures.iter().map(
        |f| json!({ "kind": "shard", "status": "failed", "input": f.path, "error": f.message }),
    ));
    rows.push(with_report(
        json!({
            "kind": "total",
            "shards_ok": s.shards.len(),
            "shards_failed": s.failures.len(),
        }),
        &s.total,
    ));
    rows
}
