use std::fmt;
use std::path::PathBuf;

use serde_json::{json, Value};

use mmpack::curation::{mixture_report, MixtureSpec};
use mmpack::packer::PackReport;
use mmpack::packstore::read_all;

use super::{expand_glob, write_report};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Default)]
pub struct StatsOptions {
    /// Report the padding ratio of each record, not just each container.
    pub per_record: bool,
    /// `(source, count)` rows for a mixture table.
    pub mixture: Vec<(String, f64)>,
}

/// Parses `name=count`.
pub fn parse_mixture_entry(s: &str) -> Result<(String, f64), String> {
    let (name, count) = s
        .rsplit_once('=')
        .ok_or_else(|| format!("expected name=count, got {s:?}"))?;
    let count: f64 = count
        .trim()
        .parse()
        .map_err(|_| format!("bad count in {s:?}"))?;
    if !count.is_finite() || count < 0.0 {
        return Err(format!("count must be a non-negative number in {s:?}"));
    }
    Ok((name.trim().to_owned(), count))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordStats {
    pub index: usize,
    pub samples: usize,
    pub content_tokens: usize,
    pub padding_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerStats {
    pub path: PathBuf,
    pub report: PackReport,
    pub records: Vec<RecordStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsSummary {
    pub containers: Vec<ContainerStats>,
    pub total: PackReport,
    pub mixture: Option<MixtureSpec>,
}

impl StatsSummary {
    pub fn exit_code(&self) -> i32 {
        crate::error::EXIT_OK
    }
}

impl fmt::Display for StatsSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.containers {
            writeln!(
                f,
                "{}: {} sequences, {} samples, padding {:.6}, samples/sequence {:.3}",
                c.path.display(),
                c.report.bin_count,
                c.report.sample_count,
                c.report.padding_ratio,
                c.report.samples_per_bin_mean
            )?;
            for r in &c.records {
                writeln!(
                    f,
                    "  record {:>6}: {} samples, {} tokens, padding {:.6}",
                    r.index, r.samples, r.content_tokens, r.padding_ratio
                )?;
            }
        }
        let t = &self.total;
        writeln!(f, "sequences          {}", t.bin_count)?;
        writeln!(f, "samples            {}", t.sample_count)?;
        writeln!(f, "padding ratio      {:.6}", t.padding_ratio)?;
        write!(f, "samples/sequence   {:.3}", t.samples_per_bin_mean)?;
        if let Some(m) = &self.mixture {
            write!(f, "\n\n{m}")?;
        }
        Ok(())
    }
}

pub fn run(cfg: &RunConfig, opts: &StatsOptions) -> Result<StatsSummary, CliError> {
    let pattern = cfg.input()?;
    let paths = expand_glob(pattern)?;
    if paths.is_empty() && opts.mixture.is_empty() {
        return Err(CliError::Usage(format!("no containers matched {pattern}")));
    }
    let mut containers = Vec::with_capacity(paths.len());
    for path in paths {
        let (header, seqs) = read_all(&path)?;
        let context = header.context_length as usize;
        let records = if opts.per_record {
            seqs.iter()
                .enumerate()
                .map(|(index, s)| {
                    let r = PackReport::from_sequences(std::slice::from_ref(s), context);
                    RecordStats {
                        index,
                        samples: r.sample_count,
                        content_tokens: r.total_content_tokens,
                        padding_ratio: r.padding_ratio,
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        containers.push(ContainerStats {
            report: PackReport::from_sequences(&seqs, context),
            path,
            records,
        });
    }
    let total = containers
        .iter()
        .fold(PackReport::default(), |acc, c| acc.merge(&c.report));
    let mixture = (!opts.mixture.is_empty()).then(|| mixture_report(&opts.mixture));
    let summary = StatsSummary {
        containers,
        total,
        mixture,
    };
    if let Some(path) = &cfg.report {
        write_report(path, &report_rows(&summary))?;
    }
    Ok(summary)
}

fn report_rows(s: &StatsSummary) -> Vec<Value> {
    let mut rows = Vec::new();
    for c in &s.containers {
        rows.push(json!({
            "kind": "container",
            "path": c.path,
            "sequences": c.report.bin_count,
            "samples": c.report.sample_count,
            "content_tokens": c.report.total_content_tokens,
            "pad_tokens": c.report.total_pad_tokens,
            "padding_ratio": c.report.padding_ratio,
            "samples_per_sequence": c.report.samples_per_bin_mean,
        }));
        for r in &c.records {
            rows.push(json!({
                "kind": "record",
                "path": c.path,
                "index": r.index,
                "samples": r.samples,
                "content_tokens": r.content_tokens,
                "padding_ratio": r.padding_ratio,
            }));
        }
    }
    rows.push(json!({
        "kind": "total",
        "sequences": s.total.bin_count,
        "samples": s.total.sample_count,
        "content_tokens": s.total.total_content_tokens,
        "pad_tokens": s.total.total_pad_tokens,
        "padding_ratio": s.total.padding_ratio,
        "samples_per_sequence": s.total.samples_per_bin_mean,
    }));
    if let Some(m) = &s.mixture {
        rows.extend(m.entries.iter().map(|e| {
            json!({ "kind": "mixture", "source": e.source, "count": e.count, "fraction": e.fraction })
        }));
    }
    rows
}
