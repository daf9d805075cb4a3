use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use mmpack::lengths::TokenizerPort;
use mmpack::packstore::{read_container, verify_container, VerifyReport};

use super::{expand_glob, write_report};
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_DATA, EXIT_IO, EXIT_OK};

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantFailure {
    pub index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerCheck {
    pub report: VerifyReport,
    pub missing: bool,
    pub invariants: Vec<InvariantFailure>,
}

impl ContainerCheck {
    pub fn is_clean(&self) -> bool {
        !self.missing && self.report.is_clean() && self.invariants.is_empty()
    }

    pub fn first_failure(&self) -> Option<String> {
        let path = self.report.path.display();
        if self.missing {
            return Some(format!("{path}: no such file"));
        }
        self.report.first_failure().or_else(|| {
            self.invariants
                .first()
                .map(|f| format!("{path}: record {}: {}", f.index, f.reason))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySummary {
    pub checks: Vec<ContainerCheck>,
}

impl VerifySummary {
    pub fn is_clean(&self) -> bool {
        self.checks.iter().all(ContainerCheck::is_clean)
    }

    pub fn first_failure(&self) -> Option<String> {
        self.checks.iter().find_map(ContainerCheck::first_failure)
    }

    pub fn exit_code(&self) -> i32 {
        if self.checks.iter().any(|c| c.missing) {
            EXIT_IO
        } else if self.is_clean() {
            EXIT_OK
        } else {
            EXIT_DATA
        }
    }
}

impl fmt::Display for VerifySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let r = &c.report;
            let status = if c.is_clean() { "ok" } else { "FAILED" };
            writeln!(
                f,
                "{status:<6} {}: {} records ok, {} corrupt, {} tokens, {} images",
                r.path.display(),
                r.records_ok,
                r.corrupt.len() + c.invariants.len(),
                r.token_total,
                r.image_total
            )?;
        }
        match self.first_failure() {
            Some(first) => write!(f, "first failure: {first}"),
            None => write!(f, "{} containers verified", self.checks.len()),
        }
    }
}

/// Inputs are explicit paths or glob patterns. A path that names nothing is
/// reported as missing rather than silently skipped.
pub fn run(cfg: &RunConfig, paths: &[String]) -> Result<VerifySummary, CliError> {
    let mut targets: Vec<PathBuf> = Vec::new();
    let mut patterns: Vec<&str> = paths.iter().map(String::as_str).collect();
    if let Some(input) = &cfg.input {
        patterns.push(input);
    }
    if patterns.is_empty() {
        return Err(CliError::Usage("no containers given".into()));
    }
    for p in patterns {
        let matched = expand_glob(p)?;
        if matched.is_empty() {
            targets.push(PathBuf::from(p));
        } else {
            targets.extend(matched);
        }
    }
    let tok = cfg.load_tokenizer()?;
    let checks = targets.iter().map(|p| check(p, tok.as_ref())).collect();
    let summary = VerifySummary { checks };
    if let Some(path) = &cfg.report {
        write_report(path, &report_rows(&summary))?;
    }
    Ok(summary)
}

fn check(path: &Path, tok: &dyn TokenizerPort) -> ContainerCheck {
    if !path.is_file() {
        return ContainerCheck {
            report: VerifyReport {
                path: path.to_owned(),
                ..Default::default()
            },
            missing: true,
            invariants: Vec::new(),
        };
    }
    let report = verify_container(path);
    let mut invariants = Vec::new();
    if let (Some(header), Ok(reader)) = (report.header, read_container(path)) {
        let context = header.context_length as usize;
        let visual = header.visual_tokens_per_image as usize;
        for (index, item) in reader.enumerate() {
            let index = index as u32;
            // Records that fail to decode are already in the verify report.
            let Ok(seq) = item else { continue };
            if let Err(reason) =
                seq.check(context, visual, tok.placeholder_id(), Some(tok.pad_id()))
            {
                invariants.push(InvariantFailure { index, reason });
            }
        }
    }
    ContainerCheck {
        report,
        missing: false,
        invariants,
    }
}

fn report_rows(s: &VerifySummary) -> Vec<Value> {
    s.checks
        .iter()
        .map(|c| {
            let r = &c.report;
            json!({
                "path": r.path,
                "status": if c.is_clean() { "ok" } else { "failed" },
                "missing": c.missing,
                "records_ok": r.records_ok,
                "corrupt": r.corrupt.len(),
                "invariant_failures": c.invariants.len(),
                "unreadable": r.unreadable,
                "token_total": r.token_total,
                "image_total": r.image_total,
                "first_failure": c.first_failure(),
            })
        })
        .collect()
}
