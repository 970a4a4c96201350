//! Provenance audit: recompute every derived file from the temporal
//! records and compare bytes with what is on disk. Nothing is written.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bridge::{compute_bridge_outputs, BRIDGE_FILE};
use super::config::RunConfig;
use super::fit::{compute_fit_outputs, FITS_FILE, SUMMARY_FILE};
use super::json::to_canonical;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub file: String,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.entries.iter().all(|e| e.matches)
    }
}

fn compare(out: &Path, name: &str, expected: Vec<u8>, entries: &mut Vec<AuditEntry>) {
    let on_disk = fs::read(out.join(name)).ok();
    entries.push(AuditEntry {
        file: name.into(),
        matches: on_disk.as_deref() == Some(expected.as_slice()),
    });
}

/// Check `fits.json`, `figure_summary.json` and, when present, `bridge.json`
/// against a recomputation. Returns a data error naming the files that differ.
pub fn cmd_audit(config: &RunConfig, out: &Path) -> Result<AuditReport> {
    let mut entries = Vec::new();
    let (fits, summary) = compute_fit_outputs(config, out)?;
    compare(out, FITS_FILE, to_canonical(&fits)?, &mut entries);
    if out.join(BRIDGE_FILE).exists() {
        let (report, summary) = compute_bridge_outputs(config, out)?;
        compare(out, BRIDGE_FILE, to_canonical(&report)?, &mut entries);
        compare(out, SUMMARY_FILE, to_canonical(&summary)?, &mut entries);
    } else if let Some(summary) = summary {
        compare(out, SUMMARY_FILE, to_canonical(&summary)?, &mut entries);
    }
    let report = AuditReport { entries };
    if !report.ok() {
        let bad: Vec<&str> = report.entries.iter().filter(|e| !e.matches).map(|e| e.file.as_str()).collect();
        return Err(Error::Data(format!("audit mismatch in {}", bad.join(", "))));
    }
    Ok(report)
}
