//! Bridge stage: external metric exponents per step and correlation tables
//! between transport observables and external metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{BridgeSection, RunConfig};
use super::fit::{compute_fit_outputs, FigureSummary, FitsFile, SUMMARY_FILE};
use super::json::{read_json, write_json};
use super::probe::load_temporal;
use crate::bridge::{
    fit_external_exponent, lr_partial_pearson, pearson, reconstruct_lr, Correlation, ExternalMetricSeries,
    LrSchedule, MetricEntry, MetricKind, PartialCorrelation,
};
use crate::error::{Error, Result};
use crate::nulls::NullVariant;
use crate::pipeline::fit::collect_records;
use crate::scaling::TransportRecord;

pub const BRIDGE_SCHEMA_VERSION: &str = "1";
pub const BRIDGE_FILE: &str = "bridge.json";

/// Scope name of rows correlating per-step aggregates across steps.
pub const CROSS_STEP: &str = "cross_step";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalExponentPoint {
    pub step: u64,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRow {
    /// `cross_step` or the model id for within-model rows.
    pub scope: String,
    pub internal: String,
    pub external: String,
    pub n: usize,
    pub steps: Vec<u64>,
    pub raw: Option<Correlation>,
    pub lr_partial: Option<PartialCorrelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub scope: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub schema_version: String,
    pub family: String,
    pub config_hash: String,
    pub fit_config_hash: String,
    pub metric_kind: MetricKind,
    pub floor: f64,
    pub evaluation_line: Vec<String>,
    pub schedule: Option<LrSchedule>,
    pub external_exponents: Vec<ExternalExponentPoint>,
    pub rows: Vec<BridgeRow>,
    pub journal: Vec<JournalEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricTable {
    Rows(Vec<MetricEntry>),
    Wrapped { entries: Vec<MetricEntry> },
}

/// Read a metric table. `.json` files hold a list of rows (or an object
/// with an `entries` list); anything else is parsed as CSV with a header.
pub fn read_metric_table(path: &Path) -> Result<Vec<MetricEntry>> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        return Ok(match read_json::<MetricTable>(path)? {
            MetricTable::Rows(rows) => rows,
            MetricTable::Wrapped { entries } => entries,
        });
    }
    let format_err = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| format_err(e.to_string()))?);
    }
    Ok(rows)
}

/// Metric value on the scale used for correlations: log10 of the floored
/// value for perplexity, the raw value for accuracy.
fn metric_scale(series: &ExternalMetricSeries, value: f64) -> f64 {
    match series.metric_kind {
        MetricKind::Perplexity => series.floored(value).log10(),
        MetricKind::MeanAccuracy => value,
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

struct Pairing<'a> {
    schedule: Option<&'a LrSchedule>,
    journal: &'a mut Vec<JournalEntry>,
}

impl Pairing<'_> {
    fn row(&mut self, scope: &str, internal: &str, external: &str, points: &BTreeMap<u64, (f64, f64)>) -> Result<BridgeRow> {
        let steps: Vec<u64> = points.keys().copied().collect();
        let x: Vec<f64> = points.values().map(|p| p.0).collect();
        let y: Vec<f64> = points.values().map(|p| p.1).collect();
        let n = steps.len();
        let raw = if n >= 3 {
            Some(pearson(&x, &y)?)
        } else {
            self.note(scope, format!("{internal} vs {external}: {n} aligned steps, need 3"));
            None
        };
        let lr_partial = match self.schedule {
            Some(schedule) => {
                let in_range: Vec<usize> = (0..n).filter(|&i| steps[i] <= schedule.t_total).collect();
                if in_range.len() < n {
                    self.note(
                        scope,
                        format!(
                            "{internal} vs {external}: {} steps beyond the schedule end left out of the partial",
                            n - in_range.len()
                        ),
                    );
                }
                if in_range.len() >= 4 {
                    let eta = in_range
                        .iter()
                        .map(|&i| reconstruct_lr(schedule, steps[i]))
                        .collect::<Result<Vec<_>>>()?;
                    let px: Vec<f64> = in_range.iter().map(|&i| x[i]).collect();
                    let py: Vec<f64> = in_range.iter().map(|&i| y[i]).collect();
                    Some(lr_partial_pearson(&px, &py, &eta)?)
                } else {
                    self.note(scope, format!("{internal} vs {external}: too few steps for a partial"));
                    None
                }
            }
            None => None,
        };
        Ok(BridgeRow {
            scope: scope.into(),
            internal: internal.into(),
            external: external.into(),
            n,
            steps,
            raw,
            lr_partial,
        })
    }

    fn note(&mut self, scope: &str, message: String) {
        self.journal.push(JournalEntry { scope: scope.into(), message });
    }
}

fn pair(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>) -> BTreeMap<u64, (f64, f64)> {
    a.iter().filter_map(|(s, x)| b.get(s).map(|y| (*s, (*x, *y)))).collect()
}

/// Build the bridge report from fits, real-variant records and a metric
/// table.
pub fn compute_bridge(
    config: &RunConfig,
    section: &BridgeSection,
    fits: &FitsFile,
    records: &[TransportRecord],
    entries: Vec<MetricEntry>,
) -> Result<BridgeReport> {
    let series = ExternalMetricSeries {
        family: config.family.clone(),
        metric_kind: section.metric_kind,
        entries,
        floor: section.floor,
    };
    series.validate().map_err(|e| Error::Data(e.to_string()))?;
    if let Some(s) = &section.schedule {
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
    }
    let line = (!section.evaluation_line.is_empty()).then_some(section.evaluation_line.as_slice());
    let mut journal = Vec::new();

    let mut external_exponents = Vec::new();
    for step in series.steps() {
        match fit_external_exponent(&series, step, line)? {
            Some(f) => external_exponents.push(ExternalExponentPoint {
                step,
                slope: f.slope,
                intercept: f.intercept,
                r2: f.r2,
            }),
            None => journal.push(JournalEntry {
                scope: CROSS_STEP.into(),
                message: format!("step {step}: fewer than 3 metric scales, no external exponent"),
            }),
        }
    }

    let real: Vec<&TransportRecord> = records
        .iter()
        .filter(|r| r.variant == NullVariant::Real && !r.is_degenerate())
        .collect();

    // per-step aggregates
    let d: BTreeMap<u64, f64> = fits.fits_for(NullVariant::Real).iter().map(|f| (f.step, f.d)).collect();
    let mut vrel_by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut dur_by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &real {
        if let Some(v) = r.v_rel {
            vrel_by_step.entry(r.step).or_default().push(v);
        }
        dur_by_step.entry(r.step).or_default().push(r.normalized_duration());
    }
    let collapse = |m: BTreeMap<u64, Vec<f64>>| -> BTreeMap<u64, f64> {
        m.into_iter().filter_map(|(s, v)| mean(&v).map(|x| (s, x))).collect()
    };
    let vrel_mean = collapse(vrel_by_step);
    let dur_mean = collapse(dur_by_step);

    let ext_exp: BTreeMap<u64, f64> = external_exponents.iter().map(|p| (p.step, p.slope)).collect();
    let mut metric_by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for e in series.entries.iter().filter(|e| line.is_none_or(|l| l.contains(&e.model_id))) {
        metric_by_step.entry(e.step).or_default().push(metric_scale(&series, e.value));
    }
    let metric_mean = collapse(metric_by_step);

    let internal_steps: BTreeSet<u64> = d.keys().chain(vrel_mean.keys()).copied().collect();
    let external_steps = series.steps();
    let unmatched_internal = internal_steps.difference(&external_steps).count();
    let unmatched_external = external_steps.difference(&internal_steps).count();
    if unmatched_internal + unmatched_external > 0 {
        journal.push(JournalEntry {
            scope: CROSS_STEP.into(),
            message: format!(
                "steps not aligned: {unmatched_internal} transport-only, {unmatched_external} metric-only; using the intersection"
            ),
        });
    }

    let mut pairing = Pairing {
        schedule: section.schedule.as_ref(),
        journal: &mut journal,
    };
    let mut rows = Vec::new();
    let internals = [("D", &d), ("v_rel", &vrel_mean), ("n_steps_per_n", &dur_mean)];
    let externals = [("external_exponent", &ext_exp), ("metric", &metric_mean)];
    for (iname, ival) in internals {
        for (ename, eval) in externals {
            rows.push(pairing.row(CROSS_STEP, iname, ename, &pair(ival, eval))?);
        }
    }

    // within-model rows
    let mut models: BTreeSet<&str> = series.entries.iter().map(|e| e.model_id.as_str()).collect();
    let transport_models: BTreeSet<&str> = real.iter().map(|r| r.model_id.as_str()).collect();
    for m in models.clone() {
        if !transport_models.contains(m) {
            pairing.note(m, "metric model has no transport records".into());
            models.remove(m);
        }
    }
    for m in models {
        let metric: BTreeMap<u64, f64> = series
            .entries
            .iter()
            .filter(|e| e.model_id == m)
            .map(|e| (e.step, metric_scale(&series, e.value)))
            .collect();
        let mine: Vec<&&TransportRecord> = real.iter().filter(|r| r.model_id == m).collect();
        let vrel: BTreeMap<u64, f64> = mine.iter().filter_map(|r| r.v_rel.map(|v| (r.step, v))).collect();
        let dur: BTreeMap<u64, f64> = mine.iter().map(|r| (r.step, r.normalized_duration())).collect();
        rows.push(pairing.row(m, "v_rel", "metric", &pair(&vrel, &metric))?);
        rows.push(pairing.row(m, "n_steps_per_n", "metric", &pair(&dur, &metric))?);
    }

    Ok(BridgeReport {
        schema_version: BRIDGE_SCHEMA_VERSION.into(),
        family: config.family.clone(),
        config_hash: fits.config_hash.clone(),
        fit_config_hash: fits.fit_config_hash.clone(),
        metric_kind: section.metric_kind,
        floor: section.floor,
        evaluation_line: section.evaluation_line.clone(),
        schedule: section.schedule,
        external_exponents,
        rows,
        journal,
    })
}

fn bridge_section(config: &RunConfig) -> Result<&BridgeSection> {
    config
        .bridge
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [bridge] section".into()))
}

/// Recompute the bridge report from the temporal files under `out`.
pub fn compute_bridge_outputs(config: &RunConfig, out: &Path) -> Result<(BridgeReport, FigureSummary)> {
    let section = bridge_section(config)?;
    let (fits, summary) = compute_fit_outputs(config, out)?;
    let Some(mut summary) = summary else {
        return Err(Error::NoFittableSteps(format!("no fittable steps for family {}", config.family)));
    };
    let records = collect_records(config, &load_temporal(out)?)?;
    let entries = read_metric_table(&section.metrics)?;
    let report = compute_bridge(config, section, &fits, &records, entries)?;
    summary.bridge_panels = Some(report.clone());
    Ok((report, summary))
}

/// Run the bridge stage: writes `bridge.json` and fills the bridge panels of
/// the figure summary.
pub fn cmd_bridge(config: &RunConfig, out: &Path) -> Result<BridgeReport> {
    let (report, summary) = compute_bridge_outputs(config, out)?;
    write_json(&out.join(BRIDGE_FILE), &report)?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    for entry in &report.journal {
        log::warn!("bridge [{}]: {}", entry.scope, entry.message);
    }
    Ok(report)
}
