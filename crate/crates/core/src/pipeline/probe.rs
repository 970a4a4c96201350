//! Probe stage: run the cascade on every snapshot (and its nulls) and keep
//! one temporal-dynamics file per (family, model, variant).
//!
//! The stage is resumable. Records already present under the same probe
//! config hash are kept and not recomputed; a different hash is refused
//! unless `force` is set. A failing snapshot produces an error entry and
//! the batch continues.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::config::RunConfig;
use super::json::{read_json, write_json};
use crate::cascade::run_cascade;
use crate::error::{Error, Result};
use crate::graph::{get_or_build, GraphKey, ProbeGraph};
use crate::nulls::{generate_null, NullVariant};
use crate::scaling::TransportRecord;
use crate::snapshot::{read_manifest, read_snapshot, SnapshotManifest, DATA_EXTENSION, MANIFEST_EXTENSION};

pub const TEMPORAL_SCHEMA_VERSION: &str = "1";
pub const TEMPORAL_DIR: &str = "temporal";
pub const PROBE_REPORT_FILE: &str = "probe_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalDynamicsFile {
    pub schema_version: String,
    pub family: String,
    pub model_id: String,
    pub variant: NullVariant,
    pub config_hash: String,
    /// Sorted by strictly increasing step.
    pub records: Vec<TransportRecord>,
}

impl TemporalDynamicsFile {
    pub fn file_name(family: &str, model_id: &str, variant: NullVariant) -> String {
        format!("{family}__{model_id}__{variant}.json")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProbeErrorRecord {
    /// Snapshot manifest path relative to the snapshot root.
    pub snapshot: String,
    pub model_id: Option<String>,
    pub step: Option<u64>,
    pub variant: Option<NullVariant>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffGridModel {
    pub model_id: String,
    pub n_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: String,
    pub family: String,
    pub config_hash: String,
    pub n_snapshots: usize,
    pub n_records: usize,
    pub errors: Vec<ProbeErrorRecord>,
    /// Models whose field size is not a configured scale; kept as records,
    /// excluded from fits.
    pub off_grid: Vec<OffGridModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub computed: usize,
    pub reused: usize,
    pub errors: usize,
}

struct SnapshotEntry {
    rel: String,
    path: PathBuf,
    manifest: SnapshotManifest,
}

type RecordKey = (String, NullVariant);

pub fn temporal_dir(out: &Path) -> PathBuf {
    out.join(TEMPORAL_DIR)
}

/// All temporal-dynamics files under `out`, sorted by file name.
pub fn load_temporal(out: &Path) -> Result<Vec<TemporalDynamicsFile>> {
    let dir = temporal_dir(out);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

fn discover(config: &RunConfig, errors: &mut Vec<ProbeErrorRecord>) -> Result<Vec<SnapshotEntry>> {
    let root = &config.snapshot_root;
    if !root.is_dir() {
        return Err(Error::Config(format!("snapshot root {} is not a directory", root.display())));
    }
    let mut entries: Vec<SnapshotEntry> = Vec::new();
    let mut seen: BTreeSet<(String, u64)> = BTreeSet::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("walking {}: {e}", root.display())))?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().is_none_or(|e| e != MANIFEST_EXTENSION) {
            continue;
        }
        if !path.with_extension(DATA_EXTENSION).exists() {
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        let manifest = match read_manifest(path) {
            Ok(m) => m,
            Err(e) => {
                errors.push(ProbeErrorRecord {
                    snapshot: rel,
                    model_id: None,
                    step: None,
                    variant: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if manifest.family != config.family || manifest.field_kind.is_null() {
            continue;
        }
        if !seen.insert((manifest.model_id.clone(), manifest.step)) {
            errors.push(ProbeErrorRecord {
                snapshot: rel,
                model_id: Some(manifest.model_id.clone()),
                step: Some(manifest.step),
                variant: None,
                message: "duplicate snapshot for this model and step".into(),
            });
            continue;
        }
        entries.push(SnapshotEntry {
            rel,
            path: path.to_path_buf(),
            manifest,
        });
    }
    Ok(entries)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Run the probe stage, writing into `out`.
pub fn cmd_probe(config: &RunConfig, out: &Path, force: bool) -> Result<ProbeOutcome> {
    let hash = config.probe_hash();
    let cascade_config = config.probe.cascade_config();
    let variants: Vec<NullVariant> = std::iter::once(NullVariant::Real)
        .chain(config.null_variants())
        .collect();

    let mut records: BTreeMap<RecordKey, BTreeMap<u64, TransportRecord>> = BTreeMap::new();
    for file in load_temporal(out)? {
        if file.family != config.family {
            continue;
        }
        if file.config_hash != hash {
            if force {
                continue;
            }
            return Err(Error::Config(format!(
                "existing results for {} ({}) were produced with config hash {}, current is {hash}; \
                 use --force or a fresh output directory",
                file.model_id, file.variant, file.config_hash
            )));
        }
        let slot = records.entry((file.model_id.clone(), file.variant)).or_default();
        for r in file.records {
            slot.insert(r.step, r);
        }
    }

    let mut errors = Vec::new();
    let snapshots = discover(config, &mut errors)?;

    struct Task<'a> {
        entry: &'a SnapshotEntry,
        variants: Vec<NullVariant>,
    }
    let mut reused = 0;
    let tasks: Vec<Task> = snapshots
        .iter()
        .filter_map(|entry| {
            let m = &entry.manifest;
            let missing: Vec<NullVariant> = variants
                .iter()
                .copied()
                .filter(|v| {
                    !records
                        .get(&(m.model_id.clone(), *v))
                        .is_some_and(|s| s.contains_key(&m.step))
                })
                .collect();
            reused += variants.len() - missing.len();
            (!missing.is_empty()).then_some(Task { entry, variants: missing })
        })
        .collect();

    let pool = thread_pool(config.jobs)?;
    let sizes: BTreeSet<u64> = tasks.iter().map(|t| t.entry.manifest.n_elements).collect();
    let graphs: HashMap<u64, std::result::Result<Arc<ProbeGraph>, String>> = pool.install(|| {
        sizes
            .par_iter()
            .map(|&n| {
                let graph = GraphKey::new(n, config.graph.m, config.graph.seed)
                    .and_then(|key| get_or_build(key, &config.cache_dir))
                    .map(Arc::new)
                    .map_err(|e| e.to_string());
                (n, graph)
            })
            .collect()
    });

    let results: Vec<(Vec<TransportRecord>, Vec<ProbeErrorRecord>)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| probe_snapshot(task.entry, &task.variants, &graphs, config, &cascade_config))
            .collect()
    });

    let mut computed = 0;
    for (recs, errs) in results {
        computed += recs.len();
        errors.extend(errs);
        for r in recs {
            records
                .entry((r.model_id.clone(), r.variant))
                .or_default()
                .insert(r.step, r);
        }
    }
    errors.sort();

    let tdir = temporal_dir(out);
    let mut n_records = 0;
    let mut model_sizes: BTreeMap<String, u64> = BTreeMap::new();
    for ((model_id, variant), by_step) in &records {
        let recs: Vec<TransportRecord> = by_step.values().cloned().collect();
        n_records += recs.len();
        if let Some(r) = recs.first() {
            model_sizes.insert(model_id.clone(), r.n_elements);
        }
        let file = TemporalDynamicsFile {
            schema_version: TEMPORAL_SCHEMA_VERSION.into(),
            family: config.family.clone(),
            model_id: model_id.clone(),
            variant: *variant,
            config_hash: hash.clone(),
            records: recs,
        };
        write_json(&tdir.join(TemporalDynamicsFile::file_name(&config.family, model_id, *variant)), &file)?;
    }

    let off_grid: Vec<OffGridModel> = if config.scales.is_empty() {
        Vec::new()
    } else {
        model_sizes
            .iter()
            .filter(|(_, n)| !config.scales.contains(n))
            .map(|(model_id, &n)| {
                log::warn!("model {model_id} has N={n}, not a configured scale; excluded from fits");
                OffGridModel {
                    model_id: model_id.clone(),
                    n_elements: n,
                }
            })
            .collect()
    };

    let n_errors = errors.len();
    for e in &errors {
        log::error!("{}: {}", e.snapshot, e.message);
    }
    let report = ProbeReport {
        schema_version: TEMPORAL_SCHEMA_VERSION.into(),
        family: config.family.clone(),
        config_hash: hash,
        n_snapshots: snapshots.len(),
        n_records,
        errors,
        off_grid,
    };
    write_json(&out.join(PROBE_REPORT_FILE), &report)?;
    log::info!("probe: {computed} records computed, {reused} reused, {n_errors} errors");
    Ok(ProbeOutcome {
        computed,
        reused,
        errors: n_errors,
    })
}

fn probe_snapshot(
    entry: &SnapshotEntry,
    variants: &[NullVariant],
    graphs: &HashMap<u64, std::result::Result<Arc<ProbeGraph>, String>>,
    config: &RunConfig,
    cascade_config: &crate::cascade::CascadeConfig,
) -> (Vec<TransportRecord>, Vec<ProbeErrorRecord>) {
    let m = &entry.manifest;
    let error = |variant: Option<NullVariant>, message: String| ProbeErrorRecord {
        snapshot: entry.rel.clone(),
        model_id: Some(m.model_id.clone()),
        step: Some(m.step),
        variant,
        message,
    };
    let graph = match graphs.get(&m.n_elements) {
        Some(Ok(g)) => g.clone(),
        Some(Err(e)) => return (Vec::new(), vec![error(None, format!("graph: {e}"))]),
        None => return (Vec::new(), vec![error(None, "graph missing".into())]),
    };
    let real = match read_snapshot(&entry.path) {
        Ok(s) => s,
        Err(e) => return (Vec::new(), vec![error(None, e.to_string())]),
    };

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for &variant in variants {
        let outcome = if variant == NullVariant::Real {
            run_cascade(&real, &graph, cascade_config)
        } else {
            generate_null(&real, variant, config.nulls.base_seed)
                .and_then(|null| run_cascade(&null, &graph, cascade_config))
        };
        match outcome {
            Ok(result) => records.push(TransportRecord::from_result(
                &m.family,
                &m.model_id,
                variant,
                m.step,
                m.n_elements,
                &result,
            )),
            Err(e) => errors.push(error(Some(variant), e.to_string())),
        }
    }
    (records, errors)
}
