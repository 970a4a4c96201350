//! Run configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the config
//! file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{LrSchedule, MetricKind, DEFAULT_FLOOR};
use crate::cascade::{CascadeConfig, DEFAULT_ALPHA, DEFAULT_MAX_STEPS, DEFAULT_Q_THRESHOLD};
use crate::error::{Error, Result};
use crate::graph::{DEFAULT_M, DEFAULT_TOPOLOGY_SEED};
use crate::nulls::{NullVariant, DEFAULT_NULL_BASE_SEED};
use crate::quantile::DEFAULT_SUBSAMPLE_CAP;
use crate::scaling::{StepWindow, MIN_SCALES};

pub const CACHE_ENV: &str = "FSGT_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: String,
    #[serde(default = "default_snapshot_root")]
    pub snapshot_root: PathBuf,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub scales: Vec<u64>,
    #[serde(default = "default_true")]
    pub require_all_scales: bool,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub nulls: NullSection,
    pub window: Option<WindowSection>,
    pub synth: Option<SynthSection>,
    pub bridge: Option<BridgeSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub alpha: f64,
    pub q_threshold: f64,
    pub max_steps: usize,
    pub subsample_cap: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            q_threshold: DEFAULT_Q_THRESHOLD,
            max_steps: DEFAULT_MAX_STEPS,
            subsample_cap: DEFAULT_SUBSAMPLE_CAP,
        }
    }
}

impl ProbeSection {
    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            alpha: self.alpha,
            q_threshold: self.q_threshold,
            max_steps: self.max_steps,
            subsample_cap: self.subsample_cap,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub m: u32,
    pub seed: u64,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            seed: DEFAULT_TOPOLOGY_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NullSection {
    pub variants: Vec<NullVariant>,
    pub base_seed: u64,
}

impl Default for NullSection {
    fn default() -> Self {
        Self {
            variants: vec![NullVariant::N0, NullVariant::N1, NullVariant::N2],
            base_seed: DEFAULT_NULL_BASE_SEED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub lo: u64,
    pub hi: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthGenerator {
    Gaussian,
    Lognormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub steps: Vec<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_generator")]
    pub generator: SynthGenerator,
    #[serde(default = "default_sigma")]
    pub lognormal_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    /// CSV or JSON table with columns model_id, n, step, value.
    pub metrics: PathBuf,
    pub metric_kind: MetricKind,
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Model ids used for the external exponent; empty means all.
    #[serde(default)]
    pub evaluation_line: Vec<String>,
    pub schedule: Option<LrSchedule>,
}

fn default_snapshot_root() -> PathBuf {
    PathBuf::from("snapshots")
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_true() -> bool {
    true
}
fn default_generator() -> SynthGenerator {
    SynthGenerator::Gaussian
}
fn default_sigma() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate; relative paths become relative to the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.snapshot_root);
        fix(&mut self.cache_dir);
        if let Some(b) = self.bridge.as_mut() {
            fix(&mut b.metrics);
        }
    }

    /// `FSGT_CACHE` replaces the configured cache directory.
    pub fn apply_env_overrides(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            if !dir.is_empty() {
                self.cache_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.is_empty() {
            return Err(Error::Config("family must be non-empty".into()));
        }
        self.probe
            .cascade_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.graph.m < 1 {
            return Err(Error::Config("graph.m must be >= 1".into()));
        }
        if self.nulls.variants.contains(&NullVariant::Real) {
            return Err(Error::Config("nulls.variants lists null variants only (n0, n1, n2)".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("scales must be strictly ascending".into()));
        }
        if !self.scales.is_empty() && self.scales.len() < MIN_SCALES {
            return Err(Error::Config(format!("at least {MIN_SCALES} scales are needed for fitting")));
        }
        if let Some(w) = self.window {
            if w.lo >= w.hi {
                return Err(Error::Config(format!("window lo {} must be below hi {}", w.lo, w.hi)));
            }
        }
        if let Some(s) = &self.synth {
            if s.steps.is_empty() {
                return Err(Error::Config("synth.steps must be non-empty".into()));
            }
            if !(s.lognormal_sigma > 0.0) {
                return Err(Error::Config("synth.lognormal_sigma must be positive".into()));
            }
        }
        if let Some(b) = &self.bridge {
            if !(b.floor > 0.0) {
                return Err(Error::Config("bridge.floor must be positive".into()));
            }
            if let Some(s) = &b.schedule {
                s.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn window(&self) -> Option<StepWindow> {
        self.window.map(|w| StepWindow { lo: w.lo, hi: w.hi })
    }

    /// Null variants to probe, deduplicated and ordered.
    pub fn null_variants(&self) -> Vec<NullVariant> {
        let mut v = self.nulls.variants.clone();
        v.sort();
        v.dedup();
        v
    }

    /// Hash of every setting that changes probe records.
    pub fn probe_hash(&self) -> String {
        #[derive(Serialize)]
        struct ProbeInputs<'a> {
            family: &'a str,
            probe: &'a ProbeSection,
            graph: &'a GraphSection,
            null_variants: Vec<NullVariant>,
            null_base_seed: u64,
        }
        hash_json(&ProbeInputs {
            family: &self.family,
            probe: &self.probe,
            graph: &self.graph,
            null_variants: self.null_variants(),
            null_base_seed: self.nulls.base_seed,
        })
    }

    /// Hash of every setting that changes fits and summaries.
    pub fn fit_hash(&self) -> String {
        #[derive(Serialize)]
        struct FitInputs<'a> {
            probe_hash: String,
            scales: &'a [u64],
            require_all_scales: bool,
            window: Option<WindowSection>,
        }
        hash_json(&FitInputs {
            probe_hash: self.probe_hash(),
            scales: &self.scales,
            require_all_scales: self.require_all_scales,
            window: self.window,
        })
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config subset serializes");
    hex::encode(Sha256::digest(&bytes))
}
