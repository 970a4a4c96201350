//! Thresholded cascade relaxation of a frozen signed field.
//!
//! The threshold `tau` is the `q_threshold` magnitude quantile of the initial
//! field and stays fixed for the whole relaxation. At each step every node
//! with `|u| > tau` is active; active nodes shed `alpha * u` and each of their
//! `k` neighbours receives `alpha * u / k`. All updates read the previous
//! state. Cascade size is the total number of activation events, duration the
//! number of executed steps.
//!
//! Arithmetic is 64-bit. For node `i` the new value is accumulated in one
//! canonical order: `u_i`, then `-alpha * u_i` if `i` is active, then
//! `alpha * u_r / k_r` for each active neighbour `r` in ascending id order.
//! The scatter and gather kernels below both follow that order, so results
//! are bitwise identical whichever kernel or thread count is used.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ProbeGraph;
use crate::quantile::{field_quantile, DEFAULT_SUBSAMPLE_CAP};
use crate::rng;
use crate::snapshot::{FieldKind, FieldSnapshot};

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_Q_THRESHOLD: f64 = 0.90;
pub const DEFAULT_MAX_STEPS: usize = 500;

const PAR_CHUNK: usize = 1 << 14;
/// Below this many nodes everything runs sequentially.
const PAR_MIN_NODES: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub alpha: f64,
    pub q_threshold: f64,
    pub max_steps: usize,
    pub subsample_cap: usize,
    pub record_trace: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            q_threshold: DEFAULT_Q_THRESHOLD,
            max_steps: DEFAULT_MAX_STEPS,
            subsample_cap: DEFAULT_SUBSAMPLE_CAP,
            record_trace: false,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.q_threshold > 0.0 && self.q_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "q_threshold {} outside (0, 1)",
                self.q_threshold
            )));
        }
        if self.max_steps < 1 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
        }
        if self.subsample_cap < 1 {
            return Err(Error::InvalidArgument("subsample_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub tau: f64,
    pub s_max: u64,
    pub n_steps: u64,
    pub ceiling_limited: bool,
    pub zero_cascade: bool,
    pub activity_trace: Option<Vec<u64>>,
    /// `s_max / n_steps`; `None` when no step ran.
    pub v_abs: Option<f64>,
    /// `s_max / (N n_steps)`; `None` when no step ran.
    pub v_rel: Option<f64>,
}

impl CascadeResult {
    pub fn is_degenerate(&self) -> bool {
        self.zero_cascade || self.ceiling_limited
    }
}

/// Seed for the threshold subsample of a snapshot. Real and null fields at
/// one checkpoint get independent subsamples.
pub fn threshold_seed(step: u64, kind: FieldKind) -> u64 {
    rng::mix_seed(step, &[rng::label_tag("threshold"), rng::label_tag(kind.as_str())])
}

/// Indices `i` with `|u_i| > tau`, ascending.
pub fn compute_active_set(field: &[f64], tau: f64) -> Vec<u32> {
    field
        .iter()
        .enumerate()
        .filter(|(_, u)| u.abs() > tau)
        .map(|(i, _)| i as u32)
        .collect()
}

/// One synchronous relaxation step; returns the new field.
pub fn relax_step(field: &[f64], active: &[u32], graph: &ProbeGraph, alpha: f64) -> Result<Vec<f64>> {
    if field.len() != graph.n_nodes() {
        return Err(Error::SizeMismatch {
            field: field.len(),
            graph: graph.n_nodes(),
        });
    }
    let mut mask = vec![false; field.len()];
    for &i in active {
        let i = i as usize;
        if i >= field.len() {
            return Err(Error::InvalidArgument(format!("active node {i} out of range")));
        }
        mask[i] = true;
    }
    let mut sorted = active.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = vec![0.0; field.len()];
    scatter_step(field, &sorted, graph, alpha, &mut out);
    Ok(out)
}

#[inline]
fn share(alpha: f64, u: f64, degree: u32) -> f64 {
    alpha * u / degree as f64
}

/// Sequential push from active nodes. `active` must be ascending.
fn scatter_step(prev: &[f64], active: &[u32], graph: &ProbeGraph, alpha: f64, out: &mut [f64]) {
    out.copy_from_slice(prev);
    for &i in active {
        let i = i as usize;
        out[i] += -(alpha * prev[i]);
    }
    for &r in active {
        let r = r as usize;
        let k = graph.degree(r);
        if k == 0 {
            continue;
        }
        let s = share(alpha, prev[r], k);
        for &nb in graph.neighbors(r) {
            out[nb as usize] += s;
        }
    }
}

/// Parallel pull over all nodes.
fn gather_step(prev: &[f64], mask: &[bool], graph: &ProbeGraph, alpha: f64, out: &mut [f64]) {
    out.par_chunks_mut(PAR_CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| {
            let base = c * PAR_CHUNK;
            for (j, slot) in chunk.iter_mut().enumerate() {
                let i = base + j;
                let mut acc = prev[i];
                if mask[i] {
                    acc += -(alpha * prev[i]);
                }
                for &r in graph.neighbors(i) {
                    let r = r as usize;
                    if mask[r] {
                        acc += share(alpha, prev[r], graph.degree(r));
                    }
                }
                *slot = acc;
            }
        });
}

/// Kernel selection for [`Relaxation::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Auto,
    Scatter,
    Gather,
}

/// Step-by-step relaxation state. Holds its own copy of the field; the
/// driving snapshot is never touched.
pub struct Relaxation<'g> {
    graph: &'g ProbeGraph,
    alpha: f64,
    tau: f64,
    field: Vec<f64>,
    next: Vec<f64>,
    mask: Vec<bool>,
    active: Vec<u32>,
    steps: usize,
    kernel: Kernel,
}

impl<'g> Relaxation<'g> {
    pub fn new(initial: &[f32], graph: &'g ProbeGraph, alpha: f64, tau: f64) -> Result<Self> {
        let field: Vec<f64> = initial.iter().map(|&v| v as f64).collect();
        Self::from_f64(field, graph, alpha, tau)
    }

    pub fn from_f64(field: Vec<f64>, graph: &'g ProbeGraph, alpha: f64, tau: f64) -> Result<Self> {
        if field.len() != graph.n_nodes() {
            return Err(Error::SizeMismatch {
                field: field.len(),
                graph: graph.n_nodes(),
            });
        }
        if !(tau >= 0.0) {
            return Err(Error::InvalidArgument(format!("threshold {tau} must be >= 0")));
        }
        if let Some(i) = field.iter().position(|u| !u.is_finite()) {
            return Err(Error::NonFinite { index: i, value: field[i] });
        }
        let n = field.len();
        let mut state = Self {
            graph,
            alpha,
            tau,
            next: vec![0.0; n],
            mask: vec![false; n],
            active: Vec::new(),
            field,
            steps: 0,
            kernel: Kernel::Auto,
        };
        state.refresh_active()?;
        Ok(state)
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }

    /// Current active set, ascending.
    pub fn active(&self) -> &[u32] {
        &self.active
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Apply one relaxation step with the current active set, then
    /// recompute the active set.
    pub fn step(&mut self) -> Result<()> {
        let n = self.field.len();
        let use_gather = match self.kernel {
            Kernel::Scatter => false,
            Kernel::Gather => true,
            Kernel::Auto => n >= PAR_MIN_NODES && self.active.len() * 16 >= n,
        };
        if use_gather {
            gather_step(&self.field, &self.mask, self.graph, self.alpha, &mut self.next);
        } else {
            scatter_step(&self.field, &self.active, self.graph, self.alpha, &mut self.next);
        }
        std::mem::swap(&mut self.field, &mut self.next);
        self.steps += 1;
        self.refresh_active()
    }

    fn refresh_active(&mut self) -> Result<()> {
        for &i in &self.active {
            self.mask[i as usize] = false;
        }
        let tau = self.tau;
        let field = &self.field;
        let scan = |base: usize, chunk: &[f64]| -> std::result::Result<Vec<u32>, usize> {
            let mut hits = Vec::new();
            for (j, u) in chunk.iter().enumerate() {
                if !u.is_finite() {
                    return Err(base + j);
                }
                if u.abs() > tau {
                    hits.push((base + j) as u32);
                }
            }
            Ok(hits)
        };
        let scanned: std::result::Result<Vec<Vec<u32>>, usize> = if field.len() >= PAR_MIN_NODES {
            field
                .par_chunks(PAR_CHUNK)
                .enumerate()
                .map(|(c, chunk)| scan(c * PAR_CHUNK, chunk))
                .collect()
        } else {
            scan(0, field).map(|v| vec![v])
        };
        match scanned {
            Ok(parts) => {
                self.active.clear();
                for p in parts {
                    self.active.extend(p);
                }
            }
            Err(node) => {
                return Err(Error::Diverged {
                    step: self.steps,
                    node,
                    value: self.field[node],
                });
            }
        }
        for &i in &self.active {
            self.mask[i as usize] = true;
        }
        Ok(())
    }
}

/// Run a cascade on raw values with an explicit threshold subsample seed.
pub fn run_cascade_values(
    values: &[f32],
    graph: &ProbeGraph,
    config: &CascadeConfig,
    quantile_seed: u64,
) -> Result<CascadeResult> {
    config.validate()?;
    if values.len() != graph.n_nodes() {
        return Err(Error::SizeMismatch {
            field: values.len(),
            graph: graph.n_nodes(),
        });
    }
    let tau = field_quantile(values, config.q_threshold, config.subsample_cap, quantile_seed)?;
    let mut relax = Relaxation::new(values, graph, config.alpha, tau)?;

    let mut s_max = 0u64;
    let mut trace = config.record_trace.then(Vec::new);
    let mut ceiling_limited = false;
    while !relax.active().is_empty() {
        if relax.steps_taken() == config.max_steps {
            ceiling_limited = true;
            break;
        }
        let a = relax.active().len() as u64;
        s_max += a;
        if let Some(t) = trace.as_mut() {
            t.push(a);
        }
        relax.step()?;
    }
    let n_steps = relax.steps_taken() as u64;
    let (v_abs, v_rel) = if n_steps > 0 {
        let v_abs = s_max as f64 / n_steps as f64;
        (Some(v_abs), Some(s_max as f64 / (values.len() as f64 * n_steps as f64)))
    } else {
        (None, None)
    };
    Ok(CascadeResult {
        tau,
        s_max,
        n_steps,
        ceiling_limited,
        zero_cascade: s_max == 0,
        activity_trace: trace,
        v_abs,
        v_rel,
    })
}

/// Probe one snapshot on its graph.
pub fn run_cascade(snapshot: &FieldSnapshot, graph: &ProbeGraph, config: &CascadeConfig) -> Result<CascadeResult> {
    let m = snapshot.manifest();
    run_cascade_values(snapshot.values(), graph, config, threshold_seed(m.step, m.field_kind))
}
