//! Brute-force reference implementations used to check the engine.
//!
//! Nothing here is optimised and nothing here is used by the pipeline.
//! The reference cascade works from an edge list and an adjacency matrix
//! with nested loops; it shares only the per-node accumulation order with
//! the engine (own value, own decay, then neighbour shares by ascending id)
//! so that both produce bit-identical fields.

use std::collections::BTreeSet;

use rand::Rng;

use crate::cascade::{CascadeConfig, CascadeResult};
use crate::error::{Error, Result};
use crate::graph::{build_ba_graph, GraphKey, ProbeGraph};
use crate::rng;

pub const MAX_REFERENCE_NODES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceGraph {
    pub n_nodes: usize,
    /// Unordered pairs, stored with the smaller id first.
    pub edges: Vec<(u32, u32)>,
}

impl ReferenceGraph {
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a as usize >= n_nodes || b as usize >= n_nodes {
                return Err(Error::InvalidArgument(format!("invalid edge ({a}, {b})")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidArgument(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self {
            n_nodes,
            edges: set.into_iter().collect(),
        })
    }

    pub fn from_probe_graph(g: &ProbeGraph) -> Self {
        let edges = (0..g.n_nodes())
            .flat_map(|i| {
                g.neighbors(i)
                    .iter()
                    .filter(move |&&j| (j as usize) > i)
                    .map(move |&j| (i as u32, j))
            })
            .collect();
        Self { n_nodes: g.n_nodes(), edges }
    }

    pub fn to_probe_graph(&self) -> Result<ProbeGraph> {
        ProbeGraph::from_edges(self.n_nodes, &self.edges)
    }

    fn adjacency_matrix(&self) -> Vec<Vec<bool>> {
        let mut adj = vec![vec![false; self.n_nodes]; self.n_nodes];
        for &(a, b) in &self.edges {
            adj[a as usize][b as usize] = true;
            adj[b as usize][a as usize] = true;
        }
        adj
    }
}

/// Full-sort type-7 quantile of `|values|`.
pub fn reference_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of empty input".into()));
    }
    let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub result: CascadeResult,
    /// Active set of every executed step, ascending ids.
    pub active_sets: Vec<Vec<u32>>,
    /// Field after every executed step.
    pub fields: Vec<Vec<f64>>,
}

/// Literal cascade: threshold, synchronous update from the previous state,
/// stop on an empty active set or at the ceiling.
pub fn reference_cascade(values: &[f32], graph: &ReferenceGraph, config: &CascadeConfig) -> Result<ReferenceRun> {
    config.validate()?;
    let n = graph.n_nodes;
    if n > MAX_REFERENCE_NODES {
        return Err(Error::InvalidArgument(format!("reference cascade limited to {MAX_REFERENCE_NODES} nodes")));
    }
    if values.len() != n {
        return Err(Error::SizeMismatch { field: values.len(), graph: n });
    }
    let adj = graph.adjacency_matrix();
    let degree: Vec<usize> = adj.iter().map(|row| row.iter().filter(|&&x| x).count()).collect();
    let alpha = config.alpha;

    let mut u: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let tau = reference_quantile(&u, config.q_threshold)?;

    let mut active_sets = Vec::new();
    let mut fields = Vec::new();
    let mut ceiling_limited = false;
    loop {
        let active: Vec<u32> = (0..n).filter(|&i| u[i].abs() > tau).map(|i| i as u32).collect();
        if active.is_empty() {
            break;
        }
        if active_sets.len() == config.max_steps {
            ceiling_limited = true;
            break;
        }
        let is_active = |i: usize| active.binary_search(&(i as u32)).is_ok();
        let mut next = vec![0.0f64; n];
        for i in 0..n {
            let mut acc = u[i];
            if is_active(i) {
                acc += -(alpha * u[i]);
            }
            for r in 0..n {
                if adj[i][r] && is_active(r) {
                    acc += alpha * u[r] / degree[r] as f64;
                }
            }
            if !acc.is_finite() {
                return Err(Error::Diverged { step: active_sets.len(), node: i, value: acc });
            }
            next[i] = acc;
        }
        u = next;
        active_sets.push(active);
        fields.push(u.clone());
    }

    let s_max: u64 = active_sets.iter().map(|a| a.len() as u64).sum();
    let n_steps = active_sets.len() as u64;
    let (v_abs, v_rel) = if n_steps > 0 {
        (Some(s_max as f64 / n_steps as f64), Some(s_max as f64 / (n as f64 * n_steps as f64)))
    } else {
        (None, None)
    };
    let trace = config
        .record_trace
        .then(|| active_sets.iter().map(|a| a.len() as u64).collect());
    Ok(ReferenceRun {
        result: CascadeResult {
            tau,
            s_max,
            n_steps,
            ceiling_limited,
            zero_cascade: s_max == 0,
            activity_trace: trace,
            v_abs,
            v_rel,
        },
        active_sets,
        fields,
    })
}

/// Seeded random connected simple graph: a random spanning tree plus extra
/// random edges.
pub fn random_connected_graph(n_nodes: usize, extra_edges: usize, seed: u64) -> ReferenceGraph {
    let mut rng = rng::stream(rng::mix_seed(seed, &[rng::label_tag("oracle-graph")]));
    let mut edges = BTreeSet::new();
    for v in 1..n_nodes as u32 {
        let u = rng.random_range(0..v);
        edges.insert((u, v));
    }
    let max_edges = n_nodes * (n_nodes - 1) / 2;
    let target = (edges.len() + extra_edges).min(max_edges);
    while edges.len() < target {
        let a = rng.random_range(0..n_nodes as u32);
        let b = rng.random_range(0..n_nodes as u32);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    ReferenceGraph {
        n_nodes,
        edges: edges.into_iter().collect(),
    }
}

/// Field with a heavy-ish tail: Gaussian bulk plus occasional large spikes
/// of either sign, so cascades of several steps are common.
pub fn random_field(n: usize, seed: u64) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng::stream(rng::mix_seed(seed, &[rng::label_tag("oracle-field")]));
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let spike = if rng.random_bool(0.05) { rng.random_range(3.0..30.0) } else { 1.0 };
            (z * spike) as f32
        })
        .collect()
}

/// One seeded random oracle instance: odd seeds use a BA graph, even seeds
/// an arbitrary connected graph. N is at most 256.
pub fn random_instance(seed: u64) -> (Vec<f32>, ReferenceGraph) {
    let mut rng = rng::stream(rng::mix_seed(seed, &[rng::label_tag("oracle-instance")]));
    let n = rng.random_range(4..=256usize);
    let graph = if seed % 2 == 1 {
        let m = rng.random_range(1..=3u32).min(n as u32 - 1);
        let g = build_ba_graph(GraphKey::new(n as u64, m, seed).unwrap()).unwrap();
        ReferenceGraph::from_probe_graph(&g)
    } else {
        let extra = rng.random_range(0..2 * n);
        random_connected_graph(n, extra, seed)
    };
    (random_field(n, seed), graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::run_cascade_values;

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert!((reference_quantile(&v, 0.9).unwrap() - 9.1).abs() < 1e-12);
        assert_eq!(reference_quantile(&[7.0], 0.9).unwrap(), 7.0);
        assert_eq!(reference_quantile(&[-3.0; 5], 0.9).unwrap(), 3.0);
        assert!(reference_quantile(&[], 0.9).is_err());
    }

    #[test]
    fn triangle_matches_hand_trace() {
        let g = ReferenceGraph::new(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        let run = reference_cascade(&[10.0, 0.0, 0.0], &g, &CascadeConfig::default()).unwrap();
        assert_eq!((run.result.s_max, run.result.n_steps), (1, 1));
        assert_eq!(run.active_sets, vec![vec![0]]);
        let f = &run.fields[0];
        assert!((f[0] - 7.0).abs() < 1e-12 && (f[1] - 1.5).abs() < 1e-12 && (f[2] - 1.5).abs() < 1e-12);

        let run = reference_cascade(&[10.0, 9.0, 0.0], &g, &CascadeConfig::default()).unwrap();
        assert_eq!(run.active_sets, vec![vec![0], vec![1]]);
    }

    #[test]
    fn empty_initial_set() {
        let g = ReferenceGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let run = reference_cascade(&[5.0, 5.0, 5.0], &g, &CascadeConfig::default()).unwrap();
        assert_eq!((run.result.s_max, run.result.n_steps), (0, 0));
        assert!(run.result.zero_cascade);
    }

    #[test]
    fn agrees_with_engine_on_a_few_instances() {
        for seed in 0..10 {
            let (values, rg) = random_instance(seed);
            let g = rg.to_probe_graph().unwrap();
            let cfg = CascadeConfig { record_trace: true, ..Default::default() };
            let reference = reference_cascade(&values, &rg, &cfg).unwrap();
            let engine = run_cascade_values(&values, &g, &cfg, 0).unwrap();
            assert_eq!(engine, reference.result, "seed {seed}");
        }
    }

    #[test]
    fn reference_graph_round_trip() {
        let g = build_ba_graph(GraphKey::new(50, 2, 1).unwrap()).unwrap();
        let rg = ReferenceGraph::from_probe_graph(&g);
        assert_eq!(rg.edges.len(), g.n_edges());
        let back = rg.to_probe_graph().unwrap();
        assert_eq!(back.offsets(), g.offsets());
        assert_eq!(back.neighbor_array(), g.neighbor_array());
    }
}
