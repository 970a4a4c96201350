//! Barabási–Albert redistribution graphs in CSR form, with an on-disk cache.
//!
//! Construction: the seed graph is the complete graph on `m + 1` nodes; every
//! later node attaches to `m` distinct existing nodes chosen with probability
//! proportional to degree (uniform draws from the edge-endpoint list,
//! rejecting repeats within one node's draws). Randomness comes from a
//! ChaCha8 stream seeded with `key.seed`, so a build is a pure function of
//! its [`GraphKey`].

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_M: u32 = 2;
pub const DEFAULT_TOPOLOGY_SEED: u64 = 42;

const CACHE_MAGIC: &[u8; 4] = b"TDUG";
const CACHE_VERSION: u32 = 1;
const CACHE_HEADER_LEN: usize = 4 + 4 + 8 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphKey {
    pub n_nodes: u64,
    pub m: u32,
    pub seed: u64,
}

impl GraphKey {
    pub fn new(n_nodes: u64, m: u32, seed: u64) -> Result<Self> {
        let key = Self { n_nodes, m, seed };
        key.validate()?;
        Ok(key)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::InvalidArgument("attachment parameter m must be >= 1".into()));
        }
        if self.n_nodes < self.m as u64 + 1 {
            return Err(Error::InvalidArgument(format!(
                "BA graph needs at least m + 1 = {} nodes, got {}",
                self.m as u64 + 1,
                self.n_nodes
            )));
        }
        if self.n_nodes > u32::MAX as u64 + 1 {
            return Err(Error::InvalidArgument("node ids are 32-bit; N too large".into()));
        }
        Ok(())
    }

    /// Number of undirected edges a BA build produces.
    pub fn expected_edges(&self) -> u64 {
        let m0 = self.m as u64 + 1;
        m0 * (m0 - 1) / 2 + self.m as u64 * (self.n_nodes - m0)
    }

    pub fn cache_file_name(&self) -> String {
        format!("ba_N{}_m{}_s{}.tdug", self.n_nodes, self.m, self.seed)
    }
}

/// Immutable undirected simple graph. Adjacency lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeGraph {
    key: Option<GraphKey>,
    offsets: Vec<u64>,
    neighbors: Vec<u32>,
    degrees: Vec<u32>,
}

impl ProbeGraph {
    /// The BA key this graph was built from; `None` for graphs assembled
    /// from an explicit edge list.
    pub fn key(&self) -> Option<GraphKey> {
        self.key
    }

    pub fn n_nodes(&self) -> usize {
        self.degrees.len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn neighbor_array(&self) -> &[u32] {
        &self.neighbors
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    #[inline]
    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.neighbors[self.offsets[node] as usize..self.offsets[node + 1] as usize]
    }

    #[inline]
    pub fn degree(&self, node: usize) -> u32 {
        self.degrees[node]
    }

    /// Build a graph from an explicit undirected edge list. Rejects self
    /// loops, duplicate edges and out-of-range ids.
    pub fn from_edges(n_nodes: usize, edges: &[(u32, u32)]) -> Result<Self> {
        if n_nodes == 0 || n_nodes > u32::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!("invalid node count {n_nodes}")));
        }
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self loop on node {a}")));
            }
            if a as usize >= n_nodes || b as usize >= n_nodes {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) out of range")));
            }
        }
        let g = Self::assemble(None, n_nodes, edges);
        for i in 0..n_nodes {
            if g.neighbors(i).windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(format!("duplicate edge at node {i}")));
            }
        }
        Ok(g)
    }

    fn assemble(key: Option<GraphKey>, n_nodes: usize, edges: &[(u32, u32)]) -> Self {
        let mut degrees = vec![0u32; n_nodes];
        for &(a, b) in edges {
            degrees[a as usize] += 1;
            degrees[b as usize] += 1;
        }
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        offsets.push(0u64);
        let mut acc = 0u64;
        for &d in &degrees {
            acc += d as u64;
            offsets.push(acc);
        }
        let mut cursor: Vec<u64> = offsets[..n_nodes].to_vec();
        let mut neighbors = vec![0u32; acc as usize];
        for &(a, b) in edges {
            neighbors[cursor[a as usize] as usize] = b;
            cursor[a as usize] += 1;
            neighbors[cursor[b as usize] as usize] = a;
            cursor[b as usize] += 1;
        }
        for i in 0..n_nodes {
            neighbors[offsets[i] as usize..offsets[i + 1] as usize].sort_unstable();
        }
        Self {
            key,
            offsets,
            neighbors,
            degrees,
        }
    }

    /// Verify the structural invariants: symmetric, simple, consistent CSR,
    /// connected. Returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.n_nodes();
        if self.offsets.len() != n + 1 || self.offsets[0] != 0 {
            return Err("offsets length or origin wrong".into());
        }
        if *self.offsets.last().unwrap() as usize != self.neighbors.len() {
            return Err("offsets do not cover neighbor array".into());
        }
        let degree_sum: u64 = self.degrees.iter().map(|&d| d as u64).sum();
        if degree_sum != self.neighbors.len() as u64 || !degree_sum.is_multiple_of(2) {
            return Err("degree sum is not 2E".into());
        }
        for i in 0..n {
            let nb = self.neighbors(i);
            if nb.len() as u32 != self.degrees[i] {
                return Err(format!("degree of {i} inconsistent with offsets"));
            }
            if nb.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("adjacency of {i} not strictly ascending"));
            }
            for &j in nb {
                if j as usize == i {
                    return Err(format!("self loop at {i}"));
                }
                if self.neighbors(j as usize).binary_search(&(i as u32)).is_err() {
                    return Err(format!("edge ({i}, {j}) not symmetric"));
                }
            }
        }
        if !self.is_connected() {
            return Err("graph not connected".into());
        }
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in self.neighbors(v) {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    count += 1;
                    queue.push_back(w as usize);
                }
            }
        }
        count == n
    }
}

/// Deterministic BA construction; see the module docs for the variant.
pub fn build_ba_graph(key: GraphKey) -> Result<ProbeGraph> {
    key.validate()?;
    let n = key.n_nodes as usize;
    let m = key.m as usize;
    let m0 = m + 1;
    let n_edges = key.expected_edges() as usize;

    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(n_edges);
    let mut endpoints: Vec<u32> = Vec::with_capacity(2 * n_edges);
    for a in 0..m0 as u32 {
        for b in a + 1..m0 as u32 {
            edges.push((a, b));
            endpoints.push(a);
            endpoints.push(b);
        }
    }

    let mut rng = rng::stream(key.seed);
    let mut targets: Vec<u32> = Vec::with_capacity(m);
    for v in m0..n {
        targets.clear();
        while targets.len() < m {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t, v as u32));
            endpoints.push(t);
            endpoints.push(v as u32);
        }
    }
    debug_assert_eq!(edges.len(), n_edges);
    Ok(ProbeGraph::assemble(Some(key), n, &edges))
}

/// Load the graph for `key` from `cache_dir`, or build and persist it.
///
/// A cache file whose header disagrees with the key, or which fails
/// structural validation, is rebuilt with a warning.
pub fn get_or_build(key: GraphKey, cache_dir: &Path) -> Result<ProbeGraph> {
    key.validate()?;
    let path = cache_dir.join(key.cache_file_name());
    if path.exists() {
        match load_cache(&path, key) {
            Ok(g) => return Ok(g),
            Err(reason) => {
                log::warn!("rebuilding graph cache {}: {reason}", path.display());
            }
        }
    }
    let graph = build_ba_graph(key)?;
    write_cache(&graph, &path)?;
    Ok(graph)
}

pub fn cache_path(key: GraphKey, cache_dir: &Path) -> PathBuf {
    cache_dir.join(key.cache_file_name())
}

fn write_cache(graph: &ProbeGraph, path: &Path) -> Result<()> {
    let key = graph
        .key
        .ok_or_else(|| Error::InvalidArgument("only BA graphs are cached".into()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut bytes =
        Vec::with_capacity(CACHE_HEADER_LEN + graph.offsets.len() * 8 + graph.neighbors.len() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&key.n_nodes.to_le_bytes());
    bytes.extend_from_slice(&key.m.to_le_bytes());
    bytes.extend_from_slice(&key.seed.to_le_bytes());
    bytes.extend_from_slice(&(graph.n_edges() as u64).to_le_bytes());
    for &o in &graph.offsets {
        bytes.extend_from_slice(&o.to_le_bytes());
    }
    for &nb in &graph.neighbors {
        bytes.extend_from_slice(&nb.to_le_bytes());
    }

    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn load_cache(path: &Path, key: GraphKey) -> std::result::Result<ProbeGraph, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    if bytes.len() < CACHE_HEADER_LEN {
        return Err("file shorter than header".into());
    }
    if &bytes[0..4] != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != CACHE_VERSION {
        return Err(format!("unsupported version {}", u32_at(4)));
    }
    let header_key = GraphKey {
        n_nodes: u64_at(8),
        m: u32_at(16),
        seed: u64_at(20),
    };
    if header_key != key {
        return Err(format!("header key {header_key:?} does not match {key:?}"));
    }
    let n_edges = u64_at(28);
    if n_edges != key.expected_edges() {
        return Err(format!("edge count {n_edges} does not match BA formula"));
    }
    let n = key.n_nodes as usize;
    let expected_len = CACHE_HEADER_LEN + (n + 1) * 8 + 2 * n_edges as usize * 4;
    if bytes.len() != expected_len {
        return Err(format!("file is {} bytes, expected {expected_len}", bytes.len()));
    }
    let mut pos = CACHE_HEADER_LEN;
    let offsets: Vec<u64> = bytes[pos..pos + (n + 1) * 8]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    pos += (n + 1) * 8;
    let neighbors: Vec<u32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    if offsets[0] != 0
        || *offsets.last().unwrap() != neighbors.len() as u64
        || offsets.windows(2).any(|w| w[0] > w[1])
    {
        return Err("offsets inconsistent".into());
    }
    if neighbors.iter().any(|&nb| nb as usize >= n) {
        return Err("neighbor id out of range".into());
    }
    let degrees: Vec<u32> = offsets.windows(2).map(|w| (w[1] - w[0]) as u32).collect();
    let graph = ProbeGraph {
        key: Some(key),
        offsets,
        neighbors,
        degrees,
    };
    for i in 0..n {
        let nb = graph.neighbors(i);
        if nb.windows(2).any(|w| w[0] >= w[1]) || nb.contains(&(i as u32)) {
            return Err(format!("adjacency of node {i} malformed"));
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_from_seed_clique() {
        let g = build_ba_graph(GraphKey::new(3, 2, 42).unwrap()).unwrap();
        assert_eq!(g.n_edges(), 3);
        assert_eq!(g.degrees(), &[2, 2, 2]);
        g.check_invariants().unwrap();
    }

    #[test]
    fn ten_nodes_edge_count() {
        let g = build_ba_graph(GraphKey::new(10, 2, 42).unwrap()).unwrap();
        assert_eq!(g.n_edges(), 17);
        assert_eq!(g.degrees().iter().map(|&d| d as u64).sum::<u64>(), 34);
        g.check_invariants().unwrap();
    }

    #[test]
    fn build_is_deterministic() {
        let key = GraphKey::new(5000, 2, 42).unwrap();
        let a = build_ba_graph(key).unwrap();
        let b = build_ba_graph(key).unwrap();
        assert_eq!(a.offsets(), b.offsets());
        assert_eq!(a.neighbor_array(), b.neighbor_array());
        let c = build_ba_graph(GraphKey::new(5000, 2, 43).unwrap()).unwrap();
        assert_ne!(a.neighbor_array(), c.neighbor_array());
    }

    #[test]
    fn invalid_keys_rejected() {
        assert!(GraphKey::new(2, 2, 42).is_err());
        assert!(GraphKey::new(5, 0, 42).is_err());
        assert!(build_ba_graph(GraphKey { n_nodes: 2, m: 2, seed: 1 }).is_err());
    }

    #[test]
    fn later_nodes_have_degree_at_least_m() {
        for m in 1..=4u32 {
            let key = GraphKey::new(2000, m, 7).unwrap();
            let g = build_ba_graph(key).unwrap();
            g.check_invariants().unwrap();
            assert_eq!(g.n_edges() as u64, key.expected_edges());
            assert!(g.degrees()[(m as usize + 1)..].iter().all(|&d| d >= m));
        }
    }

    #[test]
    fn cache_miss_hit_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let key = GraphKey::new(1000, 2, 42).unwrap();
        let fresh = build_ba_graph(key).unwrap();

        let built = get_or_build(key, dir.path()).unwrap();
        assert_eq!(built, fresh);
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let path = cache_path(key, dir.path());
        let mtime = fs::metadata(&path).unwrap().modified().unwrap();

        let hit = get_or_build(key, dir.path()).unwrap();
        assert_eq!(hit, fresh);
        assert_eq!(fs::metadata(&path).unwrap().modified().unwrap(), mtime);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert_eq!(get_or_build(key, dir.path()).unwrap(), fresh);
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn cache_header_mismatch_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let key = GraphKey::new(100, 2, 42).unwrap();
        let other = GraphKey::new(100, 2, 41).unwrap();
        get_or_build(other, dir.path()).unwrap();
        fs::rename(cache_path(other, dir.path()), cache_path(key, dir.path())).unwrap();
        assert_eq!(get_or_build(key, dir.path()).unwrap(), build_ba_graph(key).unwrap());
    }

    #[test]
    fn cache_layout() {
        let dir = tempfile::tempdir().unwrap();
        let key = GraphKey::new(3, 2, 42).unwrap();
        get_or_build(key, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("ba_N3_m2_s42.tdug")).unwrap();
        assert_eq!(&bytes[..4], b"TDUG");
        assert_eq!(bytes.len(), CACHE_HEADER_LEN + 4 * 8 + 6 * 4);
        assert_eq!(u64::from_le_bytes(bytes[28..36].try_into().unwrap()), 3);
    }

    #[test]
    fn from_edges_validation() {
        assert!(ProbeGraph::from_edges(3, &[(0, 0)]).is_err());
        assert!(ProbeGraph::from_edges(3, &[(0, 1), (1, 0)]).is_err());
        assert!(ProbeGraph::from_edges(3, &[(0, 3)]).is_err());
        let g = ProbeGraph::from_edges(4, &[(2, 0), (0, 1), (3, 0)]).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2, 3]);
        assert!(g.key().is_none());
    }
}
