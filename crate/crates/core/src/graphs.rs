//! Graph data model, KNN construction, and shortest-path neighborhood
//! extraction.
//!
//! A [`WSIGraph`] holds an `n x d` node-feature matrix, an undirected edge
//! set, an optional survival label, and a domain tag. The dataset file format
//! is JSON Lines, one graph per line; see [`load_jsonl`] / [`save_jsonl`].

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DetaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// Survival outcome of one graph: discrete time bin in `[1, k_bins]` plus the
/// censorship status (`uncensored == true` means the event was observed).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurvivalLabel {
    pub time_bin: usize,
    pub uncensored: bool,
}

/// Graph representation of one whole-slide image.
#[derive(Clone, Debug)]
pub struct WSIGraph {
    n: usize,
    d: usize,
    features: Vec<f64>,
    edges: Vec<(usize, usize)>,
    pub label: Option<SurvivalLabel>,
    pub domain: Domain,
}

impl WSIGraph {
    /// Builds a graph, normalizing the edge set (unordered pairs, deduped,
    /// sorted) and rejecting self-loops and out-of-range endpoints.
    pub fn new(
        n: usize,
        d: usize,
        features: Vec<f64>,
        edges: Vec<(usize, usize)>,
        label: Option<SurvivalLabel>,
        domain: Domain,
    ) -> Result<Self> {
        if features.len() != n * d {
            return Err(DetaError::invalid(format!(
                "graph features: expected {}x{}={} values, got {}",
                n,
                d,
                n * d,
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DetaError::NonFinite { op: "graph features" });
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(DetaError::invalid(format!("self-loop on node {a}")));
            }
            if a >= n || b >= n {
                return Err(DetaError::invalid(format!(
                    "edge ({a},{b}) out of range for {n} nodes"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(WSIGraph {
            n,
            d,
            features,
            edges: set.into_iter().collect(),
            label,
            domain,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn feat_dim(&self) -> usize {
        self.d
    }

    /// Row-major `n x d` feature matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, node: usize) -> &[f64] {
        &self.features[node * self.d..(node + 1) * self.d]
    }

    /// Undirected edges as normalized `(low, high)` pairs, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted adjacency lists.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }
}

/// For each node `u` and each `k` in `1..=k_max`, the set of nodes at exact
/// shortest-path distance `k` from `u`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SPNeighborhoods {
    k_max: usize,
    sets: Vec<Vec<Vec<usize>>>,
}

impl SPNeighborhoods {
    pub fn node_count(&self) -> usize {
        self.sets.len()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Nodes at distance exactly `k` (1-based) from `u`, sorted ascending.
    pub fn at(&self, u: usize, k: usize) -> &[usize] {
        &self.sets[u][k - 1]
    }
}

/// Connects each node to its `k` nearest neighbors by Euclidean distance and
/// symmetrizes the result. Distance ties break toward the smaller node index.
pub fn knn_graph(features: &[f64], n: usize, d: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(DetaError::invalid(format!(
            "knn_graph needs at least 2 nodes, got {n}"
        )));
    }
    if k == 0 || k >= n {
        return Err(DetaError::invalid(format!(
            "knn_graph: k={k} must satisfy 1 <= k < n={n}"
        )));
    }
    debug_assert_eq!(features.len(), n * d);
    let mut edges = BTreeSet::new();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let fi = &features[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = &features[j * d..(j + 1) * d];
            let dist2: f64 = fi
                .iter()
                .zip(fj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            cand.push((dist2, j));
        }
        cand.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    Ok(edges.into_iter().collect())
}

/// Exact unweighted shortest-path sets per node, truncated at `k_max`,
/// computed by breadth-first search. Unreached nodes appear in no set.
pub fn shortest_path_sets(graph: &WSIGraph, k_max: usize) -> SPNeighborhoods {
    let n = graph.node_count();
    let adj = graph.adjacency_lists();
    let mut sets = vec![vec![Vec::new(); k_max]; n];
    let mut dist = vec![usize::MAX; n];
    let mut frontier = Vec::new();
    let mut next = Vec::new();
    for start in 0..n {
        dist.iter_mut().for_each(|v| *v = usize::MAX);
        dist[start] = 0;
        frontier.clear();
        frontier.push(start);
        let mut depth = 0;
        while !frontier.is_empty() && depth < k_max {
            depth += 1;
            next.clear();
            for &u in &frontier {
                for &v in &adj[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = depth;
                        next.push(v);
                    }
                }
            }
            std::mem::swap(&mut frontier, &mut next);
            let mut found = std::mem::take(&mut sets[start][depth - 1]);
            found.extend_from_slice(&frontier);
            found.sort_unstable();
            sets[start][depth - 1] = found;
        }
    }
    SPNeighborhoods { k_max, sets }
}

/// Symmetric GCN normalization with self-loops:
/// `A_hat = D^{-1/2} (A + I) D^{-1/2}`, returned dense row-major `n x n`.
pub fn normalized_adjacency(graph: &WSIGraph) -> Vec<f64> {
    let n = graph.node_count();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(u, v) in graph.edges() {
        a[u * n + v] = 1.0;
        a[v * n + u] = 1.0;
    }
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = a[i * n..(i + 1) * n].iter().sum();
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    a
}

// ── JSON Lines dataset format ────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    domain: Domain,
    features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<[usize; 2]>>,
    time_bin: Option<usize>,
    censor: Option<u8>,
}

/// Loads a JSON Lines dataset. Graphs without an explicit edge list get a KNN
/// graph with the supplied `knn_k`.
pub fn load_jsonl(path: &Path, knn_k: usize) -> Result<Vec<WSIGraph>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut graphs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| {
            DetaError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        graphs.push(record_to_graph(rec, knn_k).map_err(|e| {
            DetaError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(graphs)
}

fn record_to_graph(rec: GraphRecord, knn_k: usize) -> Result<WSIGraph> {
    let n = rec.features.len();
    let d = rec.features.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(DetaError::Empty("graph with no features".into()));
    }
    let mut features = Vec::with_capacity(n * d);
    for row in &rec.features {
        if row.len() != d {
            return Err(DetaError::invalid(format!(
                "ragged feature rows: {} vs {}",
                row.len(),
                d
            )));
        }
        features.extend_from_slice(row);
    }
    let edges = match rec.edges {
        Some(list) => list.into_iter().map(|[a, b]| (a, b)).collect(),
        None => knn_graph(&features, n, d, knn_k)?,
    };
    let label = match (rec.time_bin, rec.censor) {
        (Some(t), Some(c)) => {
            if c > 1 {
                return Err(DetaError::invalid(format!("censor flag must be 0 or 1, got {c}")));
            }
            if t == 0 {
                return Err(DetaError::invalid("time_bin must be >= 1"));
            }
            Some(SurvivalLabel {
                time_bin: t,
                uncensored: c == 1,
            })
        }
        (None, None) => None,
        _ => {
            return Err(DetaError::invalid(
                "time_bin and censor must be present together or absent together",
            ))
        }
    };
    WSIGraph::new(n, d, features, edges, label, rec.domain)
}

/// Writes graphs in the JSON Lines dataset format, one graph per line.
pub fn save_jsonl(path: &Path, graphs: &[WSIGraph]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for g in graphs {
        let rec = GraphRecord {
            domain: g.domain,
            features: (0..g.node_count())
                .map(|i| g.feature_row(i).to_vec())
                .collect(),
            edges: Some(g.edges().iter().map(|&(a, b)| [a, b]).collect()),
            time_bin: g.label.map(|l| l.time_bin),
            censor: g.label.map(|l| u8::from(l.uncensored)),
        };
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| DetaError::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
