//! Fixed-degree random geometric graphs with integer edge delays.
//!
//! Nodes are placed uniformly in the unit square and connected greedily to
//! their nearest eligible neighbours until every node has degree `D`.
//! Edge delays are the Euclidean length scaled by `delay_scale`, rounded to
//! the nearest integer with a floor of one step.

mod io;
mod metrics;

pub use io::{load_graph, save_graph, GraphFile};
pub use metrics::{
    all_pairs_shortest_paths, apsp_with_delays, betweenness_centrality, graph_metrics, graph_stats,
    DistanceMatrix, GraphMetrics, GraphStats, Summary, Weight,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default scale from Euclidean distance (unit square) to delay steps.
pub const DEFAULT_DELAY_SCALE: f64 = 7.0;

/// Number of full placement restarts before generation gives up.
pub const RETRY_BUDGET: usize = 100;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph parameters: {0}")]
    InvalidParams(String),
    #[error("no connected {degree}-regular graph on {nodes} nodes after {attempts} placements")]
    ConstructionFailed {
        nodes: usize,
        degree: usize,
        attempts: usize,
    },
    #[error("graph validation failed: {0}")]
    Invalid(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Index of a node in `[0, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Index into [`Graph::edges`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId(pub usize);

/// Undirected edge with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub delay: u32,
}

impl Edge {
    /// The endpoint opposite to `node`.
    pub fn other(&self, node: usize) -> usize {
        if node == self.u {
            self.v
        } else {
            self.u
        }
    }
}

/// A connected `D`-regular undirected graph.
///
/// The adjacency of every node is kept sorted by ascending neighbour id;
/// that order defines action indices, observation blocks and readouts.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    degree: usize,
    positions: Vec<[f64; 2]>,
    edges: Vec<Edge>,
    // adjacency[v][k] = (neighbour, edge index), ascending neighbour id
    adjacency: Vec<Vec<(usize, EdgeId)>>,
}

impl Graph {
    /// Builds and validates a graph from explicit parts.
    pub fn from_parts(
        degree: usize,
        positions: Vec<[f64; 2]>,
        edges: Vec<Edge>,
    ) -> Result<Self, GraphError> {
        let n = positions.len();
        let mut adjacency: Vec<Vec<(usize, EdgeId)>> = vec![Vec::with_capacity(degree); n];
        let mut normalized = Vec::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            if e.u >= n || e.v >= n {
                return Err(GraphError::Invalid(format!(
                    "edge {i} ({}, {}) references a node outside [0, {n})",
                    e.u, e.v
                )));
            }
            if e.u == e.v {
                return Err(GraphError::Invalid(format!("self-loop at node {}", e.u)));
            }
            if e.delay < 1 {
                return Err(GraphError::Invalid(format!(
                    "edge ({}, {}) has delay 0",
                    e.u, e.v
                )));
            }
            let (u, v) = if e.u < e.v { (e.u, e.v) } else { (e.v, e.u) };
            if adjacency[u].iter().any(|&(w, _)| w == v) {
                return Err(GraphError::Invalid(format!("duplicate edge ({u}, {v})")));
            }
            adjacency[u].push((v, EdgeId(i)));
            adjacency[v].push((u, EdgeId(i)));
            normalized.push(Edge {
                u,
                v,
                delay: e.delay,
            });
        }
        for (v, adj) in adjacency.iter_mut().enumerate() {
            if adj.len() != degree {
                return Err(GraphError::Invalid(format!(
                    "node {v} has degree {} (expected {degree})",
                    adj.len()
                )));
            }
            adj.sort_by_key(|&(w, _)| w);
        }
        let graph = Graph {
            degree,
            positions,
            edges: normalized,
            adjacency,
        };
        if !graph.is_connected() {
            return Err(GraphError::Invalid("graph is not connected".into()));
        }
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id.0]
    }

    /// Neighbours of `v` with the connecting edge, ascending by neighbour id.
    pub fn neighbors(&self, v: usize) -> &[(usize, EdgeId)] {
        &self.adjacency[v]
    }

    /// The edge between `u` and `v`, if any.
    pub fn find_edge(&self, u: usize, v: usize) -> Option<EdgeId> {
        self.adjacency
            .get(u)?
            .iter()
            .find(|&&(w, _)| w == v)
            .map(|&(_, e)| e)
    }

    pub fn delays(&self) -> Vec<u32> {
        self.edges.iter().map(|e| e.delay).collect()
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &(w, _) in &self.adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }
}

/// Generates a connected `degree`-regular geometric graph on `nodes` nodes.
///
/// Nodes are placed uniformly in `[0, 1]²`. The node with the smallest
/// current degree (lowest id on ties) is repeatedly joined to its nearest
/// node that still has free degree and is not yet adjacent. A placement that
/// gets stuck or ends up disconnected is discarded and redrawn, up to
/// [`RETRY_BUDGET`] times.
pub fn generate_graph<R: Rng + ?Sized>(
    nodes: usize,
    degree: usize,
    delay_scale: f64,
    rng: &mut R,
) -> Result<Graph, GraphError> {
    if degree == 0 {
        return Err(GraphError::InvalidParams(
            "degree must be at least 1".into(),
        ));
    }
    if nodes < degree + 1 {
        return Err(GraphError::InvalidParams(format!(
            "need at least D+1 = {} nodes, got {nodes}",
            degree + 1
        )));
    }
    if (nodes * degree) % 2 != 0 {
        return Err(GraphError::InvalidParams(format!(
            "L·D = {} must be even",
            nodes * degree
        )));
    }
    if !(delay_scale.is_finite() && delay_scale > 0.0) {
        return Err(GraphError::InvalidParams(format!(
            "delay scale must be positive, got {delay_scale}"
        )));
    }

    for _ in 0..RETRY_BUDGET {
        let positions: Vec<[f64; 2]> = (0..nodes)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        if let Some(pairs) = connect_nearest(&positions, degree) {
            let edges = pairs
                .into_iter()
                .map(|(u, v)| Edge {
                    u,
                    v,
                    delay: edge_delay(&positions[u], &positions[v], delay_scale),
                })
                .collect();
            if let Ok(g) = Graph::from_parts(degree, positions, edges) {
                return Ok(g);
            }
        }
    }
    Err(GraphError::ConstructionFailed {
        nodes,
        degree,
        attempts: RETRY_BUDGET,
    })
}

/// `max(1, round(scale · |a - b|))`.
pub fn edge_delay(a: &[f64; 2], b: &[f64; 2], scale: f64) -> u32 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    ((scale * d).round() as u32).max(1)
}

fn connect_nearest(positions: &[[f64; 2]], degree: usize) -> Option<Vec<(usize, usize)>> {
    let n = positions.len();
    let mut deg = vec![0usize; n];
    let mut adjacent = vec![false; n * n];
    let mut pairs = Vec::with_capacity(n * degree / 2);
    let dist2 = |a: usize, b: usize| {
        let (p, q) = (positions[a], positions[b]);
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
    };
    while pairs.len() < n * degree / 2 {
        // lowest current degree, lowest id on ties
        let v = (0..n)
            .filter(|&v| deg[v] < degree)
            .min_by_key(|&v| deg[v])?;
        let w = (0..n)
            .filter(|&w| w != v && deg[w] < degree && !adjacent[v * n + w])
            .min_by(|&a, &b| dist2(v, a).total_cmp(&dist2(v, b)))?;
        adjacent[v * n + w] = true;
        adjacent[w * n + v] = true;
        deg[v] += 1;
        deg[w] += 1;
        pairs.push((v.min(w), v.max(w)));
    }
    Some(pairs)
}

/// Generates `count` graphs with pairwise distinct edge sets.
pub fn generate_suite<R: Rng + ?Sized>(
    count: usize,
    nodes: usize,
    degree: usize,
    delay_scale: f64,
    rng: &mut R,
) -> Result<Vec<Graph>, GraphError> {
    let mut seen = std::collections::HashSet::new();
    let mut graphs = Vec::with_capacity(count);
    while graphs.len() < count {
        let g = generate_graph(nodes, degree, delay_scale, rng)?;
        let mut key: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.u, e.v)).collect();
        key.sort_unstable();
        if seen.insert(key) {
            graphs.push(g);
        }
    }
    Ok(graphs)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// a–b–c with delays (2, 3).
    pub fn path3() -> Graph {
        // a path is not regular; build the struct directly for metric tests
        let edges = vec![
            Edge {
                u: 0,
                v: 1,
                delay: 2,
            },
            Edge {
                u: 1,
                v: 2,
                delay: 3,
            },
        ];
        irregular(vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]], edges)
    }

    pub fn irregular(positions: Vec<[f64; 2]>, edges: Vec<Edge>) -> Graph {
        let n = positions.len();
        let mut adjacency = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            adjacency[e.u].push((e.v, EdgeId(i)));
            adjacency[e.v].push((e.u, EdgeId(i)));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(w, _): &(usize, EdgeId)| w);
        }
        let degree = adjacency.iter().map(Vec::len).max().unwrap_or(0);
        Graph {
            degree,
            positions,
            edges,
            adjacency,
        }
    }

    pub fn k4() -> Graph {
        let mut edges = Vec::new();
        for u in 0..4 {
            for v in u + 1..4 {
                edges.push(Edge { u, v, delay: 1 });
            }
        }
        Graph::from_parts(
            3,
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            edges,
        )
        .unwrap()
    }
}
