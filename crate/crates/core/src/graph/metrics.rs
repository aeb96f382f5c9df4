//! Shortest paths, betweenness centrality and suite statistics.

use super::Graph;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Edge weighting for path computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weight {
    /// Every edge counts as one.
    Hops,
    /// Edge delay in steps.
    #[default]
    Delay,
}

impl Weight {
    fn of(self, delay: u32) -> u64 {
        match self {
            Weight::Hops => 1,
            Weight::Delay => delay as u64,
        }
    }
}

/// Dense `L×L` matrix of integer path lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, fill: u64) -> Self {
        DistanceMatrix {
            n,
            data: vec![fill; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, u: usize, v: usize) -> u64 {
        self.data[u * self.n + v]
    }

    pub fn set(&mut self, u: usize, v: usize, d: u64) {
        self.data[u * self.n + v] = d;
    }

    pub fn row(&self, u: usize) -> &[u64] {
        &self.data[u * self.n..(u + 1) * self.n]
    }

    pub fn max(&self) -> u64 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Entries with `u != v`.
    pub fn off_diagonal(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n).flat_map(move |u| {
            (0..self.n)
                .filter(move |&v| v != u)
                .map(move |v| self.get(u, v))
        })
    }
}

/// Single-source Dijkstra with explicit per-edge delays.
pub(crate) fn dijkstra(g: &Graph, delays: &[u32], weight: Weight, src: usize) -> Vec<u64> {
    let n = g.node_count();
    let mut dist = vec![u64::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0;
    heap.push(Reverse((0u64, src)));
    while let Some(Reverse((d, v))) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(w, e) in g.neighbors(v) {
            let nd = d + weight.of(delays[e.0]);
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(Reverse((nd, w)));
            }
        }
    }
    dist
}

/// Exact all-pairs shortest path lengths.
pub fn all_pairs_shortest_paths(g: &Graph, weight: Weight) -> DistanceMatrix {
    apsp_with_delays(g, &g.delays(), weight)
}

/// All-pairs shortest paths under overridden edge delays.
pub fn apsp_with_delays(g: &Graph, delays: &[u32], weight: Weight) -> DistanceMatrix {
    let n = g.node_count();
    let mut m = DistanceMatrix::new(n, 0);
    for s in 0..n {
        for (t, d) in dijkstra(g, delays, weight, s).into_iter().enumerate() {
            m.set(s, t, d);
        }
    }
    m
}

/// Normalized betweenness centrality in `[0, 1]` (Brandes).
///
/// Endpoints are excluded. A node on `k` of the `σ` shortest paths between a
/// pair is credited `k/σ`. Scores are divided by the number of unordered
/// pairs not containing the node, `(L-1)(L-2)/2`.
pub fn betweenness_centrality(g: &Graph, weight: Weight) -> Vec<f64> {
    let n = g.node_count();
    let delays = g.delays();
    let mut score = vec![0.0f64; n];
    if n < 3 {
        return score;
    }
    for s in 0..n {
        let mut dist = vec![u64::MAX; n];
        let mut sigma = vec![0.0f64; n];
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut order = Vec::with_capacity(n);
        let mut settled = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[s] = 0;
        sigma[s] = 1.0;
        heap.push(Reverse((0u64, s)));
        while let Some(Reverse((d, v))) = heap.pop() {
            if d > dist[v] || settled[v] {
                continue;
            }
            settled[v] = true;
            order.push(v);
            for &(w, e) in g.neighbors(v) {
                let nd = d + weight.of(delays[e.0]);
                if nd < dist[w] {
                    dist[w] = nd;
                    sigma[w] = sigma[v];
                    preds[w] = vec![v];
                    heap.push(Reverse((nd, w)));
                } else if nd == dist[w] {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0f64; n];
        for &w in order.iter().rev() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                score[w] += delta[w];
            }
        }
    }
    // each unordered pair was counted from both ends
    let norm = ((n - 1) * (n - 2)) as f64;
    score.iter_mut().for_each(|b| *b /= norm);
    score
}

/// Per-graph structural metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub apsp_hops: DistanceMatrix,
    pub apsp_delay: DistanceMatrix,
    pub diameter_hops: u64,
    pub diameter_delay: u64,
    pub betweenness: Vec<f64>,
}

pub fn graph_metrics(g: &Graph, betweenness_weight: Weight) -> GraphMetrics {
    let apsp_hops = all_pairs_shortest_paths(g, Weight::Hops);
    let apsp_delay = all_pairs_shortest_paths(g, Weight::Delay);
    GraphMetrics {
        diameter_hops: apsp_hops.max(),
        diameter_delay: apsp_delay.max(),
        apsp_hops,
        apsp_delay,
        betweenness: betweenness_centrality(g, betweenness_weight),
    }
}

/// Min, max, mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of<I: IntoIterator<Item = f64>>(values: I) -> Summary {
        let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in values {
            n += 1;
            sum += x;
            sum2 += x * x;
            min = min.min(x);
            max = max.max(x);
        }
        if n == 0 {
            return Summary {
                min: f64::NAN,
                max: f64::NAN,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = sum / n as f64;
        let var = (sum2 / n as f64 - mean * mean).max(0.0);
        Summary {
            min,
            max,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Suite-level statistics over a set of graphs.
///
/// APSP summaries pool all ordered pairs `u != v` of all graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub graphs: usize,
    pub order: Summary,
    pub degree: Summary,
    pub size: Summary,
    pub diameter_hops: Summary,
    pub diameter_delay: Summary,
    pub apsp_hops: Summary,
    pub apsp_delay: Summary,
    pub node_betweenness: Summary,
    pub graph_max_betweenness: Summary,
    pub graph_mean_betweenness: Summary,
    /// `apsp_hops_cdf[h]` is the fraction of pairs at most `h` hops apart.
    pub apsp_hops_cdf: Vec<f64>,
}

pub fn graph_stats(graphs: &[Graph], betweenness_weight: Weight) -> Option<GraphStats> {
    if graphs.is_empty() {
        return None;
    }
    let metrics: Vec<GraphMetrics> = graphs
        .iter()
        .map(|g| graph_metrics(g, betweenness_weight))
        .collect();
    let pooled_hops: Vec<u64> = metrics
        .iter()
        .flat_map(|m| m.apsp_hops.off_diagonal())
        .collect();
    let max_hops = pooled_hops.iter().copied().max().unwrap_or(0) as usize;
    let mut histogram = vec![0usize; max_hops + 1];
    for &h in &pooled_hops {
        histogram[h as usize] += 1;
    }
    let total = pooled_hops.len().max(1) as f64;
    let mut running = 0;
    let apsp_hops_cdf = histogram
        .iter()
        .map(|&c| {
            running += c;
            running as f64 / total
        })
        .collect();

    Some(GraphStats {
        graphs: graphs.len(),
        order: Summary::of(graphs.iter().map(|g| g.node_count() as f64)),
        degree: Summary::of(
            graphs
                .iter()
                .flat_map(|g| (0..g.node_count()).map(move |v| g.neighbors(v).len() as f64)),
        ),
        size: Summary::of(graphs.iter().map(|g| g.edge_count() as f64)),
        diameter_hops: Summary::of(metrics.iter().map(|m| m.diameter_hops as f64)),
        diameter_delay: Summary::of(metrics.iter().map(|m| m.diameter_delay as f64)),
        apsp_hops: Summary::of(pooled_hops.iter().map(|&h| h as f64)),
        apsp_delay: Summary::of(
            metrics
                .iter()
                .flat_map(|m| m.apsp_delay.off_diagonal().map(|d| d as f64)),
        ),
        node_betweenness: Summary::of(metrics.iter().flat_map(|m| m.betweenness.iter().copied())),
        graph_max_betweenness: Summary::of(
            metrics
                .iter()
                .map(|m| m.betweenness.iter().copied().fold(0.0, f64::max)),
        ),
        graph_mean_betweenness: Summary::of(
            metrics
                .iter()
                .map(|m| m.betweenness.iter().sum::<f64>() / m.betweenness.len().max(1) as f64),
        ),
        apsp_hops_cdf,
    })
}
