//! Agent and node observation vectors.
//!
//! Agent observation (`2L + 1 + D(L+2)`):
//! `onehot(node) ‖ onehot(dst) ‖ size ‖ [delay, load, onehot(neighbour)] × D`.
//!
//! Node observation (`L + 2 + D(L+2)`):
//! `onehot(node) ‖ packet count ‖ packet size sum ‖ [delay, load, onehot(neighbour)] × D`.
//!
//! Edge blocks follow ascending neighbour id. Delays are divided by
//! [`DELAY_SCALE`] and packet counts by `N`.

use super::RoutingEnv;
use crate::graph::Graph;
use ndarray::{Array2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// Divisor applied to delay entries.
pub const DELAY_SCALE: f32 = 10.0;

pub fn agent_obs_dim(nodes: usize, degree: usize) -> usize {
    2 * nodes + 1 + degree * (nodes + 2)
}

pub fn node_obs_dim(nodes: usize, degree: usize) -> usize {
    nodes + 2 + degree * (nodes + 2)
}

/// What an observation needs to know about one packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    /// Current node, or the head of the edge in transit.
    pub node: u16,
    pub dst: u16,
    pub size: f32,
    pub in_transit: bool,
}

/// Compact copy of the observable state; enough to rebuild every
/// observation for a known graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsSnapshot {
    pub agents: Vec<AgentView>,
    pub edge_load: Vec<f32>,
    pub delays: Vec<u32>,
}

impl RoutingEnv {
    pub fn snapshot(&self) -> ObsSnapshot {
        ObsSnapshot {
            agents: self
                .packets()
                .iter()
                .map(|p| AgentView {
                    node: p.node() as u16,
                    dst: p.dst as u16,
                    size: p.size,
                    in_transit: p.in_transit(),
                })
                .collect(),
            edge_load: self.edge_load().iter().map(|&l| l as f32).collect(),
            delays: self.delays().to_vec(),
        }
    }

    pub fn agent_obs(&self) -> Array2<f32> {
        self.snapshot().agent_obs(self.graph())
    }

    pub fn node_obs(&self) -> Array2<f32> {
        self.snapshot().node_obs(self.graph())
    }
}

impl ObsSnapshot {
    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    /// Agent → node assignment.
    pub fn assignments(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.node as usize).collect()
    }

    fn write_edges(&self, g: &Graph, v: usize, mut out: ArrayViewMut1<f32>) {
        let l = g.node_count();
        for (k, &(w, e)) in g.neighbors(v).iter().enumerate() {
            let base = k * (l + 2);
            out[base] = self.delays[e.0] as f32 / DELAY_SCALE;
            out[base + 1] = self.edge_load[e.0];
            out[base + 2 + w] = 1.0;
        }
    }

    /// Writes the observation of `agent` into the zeroed prefix of `row`.
    pub fn write_agent_row(&self, g: &Graph, agent: usize, mut row: ArrayViewMut1<f32>) {
        let l = g.node_count();
        let a = &self.agents[agent];
        row[a.node as usize] = 1.0;
        row[l + a.dst as usize] = 1.0;
        row[2 * l] = a.size;
        let d_o = agent_obs_dim(l, g.degree());
        self.write_edges(
            g,
            a.node as usize,
            row.slice_mut(ndarray::s![2 * l + 1..d_o]),
        );
    }

    /// Writes agent observations into a zeroed `N × d_o` view.
    pub fn write_agent_obs(&self, g: &Graph, mut out: ArrayViewMut2<f32>) {
        for i in 0..self.agents.len() {
            self.write_agent_row(g, i, out.row_mut(i));
        }
    }

    /// Writes node observations into a zeroed `L × d_m` view.
    pub fn write_node_obs(&self, g: &Graph, mut out: ArrayViewMut2<f32>) {
        let l = g.node_count();
        let n = self.agents.len().max(1) as f32;
        for a in self.agents.iter().filter(|a| !a.in_transit) {
            let v = a.node as usize;
            out[[v, l]] += 1.0 / n;
            out[[v, l + 1]] += a.size;
        }
        for v in 0..l {
            let mut row = out.row_mut(v);
            row[v] = 1.0;
            self.write_edges(g, v, row.slice_mut(ndarray::s![l + 2..]));
        }
    }

    pub fn agent_obs(&self, g: &Graph) -> Array2<f32> {
        let mut out = Array2::zeros((self.agents.len(), agent_obs_dim(g.node_count(), g.degree())));
        self.write_agent_obs(g, out.view_mut());
        out
    }

    pub fn node_obs(&self, g: &Graph) -> Array2<f32> {
        let mut out = Array2::zeros((g.node_count(), node_obs_dim(g.node_count(), g.degree())));
        self.write_node_obs(g, out.view_mut());
        out
    }
}
