//! Shortest-path heuristics and visited-node action masking.

use super::RoutingEnv;
use crate::graph::{apsp_with_delays, DistanceMatrix, Graph, Weight};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpVariant {
    /// Distances from the delays at episode start.
    Static,
    /// Distances recomputed whenever current delays change.
    Stepwise,
}

/// Global-view agent that always follows delay-weighted shortest paths.
#[derive(Debug, Clone)]
pub struct ShortestPathPolicy {
    variant: SpVariant,
    cached_for: Option<Vec<u32>>,
    dist: Option<DistanceMatrix>,
}

impl ShortestPathPolicy {
    pub fn new(variant: SpVariant) -> Self {
        ShortestPathPolicy {
            variant,
            cached_for: None,
            dist: None,
        }
    }

    pub fn variant(&self) -> SpVariant {
        self.variant
    }

    /// Actions for all agents; in-transit agents get `0` (ignored anyway).
    pub fn actions(&mut self, env: &RoutingEnv) -> Vec<usize> {
        let delays = match self.variant {
            SpVariant::Static => env.reset_delays(),
            SpVariant::Stepwise => env.delays(),
        };
        if self.cached_for.as_deref() != Some(delays) {
            self.dist = Some(apsp_with_delays(env.graph(), delays, Weight::Delay));
            self.cached_for = Some(delays.to_vec());
        }
        let dist = self.dist.as_ref().expect("distances computed above");
        env.packets()
            .iter()
            .map(|p| match p.location {
                super::Location::AtNode(v) => next_hop(env.graph(), delays, dist, v, p.dst),
                super::Location::InTransit { .. } => 0,
            })
            .collect()
    }
}

/// Action towards `dst` along a shortest path; smallest neighbour id on ties.
pub fn next_hop(g: &Graph, delays: &[u32], dist: &DistanceMatrix, v: usize, dst: usize) -> usize {
    if v == dst {
        return 0;
    }
    let mut best = (u64::MAX, 0);
    for (k, &(w, e)) in g.neighbors(v).iter().enumerate() {
        let via = delays[e.0] as u64 + dist.get(w, dst);
        if via < best.0 {
            best = (via, k + 1);
        }
    }
    best.1
}

/// Legal actions of one agent under visited-node masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionMask {
    pub legal: Vec<bool>,
    /// Every edge leads to a visited node: the packet has to be dropped.
    pub drop: bool,
}

/// Masks edges that lead back to nodes the packet has visited.
///
/// With `strict` the wait action is illegal as well. In-transit agents get an
/// all-legal mask since their action is ignored.
pub fn action_mask(env: &RoutingEnv, agent: usize, strict: bool) -> ActionMask {
    let p = &env.packets()[agent];
    let degree = env.graph().degree();
    let super::Location::AtNode(v) = p.location else {
        return ActionMask {
            legal: vec![true; degree + 1],
            drop: false,
        };
    };
    let mut legal = Vec::with_capacity(degree + 1);
    legal.push(!strict);
    legal.extend(
        env.graph()
            .neighbors(v)
            .iter()
            .map(|&(w, _)| !p.visited.contains(&w)),
    );
    let drop = !legal[1..].iter().any(|&b| b);
    ActionMask { legal, drop }
}
