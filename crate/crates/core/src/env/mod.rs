//! Discrete-step packet routing on a [`Graph`].
//!
//! `N` packets are routed between random source/destination pairs. Every
//! packet is an agent with `1 + D` actions: wait, or send over the k-th
//! outgoing edge (ascending neighbour id). A packet sent over an edge with
//! delay `d` occupies the edge during `d` consecutive steps, counting the
//! step it was sent in, and is back at a node `d` steps after the send
//! decision. Arrived and dropped packets are replaced at the end of the step,
//! so every observation shows exactly `N` packets.
//!
//! In [`Mode::Limited`] a packet of size `g` may only enter an edge whose
//! current load is below `1 - g`; otherwise it stays and is penalized.

mod metrics;
mod observe;
mod policy;

pub use metrics::{episode_metrics, EpisodeMetrics, EpisodeTrace, TraceRow};
pub use observe::{agent_obs_dim, node_obs_dim, AgentView, ObsSnapshot, DELAY_SCALE};
pub use policy::{action_mask, ActionMask, ShortestPathPolicy, SpVariant};

use crate::graph::{generate_graph, EdgeId, Graph, GraphError};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action {action} of agent {agent} is outside [0, {max}]")]
    ActionOutOfRange {
        agent: usize,
        action: usize,
        max: usize,
    },
    #[error("no edge between {0} and {1}")]
    UnknownEdge(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Packets always enter the selected edge.
    #[default]
    Unlimited,
    /// Edges carry at most a cumulative packet size below one.
    Limited,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Unlimited => "unlimited",
            Mode::Limited => "limited",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unlimited" => Ok(Mode::Unlimited),
            "limited" => Ok(Mode::Limited),
            other => Err(format!(
                "unknown mode `{other}` (expected unlimited|limited)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub packets: usize,
    pub mode: Mode,
    pub arrival_reward: f32,
    pub block_penalty: f32,
    pub episode_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            packets: 20,
            mode: Mode::Unlimited,
            arrival_reward: 10.0,
            block_penalty: -0.2,
            episode_len: 300,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.packets == 0 {
            return Err(EnvError::Config("at least one packet is required".into()));
        }
        if self.episode_len == 0 {
            return Err(EnvError::Config("episode length must be positive".into()));
        }
        Ok(())
    }
}

/// Where episodes get their graph from.
#[derive(Debug, Clone)]
pub enum GraphSource {
    Fixed(Arc<Graph>),
    /// A fresh random graph on every reset.
    Generated {
        nodes: usize,
        degree: usize,
        delay_scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    AtNode(usize),
    InTransit {
        edge: EdgeId,
        to: usize,
        remaining: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub size: f32,
    pub src: usize,
    pub dst: usize,
    pub location: Location,
    /// Step counter value at which the packet first appeared.
    pub spawn_step: usize,
    pub visited: Vec<usize>,
}

impl Packet {
    /// The node the packet is at, or the head of the edge it travels on.
    pub fn node(&self) -> usize {
        match self.location {
            Location::AtNode(v) => v,
            Location::InTransit { to, .. } => to,
        }
    }

    pub fn in_transit(&self) -> bool {
        matches!(self.location, Location::InTransit { .. })
    }
}

/// Scheduled change of one edge's delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayOverride {
    pub u: usize,
    pub v: usize,
    pub new_delay: u32,
    pub at_step: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub arrivals: usize,
    pub blocks: usize,
    pub drops: usize,
}

/// Per-agent results of one [`RoutingEnv::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f32>,
    /// Packet reached its destination during this step (bootstrap is cut).
    pub arrived: Vec<bool>,
    pub blocked: Vec<bool>,
    pub dropped: Vec<bool>,
    /// Agent was at a node when the step began, so its action took effect.
    pub acted: Vec<bool>,
    /// Spawn-to-arrival time of each arrival in this step.
    pub arrival_delays: Vec<usize>,
    /// The episode reached its length limit.
    pub truncated: bool,
}

/// The routing environment state.
#[derive(Debug, Clone)]
pub struct RoutingEnv {
    cfg: EnvConfig,
    source: GraphSource,
    rng: ChaCha8Rng,
    graph: Arc<Graph>,
    delays: Vec<u32>,
    reset_delays: Vec<u32>,
    edge_load: Vec<f64>,
    packets: Vec<Packet>,
    slot_rngs: Vec<ChaCha8Rng>,
    pending_drop: Vec<bool>,
    overrides: Vec<DelayOverride>,
    step: usize,
    counters: Counters,
}

impl RoutingEnv {
    /// Creates the environment and performs a first [`reset`](Self::reset).
    pub fn new(cfg: EnvConfig, source: GraphSource, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = match &source {
            GraphSource::Fixed(g) => g.clone(),
            GraphSource::Generated {
                nodes,
                degree,
                delay_scale,
            } => Arc::new(generate_graph(*nodes, *degree, *delay_scale, &mut rng)?),
        };
        let mut env = RoutingEnv {
            cfg,
            source,
            rng,
            delays: graph.delays(),
            reset_delays: graph.delays(),
            edge_load: vec![0.0; graph.edge_count()],
            graph,
            packets: Vec::new(),
            slot_rngs: Vec::new(),
            pending_drop: Vec::new(),
            overrides: Vec::new(),
            step: 0,
            counters: Counters::default(),
        };
        env.start_episode();
        Ok(env)
    }

    /// Starts a new episode; a generator source draws a fresh graph.
    pub fn reset(&mut self) -> Result<(), EnvError> {
        if let GraphSource::Generated {
            nodes,
            degree,
            delay_scale,
        } = self.source
        {
            self.graph = Arc::new(generate_graph(nodes, degree, delay_scale, &mut self.rng)?);
        }
        self.start_episode();
        Ok(())
    }

    fn start_episode(&mut self) {
        let n = self.cfg.packets;
        self.delays = self.graph.delays();
        self.edge_load = vec![0.0; self.graph.edge_count()];
        self.step = 0;
        self.counters = Counters::default();
        self.pending_drop = vec![false; n];
        self.slot_rngs = (0..n)
            .map(|_| ChaCha8Rng::seed_from_u64(self.rng.next_u64()))
            .collect();
        let nodes = self.graph.node_count();
        self.packets = (0..n)
            .map(|slot| spawn(&mut self.slot_rngs[slot], nodes, 0))
            .collect();
        self.apply_due_overrides();
        self.reset_delays = self.delays.clone();
    }

    /// Schedules an edge delay change taking effect at step `at_step`.
    ///
    /// Transits that already started keep their timer. Observations made at
    /// `at_step` and later show the new delay.
    pub fn override_edge_delay(
        &mut self,
        u: usize,
        v: usize,
        new_delay: u32,
        at_step: usize,
    ) -> Result<(), EnvError> {
        if new_delay < 1 {
            return Err(EnvError::Config("edge delay must be at least 1".into()));
        }
        if self.graph.find_edge(u, v).is_none() {
            return Err(EnvError::UnknownEdge(u, v));
        }
        self.overrides.push(DelayOverride {
            u,
            v,
            new_delay,
            at_step,
        });
        if at_step == self.step {
            self.apply_due_overrides();
        }
        Ok(())
    }

    pub fn clear_overrides(&mut self) {
        self.overrides.clear();
    }

    fn apply_due_overrides(&mut self) {
        for o in &self.overrides {
            if o.at_step == self.step {
                if let Some(e) = self.graph.find_edge(o.u, o.v) {
                    self.delays[e.0] = o.new_delay;
                }
            }
        }
    }

    /// Marks a packet for removal; it is respawned at the end of the next step.
    pub fn drop_packet(&mut self, slot: usize) {
        self.pending_drop[slot] = true;
    }

    /// Advances the environment by one step.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome, EnvError> {
        let n = self.cfg.packets;
        if actions.len() != n {
            return Err(EnvError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let max = self.graph.degree();
        if let Some((agent, &action)) = actions.iter().enumerate().find(|(_, &a)| a > max) {
            return Err(EnvError::ActionOutOfRange { agent, action, max });
        }

        let t = self.step;
        let mut out = StepOutcome {
            rewards: vec![0.0; n],
            arrived: vec![false; n],
            blocked: vec![false; n],
            dropped: self.pending_drop.clone(),
            acted: vec![false; n],
            arrival_delays: Vec::new(),
            truncated: false,
        };

        // decisions of packets that start the step at a node, in slot order
        for (slot, &action) in actions.iter().enumerate() {
            if self.pending_drop[slot] {
                continue;
            }
            let p = &mut self.packets[slot];
            let Location::AtNode(v) = p.location else {
                continue;
            };
            out.acted[slot] = true;
            if action == 0 {
                continue;
            }
            let (w, e) = self.graph.neighbors(v)[action - 1];
            let size = p.size as f64;
            if self.cfg.mode == Mode::Limited && !(self.edge_load[e.0] < 1.0 - size) {
                out.rewards[slot] += self.cfg.block_penalty;
                out.blocked[slot] = true;
                self.counters.blocks += 1;
                continue;
            }
            self.edge_load[e.0] += size;
            p.location = Location::InTransit {
                edge: e,
                to: w,
                remaining: self.delays[e.0],
            };
        }

        // every transmission advances one step, including those sent just now
        for (slot, p) in self.packets.iter_mut().enumerate() {
            if self.pending_drop[slot] {
                continue;
            }
            if let Location::InTransit {
                edge,
                to,
                remaining,
            } = p.location
            {
                if remaining > 1 {
                    p.location = Location::InTransit {
                        edge,
                        to,
                        remaining: remaining - 1,
                    };
                    continue;
                }
                self.edge_load[edge.0] -= p.size as f64;
                p.location = Location::AtNode(to);
                p.visited.push(to);
                if to == p.dst {
                    out.rewards[slot] += self.cfg.arrival_reward;
                    out.arrived[slot] = true;
                    out.arrival_delays.push(t + 1 - p.spawn_step);
                    self.counters.arrivals += 1;
                }
            }
        }

        self.step += 1;
        let nodes = self.graph.node_count();
        for slot in 0..n {
            if out.arrived[slot] || self.pending_drop[slot] {
                if self.pending_drop[slot] {
                    self.counters.drops += 1;
                    self.pending_drop[slot] = false;
                }
                self.packets[slot] = spawn(&mut self.slot_rngs[slot], nodes, self.step);
            }
        }
        self.apply_due_overrides();
        out.truncated = self.step >= self.cfg.episode_len;
        Ok(out)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn packets(&self) -> &[Packet] {
        &self.packets
    }

    /// Current per-edge delays, including applied overrides.
    pub fn delays(&self) -> &[u32] {
        &self.delays
    }

    /// Per-edge delays as they were when the episode started.
    pub fn reset_delays(&self) -> &[u32] {
        &self.reset_delays
    }

    pub fn edge_load(&self) -> &[f64] {
        &self.edge_load
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Number of actions per agent, `1 + D`.
    pub fn action_count(&self) -> usize {
        1 + self.graph.degree()
    }

    /// Agent → node assignment (in-transit agents map to the edge head).
    pub fn assignments(&self) -> Vec<usize> {
        self.packets.iter().map(Packet::node).collect()
    }
}

fn spawn<R: Rng>(rng: &mut R, nodes: usize, step: usize) -> Packet {
    let src = rng.random_range(0..nodes);
    // uniform over V \ {src}
    let mut dst = rng.random_range(0..nodes - 1);
    if dst >= src {
        dst += 1;
    }
    let size: f32 = rng.random();
    Packet {
        size,
        src,
        dst,
        location: Location::AtNode(src),
        spawn_step: step,
        visited: vec![src],
    }
}
