//! Independent deep Q-learning with shared parameters and learned graph
//! observations.
//!
//! Every packet is an agent. All agents share one Q-network over
//! `o ‖ ψ`, where `ψ` is read out from node states that are updated once
//! per environment step. Training samples contiguous sequences from a
//! replay memory that stores node states (the stored-state method) and
//! backpropagates through the node-state updates of the whole sequence.

mod eval;
mod learner;
mod replay;
mod train;

pub use eval::{
    adaptation_experiment, bottleneck_edge, evaluate, run_episode, AdaptConfig, AdaptRow,
    Controller, DqnController, EpisodeResult, EvalConfig, EvalReport, EvalRow, EvalSummary,
    SpController,
};
pub use learner::{replay_node_states, td_loss, train_batch, BatchStats};
pub use replay::{ReplayMemory, StepRecord};
pub use train::{load_model, EpisodeLog, Trainer};

use crate::env::{agent_obs_dim, EnvConfig, EnvError, Mode, ObsSnapshot};
use crate::gnn::{readout, GraphBatch, GraphObsConfig, GraphObsNet, NodeStates};
use crate::graph::{Graph, GraphError};
use crate::nn::{AdamWConfig, Checkpoint, Mlp, Module, NnError, Param, Real};
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DqnError {
    #[error("agent {agent} has no legal action")]
    NoLegalAction { agent: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// One fixed graph, long episodes.
    Single,
    /// A fresh random graph every (short) episode.
    Generalized,
}

/// `ε` after `n` steps is `max(floor, start·decay^⌊n/every⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decay: f64,
    pub every: usize,
    pub floor: f64,
}

impl EpsilonSchedule {
    pub fn at(&self, step: usize) -> f64 {
        (self.start * self.decay.powi((step / self.every.max(1)) as i32)).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden widths of the Q-network encoder.
    pub q_hidden: Vec<usize>,
    /// `None` gives plain DQN on agent observations only.
    pub graph_obs: Option<GraphObsConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub setting: Setting,
    pub env: EnvConfig,
    pub nodes: usize,
    pub degree: usize,
    pub delay_scale: f64,
    pub model: ModelConfig,
    pub gamma: f64,
    pub tau: f64,
    pub optimizer: AdamWConfig,
    /// Sequences per training iteration.
    pub batch: usize,
    pub replay_capacity: usize,
    /// Sequence length `J` (1 for plain DQN).
    pub unroll: usize,
    pub epsilon: EpsilonSchedule,
    pub warmup: usize,
    /// Environment steps between training iterations.
    pub train_every: usize,
    pub total_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Plain DQN on one fixed graph with the full-length schedule.
    pub fn single_graph() -> Self {
        TrainConfig {
            setting: Setting::Single,
            env: EnvConfig::default(),
            nodes: 20,
            degree: 3,
            delay_scale: crate::graph::DEFAULT_DELAY_SCALE,
            model: ModelConfig {
                q_hidden: vec![512, 256],
                graph_obs: None,
            },
            gamma: 0.9,
            tau: 0.01,
            optimizer: AdamWConfig::default(),
            batch: 32,
            replay_capacity: 200_000,
            unroll: 1,
            epsilon: EpsilonSchedule {
                start: 1.0,
                decay: 0.996,
                every: 100,
                floor: 0.01,
            },
            warmup: 10_000,
            train_every: 10,
            total_steps: 250_000,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    /// Graph observations on random graphs with the full-length schedule.
    pub fn generalized() -> Self {
        TrainConfig {
            setting: Setting::Generalized,
            env: EnvConfig {
                episode_len: 50,
                ..EnvConfig::default()
            },
            model: ModelConfig {
                q_hidden: vec![512, 256],
                graph_obs: Some(GraphObsConfig::default()),
            },
            unroll: 8,
            epsilon: EpsilonSchedule {
                start: 1.0,
                decay: 0.999,
                every: 100,
                floor: 0.01,
            },
            warmup: 100_000,
            total_steps: 2_500_000,
            ..TrainConfig::single_graph()
        }
    }

    /// Generalized setting scaled to a 100 000-step desk run.
    pub fn generalized_desk() -> Self {
        TrainConfig {
            replay_capacity: 50_000,
            epsilon: EpsilonSchedule {
                decay: 0.99,
                ..TrainConfig::generalized().epsilon
            },
            warmup: 5_000,
            total_steps: 100_000,
            ..TrainConfig::generalized()
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.env.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), DqnError> {
        self.env.validate()?;
        let bad = |m: &str| Err(DqnError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch == 0 || self.unroll == 0 || self.train_every == 0 {
            return bad("batch, unroll and train_every must be positive");
        }
        if self.replay_capacity < self.unroll + 1 {
            return bad("replay capacity must exceed the unroll depth");
        }
        if self.model.graph_obs.is_none() && self.unroll != 1 {
            return bad("plain DQN has no recurrence; use unroll 1");
        }
        Ok(())
    }
}

/// Q-network plus optional node-state update.
#[derive(Debug, Clone, PartialEq)]
pub struct DqnModel<T> {
    pub q: Mlp<T>,
    pub gnn: Option<GraphObsNet<T>>,
    pub nodes: usize,
    pub degree: usize,
}

impl<T: Real> DqnModel<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        nodes: usize,
        degree: usize,
        rng: &mut R,
    ) -> Self {
        let gnn = cfg
            .graph_obs
            .as_ref()
            .map(|g| GraphObsNet::new(g, crate::env::node_obs_dim(nodes, degree), rng));
        let psi = gnn.as_ref().map_or(0, |g| g.psi_dim(degree));
        let mut sizes = vec![agent_obs_dim(nodes, degree) + psi];
        sizes.extend(&cfg.q_hidden);
        sizes.push(degree + 1);
        DqnModel {
            q: Mlp::new("q", &sizes, false, rng),
            gnn,
            nodes,
            degree,
        }
    }

    pub fn obs_dim(&self) -> usize {
        agent_obs_dim(self.nodes, self.degree)
    }

    pub fn psi_dim(&self) -> usize {
        self.gnn.as_ref().map_or(0, |g| g.psi_dim(self.degree))
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim() + self.psi_dim()
    }

    pub fn hidden(&self) -> usize {
        self.gnn.as_ref().map_or(0, GraphObsNet::hidden)
    }
}

impl<T: Real> Module<T> for DqnModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.q.visit(f);
        if let Some(g) = &self.gnn {
            g.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.q.visit_mut(f);
        if let Some(g) = &mut self.gnn {
            g.visit_mut(f);
        }
    }
}

/// Writes `o ‖ ψ` of one agent into a zeroed row.
pub(crate) fn write_q_row(
    snap: &ObsSnapshot,
    g: &Graph,
    agent: usize,
    psi: Option<ArrayView1<f32>>,
    mut row: ArrayViewMut1<f32>,
) {
    let d_o = agent_obs_dim(g.node_count(), g.degree());
    snap.write_agent_row(g, agent, row.slice_mut(s![..d_o]));
    if let Some(p) = psi {
        row.slice_mut(s![d_o..]).assign(&p);
    }
}

/// Result of one live forward pass.
pub struct LiveForward {
    /// `(N, D+1)`
    pub q: Array2<f32>,
    /// Node states after the update, if the model has graph observations.
    pub states: Option<NodeStates<f32>>,
}

impl DqnModel<f32> {
    /// Q-values of all agents for the current observation; advances the
    /// node states by one step.
    pub fn live_forward(
        &self,
        snap: &ObsSnapshot,
        g: &Graph,
        batch: &GraphBatch,
        states: Option<&NodeStates<f32>>,
    ) -> Result<LiveForward, DqnError> {
        let n = snap.agent_count();
        let mut x = Array2::zeros((n, self.input_dim()));
        let (psi, next) = match (&self.gnn, states) {
            (Some(gnn), Some(st)) => {
                let out = gnn.step(batch, st, snap.node_obs(g).view())?;
                let psi = readout(batch, &out.levels, &snap.assignments());
                (Some(psi), Some(out.states))
            }
            (Some(_), None) => {
                return Err(DqnError::Config(
                    "graph observations need node states".into(),
                ))
            }
            _ => (None, None),
        };
        for i in 0..n {
            write_q_row(snap, g, i, psi.as_ref().map(|p| p.row(i)), x.row_mut(i));
        }
        Ok(LiveForward {
            q: self.q.forward(x.view())?,
            states: next,
        })
    }

    pub fn checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(metadata);
        ck.add("", self);
        ck
    }
}

/// ε-greedy choice over legal actions; greedy ties go to the smallest index.
///
/// One uniform number is always drawn for the ε test so that the random
/// stream does not depend on the Q-values.
pub fn act<R: Rng + ?Sized>(
    q: ArrayView1<f32>,
    epsilon: f64,
    rng: &mut R,
    legal: Option<&[bool]>,
) -> Option<usize> {
    let ok = |a: usize| legal.is_none_or(|m| m[a]);
    let explore = rng.random::<f64>() < epsilon;
    let count = (0..q.len()).filter(|&a| ok(a)).count();
    if count == 0 {
        return None;
    }
    if explore {
        let pick = rng.random_range(0..count);
        return (0..q.len()).filter(|&a| ok(a)).nth(pick);
    }
    let mut best: Option<usize> = None;
    for a in (0..q.len()).filter(|&a| ok(a)) {
        if best.is_none_or(|b| q[a] > q[b]) {
            best = Some(a);
        }
    }
    best
}

/// Greedy actions for a row-per-agent Q matrix.
pub fn greedy(q: ArrayView2<f32>) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for a in 1..r.len() {
                if r[a] > r[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epsilon_schedule() {
        let e = TrainConfig::single_graph().epsilon;
        assert_eq!(e.at(0), 1.0);
        assert_eq!(e.at(99), 1.0);
        assert!((e.at(100 * 7) - 0.996f64.powi(7)).abs() < 1e-15);
        assert_eq!(e.at(100 * 100_000), 0.01);
    }

    #[test]
    fn greedy_ties_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = array![1.0f32, 3.0, 3.0, -1.0];
        assert_eq!(act(q.view(), 0.0, &mut rng, None), Some(1));
        let legal = [true, false, true, true];
        assert_eq!(act(q.view(), 0.0, &mut rng, Some(&legal)), Some(2));
        assert_eq!(act(q.view(), 0.5, &mut rng, Some(&[false; 4])), None);
        assert_eq!(greedy(array![[0.0f32, 0.0], [0.0, 1.0]].view()), vec![0, 1]);
    }

    #[test]
    fn zero_output_layer_gives_equal_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            q_hidden: vec![16],
            graph_obs: None,
        };
        let mut m = DqnModel::<f32>::new(&cfg, 20, 3, &mut rng);
        let last = m.q.layers.last_mut().unwrap();
        last.w.value.fill(0.0);
        let x = Array2::from_elem((2, m.input_dim()), 0.3);
        let q = m.q.forward(x.view()).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
        assert_eq!(q.row(0), q.row(1));
        assert_eq!(greedy(q.view()), vec![0, 0]);
    }

    #[test]
    fn presets_validate() {
        TrainConfig::single_graph().validate().unwrap();
        TrainConfig::generalized().validate().unwrap();
        TrainConfig::generalized_desk().validate().unwrap();
        assert_eq!(TrainConfig::generalized().env.episode_len, 50);
        let mut bad = TrainConfig::single_graph();
        bad.unroll = 4;
        assert!(bad.validate().is_err());
    }
}
