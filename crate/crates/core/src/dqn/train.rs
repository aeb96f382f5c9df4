use super::{act, learner, DqnError, DqnModel, ReplayMemory, Setting, StepRecord, TrainConfig};
use crate::env::{GraphSource, RoutingEnv};
use crate::gnn::{GraphBatch, NodeStates};
use crate::graph::{generate_graph, Graph};
use crate::nn::{AdamW, Checkpoint, Mlp};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Training summary of one finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Environment steps taken so far.
    pub end_step: usize,
    /// Mean reward per agent and step.
    pub mean_reward: f64,
    pub throughput: f64,
    pub epsilon: f64,
    /// Mean loss of the iterations run during the episode.
    pub mean_loss: Option<f64>,
}

/// Rollout, replay and learner state of one training run.
pub struct Trainer {
    cfg: TrainConfig,
    model: DqnModel<f32>,
    target: Mlp<f32>,
    opt: AdamW<f32>,
    replay: ReplayMemory,
    env: RoutingEnv,
    states: Option<NodeStates<f32>>,
    batch: GraphBatch,
    act_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    steps: usize,
    iterations: usize,
    episode_start: bool,
    episodes: usize,
    ep_reward: f64,
    ep_arrivals: usize,
    ep_steps: usize,
    ep_loss: (f64, usize),
}

impl Trainer {
    /// Single-graph runs train on `graph`, or on one generated from the seed.
    pub fn new(cfg: TrainConfig, graph: Option<Arc<Graph>>) -> Result<Self, DqnError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DqnModel::new(&cfg.model, cfg.nodes, cfg.degree, &mut rng);
        let source = match cfg.setting {
            Setting::Single => {
                let g = match graph {
                    Some(g) => g,
                    None => Arc::new(generate_graph(
                        cfg.nodes,
                        cfg.degree,
                        cfg.delay_scale,
                        &mut rng,
                    )?),
                };
                if g.node_count() != cfg.nodes || g.degree() != cfg.degree {
                    return Err(DqnError::Config("graph does not match nodes/degree".into()));
                }
                GraphSource::Fixed(g)
            }
            Setting::Generalized => GraphSource::Generated {
                nodes: cfg.nodes,
                degree: cfg.degree,
                delay_scale: cfg.delay_scale,
            },
        };
        let env = RoutingEnv::new(cfg.env.clone(), source, rng.next_u64())?;
        let states = model
            .gnn
            .as_ref()
            .map(|g| NodeStates::zeros(cfg.nodes, g.hidden()));
        Ok(Trainer {
            target: model.q.clone(),
            opt: AdamW::new(cfg.optimizer),
            replay: ReplayMemory::new(cfg.replay_capacity),
            batch: GraphBatch::single(env.graph()),
            act_rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
            sample_rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
            env,
            states,
            model,
            cfg,
            steps: 0,
            iterations: 0,
            episode_start: true,
            episodes: 0,
            ep_reward: 0.0,
            ep_arrivals: 0,
            ep_steps: 0,
            ep_loss: (0.0, 0),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DqnModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> DqnModel<f32> {
        self.model
    }

    pub fn target(&self) -> &Mlp<f32> {
        &self.target
    }

    pub fn replay(&self) -> &ReplayMemory {
        &self.replay
    }

    pub fn env(&self) -> &RoutingEnv {
        &self.env
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon.at(self.steps)
    }

    /// One environment step, followed by a training iteration when due.
    /// Returns the log of the episode this step finished, if any.
    pub fn step(&mut self) -> Result<Option<EpisodeLog>, DqnError> {
        let snap = self.env.snapshot();
        let graph = self.env.graph().clone();
        let eps = self.epsilon();
        let live = self
            .model
            .live_forward(&snap, &graph, &self.batch, self.states.as_ref())?;
        let mut actions = vec![0usize; snap.agent_count()];
        for (i, a) in snap.agents.iter().enumerate() {
            if !a.in_transit {
                actions[i] = act(live.q.row(i), eps, &mut self.act_rng, None)
                    .ok_or(DqnError::NoLegalAction { agent: i })?;
            }
        }
        let out = self.env.step(&actions)?;
        self.ep_reward += out.rewards.iter().map(|&r| r as f64).sum::<f64>();
        self.ep_arrivals += out.arrived.iter().filter(|&&a| a).count();
        self.ep_steps += 1;
        self.replay.push(StepRecord {
            graph,
            obs: snap,
            states: std::mem::replace(&mut self.states, live.states),
            actions: actions.iter().map(|&a| a as u8).collect(),
            rewards: out.rewards,
            arrived: out.arrived,
            acted: out.acted,
            episode_start: self.episode_start,
            terminal: out.truncated.then(|| self.env.snapshot()),
        });
        self.episode_start = false;
        self.steps += 1;

        if self.steps >= self.cfg.warmup && self.steps % self.cfg.train_every == 0 {
            let stats = learner::train_batch(
                &mut self.model,
                &mut self.target,
                &mut self.opt,
                &self.replay,
                &self.cfg,
                &mut self.sample_rng,
            )
            .map_err(|e| match e {
                DqnError::NonFiniteLoss { loss, .. } => DqnError::NonFiniteLoss {
                    iteration: self.iterations,
                    loss,
                },
                e => e,
            })?;
            if let Some(s) = stats {
                self.iterations += 1;
                self.ep_loss.0 += s.loss;
                self.ep_loss.1 += 1;
            }
        }

        if !out.truncated {
            return Ok(None);
        }
        let n = self.env.config().packets as f64;
        let log = EpisodeLog {
            episode: self.episodes,
            end_step: self.steps,
            mean_reward: self.ep_reward / (n * self.ep_steps as f64),
            throughput: self.ep_arrivals as f64 / self.ep_steps as f64,
            epsilon: eps,
            mean_loss: (self.ep_loss.1 > 0).then(|| self.ep_loss.0 / self.ep_loss.1 as f64),
        };
        self.episodes += 1;
        self.ep_reward = 0.0;
        self.ep_arrivals = 0;
        self.ep_steps = 0;
        self.ep_loss = (0.0, 0);
        let before = self.env.graph().clone();
        self.env.reset()?;
        if !Arc::ptr_eq(&before, self.env.graph()) {
            self.batch = GraphBatch::single(self.env.graph());
        }
        if let Some(s) = &mut self.states {
            s.reset_rows(0..s.rows());
        }
        self.episode_start = true;
        Ok(Some(log))
    }

    /// Runs until `total_steps`, reporting every finished episode.
    pub fn run(
        &mut self,
        mut progress: impl FnMut(&EpisodeLog),
    ) -> Result<Vec<EpisodeLog>, DqnError> {
        let mut logs = Vec::new();
        while self.steps < self.cfg.total_steps {
            if let Some(log) = self.step()? {
                progress(&log);
                logs.push(log);
            }
        }
        Ok(logs)
    }

    /// Model parameters with the training config as metadata.
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint(serde_json::json!({
            "config": self.cfg,
            "steps": self.steps,
            "iterations": self.iterations,
        }))
    }
}

/// Reads a model written by [`Trainer::checkpoint`].
pub fn load_model(path: impl AsRef<Path>) -> Result<(DqnModel<f32>, TrainConfig), DqnError> {
    let ck = Checkpoint::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(ck.metadata["config"].clone())
        .map_err(|e| DqnError::Config(format!("checkpoint config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = DqnModel::new(&cfg.model, cfg.nodes, cfg.degree, &mut rng);
    ck.load_into("", &mut model)?;
    Ok((model, cfg))
}
