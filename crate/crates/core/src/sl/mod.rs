//! Supervised shortest-path regression on top of the node-state update.
//!
//! Every node predicts its shortest-path length to all `L` nodes from its
//! graph observation. Node observations come from a freshly reset routing
//! environment and stay fixed while the model is unrolled for `J` steps;
//! the loss is summed over all unrolled steps.

use crate::env::{node_obs_dim, EnvConfig, GraphSource, ObsSnapshot, RoutingEnv};
use crate::gnn::{readout, readout_backward, GraphBatch, GraphObsConfig, GraphObsNet, NodeStates};
use crate::graph::{all_pairs_shortest_paths, Graph, GraphError, GraphFile, Weight};
use crate::nn::{
    clip_grad_norm, mse_loss, mse_loss_backward, AdamW, AdamWConfig, Checkpoint, Linear, Module,
    NnError, Param, Real,
};
use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlError {
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One graph with its reset-time observations and both target matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample {
    pub graph: Graph,
    pub snapshot: ObsSnapshot,
    pub node_obs: Array2<f32>,
    pub delay_targets: Array2<f32>,
    pub hop_targets: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    graph: GraphFile,
    snapshot: ObsSnapshot,
    delay_targets: Vec<u64>,
    hop_targets: Vec<u64>,
}

fn matrix(n: usize, flat: impl IntoIterator<Item = u64>) -> Array2<f32> {
    Array2::from_shape_vec((n, n), flat.into_iter().map(|d| d as f32).collect())
        .expect("square matrix")
}

impl RegressionSample {
    pub fn new(graph: Graph, snapshot: ObsSnapshot) -> Self {
        let n = graph.node_count();
        let node_obs = snapshot.node_obs(&graph);
        let sp = |w| {
            let m = all_pairs_shortest_paths(&graph, w);
            matrix(n, (0..n).flat_map(|u| m.row(u).to_vec()))
        };
        RegressionSample {
            delay_targets: sp(Weight::Delay),
            hop_targets: sp(Weight::Hops),
            node_obs,
            snapshot,
            graph,
        }
    }

    pub fn targets(&self, weight: Weight) -> &Array2<f32> {
        match weight {
            Weight::Delay => &self.delay_targets,
            Weight::Hops => &self.hop_targets,
        }
    }

    fn record(&self) -> SampleRecord {
        let flat = |m: &Array2<f32>| m.iter().map(|&x| x as u64).collect();
        SampleRecord {
            graph: GraphFile::from(&self.graph),
            snapshot: self.snapshot.clone(),
            delay_targets: flat(&self.delay_targets),
            hop_targets: flat(&self.hop_targets),
        }
    }

    fn from_record(r: SampleRecord) -> Result<Self, SlError> {
        let graph = Graph::try_from(r.graph)?;
        let n = graph.node_count();
        if r.delay_targets.len() != n * n || r.hop_targets.len() != n * n {
            return Err(SlError::Config(format!("target matrices must be {n}×{n}")));
        }
        Ok(RegressionSample {
            node_obs: r.snapshot.node_obs(&graph),
            delay_targets: matrix(n, r.delay_targets),
            hop_targets: matrix(n, r.hop_targets),
            snapshot: r.snapshot,
            graph,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub validation: usize,
    pub nodes: usize,
    pub degree: usize,
    pub delay_scale: f64,
    pub env: EnvConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 10_000,
            validation: 500,
            nodes: 20,
            degree: 3,
            delay_scale: crate::graph::DEFAULT_DELAY_SCALE,
            env: EnvConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<RegressionSample>,
    pub validation: Vec<RegressionSample>,
}

/// Resets a generator-backed environment `count` times; the last
/// `validation` samples are held out.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset, SlError> {
    if cfg.count == 0 || cfg.validation >= cfg.count {
        return Err(SlError::Config(
            "need count ≥ 1 and fewer validation than total samples".into(),
        ));
    }
    let source = GraphSource::Generated {
        nodes: cfg.nodes,
        degree: cfg.degree,
        delay_scale: cfg.delay_scale,
    };
    let mut env = RoutingEnv::new(cfg.env.clone(), source, cfg.seed)?;
    let mut all = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        if i > 0 {
            env.reset()?;
        }
        all.push(RegressionSample::new(
            (**env.graph()).clone(),
            env.snapshot(),
        ));
    }
    let validation = all.split_off(cfg.count - cfg.validation);
    Ok(Dataset {
        train: all,
        validation,
    })
}

/// Samples from a fixed graph suite (e.g. the test graphs), one env reset each.
pub fn samples_for_graphs(
    graphs: &[Graph],
    env: &EnvConfig,
    seed: u64,
) -> Result<Vec<RegressionSample>, SlError> {
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let e = RoutingEnv::new(
                env.clone(),
                GraphSource::Fixed(std::sync::Arc::new(g.clone())),
                seed.wrapping_add(i as u64),
            )?;
            Ok(RegressionSample::new(g.clone(), e.snapshot()))
        })
        .collect()
}

/// Writes one JSON record per line.
pub fn write_samples<W: Write>(samples: &[RegressionSample], mut w: W) -> Result<(), SlError> {
    for s in samples {
        serde_json::to_writer(&mut w, &s.record()).map_err(|e| SlError::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<RegressionSample>, SlError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| SlError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(RegressionSample::from_record(rec)?);
    }
    Ok(out)
}

pub fn save_samples(samples: &[RegressionSample], path: impl AsRef<Path>) -> Result<(), SlError> {
    let f = std::fs::File::create(path)?;
    write_samples(samples, std::io::BufWriter::new(f))
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<RegressionSample>, SlError> {
    let f = std::fs::File::open(path)?;
    read_samples(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlConfig {
    pub graph_obs: GraphObsConfig,
    /// Unroll depth `J`.
    pub unroll: usize,
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub target: Weight,
    /// Targets are divided by this during training.
    pub target_scale: f32,
    /// Validation loss is computed every this many iterations (0: never).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig {
            graph_obs: GraphObsConfig::default(),
            unroll: 8,
            iterations: 5_000,
            batch: 32,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            grad_clip: 1.0,
            target: Weight::Delay,
            target_scale: 10.0,
            eval_every: 250,
            seed: 0,
        }
    }
}

/// Node-state update plus a linear head from `ψ` to `L` distances.
#[derive(Debug, Clone, PartialEq)]
pub struct SpRegressor<T> {
    pub gnn: GraphObsNet<T>,
    pub head: Linear<T>,
}

impl<T: Real> SpRegressor<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &GraphObsConfig,
        nodes: usize,
        degree: usize,
        rng: &mut R,
    ) -> Self {
        let gnn = GraphObsNet::new(cfg, node_obs_dim(nodes, degree), rng);
        let head = Linear::new("head", gnn.psi_dim(degree), nodes, rng);
        SpRegressor { gnn, head }
    }
}

impl<T: Real> Module<T> for SpRegressor<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.gnn.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.gnn.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl SpRegressor<f32> {
    pub fn checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(metadata);
        ck.add("", self);
        ck
    }
}

/// Stacked inputs of a group of samples.
pub struct SampleBatch<T> {
    pub graphs: GraphBatch,
    pub node_obs: Array2<T>,
    /// Scaled targets, `(B·L, L)`.
    pub targets: Array2<T>,
}

impl<T: Real> SampleBatch<T> {
    pub fn new(samples: &[&RegressionSample], weight: Weight, scale: f32) -> Self {
        let graphs: Vec<&Graph> = samples.iter().map(|s| &s.graph).collect();
        let graphs = GraphBatch::new(&graphs);
        let rows = graphs.rows();
        let (dm, l) = (samples[0].node_obs.ncols(), samples[0].graph.node_count());
        let mut node_obs = Array2::zeros((rows, dm));
        let mut targets = Array2::zeros((rows, l));
        for (i, s) in samples.iter().enumerate() {
            let r = graphs.range(i);
            node_obs
                .slice_mut(s![r.clone(), ..])
                .assign(&s.node_obs.mapv(|x| T::lit(x as f64)));
            targets
                .slice_mut(s![r, ..])
                .assign(&s.targets(weight).mapv(|x| T::lit((x / scale) as f64)));
        }
        SampleBatch {
            graphs,
            node_obs,
            targets,
        }
    }
}

/// Summed per-step loss of one batch, with gradients accumulated into
/// `model` (not zeroed here). Returns the per-step (scaled) MSE.
pub fn unrolled_loss<T: Real>(
    model: &mut SpRegressor<T>,
    batch: &SampleBatch<T>,
    unroll: usize,
) -> Result<Vec<T>, NnError> {
    let rows = batch.graphs.rows();
    let all: Vec<usize> = (0..rows).collect();
    let enc = model.gnn.embed_cached(batch.node_obs.view())?;
    let e = enc.output().clone();
    let mut states = NodeStates::zeros(rows, model.gnn.hidden());
    let mut tapes = Vec::with_capacity(unroll);
    let mut losses = Vec::with_capacity(unroll);
    for _ in 0..unroll {
        let (out, cache) = model
            .gnn
            .step_embedded_cached(&batch.graphs, &states, e.view())?;
        let psi = readout(&batch.graphs, &out.levels, &all);
        let pred = model.head.forward(psi.view())?;
        losses.push(mse_loss(pred.view(), batch.targets.view())?);
        states = out.states.clone();
        tapes.push((cache, psi, pred, out.levels.len()));
    }
    let mut de = Array2::<T>::zeros(e.raw_dim());
    let mut carry: Option<NodeStates<T>> = None;
    for (cache, psi, pred, levels) in tapes.into_iter().rev() {
        let dpred = mse_loss_backward(pred.view(), batch.targets.view(), T::one())?;
        let dpsi = model
            .head
            .backward(psi.view(), dpred.view(), true)
            .expect("requested");
        let mut grads: Vec<Array2<T>> = (0..levels)
            .map(|_| Array2::zeros((rows, model.gnn.hidden())))
            .collect();
        readout_backward(&batch.graphs, dpsi.view(), &all, &mut grads);
        let (d_emb, d_prev) = model
            .gnn
            .step_backward(&batch.graphs, &cache, grads, carry.as_ref());
        de += &d_emb;
        carry = Some(d_prev);
    }
    model.gnn.encoder.backward(&enc, de.view(), false);
    Ok(losses)
}

/// Predictions after each of `steps` unrolled steps (no gradients).
pub fn predict_steps<T: Real>(
    model: &SpRegressor<T>,
    graphs: &GraphBatch,
    node_obs: ArrayView2<T>,
    steps: usize,
) -> Result<Vec<Array2<T>>, NnError> {
    let rows = graphs.rows();
    let all: Vec<usize> = (0..rows).collect();
    let e = model.gnn.embed(node_obs)?;
    let mut states = NodeStates::zeros(rows, model.gnn.hidden());
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = model.gnn.step_embedded(graphs, &states, e.view())?;
        let psi = readout(graphs, &step.levels, &all);
        out.push(model.head.forward(psi.view())?);
        states = step.states;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    /// Summed per-step loss on scaled targets.
    pub train_loss: f64,
    /// Scaled MSE at step `J` on the validation set.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMse {
    pub t: usize,
    /// MSE in original target units.
    pub mse: f64,
    /// MSE on scaled targets (as optimized).
    pub mse_scaled: f64,
}

/// MSE of step-`t` predictions for every `t` in `steps`.
pub fn evaluate_at_steps(
    model: &SpRegressor<f32>,
    samples: &[RegressionSample],
    steps: &[usize],
    weight: Weight,
    scale: f32,
) -> Result<Vec<StepMse>, SlError> {
    let max_t = steps.iter().copied().max().unwrap_or(0);
    if samples.is_empty() || max_t == 0 {
        return Err(SlError::Config(
            "need samples and at least one step ≥ 1".into(),
        ));
    }
    let mut sums = vec![0.0f64; max_t];
    for chunk in samples.chunks(32) {
        let refs: Vec<&RegressionSample> = chunk.iter().collect();
        let b = SampleBatch::<f32>::new(&refs, weight, scale);
        let preds = predict_steps(model, &b.graphs, b.node_obs.view(), max_t)?;
        for (t, p) in preds.iter().enumerate() {
            sums[t] += mse_loss(p.view(), b.targets.view())? as f64 * b.graphs.rows() as f64;
        }
    }
    let rows: usize = samples.iter().map(|s| s.graph.node_count()).sum();
    let s2 = (scale as f64).powi(2);
    Ok(steps
        .iter()
        .map(|&t| {
            let scaled = sums[t - 1] / rows as f64;
            StepMse {
                t,
                mse: scaled * s2,
                mse_scaled: scaled,
            }
        })
        .collect())
}

/// Trains `model` in place; `progress` sees every curve row.
pub fn train_regression(
    model: &mut SpRegressor<f32>,
    train: &[RegressionSample],
    validation: &[RegressionSample],
    cfg: &SlConfig,
    mut progress: impl FnMut(&CurveRow),
) -> Result<Vec<CurveRow>, SlError> {
    if cfg.unroll == 0 || cfg.batch == 0 || train.len() < cfg.batch {
        return Err(SlError::Config(format!(
            "need J ≥ 1, batch ≥ 1 and at least {} training samples",
            cfg.batch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = sample(&mut rng, train.len(), cfg.batch);
        let picked: Vec<&RegressionSample> = idx.iter().map(|i| &train[i]).collect();
        let batch = SampleBatch::<f32>::new(&picked, cfg.target, cfg.target_scale);
        model.zero_grad();
        let losses = unrolled_loss(model, &batch, cfg.unroll)?;
        let loss: f64 = losses.iter().map(|&l| l as f64).sum();
        if !loss.is_finite() {
            return Err(SlError::NonFiniteLoss {
                iteration: it,
                loss,
            });
        }
        clip_grad_norm(model, cfg.grad_clip);
        opt.step(model)?;
        let last = it + 1 == cfg.iterations;
        let val_loss = if !validation.is_empty()
            && ((cfg.eval_every > 0 && it % cfg.eval_every == 0) || last)
        {
            let r = evaluate_at_steps(
                model,
                validation,
                &[cfg.unroll],
                cfg.target,
                cfg.target_scale,
            )?;
            Some(r[0].mse_scaled)
        } else {
            None
        };
        let row = CurveRow {
            iteration: it,
            train_loss: loss,
            val_loss,
        };
        progress(&row);
        curve.push(row);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        build_dataset(&DatasetConfig {
            count: 6,
            validation: 2,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_split_and_targets() {
        let d = tiny();
        assert_eq!(d.train.len(), 4);
        assert_eq!(d.validation.len(), 2);
        for s in d.train.iter().chain(&d.validation) {
            let t = &s.delay_targets;
            assert_eq!(t, &t.t());
            assert!((0..20).all(|v| t[[v, v]] == 0.0));
            let apsp = all_pairs_shortest_paths(&s.graph, Weight::Hops);
            assert_eq!(s.hop_targets[[0, 19]], apsp.get(0, 19) as f32);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let d = tiny();
        let mut buf = Vec::new();
        write_samples(&d.train, &mut buf).unwrap();
        let back = read_samples(&buf[..]).unwrap();
        assert_eq!(back, d.train);
        assert!(matches!(
            read_samples(&b"{\"graph\":"[..]),
            Err(SlError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn zero_head_mse_is_target_second_moment() {
        let d = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GraphObsConfig {
            hidden: 8,
            encoder: vec![16],
            k: 1,
        };
        let mut model = SpRegressor::<f32>::new(&cfg, 20, 3, &mut rng);
        model.head.w.value.fill(0.0);
        let r = evaluate_at_steps(&model, &d.train, &[1, 3], Weight::Delay, 10.0).unwrap();
        let n: usize = d.train.iter().map(|s| s.delay_targets.len()).sum();
        let m2: f64 = d
            .train
            .iter()
            .flat_map(|s| s.delay_targets.iter())
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            / n as f64;
        for row in r {
            assert!((row.mse - m2).abs() / m2 < 1e-5, "{row:?} vs {m2}");
        }
    }

    #[test]
    fn single_step_eval_matches_training_bookkeeping() {
        let d = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = GraphObsConfig {
            hidden: 8,
            encoder: vec![16],
            k: 1,
        };
        let mut model = SpRegressor::<f32>::new(&cfg, 20, 3, &mut rng);
        let refs: Vec<&RegressionSample> = d.train.iter().collect();
        let batch = SampleBatch::<f32>::new(&refs, Weight::Delay, 10.0);
        let losses = unrolled_loss(&mut model, &batch, 1).unwrap();
        let eval = evaluate_at_steps(&model, &d.train, &[1], Weight::Delay, 10.0).unwrap();
        assert!((losses[0] as f64 - eval[0].mse_scaled).abs() < 1e-6);
    }
}
