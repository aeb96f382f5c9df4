//! Recurrent message passing over node states.
//!
//! Per environment step every node
//!
//! 1. embeds its observation, `e = enc(m)`, and folds it into its state,
//!    `(h₀, c₀) = LSTM_A(e, h, c)`;
//! 2. runs `K` rounds of `M = Σ_{w∈N(v)} h_k^w` followed by
//!    `(h_{k+1}, c_{k+1}) = LSTM_B(M, h_k, c_k)`.
//!
//! `(h_K, c_K)` is carried to the next step. An agent on node `v` reads
//! `ψ = h_K^v ‖ h_{K-1}^{w₁} ‖ … ‖ h_{K-1}^{w_D}` with neighbours in ascending
//! id order.
//!
//! Several graphs (or several copies of one graph) are processed together
//! as one block of rows; [`GraphBatch`] holds the neighbour lists with
//! global row indices.

use crate::graph::Graph;
use crate::nn::{LstmCache, LstmCell, Mlp, MlpCache, Module, NnError, Param, Real};
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphObsConfig {
    /// Node state size `d_h`.
    pub hidden: usize,
    /// Hidden widths of the observation encoder before its `d_h` output.
    pub encoder: Vec<usize>,
    /// Message-passing rounds per environment step.
    pub k: usize,
}

impl Default for GraphObsConfig {
    fn default() -> Self {
        GraphObsConfig {
            hidden: 128,
            encoder: vec![512, 256],
            k: 1,
        }
    }
}

impl GraphObsConfig {
    /// Length of one agent's graph observation, `d_h·(1+D)`.
    pub fn psi_dim(&self, degree: usize) -> usize {
        self.hidden * (1 + degree)
    }
}

/// Topology of a block of graphs stacked row-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphBatch {
    degree: usize,
    offsets: Vec<usize>,
    /// `neighbors[r·D + k]`: global row of the k-th neighbour of row `r`.
    neighbors: Vec<usize>,
}

impl GraphBatch {
    /// All graphs must share the same degree.
    pub fn new(graphs: &[&Graph]) -> Self {
        let degree = graphs.first().map_or(0, |g| g.degree());
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        let mut neighbors = Vec::new();
        let mut base = 0;
        for g in graphs {
            assert_eq!(
                g.degree(),
                degree,
                "graphs in a batch must share the degree"
            );
            offsets.push(base);
            for v in 0..g.node_count() {
                neighbors.extend(g.neighbors(v).iter().map(|&(w, _)| base + w));
            }
            base += g.node_count();
        }
        offsets.push(base);
        GraphBatch {
            degree,
            offsets,
            neighbors,
        }
    }

    pub fn single(g: &Graph) -> Self {
        GraphBatch::new(&[g])
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn graph_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// First row of graph `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Row range of graph `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.neighbors[row * self.degree..(row + 1) * self.degree]
    }

    /// `M_v = Σ_{w∈N(v)} h_w`. The operator is symmetric, so it is also its
    /// own adjoint in the backward pass.
    pub fn aggregate<T: Real>(&self, h: ArrayView2<T>) -> Array2<T> {
        let (rows, d) = h.dim();
        let mut m = Array2::zeros((rows, d));
        let h = h.as_standard_layout();
        let src = h.as_slice().expect("standard layout");
        let dst = m.as_slice_mut().expect("fresh array");
        for r in 0..rows {
            let out = &mut dst[r * d..(r + 1) * d];
            for &w in self.neighbors(r) {
                for (o, &x) in out.iter_mut().zip(&src[w * d..(w + 1) * d]) {
                    *o += x;
                }
            }
        }
        m
    }
}

/// Per-node hidden and cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates<T> {
    pub h: Array2<T>,
    pub c: Array2<T>,
}

impl<T: Real> NodeStates<T> {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        NodeStates {
            h: Array2::zeros((rows, hidden)),
            c: Array2::zeros((rows, hidden)),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Zeroes rows `range` (an episode reset of one graph in a batch).
    pub fn reset_rows(&mut self, range: std::ops::Range<usize>) {
        self.h.slice_mut(s![range.clone(), ..]).fill(T::zero());
        self.c.slice_mut(s![range, ..]).fill(T::zero());
    }

    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> NodeStates<T> {
        NodeStates {
            h: self.h.slice(s![range.clone(), ..]).to_owned(),
            c: self.c.slice(s![range, ..]).to_owned(),
        }
    }

    pub fn assign_rows(&mut self, start: usize, from: &NodeStates<T>) {
        let r = start..start + from.rows();
        self.h.slice_mut(s![r.clone(), ..]).assign(&from.h);
        self.c.slice_mut(s![r, ..]).assign(&from.c);
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(self.c.iter()).all(|x| x.is_finite())
    }
}

/// Exported copy of node states for logging and analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStateSnapshot {
    pub nodes: usize,
    pub hidden: usize,
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl NodeStateSnapshot {
    pub fn of<T: Real>(s: &NodeStates<T>) -> Self {
        let cast = |a: &Array2<T>| a.iter().map(|x| x.to_f64_lossy() as f32).collect();
        NodeStateSnapshot {
            nodes: s.h.nrows(),
            hidden: s.h.ncols(),
            h: cast(&s.h),
            c: cast(&s.c),
        }
    }

    /// Mean absolute difference over all `h` and `c` entries.
    pub fn mean_abs_diff(&self, other: &NodeStateSnapshot) -> f64 {
        let n = self.h.len() + self.c.len();
        let sum: f64 = self
            .h
            .iter()
            .zip(&other.h)
            .chain(self.c.iter().zip(&other.c))
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        sum / n.max(1) as f64
    }
}

/// Result of one environment step of message passing.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// `(h_K, c_K)`, the carry to the next step.
    pub states: NodeStates<T>,
    /// `h_0 … h_K` of every row.
    pub levels: Vec<Array2<T>>,
}

/// Everything the backward pass of one step needs.
#[derive(Debug, Clone)]
pub struct StepCache<T> {
    pub encode: LstmCache<T>,
    pub updates: Vec<LstmCache<T>>,
}

/// Per-node intermediate states `H^v` in full.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates<T> {
    /// `h^v_0 … h^v_K`.
    pub own: Vec<Vec<T>>,
    /// For each neighbour (ascending id) `h^w_0 … h^w_{K-1}`.
    pub neighbors: Vec<Vec<Vec<T>>>,
}

/// Parameters of the node-state update: observation encoder, LSTM-A
/// (encode) and LSTM-B (update), sharing one `(h, c)` pair per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphObsNet<T> {
    pub encoder: Mlp<T>,
    pub lstm_a: LstmCell<T>,
    pub lstm_b: LstmCell<T>,
    pub k: usize,
}

impl<T: Real> GraphObsNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &GraphObsConfig, node_obs_dim: usize, rng: &mut R) -> Self {
        assert!(cfg.k >= 1, "at least one message-passing round");
        let mut sizes = vec![node_obs_dim];
        sizes.extend(&cfg.encoder);
        sizes.push(cfg.hidden);
        GraphObsNet {
            encoder: Mlp::new("gnn.encoder", &sizes, true, rng),
            lstm_a: LstmCell::new("gnn.lstm_a", cfg.hidden, cfg.hidden, rng),
            lstm_b: LstmCell::new("gnn.lstm_b", cfg.hidden, cfg.hidden, rng),
            k: cfg.k,
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm_a.hidden_dim()
    }

    pub fn node_obs_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn psi_dim(&self, degree: usize) -> usize {
        self.hidden() * (1 + degree)
    }

    pub fn embed(&self, node_obs: ArrayView2<T>) -> Result<Array2<T>, NnError> {
        self.encoder.forward(node_obs)
    }

    pub fn embed_cached(&self, node_obs: ArrayView2<T>) -> Result<MlpCache<T>, NnError> {
        self.encoder.forward_cached(node_obs)
    }

    /// One environment step from precomputed embeddings, no gradient tape.
    pub fn step_embedded(
        &self,
        batch: &GraphBatch,
        states: &NodeStates<T>,
        embedding: ArrayView2<T>,
    ) -> Result<StepOutput<T>, NnError> {
        let (mut h, mut c) = self
            .lstm_a
            .forward(embedding, states.h.view(), states.c.view())?;
        let mut levels = Vec::with_capacity(self.k + 1);
        for _ in 0..self.k {
            let m = batch.aggregate(h.view());
            let (hn, cn) = self.lstm_b.forward(m.view(), h.view(), c.view())?;
            levels.push(h);
            h = hn;
            c = cn;
        }
        levels.push(h.clone());
        Ok(StepOutput {
            states: NodeStates { h, c },
            levels,
        })
    }

    /// Algorithm step: encode, then `K` aggregate/update rounds.
    pub fn step(
        &self,
        batch: &GraphBatch,
        states: &NodeStates<T>,
        node_obs: ArrayView2<T>,
    ) -> Result<StepOutput<T>, NnError> {
        let e = self.embed(node_obs)?;
        self.step_embedded(batch, states, e.view())
    }

    /// Like [`step_embedded`](Self::step_embedded) but records a tape.
    pub fn step_embedded_cached(
        &self,
        batch: &GraphBatch,
        states: &NodeStates<T>,
        embedding: ArrayView2<T>,
    ) -> Result<(StepOutput<T>, StepCache<T>), NnError> {
        let (mut h, mut c, encode) =
            self.lstm_a
                .forward_cached(embedding, states.h.view(), states.c.view())?;
        let mut levels = Vec::with_capacity(self.k + 1);
        let mut updates = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            let m = batch.aggregate(h.view());
            let (hn, cn, cache) = self.lstm_b.forward_cached(m.view(), h.view(), c.view())?;
            updates.push(cache);
            levels.push(h);
            h = hn;
            c = cn;
        }
        levels.push(h.clone());
        Ok((
            StepOutput {
                states: NodeStates { h, c },
                levels,
            },
            StepCache { encode, updates },
        ))
    }

    /// Backward through one step.
    ///
    /// `level_grads[k]` is the loss gradient w.r.t. `h_k` from outside the
    /// recurrence (readouts); `carry` is the gradient w.r.t. the outgoing
    /// `(h_K, c_K)`. Accumulates parameter gradients of both LSTMs and
    /// returns the gradient w.r.t. the embedding and the incoming states.
    pub fn step_backward(
        &mut self,
        batch: &GraphBatch,
        cache: &StepCache<T>,
        mut level_grads: Vec<Array2<T>>,
        carry: Option<&NodeStates<T>>,
    ) -> (Array2<T>, NodeStates<T>) {
        let k = self.k;
        assert_eq!(level_grads.len(), k + 1, "one gradient per level");
        let mut dh = level_grads.pop().expect("level K");
        let mut dc = match carry {
            Some(g) => {
                dh += &g.h;
                g.c.clone()
            }
            None => Array2::zeros(dh.raw_dim()),
        };
        for i in (0..k).rev() {
            let g = self
                .lstm_b
                .backward(&cache.updates[i], dh.view(), dc.view(), true);
            let dm = g.dx.expect("requested");
            dh = g.dh;
            dh += &batch.aggregate(dm.view());
            dh += &level_grads[i];
            dc = g.dc;
        }
        let g = self
            .lstm_a
            .backward(&cache.encode, dh.view(), dc.view(), true);
        (g.dx.expect("requested"), NodeStates { h: g.dh, c: g.dc })
    }

    /// Full `H^v` of row `v` (debug view).
    pub fn intermediates(
        &self,
        batch: &GraphBatch,
        out: &StepOutput<T>,
        v: usize,
    ) -> Intermediates<T> {
        let own = out.levels.iter().map(|l| l.row(v).to_vec()).collect();
        let neighbors = batch
            .neighbors(v)
            .iter()
            .map(|&w| {
                out.levels[..self.k]
                    .iter()
                    .map(|l| l.row(w).to_vec())
                    .collect()
            })
            .collect();
        Intermediates { own, neighbors }
    }
}

impl<T: Real> Module<T> for GraphObsNet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.encoder.visit(f);
        self.lstm_a.visit(f);
        self.lstm_b.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.lstm_a.visit_mut(f);
        self.lstm_b.visit_mut(f);
    }
}

/// `ψ` for agents sitting on `rows`: `h_K[row] ‖ h_{K-1}[neighbours]`.
pub fn readout<T: Real>(batch: &GraphBatch, levels: &[Array2<T>], rows: &[usize]) -> Array2<T> {
    let k = levels.len() - 1;
    let d = levels[k].ncols();
    let deg = batch.degree();
    let mut psi = Array2::zeros((rows.len(), d * (1 + deg)));
    for (i, &r) in rows.iter().enumerate() {
        let mut out = psi.row_mut(i);
        out.slice_mut(s![0..d]).assign(&levels[k].row(r));
        for (j, &w) in batch.neighbors(r).iter().enumerate() {
            out.slice_mut(s![(j + 1) * d..(j + 2) * d])
                .assign(&levels[k - 1].row(w));
        }
    }
    psi
}

/// Scatters `dψ` back onto the levels read by [`readout`], adding into
/// `level_grads` (one zeroed or partially filled array per level).
pub fn readout_backward<T: Real>(
    batch: &GraphBatch,
    dpsi: ArrayView2<T>,
    rows: &[usize],
    level_grads: &mut [Array2<T>],
) {
    let k = level_grads.len() - 1;
    let d = level_grads[k].ncols();
    for (i, &r) in rows.iter().enumerate() {
        let g = dpsi.row(i);
        {
            let mut dst = level_grads[k].row_mut(r);
            dst += &g.slice(s![0..d]);
        }
        for (j, &w) in batch.neighbors(r).iter().enumerate() {
            let mut dst = level_grads[k - 1].row_mut(w);
            dst += &g.slice(s![(j + 1) * d..(j + 2) * d]);
        }
    }
}
