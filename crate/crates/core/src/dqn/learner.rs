//! Sequence sampling, TD targets and backpropagation through node states.
//!
//! A TD term is formed for every agent that acted at a window step `j`.
//! Because an agent in transit cannot act, its next decision point `j'` may
//! lie several steps ahead; the target is then
//! `Σ_{t=j}^{j'-1} γ^{t-j} r_t + γ^{j'-j} max_a Q̂(o_{j'} ‖ ψ_{j'}, a)`,
//! with the bootstrap removed when the packet arrives before `j'`. For a
//! one-step decision this is the usual `r_j + Z γ max Q̂`.

use super::{DqnError, DqnModel, ReplayMemory, TrainConfig};
use crate::env::{node_obs_dim, ObsSnapshot};
use crate::gnn::{readout, readout_backward, GraphBatch, GraphObsNet, NodeStates, StepCache};
use crate::graph::Graph;
use crate::nn::{clip_grad_norm, soft_update, AdamW, Mlp, MlpCache, Module, NnError, Real};
use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

/// Summary of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    /// Number of TD terms in the loss.
    pub terms: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

fn cast<T: Real>(a: &Array2<f32>) -> Array2<T> {
    a.mapv(|x| T::lit(x as f64))
}

fn cast_states<T: Real>(s: &NodeStates<f32>) -> NodeStates<T> {
    NodeStates {
        h: cast(&s.h),
        c: cast(&s.c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Boot {
    /// Bootstrap from the chain step at this offset.
    Step(usize),
    /// Bootstrap from the terminal snapshot of the record at this offset.
    Terminal(usize),
}

#[derive(Debug, Clone)]
struct Term {
    seq: usize,
    offset: usize,
    agent: usize,
    action: usize,
    ret: f64,
    boot: Option<(Boot, f64)>,
}

/// Finds the target of `agent` acting at replay index `r`.
fn plan_term(
    replay: &ReplayMemory,
    seq: usize,
    start: usize,
    r: usize,
    agent: usize,
    gamma: f64,
) -> Option<Term> {
    let mut ret = 0.0;
    let mut disc = 1.0;
    let mut t = r;
    let boot = loop {
        let rec = &replay[t];
        ret += disc * rec.rewards[agent] as f64;
        disc *= gamma;
        if rec.arrived[agent] {
            break None;
        }
        if let Some(term) = &rec.terminal {
            if term.agents[agent].in_transit {
                return None;
            }
            break Some((Boot::Terminal(t - start), disc));
        }
        if t + 1 >= replay.len() {
            return None;
        }
        if !replay[t + 1].obs.agents[agent].in_transit {
            break Some((Boot::Step(t + 1 - start), disc));
        }
        t += 1;
    };
    Some(Term {
        seq,
        offset: r - start,
        agent,
        action: replay[r].actions[agent] as usize,
        ret,
        boot,
    })
}

struct ChainStep<T> {
    /// Sequences present at this offset, ascending.
    members: Vec<usize>,
    batch: GraphBatch,
    levels: Vec<Array2<T>>,
    out: NodeStates<T>,
    inputs: Option<NodeStates<T>>,
    tape: Option<(MlpCache<T>, StepCache<T>)>,
}

impl<T> ChainStep<T> {
    fn base(&self, seq: usize) -> usize {
        let m = self
            .members
            .binary_search(&seq)
            .expect("sequence present at step");
        self.batch.offset(m)
    }
}

fn node_obs_rows(batch: &GraphBatch, frames: &[(&Graph, &ObsSnapshot)]) -> Array2<f32> {
    let g0 = frames[0].0;
    let mut m = Array2::zeros((batch.rows(), node_obs_dim(g0.node_count(), g0.degree())));
    for (i, (g, obs)) in frames.iter().enumerate() {
        obs.write_node_obs(g, m.slice_mut(s![batch.range(i), ..]));
    }
    m
}

/// Runs node-state updates along each sequence of `replay` from its stored
/// state. Sequence `b` covers `horizons[b]` records; the first `taped`
/// offsets record a gradient tape.
fn run_chain<T: Real>(
    gnn: &GraphObsNet<T>,
    replay: &ReplayMemory,
    starts: &[usize],
    horizons: &[usize],
    taped: usize,
    keep_inputs: bool,
) -> Result<Vec<ChainStep<T>>, DqnError> {
    let hidden = gnn.hidden();
    let mut carry: Vec<Option<NodeStates<T>>> = vec![None; starts.len()];
    let longest = horizons.iter().copied().max().unwrap_or(0);
    let mut steps = Vec::with_capacity(longest);
    for q in 0..longest {
        let members: Vec<usize> = (0..starts.len()).filter(|&b| horizons[b] > q).collect();
        let recs: Vec<_> = members.iter().map(|&b| &replay[starts[b] + q]).collect();
        let graphs: Vec<&Graph> = recs.iter().map(|r| r.graph.as_ref()).collect();
        let batch = GraphBatch::new(&graphs);
        let mut states = NodeStates::<T>::zeros(batch.rows(), hidden);
        for (m, (&b, rec)) in members.iter().zip(&recs).enumerate() {
            let at = batch.offset(m);
            if q == 0 {
                let stored = rec.states.as_ref().ok_or_else(|| {
                    DqnError::Config("replay records carry no node states".into())
                })?;
                states.assign_rows(at, &cast_states(stored));
            } else if !rec.episode_start {
                states.assign_rows(at, carry[b].as_ref().expect("previous offset ran"));
            }
        }
        let frames: Vec<_> = recs.iter().map(|r| (r.graph.as_ref(), &r.obs)).collect();
        let obs = cast::<T>(&node_obs_rows(&batch, &frames));
        let (out, tape) = if q < taped {
            let enc = gnn.embed_cached(obs.view())?;
            let (out, cache) = gnn.step_embedded_cached(&batch, &states, enc.output().view())?;
            (out, Some((enc, cache)))
        } else {
            (gnn.step(&batch, &states, obs.view())?, None)
        };
        for (m, &b) in members.iter().enumerate() {
            carry[b] = Some(out.states.slice_rows(batch.range(m)));
        }
        steps.push(ChainStep {
            members,
            batch,
            levels: out.levels,
            out: out.states,
            inputs: keep_inputs.then_some(states),
            tape,
        });
    }
    Ok(steps)
}

/// Node states entering each offset of each sequence, recomputed from the
/// stored state at the sequence start with zero resets at episode starts.
pub fn replay_node_states(
    model: &DqnModel<f32>,
    replay: &ReplayMemory,
    starts: &[usize],
    len: usize,
) -> Result<Vec<Vec<NodeStates<f32>>>, DqnError> {
    let gnn = model
        .gnn
        .as_ref()
        .ok_or_else(|| DqnError::Config("model has no graph observations".into()))?;
    if starts.iter().any(|&s| s + len > replay.len()) {
        return Err(DqnError::Config("sequence runs past the replay end".into()));
    }
    let chain = run_chain(gnn, replay, starts, &vec![len; starts.len()], 0, true)?;
    Ok((0..starts.len())
        .map(|b| {
            chain
                .iter()
                .map(|st| {
                    let m = st.members.binary_search(&b).expect("all sequences present");
                    st.inputs
                        .as_ref()
                        .expect("inputs kept")
                        .slice_rows(st.batch.range(m))
                })
                .collect()
        })
        .collect())
}

/// Mean squared TD error over the sequences starting at `starts`.
///
/// Accumulates gradients into `model` (not into `target`) and returns the
/// loss and the number of terms, or `None` when no agent acted.
pub fn td_loss<T: Real>(
    model: &mut DqnModel<T>,
    target: &Mlp<T>,
    replay: &ReplayMemory,
    starts: &[usize],
    unroll: usize,
    gamma: f64,
) -> Result<Option<(f64, usize)>, DqnError> {
    if starts.iter().any(|&s| s + unroll > replay.len()) {
        return Err(DqnError::Config("sequence runs past the replay end".into()));
    }
    let mut terms = Vec::new();
    for (b, &s) in starts.iter().enumerate() {
        for q in 0..unroll {
            let rec = &replay[s + q];
            for i in (0..rec.acted.len()).filter(|&i| rec.acted[i]) {
                terms.extend(plan_term(replay, b, s, s + q, i, gamma));
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    // grouped by window offset for the backward pass
    terms.sort_by_key(|t| (t.offset, t.seq, t.agent));

    let frame = |b: usize, boot: Boot| -> (&Graph, &ObsSnapshot) {
        match boot {
            Boot::Step(q) => {
                let r = &replay[starts[b] + q];
                (r.graph.as_ref(), &r.obs)
            }
            Boot::Terminal(q) => {
                let r = &replay[starts[b] + q];
                (
                    r.graph.as_ref(),
                    r.terminal.as_ref().expect("terminal record"),
                )
            }
        }
    };

    let chain = match &model.gnn {
        Some(gnn) => {
            let mut horizons = vec![unroll; starts.len()];
            for t in &terms {
                if let Some((boot, _)) = t.boot {
                    let need = match boot {
                        Boot::Step(q) | Boot::Terminal(q) => q + 1,
                    };
                    horizons[t.seq] = horizons[t.seq].max(need);
                }
            }
            Some(run_chain(gnn, replay, starts, &horizons, unroll, false)?)
        }
        None => None,
    };

    // terminal frames continue from the chain carry with the terminal snapshot
    let mut side_keys: Vec<(usize, usize)> = terms
        .iter()
        .filter_map(|t| match t.boot {
            Some((Boot::Terminal(q), _)) => Some((t.seq, q)),
            _ => None,
        })
        .collect();
    side_keys.sort_unstable();
    side_keys.dedup();
    let side = match (&model.gnn, &chain) {
        (Some(gnn), Some(chain)) if !side_keys.is_empty() => {
            let frames: Vec<_> = side_keys
                .iter()
                .map(|&(b, q)| frame(b, Boot::Terminal(q)))
                .collect();
            let graphs: Vec<&Graph> = frames.iter().map(|f| f.0).collect();
            let batch = GraphBatch::new(&graphs);
            let mut states = NodeStates::<T>::zeros(batch.rows(), gnn.hidden());
            for (m, &(b, q)) in side_keys.iter().enumerate() {
                let st = &chain[q];
                let base = st.base(b);
                let n = batch.range(m).len();
                states.assign_rows(batch.offset(m), &st.out.slice_rows(base..base + n));
            }
            let obs = cast::<T>(&node_obs_rows(&batch, &frames));
            let out = gnn.step(&batch, &states, obs.view())?;
            Some((batch, out.levels))
        }
        _ => None,
    };

    let psi_row = |b: usize, boot: Boot, agent: usize| -> Option<Array2<T>> {
        let chain = chain.as_ref()?;
        let node = frame(b, boot).1.agents[agent].node as usize;
        Some(match boot {
            Boot::Step(q) => {
                let st = &chain[q];
                readout(&st.batch, &st.levels, &[st.base(b) + node])
            }
            Boot::Terminal(q) => {
                let (batch, levels) = side.as_ref().expect("side frames ran");
                let m = side_keys
                    .binary_search(&(b, q))
                    .expect("side frame present");
                readout(batch, levels, &[batch.offset(m) + node])
            }
        })
    };

    let d_o = model.obs_dim();
    let build = |rows: &[(usize, Boot, usize)]| -> Array2<T> {
        let mut xo = Array2::<f32>::zeros((rows.len(), d_o));
        for (k, &(b, boot, agent)) in rows.iter().enumerate() {
            let (g, obs) = frame(b, boot);
            obs.write_agent_row(g, agent, xo.row_mut(k));
        }
        let xo = cast::<T>(&xo);
        if chain.is_none() {
            return xo;
        }
        let psis: Vec<Array2<T>> = rows
            .iter()
            .map(|&(b, boot, agent)| psi_row(b, boot, agent).expect("graph observations"))
            .collect();
        let views: Vec<_> = psis.iter().map(|p| p.view()).collect();
        let psi = concatenate(Axis(0), &views).expect("equal widths");
        concatenate(Axis(1), &[xo.view(), psi.view()]).expect("equal rows")
    };

    // bootstrap values
    let boot_rows: Vec<(usize, Boot, usize)> = terms
        .iter()
        .filter_map(|t| t.boot.map(|(boot, _)| (t.seq, boot, t.agent)))
        .collect();
    let mut targets: Vec<f64> = terms.iter().map(|t| t.ret).collect();
    if !boot_rows.is_empty() {
        let qn = target.forward(build(&boot_rows).view())?;
        let mut k = 0;
        for (y, t) in targets.iter_mut().zip(&terms) {
            if let Some((_, disc)) = t.boot {
                let best = qn
                    .row(k)
                    .iter()
                    .map(|v| v.to_f64_lossy())
                    .fold(f64::NEG_INFINITY, f64::max);
                *y += disc * best;
                k += 1;
            }
        }
    }

    // online pass; ψ of window steps comes from the taped chain
    let online_rows: Vec<(usize, Boot, usize)> = terms
        .iter()
        .map(|t| (t.seq, Boot::Step(t.offset), t.agent))
        .collect();
    let x = build(&online_rows);
    let cache = model.q.forward_cached(x.view())?;
    let q = cache.output();
    let n = terms.len();
    let mut dq = Array2::<T>::zeros(q.raw_dim());
    let mut loss = 0.0;
    for (k, t) in terms.iter().enumerate() {
        let d = q[[k, t.action]].to_f64_lossy() - targets[k];
        loss += d * d;
        dq[[k, t.action]] = T::lit(2.0 * d / n as f64);
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(DqnError::NonFiniteLoss { iteration: 0, loss });
    }
    let dx = model.q.backward(&cache, dq.view(), chain.is_some());

    if let (Some(gnn), Some(chain), Some(dx)) = (model.gnn.as_mut(), chain.as_ref(), dx) {
        let dpsi = dx.slice(s![.., d_o..]);
        let mut carry: Option<NodeStates<T>> = None;
        let mut hi = n;
        for q in (0..unroll).rev() {
            let lo = terms.partition_point(|t| t.offset < q);
            let st = &chain[q];
            let rows: Vec<usize> = terms[lo..hi]
                .iter()
                .map(|t| {
                    st.base(t.seq) + replay[starts[t.seq] + q].obs.agents[t.agent].node as usize
                })
                .collect();
            let width = gnn.hidden();
            let mut level_grads: Vec<Array2<T>> = (0..=gnn.k)
                .map(|_| Array2::zeros((st.batch.rows(), width)))
                .collect();
            readout_backward(
                &st.batch,
                dpsi.slice(s![lo..hi, ..]),
                &rows,
                &mut level_grads,
            );
            let (enc_cache, step_cache) = st.tape.as_ref().expect("window steps are taped");
            let (d_emb, mut d_prev) =
                gnn.step_backward(&st.batch, step_cache, level_grads, carry.as_ref());
            gnn.encoder.backward(enc_cache, d_emb.view(), false);
            for (m, &b) in st.members.iter().enumerate() {
                if replay[starts[b] + q].episode_start {
                    d_prev.reset_rows(st.batch.range(m));
                }
            }
            carry = (q > 0).then_some(d_prev);
            hi = lo;
        }
    }
    Ok(Some((loss, n)))
}

/// One training iteration: sample, backpropagate, clip, step, soft update.
///
/// Returns `None` without touching anything while the replay holds fewer
/// than `unroll` records or no sampled agent acted.
pub fn train_batch<R: Rng + ?Sized>(
    model: &mut DqnModel<f32>,
    target: &mut Mlp<f32>,
    opt: &mut AdamW<f32>,
    replay: &ReplayMemory,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<BatchStats>, DqnError> {
    let Some(starts) = replay.sample_starts(cfg.batch, cfg.unroll, rng) else {
        return Ok(None);
    };
    model.zero_grad();
    let Some((loss, terms)) = td_loss(model, target, replay, &starts, cfg.unroll, cfg.gamma)?
    else {
        return Ok(None);
    };
    let grad_norm = clip_grad_norm(model, cfg.grad_clip);
    opt.step(model).map_err(|e| match e {
        NnError::NonFiniteGradient(_) => DqnError::NonFiniteLoss {
            iteration: opt.steps_taken() as usize,
            loss,
        },
        e => e.into(),
    })?;
    soft_update(target, &model.q, cfg.tau);
    Ok(Some(BatchStats {
        loss,
        terms,
        grad_norm,
    }))
}
