#![allow(dead_code)]

pub mod grad;

use marlnet::env::{Location, Mode, RoutingEnv};
use marlnet::graph::{Graph, Weight};
use rand::Rng;

/// Distances and betweenness by enumerating every simple path.
pub struct Exhaustive {
    pub dist: Vec<Vec<u64>>,
    pub betweenness: Vec<f64>,
}

pub fn exhaustive(g: &Graph, weight: Weight) -> Exhaustive {
    let n = g.node_count();
    let w = |d: u32| match weight {
        Weight::Hops => 1u64,
        Weight::Delay => d as u64,
    };
    let mut dist = vec![vec![u64::MAX; n]; n];
    // per (s, t): number of shortest paths and how many pass through each node
    let mut sigma = vec![vec![0u64; n]; n];
    let mut through = vec![vec![vec![0u64; n]; n]; n];

    fn dfs(
        g: &Graph,
        w: &dyn Fn(u32) -> u64,
        path: &mut Vec<usize>,
        on_path: &mut [bool],
        len: u64,
        found: &mut dyn FnMut(&[usize], u64),
    ) {
        let v = *path.last().unwrap();
        found(path, len);
        for &(u, e) in g.neighbors(v) {
            if on_path[u] {
                continue;
            }
            on_path[u] = true;
            path.push(u);
            dfs(g, w, path, on_path, len + w(g.edge(e).delay), found);
            path.pop();
            on_path[u] = false;
        }
    }

    for s in 0..n {
        let mut on_path = vec![false; n];
        on_path[s] = true;
        let mut path = vec![s];
        let mut found = |p: &[usize], len: u64| {
            let t = *p.last().unwrap();
            if len < dist[s][t] {
                dist[s][t] = len;
                sigma[s][t] = 0;
                through[s][t].iter_mut().for_each(|c| *c = 0);
            }
            if len == dist[s][t] {
                sigma[s][t] += 1;
                if p.len() > 2 {
                    for &v in &p[1..p.len() - 1] {
                        through[s][t][v] += 1;
                    }
                }
            }
        };
        dfs(g, &w, &mut path, &mut on_path, 0, &mut found);
    }

    let mut betweenness = vec![0.0; n];
    if n > 2 {
        for s in 0..n {
            for t in 0..n {
                if s == t {
                    continue;
                }
                for v in 0..n {
                    if v != s && v != t {
                        betweenness[v] += through[s][t][v] as f64 / sigma[s][t] as f64;
                    }
                }
            }
        }
        let norm = ((n - 1) * (n - 2)) as f64;
        betweenness.iter_mut().for_each(|b| *b /= norm);
    }
    Exhaustive { dist, betweenness }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct EpisodeCheck {
    pub steps: usize,
    pub arrivals: usize,
    pub blocks: usize,
    pub transits: usize,
}

/// Plays one episode with uniform random actions and asserts the
/// environment invariants after every step.
pub fn random_episode<R: Rng>(env: &mut RoutingEnv, rng: &mut R) -> Result<EpisodeCheck, String> {
    let n = env.config().packets;
    let actions_n = env.action_count();
    let limited = env.config().mode == Mode::Limited;
    let mut pending: Vec<Option<(usize, u32)>> = vec![None; n];
    let mut check = EpisodeCheck::default();
    let mut total_reward = 0.0f64;
    let penalty = env.config().block_penalty as f64;
    let bonus = env.config().arrival_reward as f64;
    loop {
        let before: Vec<_> = env.packets().to_vec();
        let delays = env.delays().to_vec();
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..actions_n)).collect();
        let out = env.step(&actions).map_err(|e| e.to_string())?;
        check.steps += 1;
        if env.packets().len() != n {
            return Err(format!("packet count {} != {n}", env.packets().len()));
        }
        if limited {
            if let Some(l) = env.edge_load().iter().find(|&&l| !(l < 1.0)) {
                return Err(format!("edge load {l} at step {}", check.steps));
            }
        }
        for slot in 0..n {
            let p = &before[slot];
            if let Location::AtNode(v) = p.location {
                if !out.acted[slot] {
                    return Err(format!("agent {slot} at a node did not act"));
                }
                if actions[slot] > 0 && !out.blocked[slot] {
                    let (u, e) = env.graph().neighbors(v)[actions[slot] - 1];
                    pending[slot] = Some((u, delays[e.0]));
                    check.transits += 1;
                }
            } else if out.acted[slot] {
                return Err(format!("agent {slot} in transit acted"));
            }
            if let Some((u, left)) = pending[slot].as_mut() {
                *left -= 1;
                let now = &env.packets()[slot];
                if *left == 0 {
                    let landed = if out.arrived[slot] {
                        *u == p.dst
                    } else {
                        now.location == Location::AtNode(*u)
                    };
                    if !landed {
                        return Err(format!("agent {slot} did not land on {u} on time"));
                    }
                    pending[slot] = None;
                } else if out.arrived[slot] || !now.in_transit() {
                    return Err(format!("agent {slot} landed {left} steps early"));
                }
            } else if out.arrived[slot] {
                return Err(format!("agent {slot} arrived without a transit"));
            }
            let expected = if out.arrived[slot] { bonus } else { 0.0 }
                + if out.blocked[slot] { penalty } else { 0.0 };
            if out.rewards[slot] as f64 != expected as f32 as f64 {
                return Err(format!(
                    "agent {slot} reward {} != {expected}",
                    out.rewards[slot]
                ));
            }
            total_reward += out.rewards[slot] as f64;
        }
        check.arrivals += out.arrived.iter().filter(|&&a| a).count();
        check.blocks += out.blocked.iter().filter(|&&b| b).count();
        if out.truncated {
            break;
        }
    }
    let c = env.counters();
    if c.arrivals != check.arrivals || c.blocks != check.blocks {
        return Err(format!(
            "counters {c:?} disagree with per-step flags {check:?}"
        ));
    }
    // rewards are sums of f32 constants, so the f64 total is exact
    let expected =
        check.arrivals as f64 * bonus as f32 as f64 + check.blocks as f64 * penalty as f32 as f64;
    if total_reward != expected {
        return Err(format!("total reward {total_reward} != {expected}"));
    }
    Ok(check)
}
