//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs everything by default (C6 and C8 take the better part of two hours
//! on one core). Pass criterion ids such as `C3 C11` to run a subset.

mod common;

use common::{exhaustive, grad, random_episode};
use marlnet::dqn::{
    adaptation_experiment, bottleneck_edge, evaluate, replay_node_states, AdaptConfig,
    DqnController, DqnModel, EpisodeLog, EvalConfig, ModelConfig, Setting, SpController,
    TrainConfig, Trainer,
};
use marlnet::env::{
    node_obs_dim, EnvConfig, GraphSource, Mode, RoutingEnv, ShortestPathPolicy, SpVariant,
};
use marlnet::gnn::{GraphBatch, GraphObsConfig, GraphObsNet, NodeStates};
use marlnet::graph::{
    all_pairs_shortest_paths, betweenness_centrality, generate_graph, generate_suite, graph_stats,
    Graph, Weight, DEFAULT_DELAY_SCALE,
};
use marlnet::sl::{
    build_dataset, evaluate_at_steps, samples_for_graphs, train_regression, DatasetConfig,
    SlConfig, SpRegressor,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::OnceCell;
use std::sync::Arc;
use std::time::Instant;

const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_COMPOSITE: f64 = 1e-3;
const BETWEENNESS_TOL: f64 = 1e-12;
const HOP_DIAMETER_REF: f64 = 7.21;
const APSP_HOPS_REF: f64 = 3.26;
const SUITE_REL_TOL: f64 = 0.15;
const SHORT_PATH_HOPS: usize = 8;
const SHORT_PATH_FRACTION: f64 = 0.98;
const SL_REFINEMENT: f64 = 3.0;
const SINGLE_GRAPH_GAP: f64 = 0.02;
const REWARD_WINDOWS: usize = 4;
const GENERALIZED_SP_FRACTION: f64 = 0.5;
const ADAPT_PEAK_FACTOR: f64 = 2.0;

const SUITE_SEED: u64 = 1_000_003;

type Outcome = Result<String, String>;

struct Criterion {
    id: &'static str,
    name: &'static str,
    run: fn(&Shared) -> Outcome,
}

/// Artifacts reused by several criteria, built on first use.
#[derive(Default)]
struct Shared {
    suite: OnceCell<Vec<Arc<Graph>>>,
    generalized: OnceCell<Result<(DqnModel<f32>, Vec<EpisodeLog>), String>>,
}

impl Shared {
    fn suite(&self) -> &[Arc<Graph>] {
        self.suite.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED);
            generate_suite(1000, 20, 3, DEFAULT_DELAY_SCALE, &mut rng)
                .expect("suite generation")
                .into_iter()
                .map(Arc::new)
                .collect()
        })
    }

    fn generalized(&self) -> Result<&(DqnModel<f32>, Vec<EpisodeLog>), String> {
        self.generalized
            .get_or_init(|| {
                let mut t = Trainer::new(TrainConfig::generalized_desk(), None)
                    .map_err(|e| e.to_string())?;
                let logs = t.run(|_| {}).map_err(|e| e.to_string())?;
                Ok((t.into_model(), logs))
            })
            .as_ref()
            .map_err(|e| format!("training failed: {e}"))
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_numerics(_: &Shared) -> Outcome {
    let parts = [
        ("linear", grad::linear(0), GRAD_TOL),
        ("leaky relu", grad::leaky_mlp(1), GRAD_TOL),
        ("lstm cell", grad::lstm_unroll(1, 5), GRAD_TOL),
        ("3-step bptt", grad::lstm_unroll(3, 3), GRAD_TOL),
        (
            "graph-obs+q loss",
            grad::graph_obs_q_loss(0),
            GRAD_TOL_COMPOSITE,
        ),
    ];
    let detail = parts
        .iter()
        .map(|(n, e, _)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(parts.iter().all(|(_, e, tol)| e < tol), detail)
}

fn c2_locality(_: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = node_obs_dim(20, 3);
    let cfg = GraphObsConfig {
        hidden: 8,
        encoder: vec![16],
        k: 1,
    };
    let mut probes = 0;
    for _ in 0..10 {
        let g = generate_graph(20, 3, DEFAULT_DELAY_SCALE, &mut rng).unwrap();
        let hops = all_pairs_shortest_paths(&g, Weight::Hops);
        let net = GraphObsNet::<f32>::new(&cfg, dim, &mut rng);
        let batch = GraphBatch::single(&g);
        let obs = Array2::from_shape_fn((20, dim), |_| rng.random::<f32>());
        for _ in 0..5 {
            let v = rng.random_range(0..20);
            let mut poked = obs.clone();
            let col = rng.random_range(0..dim);
            poked[[v, col]] += 1.0;
            let (mut a, mut b) = (NodeStates::zeros(20, 8), NodeStates::zeros(20, 8));
            for s in 1..=hops.max() {
                a = net.step(&batch, &a, obs.view()).unwrap().states;
                b = net
                    .step(&batch, &b, if s == 1 { poked.view() } else { obs.view() })
                    .unwrap()
                    .states;
                for u in 0..20 {
                    let same = a.h.row(u) == b.h.row(u) && a.c.row(u) == b.c.row(u);
                    if hops.get(v, u) > s && !same {
                        return Err(format!(
                            "node {u} at {} hops from {v} changed after {s} steps",
                            hops.get(v, u)
                        ));
                    }
                    probes += 1;
                }
            }
        }
    }
    Ok(format!("{probes} node/step comparisons, all exact"))
}

fn c3_env_invariants(_: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut totals = (0, 0, 0);
    for mode in [Mode::Unlimited, Mode::Limited] {
        for e in 0..100 {
            let cfg = EnvConfig {
                mode,
                ..EnvConfig::default()
            };
            let source = GraphSource::Generated {
                nodes: 20,
                degree: 3,
                delay_scale: DEFAULT_DELAY_SCALE,
            };
            let mut env = RoutingEnv::new(cfg, source, e).unwrap();
            let c = random_episode(&mut env, &mut rng)
                .map_err(|m| format!("{mode} episode {e}: {m}"))?;
            totals.0 += c.arrivals;
            totals.1 += c.blocks;
            totals.2 += c.transits;
        }
    }
    Ok(format!(
        "200 episodes, {} arrivals, {} blocks, {} timed transits",
        totals.0, totals.1, totals.2
    ))
}

fn c4_oracles(_: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut graphs = 0;
    for l in 2..=8usize {
        for d in 1..l {
            if (l * d) % 2 != 0 {
                continue;
            }
            for _ in 0..20 {
                let scale = rng.random_range(1.0..12.0);
                let Ok(g) = generate_graph(l, d, scale, &mut rng) else {
                    continue;
                };
                graphs += 1;
                for w in [Weight::Hops, Weight::Delay] {
                    let oracle = exhaustive(&g, w);
                    let fast = all_pairs_shortest_paths(&g, w);
                    if (0..l).any(|u| fast.row(u) != &oracle.dist[u][..]) {
                        return Err(format!("APSP mismatch on L={l} D={d} ({w:?})"));
                    }
                    let bc = betweenness_centrality(&g, w);
                    let worst = bc
                        .iter()
                        .zip(&oracle.betweenness)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    if worst > BETWEENNESS_TOL {
                        return Err(format!(
                            "betweenness off by {worst:e} on L={l} D={d} ({w:?})"
                        ));
                    }
                }
            }
        }
    }
    let mut arrivals = 0;
    for r in 0..20 {
        let g = Arc::new(generate_graph(20, 3, DEFAULT_DELAY_SCALE, &mut rng).unwrap());
        let dist = all_pairs_shortest_paths(&g, Weight::Delay);
        let mut env = RoutingEnv::new(EnvConfig::default(), GraphSource::Fixed(g), r).unwrap();
        let mut sp = ShortestPathPolicy::new(SpVariant::Static);
        loop {
            let before = env.packets().to_vec();
            let out = env.step(&sp.actions(&env)).unwrap();
            let expected: Vec<usize> = (0..before.len())
                .filter(|&i| out.arrived[i])
                .map(|i| dist.get(before[i].src, before[i].dst) as usize)
                .collect();
            if out.arrival_delays != expected {
                return Err(format!(
                    "graph {r}: realized {:?} vs APSP {expected:?}",
                    out.arrival_delays
                ));
            }
            arrivals += expected.len();
            if out.truncated {
                break;
            }
        }
    }
    Ok(format!(
        "{graphs} small graphs exact; {arrivals} SP arrivals on 20 graphs at APSP delay"
    ))
}

fn c5_suite_stats(shared: &Shared) -> Outcome {
    let graphs: Vec<Graph> = shared.suite().iter().map(|g| (**g).clone()).collect();
    let exact = graphs
        .iter()
        .all(|g| g.edge_count() == 30 && (0..20).all(|v| g.neighbors(v).len() == 3));
    let s = graph_stats(&graphs, Weight::Delay).unwrap();
    let within = |x: f64, r: f64| ((x - r) / r).abs() <= SUITE_REL_TOL;
    let short = s.apsp_hops_cdf.get(SHORT_PATH_HOPS).copied().unwrap_or(1.0);
    let detail = format!(
        "edges/degree exact: {exact}; hop diameter {:.2} (ref {HOP_DIAMETER_REF}); APSP hops {:.3} (ref {APSP_HOPS_REF}); \
         <= {SHORT_PATH_HOPS} hops {:.2}%; APSP delay {:.2}; max betweenness {:.3}..{:.3}, mean node {:.3}",
        s.diameter_hops.mean,
        s.apsp_hops.mean,
        100.0 * short,
        s.apsp_delay.mean,
        s.graph_max_betweenness.min,
        s.graph_max_betweenness.max,
        s.node_betweenness.mean,
    );
    check(
        exact
            && within(s.diameter_hops.mean, HOP_DIAMETER_REF)
            && within(s.apsp_hops.mean, APSP_HOPS_REF)
            && short >= SHORT_PATH_FRACTION,
        detail,
    )
}

fn c6_refinement(shared: &Shared) -> Outcome {
    let data = build_dataset(&DatasetConfig::default()).map_err(|e| e.to_string())?;
    let cfg = SlConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SpRegressor::<f32>::new(&cfg.graph_obs, 20, 3, &mut rng);
    train_regression(&mut model, &data.train, &data.validation, &cfg, |_| {})
        .map_err(|e| e.to_string())?;
    let graphs: Vec<Graph> = shared.suite().iter().map(|g| (**g).clone()).collect();
    let test = samples_for_graphs(&graphs, &EnvConfig::default(), SUITE_SEED)
        .map_err(|e| e.to_string())?;
    let steps: Vec<usize> = (1..=8).collect();
    let mse: Vec<f64> = evaluate_at_steps(&model, &test, &steps, cfg.target, cfg.target_scale)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| r.mse)
        .collect();
    let decreasing = mse.windows(2).all(|w| w[1] < w[0]);
    let ratio = mse[0] / mse[7];
    let detail = format!(
        "MSE t=1..8: {}; t1/t8 = {ratio:.2} (need >= {SL_REFINEMENT}); strictly decreasing: {decreasing}",
        mse.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" ")
    );
    check(decreasing && ratio >= SL_REFINEMENT, detail)
}

fn c7_single_graph(_: &Shared) -> Outcome {
    let mut t = Trainer::new(TrainConfig::single_graph(), None).map_err(|e| e.to_string())?;
    t.run(|_| {}).map_err(|e| e.to_string())?;
    let g = t.env().graph().clone();
    let cfg = EvalConfig {
        episodes_per_graph: 20,
        seed: 1000,
        ..EvalConfig::default()
    };
    let m = t.model();
    let learned =
        evaluate(|| DqnController::greedy(m), &[g.clone()], &cfg).map_err(|e| e.to_string())?;
    let sp =
        evaluate(|| SpController::new(SpVariant::Static), &[g], &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (learned.summary.throughput, sp.summary.throughput);
    check(
        a >= (1.0 - SINGLE_GRAPH_GAP) * b,
        format!(
            "throughput {a:.3} vs SP {b:.3} ({:+.2}%)",
            100.0 * (a - b) / b
        ),
    )
}

fn c8_generalized(shared: &Shared) -> Outcome {
    let (model, logs) = shared.generalized()?;
    let w = logs.len() / REWARD_WINDOWS;
    let means: Vec<f64> = (0..REWARD_WINDOWS)
        .map(|k| {
            logs[k * w..(k + 1) * w]
                .iter()
                .map(|l| l.mean_reward)
                .sum::<f64>()
                / w as f64
        })
        .collect();
    let increasing = means.windows(2).all(|p| p[1] > p[0]);
    let test = &shared.suite()[..50];
    let cfg = EvalConfig::default();
    let learned =
        evaluate(|| DqnController::greedy(model), test, &cfg).map_err(|e| e.to_string())?;
    let sp =
        evaluate(|| SpController::new(SpVariant::Static), test, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (learned.summary.throughput, sp.summary.throughput);
    let detail = format!(
        "window rewards {}; strictly increasing: {increasing}; throughput {a:.3} vs SP {b:.3} ({:.0}%)",
        means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" "),
        100.0 * a / b
    );
    check(increasing && a >= GENERALIZED_SP_FRACTION * b, detail)
}

fn c9_masking(shared: &Shared) -> Outcome {
    let (model, _) = shared.generalized()?;
    let cfg = EvalConfig {
        episodes_per_graph: 2,
        mask: Some(false),
        ..EvalConfig::default()
    }
    .with_mode(Mode::Limited);
    let r = evaluate(|| DqnController::greedy(model), &shared.suite()[..50], &cfg)
        .map_err(|e| e.to_string())?;
    let s = r.summary;
    check(
        s.episodes == 100 && s.revisits == 0 && s.drops_per_step.is_finite(),
        format!(
            "{} episodes, {} revisits, {:.3} drops/step, throughput {:.3}",
            s.episodes, s.revisits, s.drops_per_step, s.throughput
        ),
    )
}

fn c10_adaptation(shared: &Shared) -> Outcome {
    let (model, _) = shared.generalized()?;
    let (g, edge) = shared
        .suite()
        .iter()
        .find_map(|g| bottleneck_edge(g, 2).map(|e| (g, e)))
        .ok_or("no delay-2 edge in the suite")?;
    let peak = |control: bool| -> Result<(f64, f64), String> {
        let cfg = AdaptConfig {
            control,
            ..AdaptConfig::new(edge)
        };
        let rows = adaptation_experiment(model, g, &cfg).map_err(|e| e.to_string())?;
        let base = rows[30..=50].iter().map(|r| r.node_state_diff).sum::<f64>() / 21.0;
        let top = rows[51..=56]
            .iter()
            .map(|r| r.node_state_diff)
            .fold(0.0, f64::max);
        Ok((top, base))
    };
    let (top, base) = peak(false)?;
    let (ctop, cbase) = peak(true)?;
    check(
        top > ADAPT_PEAK_FACTOR * base && ctop <= ADAPT_PEAK_FACTOR * cbase,
        format!(
            "edge {edge:?}: peak {top:.2e} vs baseline {base:.2e} ({:.1}x); control {:.1}x",
            top / base,
            ctop / cbase
        ),
    )
}

fn c11_stored_states(_: &Shared) -> Outcome {
    let cfg = TrainConfig {
        setting: Setting::Generalized,
        nodes: 10,
        model: ModelConfig {
            q_hidden: vec![32],
            graph_obs: Some(GraphObsConfig {
                hidden: 16,
                encoder: vec![32],
                k: 1,
            }),
        },
        env: EnvConfig {
            packets: 8,
            episode_len: 11,
            ..EnvConfig::default()
        },
        replay_capacity: 1000,
        unroll: 8,
        warmup: usize::MAX,
        total_steps: 200,
        ..TrainConfig::generalized()
    };
    let mut t = Trainer::new(cfg, None).map_err(|e| e.to_string())?;
    t.run(|_| {}).map_err(|e| e.to_string())?;
    let replay = t.replay();
    let len = 16;
    let starts: Vec<usize> = (0..replay.len() - len).collect();
    let states = replay_node_states(t.model(), replay, &starts, len).map_err(|e| e.to_string())?;
    let mut resets = 0;
    for (b, &s) in starts.iter().enumerate() {
        for q in 0..len {
            let stored = replay[s + q]
                .states
                .as_ref()
                .ok_or("record without states")?;
            if &states[b][q] != stored {
                return Err(format!("sequence {s}, offset {q} differs"));
            }
            if q > 0 && replay[s + q].episode_start {
                resets += 1;
            }
        }
    }
    check(
        resets > 0,
        format!(
            "{} sequences of {len}, {resets} in-sequence resets, all states exact",
            starts.len()
        ),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: "C1",
            name: "numerics",
            run: c1_numerics,
        },
        Criterion {
            id: "C2",
            name: "locality",
            run: c2_locality,
        },
        Criterion {
            id: "C3",
            name: "environment invariants",
            run: c3_env_invariants,
        },
        Criterion {
            id: "C4",
            name: "oracle equivalence",
            run: c4_oracles,
        },
        Criterion {
            id: "C5",
            name: "graph suite statistics",
            run: c5_suite_stats,
        },
        Criterion {
            id: "C6",
            name: "supervised refinement",
            run: c6_refinement,
        },
        Criterion {
            id: "C7",
            name: "single-graph RL",
            run: c7_single_graph,
        },
        Criterion {
            id: "C8",
            name: "generalized RL",
            run: c8_generalized,
        },
        Criterion {
            id: "C9",
            name: "action masking",
            run: c9_masking,
        },
        Criterion {
            id: "C10",
            name: "adaptation",
            run: c10_adaptation,
        },
        Criterion {
            id: "C11",
            name: "stored-state replay",
            run: c11_stored_states,
        },
    ];
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with('C') && a[1..].parse::<u32>().is_ok())
        .collect();
    let shared = Shared::default();
    let mut failed = 0;
    for c in &criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == c.id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (c.run)(&shared)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {:<4} {}: {d} [{secs:.1}s]", c.id, c.name),
            Err(d) => {
                failed += 1;
                println!("FAIL {:<4} {}: {d} [{secs:.1}s]", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
