use crate::{usage, Failure, Outcome};
use anyhow::Context;
use clap::{Args, ValueEnum};
use marlnet::dqn::{
    adaptation_experiment, bottleneck_edge, evaluate, load_model, AdaptConfig, DqnController,
    EvalConfig, EvalReport, EvalSummary, Setting, SpController, TrainConfig, Trainer,
};
use marlnet::env::{EnvConfig, Mode, SpVariant};
use marlnet::gnn::GraphObsConfig;
use marlnet::graph::{
    generate_suite, graph_metrics, graph_stats, Graph, Weight, DEFAULT_DELAY_SCALE,
};
use marlnet::nn::Checkpoint;
use marlnet::sl::{
    evaluate_at_steps, load_samples, save_samples, train_regression, DatasetConfig, SlConfig,
    SpRegressor, StepMse,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const SL_STEPS: [usize; 6] = [1, 2, 4, 8, 16, 32];

fn prepare_out<A: Serialize>(out: &Path, command: &str, args: &A) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = serde_json::json!({ "command": command, "args": args });
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A graph file, a directory of graph files, or a suite directory with a
/// `graphs/` subdirectory.
fn load_suite(path: &Path) -> anyhow::Result<Vec<Graph>> {
    if path.is_file() {
        return Ok(vec![Graph::read_from(path)?]);
    }
    let dir = if path.join("graphs").is_dir() {
        path.join("graphs")
    } else {
        path.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let graphs = files
        .iter()
        .map(|f| Graph::read_from(f).with_context(|| format!("loading {}", f.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    anyhow::ensure!(!graphs.is_empty(), "no graph files in {}", dir.display());
    Ok(graphs)
}

#[derive(Args, Serialize, Deserialize)]
pub struct GenGraphs {
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    #[arg(long, default_value_t = DEFAULT_DELAY_SCALE)]
    pub delay_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_graphs(a: GenGraphs) -> Outcome {
    if a.degree == 0 || a.degree >= a.nodes || (a.nodes * a.degree) % 2 == 1 {
        return usage(format!(
            "no {}-regular graph on {} nodes (need 0 < D < L and L·D even)",
            a.degree, a.nodes
        ));
    }
    prepare_out(&a.out, "gen-graphs", &a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let graphs = generate_suite(a.count, a.nodes, a.degree, a.delay_scale, &mut rng)?;
    let dir = a.out.join("graphs");
    fs::create_dir_all(&dir)?;
    for (i, g) in graphs.iter().enumerate() {
        g.write_to(&dir.join(format!("graph_{i:04}.json")))?;
    }
    if let Some(stats) = graph_stats(&graphs, Weight::Delay) {
        write_json(&a.out.join("stats.json"), &stats)?;
        println!(
            "{} graphs: hop diameter {:.2}, delay diameter {:.2}, APSP hops {:.2}, max betweenness {:.3}",
            stats.graphs,
            stats.diameter_hops.mean,
            stats.diameter_delay.mean,
            stats.apsp_hops.mean,
            stats.graph_max_betweenness.mean
        );
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize)]
pub struct BaselineSp {
    /// Suite directory or graph file.
    #[arg(long)]
    pub graphs: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 300)]
    pub episode_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct BaselineRow {
    graph: usize,
    throughput_unlimited: f64,
    throughput_limited: f64,
    max_betweenness: f64,
}

pub fn baseline_sp(a: BaselineSp) -> Outcome {
    let graphs: Vec<Arc<Graph>> = load_suite(&a.graphs)?.into_iter().map(Arc::new).collect();
    prepare_out(&a.out, "baseline-sp", &a)?;
    let run = |mode: Mode| -> anyhow::Result<EvalReport> {
        let cfg = EvalConfig {
            env: EnvConfig {
                mode,
                episode_len: a.episode_len,
                ..EnvConfig::default()
            },
            episodes_per_graph: a.episodes,
            mask: None,
            seed: a.seed,
        };
        Ok(evaluate(
            || SpController::new(SpVariant::Static),
            &graphs,
            &cfg,
        )?)
    };
    let per_graph = |r: &EvalReport| -> Vec<f64> {
        let mut t = vec![0.0; graphs.len()];
        for row in &r.rows {
            t[row.graph] += row.throughput / a.episodes as f64;
        }
        t
    };
    let unlimited = run(Mode::Unlimited)?;
    let limited = run(Mode::Limited)?;
    let (tu, tl) = (per_graph(&unlimited), per_graph(&limited));
    let rows: Vec<BaselineRow> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| BaselineRow {
            graph: i,
            throughput_unlimited: tu[i],
            throughput_limited: tl[i],
            max_betweenness: graph_metrics(g, Weight::Delay)
                .betweenness
                .into_iter()
                .fold(0.0, f64::max),
        })
        .collect();
    write_csv(&a.out.join("baseline_sp.csv"), &rows)?;
    write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({ "unlimited": unlimited.summary, "limited": limited.summary }),
    )?;
    println!(
        "SP throughput: unlimited {:.3}, limited {:.3}",
        unlimited.summary.throughput, limited.summary.throughput
    );
    Ok(())
}

#[derive(Args, Serialize, Deserialize)]
pub struct BuildDataset {
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 500)]
    pub validation: usize,
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn build_dataset(a: BuildDataset) -> Outcome {
    if a.validation >= a.count {
        return usage("validation split must be smaller than the sample count");
    }
    prepare_out(&a.out, "build-dataset", &a)?;
    let d = marlnet::sl::build_dataset(&DatasetConfig {
        count: a.count,
        validation: a.validation,
        nodes: a.nodes,
        degree: a.degree,
        seed: a.seed,
        ..DatasetConfig::default()
    })?;
    save_samples(&d.train, a.out.join("train.jsonl"))?;
    save_samples(&d.validation, a.out.join("validation.jsonl"))?;
    println!(
        "{} training, {} validation samples",
        d.train.len(),
        d.validation.len()
    );
    Ok(())
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetArg {
    Delay,
    Hops,
}

impl From<TargetArg> for Weight {
    fn from(t: TargetArg) -> Weight {
        match t {
            TargetArg::Delay => Weight::Delay,
            TargetArg::Hops => Weight::Hops,
        }
    }
}

#[derive(Args, Serialize, Deserialize)]
pub struct TrainSl {
    /// Directory written by `build-dataset`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub unroll: usize,
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = TargetArg::Delay)]
    pub target: TargetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn sl_rows(mse: &[StepMse]) -> String {
    mse.iter()
        .map(|m| format!("t={}: {:.3}", m.t, m.mse))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn train_sl(a: TrainSl) -> Outcome {
    if a.k == 0 || a.unroll == 0 {
        return usage("--k and --unroll must be positive");
    }
    let train = load_samples(a.data.join("train.jsonl"))?;
    let validation = load_samples(a.data.join("validation.jsonl"))?;
    let first = train.first().context("empty training set")?;
    let (nodes, degree) = (first.graph.node_count(), first.graph.degree());
    prepare_out(&a.out, "train-sl", &a)?;
    let cfg = SlConfig {
        graph_obs: GraphObsConfig {
            hidden: a.hidden,
            k: a.k,
            ..GraphObsConfig::default()
        },
        unroll: a.unroll,
        iterations: a.iterations,
        target: a.target.into(),
        seed: a.seed,
        ..SlConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = SpRegressor::<f32>::new(&cfg.graph_obs, nodes, degree, &mut rng);
    let curve = train_regression(&mut model, &train, &validation, &cfg, |r| {
        if let Some(v) = r.val_loss {
            println!(
                "iteration {:>6}  train {:.4}  validation {:.4}",
                r.iteration, r.train_loss, v
            );
        }
    })?;
    write_csv(&a.out.join("curve.csv"), &curve)?;
    let meta = serde_json::json!({ "config": cfg, "nodes": nodes, "degree": degree });
    model.checkpoint(meta).save(a.out.join("model.ckpt"))?;
    if !validation.is_empty() {
        let mse = evaluate_at_steps(&model, &validation, &SL_STEPS, cfg.target, cfg.target_scale)?;
        write_csv(&a.out.join("mse.csv"), &mse)?;
        println!("{}", sl_rows(&mse));
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize)]
pub struct EvalSl {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A `.jsonl` file, or a dataset directory (uses `validation.jsonl`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval_sl(a: EvalSl) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg: SlConfig = serde_json::from_value(ck.metadata["config"].clone())
        .context("checkpoint lacks a regression config")?;
    let dim = |k: &str| {
        ck.metadata[k]
            .as_u64()
            .map(|v| v as usize)
            .with_context(|| format!("checkpoint lacks `{k}`"))
    };
    let (nodes, degree) = (dim("nodes")?, dim("degree")?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SpRegressor::<f32>::new(&cfg.graph_obs, nodes, degree, &mut rng);
    ck.load_into("", &mut model)?;
    let file = if a.data.is_dir() {
        a.data.join("validation.jsonl")
    } else {
        a.data.clone()
    };
    let samples = load_samples(&file)?;
    prepare_out(&a.out, "eval-sl", &a)?;
    let mse = evaluate_at_steps(&model, &samples, &SL_STEPS, cfg.target, cfg.target_scale)?;
    write_csv(&a.out.join("mse.csv"), &mse)?;
    println!("{}", sl_rows(&mse));
    Ok(())
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SettingArg {
    Single,
    Generalized,
}

#[derive(Args, Serialize, Deserialize)]
pub struct TrainRl {
    #[arg(long, value_enum, default_value_t = SettingArg::Generalized)]
    pub setting: SettingArg,
    /// Shortened schedule for desk runs.
    #[arg(long)]
    pub desk: bool,
    #[arg(long, default_value_t = Mode::Unlimited)]
    pub mode: Mode,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub unroll: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training graph for the single-graph setting (generated if absent).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainRl {
    fn config(&self) -> TrainConfig {
        let mut cfg = match (self.setting, self.desk) {
            (SettingArg::Single, _) => TrainConfig::single_graph(),
            (SettingArg::Generalized, false) => TrainConfig::generalized(),
            (SettingArg::Generalized, true) => TrainConfig::generalized_desk(),
        }
        .with_mode(self.mode);
        cfg.seed = self.seed;
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        if let Some(j) = self.unroll {
            cfg.unroll = j;
        }
        if let (Some(k), Some(g)) = (self.k, cfg.model.graph_obs.as_mut()) {
            g.k = k;
        }
        cfg
    }
}

pub fn train_rl(a: TrainRl) -> Outcome {
    let cfg = a.config();
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    if a.k == Some(0) {
        return usage("--k must be positive");
    }
    let graph = match &a.graph {
        Some(p) => Some(Arc::new(Graph::read_from(p)?)),
        None => None,
    };
    prepare_out(
        &a.out,
        "train-rl",
        &serde_json::json!({ "args": &a, "train": &cfg }),
    )?;
    let mut trainer = Trainer::new(cfg, graph)?;
    if trainer.config().setting == Setting::Single {
        trainer.env().graph().write_to(&a.out.join("graph.json"))?;
    }
    let logs = trainer.run(|log| {
        if log.episode % 20 == 0 {
            println!(
                "step {:>8}  episode {:>6}  reward {:+.4}  throughput {:.3}  ε {:.3}",
                log.end_step, log.episode, log.mean_reward, log.throughput, log.epsilon
            );
        }
    })?;
    write_csv(&a.out.join("episodes.csv"), &logs)?;
    trainer.checkpoint().save(a.out.join("model.ckpt"))?;
    Ok(())
}

#[derive(Args, Serialize, Deserialize)]
pub struct EvalRl {
    /// One or more trained models; summaries report the spread across them.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub graphs: PathBuf,
    /// Evaluate only the first N graphs.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = Mode::Unlimited)]
    pub mode: Mode,
    /// Visited-node action masking.
    #[arg(long)]
    pub mask: bool,
    /// With `--mask`, forbid waiting as well.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 300)]
    pub episode_len: usize,
    /// Also evaluate the shortest-path heuristic.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalCsvRow {
    policy: String,
    graph: usize,
    episode: usize,
    mean_reward: f64,
    throughput: f64,
    mean_delay: Option<f64>,
    drops_per_step: f64,
    revisits: usize,
}

#[derive(Serialize)]
struct Spread {
    models: usize,
    mean_reward: f64,
    mean_delay: Option<f64>,
    throughput: f64,
    /// Standard deviation of mean throughput across models.
    throughput_std: f64,
    drops_per_step: f64,
}

fn spread(s: &[EvalSummary]) -> Spread {
    let n = s.len() as f64;
    let throughput = s.iter().map(|x| x.throughput).sum::<f64>() / n;
    let var = s
        .iter()
        .map(|x| (x.throughput - throughput).powi(2))
        .sum::<f64>()
        / n;
    let delays: Vec<f64> = s.iter().filter_map(|x| x.mean_delay).collect();
    Spread {
        models: s.len(),
        mean_reward: s.iter().map(|x| x.mean_reward).sum::<f64>() / n,
        mean_delay: (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64),
        throughput,
        throughput_std: var.sqrt(),
        drops_per_step: s.iter().map(|x| x.drops_per_step).sum::<f64>() / n,
    }
}

pub fn eval_rl(a: EvalRl) -> Outcome {
    if a.strict && !a.mask {
        return usage("--strict needs --mask");
    }
    let mut graphs: Vec<Arc<Graph>> = load_suite(&a.graphs)?.into_iter().map(Arc::new).collect();
    if let Some(n) = a.limit {
        graphs.truncate(n);
    }
    let models = a
        .checkpoint
        .iter()
        .map(|p| load_model(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    prepare_out(&a.out, "eval-rl", &a)?;
    let cfg = EvalConfig {
        env: EnvConfig {
            mode: a.mode,
            episode_len: a.episode_len,
            ..EnvConfig::default()
        },
        episodes_per_graph: a.episodes,
        mask: a.mask.then_some(a.strict),
        seed: a.seed,
    };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let names: Vec<String> = a
        .checkpoint
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    let push = |rows: &mut Vec<EvalCsvRow>, name: &str, r: &EvalReport| {
        for x in &r.rows {
            rows.push(EvalCsvRow {
                policy: name.to_string(),
                graph: x.graph,
                episode: x.episode,
                mean_reward: x.mean_reward,
                throughput: x.throughput,
                mean_delay: x.mean_delay,
                drops_per_step: x.drops_per_step,
                revisits: x.revisits,
            });
        }
    };
    let mut reports = Vec::new();
    for (model, _) in &models {
        let r = evaluate(|| DqnController::greedy(model), &graphs, &cfg)?;
        summaries.push(r.summary.clone());
        reports.push(r);
    }
    for (name, r) in names.iter().zip(&reports) {
        push(&mut rows, name, r);
    }
    let sp = if a.baseline {
        Some(evaluate(
            || SpController::new(SpVariant::Static),
            &graphs,
            &cfg,
        )?)
    } else {
        None
    };
    if let Some(r) = &sp {
        push(&mut rows, "shortest-path", r);
    }
    write_csv(&a.out.join("eval.csv"), &rows)?;
    let model = spread(&summaries);
    println!(
        "model throughput {:.3} ± {:.3}, reward {:+.4}, drops/step {:.4}",
        model.throughput, model.throughput_std, model.mean_reward, model.drops_per_step
    );
    if let Some(r) = &sp {
        println!("shortest-path throughput {:.3}", r.summary.throughput);
    }
    write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({
            "model": model,
            "per_model": summaries,
            "shortest_path": sp.as_ref().map(|r| &r.summary),
        }),
    )?;
    Ok(())
}

#[derive(Args, Serialize, Deserialize)]
pub struct Adapt {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Graph file, or a suite directory together with `--index`.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Edge to change as `u-v`; defaults to the busiest edge of delay `--old-delay`.
    #[arg(long)]
    pub edge: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub old_delay: u32,
    #[arg(long, default_value_t = 10)]
    pub new_delay: u32,
    #[arg(long, default_value_t = 50)]
    pub change_step: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 300)]
    pub episode_len: usize,
    #[arg(long, default_value_t = Mode::Limited)]
    pub mode: Mode,
    /// Run without the delay change.
    #[arg(long)]
    pub control: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_edge(s: &str) -> Result<(usize, usize), Failure> {
    let parsed = s
        .split_once('-')
        .and_then(|(u, v)| Some((u.trim().parse().ok()?, v.trim().parse().ok()?)));
    parsed.ok_or_else(|| Failure::Usage(format!("--edge expects `u-v`, got `{s}`")))
}

pub fn adapt(a: Adapt) -> Outcome {
    let edge = a.edge.as_deref().map(parse_edge).transpose()?;
    let (model, _) =
        load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let suite = load_suite(&a.graph)?;
    let g = Arc::new(
        suite
            .into_iter()
            .nth(a.index)
            .with_context(|| format!("no graph {} in {}", a.index, a.graph.display()))?,
    );
    let edge = match edge {
        Some(e) => e,
        None => bottleneck_edge(&g, a.old_delay)
            .with_context(|| format!("graph has no edge of delay {}", a.old_delay))?,
    };
    prepare_out(&a.out, "adapt", &a)?;
    let cfg = AdaptConfig {
        env: EnvConfig {
            mode: a.mode,
            episode_len: a.episode_len,
            ..EnvConfig::default()
        },
        episodes: a.episodes,
        edge,
        new_delay: a.new_delay,
        change_step: a.change_step,
        control: a.control,
        seed: a.seed,
    };
    let rows = adaptation_experiment(&model, &g, &cfg)?;
    write_csv(&a.out.join("adapt.csv"), &rows)?;
    println!("edge {}-{}: {} rows written", edge.0, edge.1, rows.len());
    Ok(())
}
