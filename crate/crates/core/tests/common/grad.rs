//! Finite-difference checks shared by the gradient and acceptance targets.
//! Each returns the worst relative error over the probed coordinates.

use marlnet::dqn::{td_loss, DqnModel, ModelConfig, Setting, TrainConfig, Trainer};
use marlnet::env::EnvConfig;
use marlnet::gnn::GraphObsConfig;
use marlnet::nn::{
    cast_params, grad_check, mse_loss, mse_loss_backward, Linear, LstmCell, Mlp, Module, Param,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// A layer bundled with a learnable input so input gradients get checked too.
struct WithInput<M> {
    x: Param<f64>,
    m: M,
}

impl<M: Module<f64>> Module<f64> for WithInput<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
        f(&self.x);
        self.m.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        f(&mut self.x);
        self.m.visit_mut(f);
    }
}

pub fn linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = WithInput {
        x: Param::new("x", rand_matrix(&mut rng, 8, 8)),
        m: Linear::<f64>::new("l", 8, 8, &mut rng),
    };
    let target = rand_matrix(&mut rng, 8, 8);
    grad_check(
        &mut model,
        |md| {
            let y = md.m.forward(md.x.value.view()).unwrap();
            let dy = mse_loss_backward(y.view(), target.view(), 1.0).unwrap();
            let dx = md.m.backward(md.x.value.view(), dy.view(), true).unwrap();
            md.x.grad += &dx;
            mse_loss(y.view(), target.view()).unwrap()
        },
        10_000,
        1e-5,
        &mut rng,
    )
    .max_rel_error
}

/// Dense stack with Leaky ReLU between layers.
pub fn leaky_mlp(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = WithInput {
        x: Param::new("x", rand_matrix(&mut rng, 6, 5)),
        m: Mlp::<f64>::new("mlp", &[5, 9, 7, 3], true, &mut rng),
    };
    let target = rand_matrix(&mut rng, 6, 3);
    grad_check(
        &mut model,
        |md| {
            let cache = md.m.forward_cached(md.x.value.view()).unwrap();
            let y = cache.output().clone();
            let dy = mse_loss_backward(y.view(), target.view(), 1.0).unwrap();
            let dx = md.m.backward(&cache, dy.view(), true).unwrap();
            md.x.grad += &dx;
            mse_loss(y.view(), target.view()).unwrap()
        },
        10_000,
        1e-5,
        &mut rng,
    )
    .max_rel_error
}

/// LSTM cell unrolled `steps` times with a loss on every step's `h`.
pub fn lstm_unroll(steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Model {
        xs: Vec<Param<f64>>,
        h0: Param<f64>,
        c0: Param<f64>,
        cell: LstmCell<f64>,
    }
    impl Module<f64> for Model {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            self.xs.visit(f);
            f(&self.h0);
            f(&self.c0);
            self.cell.visit(f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            self.xs.visit_mut(f);
            f(&mut self.h0);
            f(&mut self.c0);
            self.cell.visit_mut(f);
        }
    }
    let (b, din, h) = (3, 4, 5);
    let mut model = Model {
        xs: (0..steps)
            .map(|t| Param::new(format!("x{t}"), rand_matrix(&mut rng, b, din)))
            .collect(),
        h0: Param::new("h0", rand_matrix(&mut rng, b, h)),
        c0: Param::new("c0", rand_matrix(&mut rng, b, h)),
        cell: LstmCell::new("cell", din, h, &mut rng),
    };
    let targets: Vec<Array2<f64>> = (0..steps).map(|_| rand_matrix(&mut rng, b, h)).collect();
    grad_check(
        &mut model,
        |md| {
            let (mut hs, mut cs) = (md.h0.value.clone(), md.c0.value.clone());
            let mut caches = Vec::new();
            let mut loss = 0.0;
            let mut outs = Vec::new();
            for t in 0..steps {
                let (hn, cn, cache) = md
                    .cell
                    .forward_cached(md.xs[t].value.view(), hs.view(), cs.view())
                    .unwrap();
                loss += mse_loss(hn.view(), targets[t].view()).unwrap();
                caches.push(cache);
                outs.push(hn.clone());
                hs = hn;
                cs = cn;
            }
            let mut dh = Array2::zeros((b, h));
            let mut dc = Array2::zeros((b, h));
            for t in (0..steps).rev() {
                dh += &mse_loss_backward(outs[t].view(), targets[t].view(), 1.0).unwrap();
                let g = md.cell.backward(&caches[t], dh.view(), dc.view(), true);
                md.xs[t].grad += g.dx.as_ref().unwrap();
                dh = g.dh;
                dc = g.dc;
            }
            md.h0.grad += &dh;
            md.c0.grad += &dc;
            loss
        },
        100_000,
        1e-5,
        &mut rng,
    )
    .max_rel_error
}

/// Unrolled graph-observation regression loss on two 6-node graphs, `K = 2`.
pub fn regression(seed: u64) -> f64 {
    use marlnet::graph::{generate_graph, Weight};
    use marlnet::sl::{samples_for_graphs, unrolled_loss, SampleBatch, SpRegressor};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs: Vec<_> = (0..2)
        .map(|_| generate_graph(6, 3, 7.0, &mut rng).unwrap())
        .collect();
    let env = EnvConfig {
        packets: 4,
        ..EnvConfig::default()
    };
    let samples = samples_for_graphs(&graphs, &env, 0).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = SampleBatch::<f64>::new(&refs, Weight::Delay, 10.0);
    let cfg = GraphObsConfig {
        hidden: 8,
        encoder: vec![10],
        k: 2,
    };
    let mut model = SpRegressor::<f64>::new(&cfg, 6, 3, &mut rng);
    grad_check(
        &mut model,
        |m| unrolled_loss(m, &batch, 3).unwrap().iter().sum(),
        3000,
        1e-5,
        &mut rng,
    )
    .max_rel_error
}

/// Full TD loss through graph observations and Q-network on a 5-node graph.
///
/// `γ = 0` keeps the bootstrap (computed without gradients) out of the loss
/// so finite differences and the analytic gradient see the same function.
pub fn graph_obs_q_loss(seed: u64) -> f64 {
    let cfg = TrainConfig {
        setting: Setting::Generalized,
        nodes: 5,
        degree: 2,
        model: ModelConfig {
            q_hidden: vec![16],
            graph_obs: Some(GraphObsConfig {
                hidden: 8,
                encoder: vec![12],
                k: 1,
            }),
        },
        env: EnvConfig {
            packets: 3,
            episode_len: 6,
            ..Default::default()
        },
        batch: 4,
        replay_capacity: 1000,
        unroll: 3,
        warmup: usize::MAX,
        total_steps: 30,
        seed,
        ..TrainConfig::generalized()
    };
    let mut t = Trainer::new(cfg.clone(), None).unwrap();
    t.run(|_| {}).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
    let mut model = DqnModel::<f64>::new(&cfg.model, 5, 2, &mut rng);
    cast_params(t.model(), &mut model);
    let mut target = model.q.clone();
    cast_params(t.target(), &mut target);
    // starts 4 and 10 cross episode boundaries inside the window
    let starts = [0, 4, 10, 21];
    grad_check(
        &mut model,
        |m| {
            td_loss(m, &target, t.replay(), &starts, cfg.unroll, 0.0)
                .unwrap()
                .unwrap()
                .0
        },
        usize::MAX,
        1e-5,
        &mut rng,
    )
    .max_rel_error
}
