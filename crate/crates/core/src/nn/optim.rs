use super::{Module, NnError, Param, Real};
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients.
    ///
    /// If any gradient is non-finite nothing changes and the offending
    /// parameter is reported.
    pub fn step<M: Module<T>>(&mut self, module: &mut M) -> Result<(), NnError> {
        let mut bad = None;
        module.visit(&mut |p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(NnError::NonFiniteGradient(name));
        }
        if self.m.is_empty() {
            module.visit(&mut |p| {
                self.m.push(Array2::zeros(p.value.raw_dim()));
                self.v.push(Array2::zeros(p.value.raw_dim()));
            });
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let lr = T::lit(c.lr);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (nb1, nb2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut(&mut |p: &mut Param<T>| {
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(
                m.dim(),
                p.value.dim(),
                "parameter layout changed under the optimizer"
            );
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + nb1 * g;
                    *v = b2 * *v + nb2 * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w = *w * decay - lr * mh / (vh.sqrt() + eps);
                });
            idx += 1;
        });
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real, M: Module<T>>(module: &M) -> f64 {
    let mut sum = 0.0;
    module.visit(&mut |p| {
        sum += p.grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>();
    });
    sum.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real, M: Module<T>>(module: &mut M, max_norm: f64) -> f64 {
    let norm = grad_norm(module);
    if norm.is_finite() && norm > max_norm {
        let k = T::lit(max_norm / norm);
        module.visit_mut(&mut |p| p.grad.mapv_inplace(|g| g * k));
    }
    norm
}

/// `target ← τ·online + (1-τ)·target`, parameter by parameter.
pub fn soft_update<T: Real, M: Module<T>>(target: &mut M, online: &M, tau: f64) {
    let values: Vec<&Array2<T>> = online.params().into_iter().map(|p| &p.value).collect();
    let (a, b) = (T::lit(tau), T::lit(1.0 - tau));
    let mut it = values.into_iter();
    target.visit_mut(&mut |p| {
        let src = it.next().expect("same parameter layout");
        Zip::from(&mut p.value)
            .and(src)
            .for_each(|t, &s| *t = a * s + b * *t);
    });
}
