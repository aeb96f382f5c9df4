use super::{check_cols, Module, NnError, Param, Real};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;

/// Negative-side slope of every Leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Elementwise `max(x, slope·x)` for `0 < slope < 1`.
pub fn leaky_relu<T: Real>(x: ArrayView2<T>, slope: T) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient through a Leaky ReLU. `y` may be the input or the output since
/// both have the same sign.
pub fn leaky_relu_backward<T: Real>(y: ArrayView2<T>, dy: ArrayView2<T>, slope: T) -> Array2<T> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d *= slope;
        }
    });
    dx
}

/// Affine map `y = x·Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> Linear<T> {
    /// Weights uniform in `±1/√in`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            w: Param::uniform(format!("{name}.w"), (output, input), bound, rng),
            b: Param::new(format!("{name}.b"), Array2::zeros((1, output))),
        }
    }

    pub fn from_parts(name: &str, w: Array2<T>, b: Array2<T>) -> Result<Self, NnError> {
        if b.dim() != (1, w.nrows()) {
            return Err(NnError::Shape {
                op: "linear",
                detail: format!("bias {:?} does not match weight {:?}", b.dim(), w.dim()),
            });
        }
        Ok(Linear {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), b),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>, NnError> {
        check_cols("linear", x.ncols(), self.input_dim())?;
        let mut y = x.dot(&self.w.value.t());
        y += &self.b.value;
        Ok(y)
    }

    /// Accumulates `dW`, `db`; returns `dx` when `need_dx`.
    pub fn backward(
        &mut self,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut self.w.grad);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        need_dx.then(|| dy.dot(&self.w.value))
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Stack of [`Linear`] layers with Leaky ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    /// Also apply the activation after the last layer.
    pub activate_last: bool,
}

/// Activations saved by [`Mlp::forward_cached`]; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub acts: Vec<Array2<T>>,
}

impl<T> MlpCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.acts.last().expect("cache holds the input at least")
    }
}

impl<T: Real> Mlp<T> {
    /// `sizes = [in, h1, …, out]`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        sizes: &[usize],
        activate_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(
            sizes.len() >= 2,
            "an MLP needs at least input and output sizes"
        );
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            activate_last,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.activate_last
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>, NnError> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut a = self.layers[0].forward(x)?;
        for i in 0..self.layers.len() {
            if i > 0 {
                a = self.layers[i].forward(a.view())?;
            }
            // in place, no cache
            if self.activated(i) {
                a.mapv_inplace(|v| if v > T::zero() { v } else { v * slope });
            }
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> Result<MlpCache<T>, NnError> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = layer.forward(acts[i].view())?;
            if self.activated(i) {
                a.mapv_inplace(|v| if v > T::zero() { v } else { v * slope });
            }
            acts.push(a);
        }
        Ok(MlpCache { acts })
    }

    /// Backpropagates `dy` (gradient of the output); accumulates parameter
    /// gradients and returns the input gradient when `need_dx`.
    pub fn backward(
        &mut self,
        cache: &MlpCache<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        let slope = T::lit(LEAKY_SLOPE);
        let n = self.layers.len();
        let mut d = dy.to_owned();
        for i in (0..n).rev() {
            if self.activated(i) {
                Zip::from(&mut d).and(&cache.acts[i + 1]).for_each(|g, &y| {
                    if y <= T::zero() {
                        *g *= slope;
                    }
                });
            }
            let want = i > 0 || need_dx;
            match self.layers[i].backward(cache.acts[i].view(), d.view(), want) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.layers.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f);
    }
}
