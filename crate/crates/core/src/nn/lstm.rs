use super::{check_cols, Module, NnError, Param, Real};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

/// LSTM cell with gate order `i, f, g, o` stacked along the columns.
///
/// `z = x·Wxᵀ + h·Whᵀ + b`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<T> {
    /// `(4H, in)`
    pub wx: Param<T>,
    /// `(4H, H)`
    pub wh: Param<T>,
    /// `(1, 4H)`
    pub b: Param<T>,
}

/// Values saved by [`LstmCell::forward_cached`].
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    pub x: Array2<T>,
    pub h: Array2<T>,
    pub c: Array2<T>,
    /// Activated gates `[σ(i) | σ(f) | tanh(g) | σ(o)]`.
    pub gates: Array2<T>,
    pub tanh_c: Array2<T>,
}

/// Gradients flowing out of [`LstmCell::backward`].
#[derive(Debug, Clone)]
pub struct LstmGrads<T> {
    pub dx: Option<Array2<T>>,
    pub dh: Array2<T>,
    pub dc: Array2<T>,
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

impl<T: Real> LstmCell<T> {
    /// Uniform `±1/√fan_in` weights; forget-gate bias 1, other biases 0.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = Param::uniform(
            format!("{name}.wx"),
            (4 * hidden, input),
            1.0 / (input as f64).sqrt(),
            rng,
        );
        let wh = Param::uniform(
            format!("{name}.wh"),
            (4 * hidden, hidden),
            1.0 / (hidden as f64).sqrt(),
            rng,
        );
        let mut b = Array2::zeros((1, 4 * hidden));
        b.slice_mut(s![.., hidden..2 * hidden]).fill(T::one());
        LstmCell {
            wx,
            wh,
            b: Param::new(format!("{name}.b"), b),
        }
    }

    /// All weights and biases zero.
    pub fn zeroed(name: &str, input: usize, hidden: usize) -> Self {
        LstmCell {
            wx: Param::new(format!("{name}.wx"), Array2::zeros((4 * hidden, input))),
            wh: Param::new(format!("{name}.wh"), Array2::zeros((4 * hidden, hidden))),
            b: Param::new(format!("{name}.b"), Array2::zeros((1, 4 * hidden))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wx.value.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.wh.value.ncols()
    }

    fn gates(&self, x: ArrayView2<T>, h: ArrayView2<T>) -> Result<Array2<T>, NnError> {
        check_cols("lstm input", x.ncols(), self.input_dim())?;
        check_cols("lstm state", h.ncols(), self.hidden_dim())?;
        if x.nrows() != h.nrows() {
            return Err(NnError::Shape {
                op: "lstm",
                detail: format!("{} input rows vs {} state rows", x.nrows(), h.nrows()),
            });
        }
        let hd = self.hidden_dim();
        let mut z = x.dot(&self.wx.value.t());
        general_mat_mul(T::one(), &h, &self.wh.value.t(), T::one(), &mut z);
        z += &self.b.value;
        z.slice_mut(s![.., 0..2 * hd]).mapv_inplace(sigmoid);
        z.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(T::tanh);
        z.slice_mut(s![.., 3 * hd..]).mapv_inplace(sigmoid);
        Ok(z)
    }

    fn combine(&self, gates: &Array2<T>, c: ArrayView2<T>) -> (Array2<T>, Array2<T>, Array2<T>) {
        let hd = self.hidden_dim();
        let mut c_new = Array2::zeros(c.raw_dim());
        Zip::from(&mut c_new)
            .and(&c)
            .and(gates.slice(s![.., 0..hd]))
            .and(gates.slice(s![.., hd..2 * hd]))
            .and(gates.slice(s![.., 2 * hd..3 * hd]))
            .for_each(|cn, &cp, &i, &f, &g| *cn = f * cp + i * g);
        let tanh_c = c_new.mapv(T::tanh);
        let mut h_new = tanh_c.clone();
        h_new *= &gates.slice(s![.., 3 * hd..]);
        (h_new, c_new, tanh_c)
    }

    /// `(h', c')` without keeping anything for backward.
    pub fn forward(
        &self,
        x: ArrayView2<T>,
        h: ArrayView2<T>,
        c: ArrayView2<T>,
    ) -> Result<(Array2<T>, Array2<T>), NnError> {
        let gates = self.gates(x, h)?;
        let (h_new, c_new, _) = self.combine(&gates, c);
        Ok((h_new, c_new))
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<T>,
        h: ArrayView2<T>,
        c: ArrayView2<T>,
    ) -> Result<(Array2<T>, Array2<T>, LstmCache<T>), NnError> {
        let gates = self.gates(x, h)?;
        let (h_new, c_new, tanh_c) = self.combine(&gates, c);
        let cache = LstmCache {
            x: x.to_owned(),
            h: h.to_owned(),
            c: c.to_owned(),
            gates,
            tanh_c,
        };
        Ok((h_new, c_new, cache))
    }

    /// Backpropagates gradients of `h'` and `c'`; accumulates parameter
    /// gradients and returns gradients of `x` (when `need_dx`), `h` and `c`.
    pub fn backward(
        &mut self,
        cache: &LstmCache<T>,
        dh_new: ArrayView2<T>,
        dc_new: ArrayView2<T>,
        need_dx: bool,
    ) -> LstmGrads<T> {
        let hd = self.hidden_dim();
        let one = T::one();
        let g = &cache.gates;
        let (gi, gf, gg, go) = (
            g.slice(s![.., 0..hd]),
            g.slice(s![.., hd..2 * hd]),
            g.slice(s![.., 2 * hd..3 * hd]),
            g.slice(s![.., 3 * hd..]),
        );

        // total gradient reaching c'
        let mut dct = dc_new.to_owned();
        Zip::from(&mut dct)
            .and(&dh_new)
            .and(&go)
            .and(&cache.tanh_c)
            .for_each(|d, &dh, &o, &tc| *d += dh * o * (one - tc * tc));

        let mut dz = Array2::zeros(g.raw_dim());
        Zip::from(dz.slice_mut(s![.., 0..hd]))
            .and(&dct)
            .and(&gi)
            .and(&gg)
            .for_each(|d, &dc, &i, &gv| *d = dc * gv * i * (one - i));
        Zip::from(dz.slice_mut(s![.., hd..2 * hd]))
            .and(&dct)
            .and(&gf)
            .and(&cache.c)
            .for_each(|d, &dc, &f, &cp| *d = dc * cp * f * (one - f));
        Zip::from(dz.slice_mut(s![.., 2 * hd..3 * hd]))
            .and(&dct)
            .and(&gi)
            .and(&gg)
            .for_each(|d, &dc, &i, &gv| *d = dc * i * (one - gv * gv));
        Zip::from(dz.slice_mut(s![.., 3 * hd..]))
            .and(&dh_new)
            .and(&go)
            .and(&cache.tanh_c)
            .for_each(|d, &dh, &o, &tc| *d = dh * tc * o * (one - o));

        let mut dc = dct;
        dc *= &gf;

        general_mat_mul(one, &dz.t(), &cache.x, one, &mut self.wx.grad);
        general_mat_mul(one, &dz.t(), &cache.h, one, &mut self.wh.grad);
        self.b.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));

        LstmGrads {
            dx: need_dx.then(|| dz.dot(&self.wx.value)),
            dh: dz.dot(&self.wh.value),
            dc,
        }
    }
}

impl<T: Real> Module<T> for LstmCell<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.wx);
        f(&self.wh);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.wx);
        f(&mut self.wh);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_state() {
        let cell = LstmCell::<f64>::zeroed("a", 3, 4);
        let x = Array2::from_elem((2, 3), 0.7);
        let z = Array2::zeros((2, 4));
        let (h, c) = cell.forward(x.view(), z.view(), z.view()).unwrap();
        // i = f = o = 0.5, g = tanh(0) = 0
        assert!(h.iter().chain(c.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut cell = LstmCell::<f64>::zeroed("a", 2, 3);
        cell.b.value.slice_mut(s![.., 3..6]).fill(10.0);
        let c = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let (_, c_new) = cell
            .forward(
                Array2::zeros((1, 2)).view(),
                Array2::zeros((1, 3)).view(),
                c.view(),
            )
            .unwrap();
        for (a, b) in c.iter().zip(c_new.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn forget_bias_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::<f32>::new("a", 5, 4, &mut rng);
        let b = cell.b.value.row(0).to_vec();
        assert_eq!(&b[4..8], &[1.0; 4]);
        assert!(b[..4].iter().chain(&b[8..]).all(|&v| v == 0.0));
        assert_eq!(cell.wx.value.dim(), (16, 5));
        assert_eq!(cell.wh.value.dim(), (16, 4));
    }

    #[test]
    fn rejects_mismatched_rows() {
        let cell = LstmCell::<f32>::zeroed("a", 2, 3);
        let r = cell.forward(
            Array2::zeros((2, 2)).view(),
            Array2::zeros((1, 3)).view(),
            Array2::zeros((1, 3)).view(),
        );
        assert!(r.is_err());
    }
}
