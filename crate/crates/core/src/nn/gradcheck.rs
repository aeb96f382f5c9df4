use super::Module;
use ndarray::Array2;
use rand::Rng;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Parameter name and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
}

/// Relative error floor; gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences.
///
/// `loss_and_grad` must return the loss and accumulate gradients into the
/// module's buffers (they are zeroed before every call). `probes`
/// coordinates are sampled uniformly over all parameters; when `probes`
/// is at least the parameter count every coordinate is checked.
pub fn grad_check<M, F, R>(
    model: &mut M,
    mut loss_and_grad: F,
    probes: usize,
    eps: f64,
    rng: &mut R,
) -> GradCheckReport
where
    M: Module<f64>,
    F: FnMut(&mut M) -> f64,
    R: Rng + ?Sized,
{
    model.zero_grad();
    loss_and_grad(model);
    let analytic: Vec<Array2<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let sizes: Vec<usize> = analytic.iter().map(Array2::len).collect();
    let total: usize = sizes.iter().sum();

    let coords: Vec<(usize, usize)> = if probes >= total {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| (0..n).map(move |i| (p, i)))
            .collect()
    } else {
        (0..probes)
            .map(|_| {
                let mut flat = rng.random_range(0..total);
                let mut p = 0;
                while flat >= sizes[p] {
                    flat -= sizes[p];
                    p += 1;
                }
                (p, flat)
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: coords.len(),
        worst: None,
    };
    for &(p, i) in &coords {
        let mut eval = |model: &mut M, delta: f64| {
            nudge(model, p, i, delta);
            model.zero_grad();
            let l = loss_and_grad(model);
            nudge(model, p, i, -delta);
            l
        };
        let numeric = (eval(model, eps) - eval(model, -eps)) / (2.0 * eps);
        let a = analytic[p].as_slice().expect("standard layout")[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = Some((names[p].clone(), i));
        }
    }
    // leave the analytic gradients in place
    model.zero_grad();
    loss_and_grad(model);
    report
}

fn nudge<M: Module<f64>>(model: &mut M, target: usize, index: usize, delta: f64) {
    let mut k = 0;
    model.visit_mut(&mut |p| {
        if k == target {
            p.value.as_slice_mut().expect("standard layout")[index] += delta;
        }
        k += 1;
    });
}
