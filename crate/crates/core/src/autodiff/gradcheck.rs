//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

/// Denominator floor of the relative error, so entries whose true gradient is
/// essentially zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn picks(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Compares backprop against `(f(p + h) - f(p - h)) / 2h` for every trainable
/// parameter of `store` (at most `max_per_param` entries each). `f` must build a scalar.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    h: f64,
    max_per_param: usize,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic: Vec<(super::ParamId, Vec<f64>)> = g.param_grads().into_iter().map(|(id, d)| (id, d.to_vec())).collect();
    drop(g);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, s)?;
        Ok(g.value(v).item())
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let grad = analytic.iter().find(|(i, _)| *i == id).map(|(_, d)| d.clone());
        let n = store.get(id).value.numel();
        for j in picks(n, max_per_param) {
            let orig = store.get(id).value.data[j];
            store.get_mut(id).value.data[j] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data[j] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |d| d[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((store.get(id).name.clone(), j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar by a fixed random projection, so a gradient
/// check of a vector-valued op exercises every output entry with a distinct weight.
pub fn random_projection(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).numel();
    let mut rng = Rng::new(seed);
    let r = Tensor::new(vec![1, n], (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())?;
    let r = g.constant(r);
    let flat = g.reshape(y, &[1, n])?;
    let out = g.linear(flat, r, None)?;
    g.reshape(out, &[])
}

/// A parameter tensor of uniform values in `[-scale, scale]`.
pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.uniform_range(-scale, scale)).collect() }
}
