//! Directional finite-difference checks of analytic gradients.
//!
//! For a random unit direction `u` the analytic directional derivative
//! `<∇f, u>` is compared against the central difference
//! `(f(x + h u) - f(x - h u)) / 2h`. Only forward evaluations enter the
//! numerical side.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};

/// Result of one directional comparison.
#[derive(Debug, Clone, Copy)]
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl DirectionalCheck {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn random_direction(shapes: &[Vec<usize>], rng: &mut impl Rng) -> Vec<Tensor> {
    let mut dir: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::from_fn(s.clone(), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let norm = dir.iter().map(|t| t.dot(t)).sum::<f64>().sqrt().max(1e-300);
    for t in &mut dir {
        t.data_mut().iter_mut().for_each(|x| *x /= norm);
    }
    dir
}

/// Checks gradients w.r.t. graph inputs. `f` builds a scalar from input vars.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, directions: usize, step: f64, rng: &mut impl Rng) -> Vec<DirectionalCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    (0..directions)
        .map(|_| {
            let dir = random_direction(&shapes, rng);
            let analytic = analytic_grads.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
            let shifted = |sign: f64| {
                let xs: Vec<Tensor> = inputs
                    .iter()
                    .zip(&dir)
                    .map(|(x, d)| {
                        let mut x = x.clone();
                        x.axpy(sign * step, d);
                        x
                    })
                    .collect();
                eval(&xs)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
            DirectionalCheck { analytic, numeric }
        })
        .collect()
}

/// Checks gradients w.r.t. the listed parameters of a store.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    directions: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Vec<DirectionalCheck>
where
    F: Fn(&ParamStore, &mut Graph) -> Var,
{
    let mut g = Graph::new();
    let out = f(store, &mut g);
    let grads = g.backward(out);
    let mut analytic_grads = Vec::with_capacity(ids.len());
    for &id in ids {
        let v = g.param_vars().find(|(p, _)| *p == id).map(|(_, v)| v);
        let grad = v
            .and_then(|v| grads.wrt(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        analytic_grads.push(grad);
    }
    let shapes: Vec<Vec<usize>> = ids.iter().map(|&id| store.get(id).shape().to_vec()).collect();
    (0..directions)
        .map(|_| {
            let dir = random_direction(&shapes, rng);
            let analytic = analytic_grads.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
            let shifted = |sign: f64| {
                let mut s = store.clone();
                for (&id, d) in ids.iter().zip(&dir) {
                    s.get_mut(id).axpy(sign * step, d);
                }
                let mut g = Graph::new();
                let out = f(&s, &mut g);
                g.value(out).item()
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
            DirectionalCheck { analytic, numeric }
        })
        .collect()
}

pub fn max_relative_error(checks: &[DirectionalCheck]) -> f64 {
    checks.iter().map(DirectionalCheck::relative_error).fold(0.0, f64::max)
}
