//! Central-difference gradient oracle.
//!
//! Runs entirely in `f64`: the analytic side is one backward pass, the
//! numeric side re-evaluates the forward pass with each input element
//! nudged by ±h. Neither side shares code with the other beyond the
//! forward kernels.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Entries where both gradients are below this magnitude count as agreeing.
const NEGLIGIBLE: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < NEGLIGIBLE {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Checks d(loss)/d(inputs) where `build` maps leaf vars to a scalar loss.
pub fn check_inputs<F>(
    name: &str,
    seed: u64,
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::detached().no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss)[0])
    };

    let mut work = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel_err = max_rel_err.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        seed,
        checked,
        max_rel_err,
        tolerance,
    })
}

/// Checks d(loss)/d(params) for a model evaluated through `forward`.
pub fn check_params<F>(
    name: &str,
    seed: u64,
    store: &ParamStore<f64>,
    h: f64,
    tolerance: f64,
    forward: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = forward(&mut g)?;
        g.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        for (id, gr) in g.param_grads() {
            grads[id.index()] = gr.to_vec();
        }
        grads
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s).no_grad();
        let loss = forward(&mut g)?;
        Ok(g.value(loss)[0])
    };

    let mut work = store.clone();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for id in store.ids() {
        if !store.trainable(id) {
            continue;
        }
        for j in 0..store.get(id).len() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel_err = max_rel_err.max(relative_error(analytic[id.index()][j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        seed,
        checked,
        max_rel_err,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_backward_rule() {
        let x = Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        // square with a derivative of x instead of 2x
        let report = check_inputs("bad_square", 0, &[x], DEFAULT_STEP, DEFAULT_TOLERANCE, |g, v| {
            let xs = g.value(v[0]).to_vec();
            let out = Tensor::new(vec![3], xs.iter().map(|a| a * a).collect()).unwrap();
            let sq = g.custom(&[v[0]], out, Box::new(|p, _, d| {
                vec![p[0].iter().zip(d).map(|(a, g)| a * g).collect()]
            }));
            g.sum_all(sq)
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.4);
    }

    #[test]
    fn accepts_correct_rule() {
        let x = Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let report = check_inputs("square", 0, &[x], DEFAULT_STEP, DEFAULT_TOLERANCE, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 3);
    }
}
