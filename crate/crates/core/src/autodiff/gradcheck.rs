//! Central-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward closure, so it stays
//! independent of every backward rule it is used to check.

use crate::autodiff::{Binding, Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all checked entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor so that entries whose true gradient
/// is ~0 do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic and numeric gradients of the scalar built by `build`.
///
/// `build` receives a fresh graph and leaf vars for `inputs` (all requiring
/// grad) and must return a scalar var.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with_floor(inputs, eps, 1e-3, build)
}

/// Gradcheck over every parameter of `store` plus `extra` inputs.
///
/// `build` gets a binding for the store and the vars of `extra`.
pub fn check_module<F>(
    store: &ParamStore<f64>,
    extra: &[Tensor<f64>],
    eps: f64,
    build: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &Binding, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let inputs: Vec<Tensor<f64>> = store
        .iter()
        .map(|(_, t)| t.clone())
        .chain(extra.iter().cloned())
        .collect();
    check(&inputs, eps, |g, vars| {
        let binding = Binding::from_vars(vars[..n].to_vec());
        build(g, &binding, &vars[n..])
    })
}

pub fn check_with_floor<F>(
    inputs: &[Tensor<f64>],
    eps: f64,
    floor: f64,
    build: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &build)?;
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let plus = eval(&probe, &build)?;
            probe[ti].data_mut()[j] = orig - eps;
            let minus = eval(&probe, &build)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][j];
            let r = rel_err(a, numeric, floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (ti, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

pub fn analytic_grads<F>(inputs: &[Tensor<f64>], build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

fn eval<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}
