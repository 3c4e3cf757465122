//! Central finite-difference gradient checking in 64-bit precision.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::graph::{Fault, Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Max relative error between the analytic gradient of scalar `f` at `x`
/// and central differences with step `eps`.
///
/// The per-element error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; returns the worst element
/// across all of them.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_impl(&f, inputs, eps, None)
}

#[doc(hidden)]
pub fn grad_check_many_with_fault<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    fault: Option<Fault>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_impl(&f, inputs, eps, fault)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], fault: Option<Fault>) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(fault) = fault {
        g.inject_fault(fault);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    ensure!(
        g.value(out).len() == 1,
        "grad_check: function must be scalar-valued, got shape {:?}",
        g.shape(out)
    );
    Ok((g, vars, out))
}

fn grad_check_impl<F>(f: &F, inputs: &[Tensor<f64>], eps: f64, fault: Option<Fault>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    ensure!(eps > 0.0, "grad_check: step must be positive");
    ensure!(
        inputs.iter().all(Tensor::all_finite),
        "grad_check: inputs must be finite"
    );
    let (mut g, vars, out) = evaluate(f, inputs, fault)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec())))
        .collect();
    drop(g);

    let scalar_at = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, out) = evaluate(f, perturbed, None)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = scalar_at(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = scalar_at(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Random values in `[lo, hi)`, one per cell of a grid of `n + 1` equal
/// cells, with the cell holding zero left empty. Values are pairwise at
/// least half a cell apart and a quarter cell away from zero, which keeps
/// max/ReLU kinks out of reach of a finite-difference step.
pub fn separated_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let cell = (hi - lo) / (n + 1) as f64;
    let skip = if lo < 0.0 && hi > 0.0 {
        ((-lo / cell) as usize).min(n)
    } else {
        n
    };
    let mut values: Vec<f64> = (0..=n)
        .filter(|&i| i != skip)
        .map(|i| lo + cell * (i as f64 + 0.25 + 0.5 * rng.random::<f64>()))
        .collect();
    values.shuffle(rng);
    Tensor::from_parts(shape.to_vec(), values)
}
