//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Error between an analytic and a numeric derivative, relative to their
/// magnitude with a floor of one so that near-zero gradients are compared
/// absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn evaluate<S, F>(f: &F, params: &[Tensor<S>]) -> Result<Vec<f64>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Vec<Var>>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    f(&mut g, &vars)?
        .into_iter()
        .map(|out| {
            let t = g.value(out);
            if t.numel() != 1 {
                return Err(Error::contract("gradient check needs scalar-valued functions"));
            }
            Ok(to_f64(t.item()))
        })
        .collect()
}

/// Central-difference derivatives of several scalar outputs of `f`, indexed
/// `[output][parameter][element]`.
///
/// `f` must be deterministic; two unperturbed evaluations that disagree are
/// reported as a contract error.
pub fn numeric_gradients<S, F>(f: F, params: &[Tensor<S>], h: f64) -> Result<Vec<Vec<Vec<f64>>>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Vec<Var>>,
{
    let base = evaluate(&f, params)?;
    let again = evaluate(&f, params)?;
    if base.iter().zip(&again).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::contract(format!(
            "function is not deterministic: {base:?} then {again:?}"
        )));
    }
    let mut out: Vec<Vec<Vec<f64>>> = vec![params.iter().map(|p| vec![0.0; p.numel()]).collect(); base.len()];
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for pi in 0..params.len() {
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + lit::<S>(h);
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig - lit::<S>(h);
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            for (o, (p, m)) in plus.iter().zip(&minus).enumerate() {
                out[o][pi][e] = (p - m) / (2.0 * h);
            }
        }
    }
    Ok(out)
}

/// Worst relative error per parameter between analytic and expected derivatives.
pub fn compare_gradients(analytic: &[Vec<f64>], expected: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let params: Vec<ParamCheck> = analytic
        .iter()
        .zip(expected)
        .enumerate()
        .map(|(index, (a, n))| {
            let mut worst = (0.0, 0);
            for (e, (&x, &y)) in a.iter().zip(n).enumerate() {
                let err = relative_error(x, y);
                if err > worst.0 {
                    worst = (err, e);
                }
            }
            ParamCheck {
                index,
                max_rel_error: worst.0,
                worst_element: worst.1,
            }
        })
        .collect();
    let pass = params.iter().all(|c| c.max_rel_error <= tol);
    GradCheckReport { params, tol, pass }
}

/// Compares the graph's gradients of `f` at `params` against central differences
/// with step `h`.
///
/// `f` receives one leaf per parameter, in order. It must be deterministic; two
/// unperturbed evaluations that disagree are reported as a contract error.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| match g.grad(*v) {
            Some(t) => t.data().iter().map(|&x| to_f64(x)).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    let numeric = numeric_gradients(|g, v| Ok(vec![f(g, v)?]), params, h)?;
    Ok(compare_gradients(&analytic, &numeric[0], tol))
}
