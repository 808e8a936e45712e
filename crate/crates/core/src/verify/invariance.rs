use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TheoremReport;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::MetaTransModel;
use crate::nn::{mean_pool_time, self_attention, EncoderBlock};
use crate::params::Bound;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

/// Threshold the positional control must exceed to count as non-invariant.
const WITNESS_THRESHOLD: f64 = 1e-3;
const MAX_CHECK_FRAMES: usize = 32;

/// `n` uniformly random permutations of `0..t`.
pub fn random_permutations<R: Rng>(t: usize, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let mut p: Vec<usize> = (0..t).collect();
            p.shuffle(rng);
            p
        })
        .collect()
}

/// A random permutation other than the identity; needs `t ≥ 2`.
fn shuffled<R: Rng>(t: usize, rng: &mut R) -> Vec<usize> {
    loop {
        let mut p: Vec<usize> = (0..t).collect();
        p.shuffle(rng);
        if t < 2 || p.iter().enumerate().any(|(i, &v)| i != v) {
            return p;
        }
    }
}

fn gaussian<S: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let data = (0..rows * cols).map(|_| lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `‖f(PX) − f(X)‖∞` for one sequence `X` (rows are frames).
pub fn invariance_violation<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
    x: &Tensor<S>,
    perm: &[usize],
) -> Result<f64> {
    let base = f(x)?;
    let moved = f(&x.permute_rows(perm)?)?;
    Ok(to_f64(moved.max_abs_diff(&base)))
}

/// `‖f(PX) − P·f(X)‖∞` for one sequence `X` (rows are frames).
pub fn equivariance_violation<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
    x: &Tensor<S>,
    perm: &[usize],
) -> Result<f64> {
    let expected = f(x)?.permute_rows(perm)?;
    let moved = f(&x.permute_rows(perm)?)?;
    Ok(to_f64(moved.max_abs_diff(&expected)))
}

/// Runs `body` on a fresh inference graph with `x` as a constant.
fn eval<S: Scalar>(
    model: &MetaTransModel<S>,
    x: &Tensor<S>,
    body: impl Fn(&mut Graph<S>, &Bound, Var) -> Result<Var>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false)?;
    let vx = g.constant(x.clone())?;
    let out = body(&mut g, &p, vx)?;
    Ok(g.value(out).clone())
}

fn check_frames<S: Scalar>(model: &MetaTransModel<S>) -> usize {
    model.config.t_max.clamp(2, MAX_CHECK_FRAMES)
}

/// Theorem 1: the static stream ignores frame order. Every input is paired
/// with `n_perms` random reorderings, evaluated in one stacked pass. The
/// lemma chain and the positional control run as nested checks.
pub fn check_permutation_invariance<S: Scalar>(
    model: &MetaTransModel<S>,
    n_inputs: usize,
    n_perms: usize,
    tol: f64,
    seed: u64,
) -> Result<TheoremReport> {
    if !(tol > 0.0) {
        return Err(Error::contract("tolerance must be positive"));
    }
    let t = check_frames(model);
    let d = model.config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_inputs {
        let x: Tensor<S> = gaussian(t, d, &mut rng);
        let perms = random_permutations(t, n_perms, &mut rng);
        let mut parts = vec![x.clone()];
        for p in &perms {
            parts.push(x.permute_rows(p)?);
        }
        let stacked = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        let s = model.static_repr(&stacked, t)?;
        let base = s.row(0);
        for r in 1..s.rows() {
            for (a, b) in s.row(r).iter().zip(base) {
                worst = worst.max(to_f64((*a - *b).abs()));
            }
        }
    }
    let trials = n_inputs * n_perms;
    let mut report = TheoremReport::new("theorem1_static_invariance", trials, worst, tol, worst <= tol);
    report.checks = lemma_suite(model, 50, tol, seed.wrapping_add(1))?;
    report.checks.push(positional_witness(model, n_inputs.max(1), seed.wrapping_add(2))?);
    Ok(report)
}

fn lemma_report<S: Scalar>(
    name: &str,
    trials: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
    t: usize,
    d: usize,
    check: impl Fn(&Tensor<S>, &[usize]) -> Result<f64>,
) -> Result<TheoremReport> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = gaussian(t, d, rng);
        let perm = shuffled(t, rng);
        worst = worst.max(check(&x, &perm)?);
    }
    Ok(TheoremReport::new(name, trials, worst, tol, worst <= tol))
}

/// The appendix chain on the first block of the static stream: single-head
/// attention (A.1), column concatenation (A.2), multi-head attention (A.3),
/// row maps (A.4), the block and the stack (A.5), and pooled invariance (A.6).
pub fn lemma_suite<S: Scalar>(
    model: &MetaTransModel<S>,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<TheoremReport>> {
    let block: &EncoderBlock = model
        .m2
        .blocks
        .first()
        .ok_or_else(|| Error::contract("the static stream has no blocks"))?;
    let t = check_frames(model);
    let d = model.config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let seg = t;
    let head = &block.heads[0];
    let scale: S = block.scale();

    let mut out = Vec::new();
    out.push(lemma_report("lemma_a1_self_attention", trials, tol, rng, t, d, |x, p| {
        equivariance_violation(
            |x| eval(model, x, |g, b, v| self_attention(g, v, b[head.wq], b[head.wk], b[head.wv], seg, scale)),
            x,
            p,
        )
    })?);
    out.push(lemma_report("lemma_a2_concat", trials, tol, rng, t, d, |x: &Tensor<S>, p: &[usize]| {
        // `x` and its elementwise square stand in for two per-head outputs
        equivariance_violation(
            |x: &Tensor<S>| {
                let mut g = Graph::<S>::new();
                let a = g.constant(x.clone())?;
                let b = g.constant(x.map(|v| v * v))?;
                let c = g.concat_cols(&[a, b])?;
                Ok(g.value(c).clone())
            },
            x,
            p,
        )
    })?);
    out.push(lemma_report("lemma_a3_multi_head_attention", trials, tol, rng, t, d, |x, p| {
        equivariance_violation(|x| eval(model, x, |g, b, v| block.multi_head_attention(g, b, v, seg)), x, p)
    })?);
    out.push(lemma_report("lemma_a4_feed_forward", trials, tol, rng, t, d, |x, p| {
        equivariance_violation(|x| eval(model, x, |g, b, v| block.feed_forward(g, b, v)), x, p)
    })?);
    out.push(lemma_report("lemma_a4_layer_norm", trials, tol, rng, t, d, |x, p| {
        equivariance_violation(|x| eval(model, x, |g, b, v| block.ln1.forward(g, b, v, block.eps)), x, p)
    })?);
    out.push(lemma_report("lemma_a5_block", trials, tol, rng, t, d, |x, p| {
        equivariance_violation(|x| eval(model, x, |g, b, v| block.forward(g, b, v, seg)), x, p)
    })?);
    out.push(lemma_report("lemma_a5_stack", trials, tol, rng, t, d, |x, p| {
        equivariance_violation(|x| eval(model, x, |g, b, v| model.m2.forward(g, b, v, seg)), x, p)
    })?);
    out.push(lemma_report("lemma_a6_mean_pool", trials, tol, rng, t, d, |x, p| {
        invariance_violation(
            |x| {
                eval(model, x, |g, b, v| {
                    let h = model.m2.forward(g, b, v, seg)?;
                    mean_pool_time(g, h, seg)
                })
            },
            x,
            p,
        )
    })?);
    Ok(out)
}

/// Negative control: the temporal stream with positions, mean-pooled, is
/// order-sensitive. Passes when the largest deviation exceeds `1e-3`.
pub fn positional_witness<S: Scalar>(model: &MetaTransModel<S>, trials: usize, seed: u64) -> Result<TheoremReport> {
    let t = check_frames(model).min(model.config.t_max);
    if t < 2 {
        return Err(Error::contract("the positional control needs at least two frames"));
    }
    let d = model.config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = gaussian(t, d, &mut rng);
        let perm = shuffled(t, &mut rng);
        let v = invariance_violation(
            |x| {
                eval(model, x, |g, b, v| {
                    let z = model.forward_temporal(g, b, v, t)?;
                    mean_pool_time(g, z, t)
                })
            },
            &x,
            &perm,
        )?;
        worst = worst.max(v);
    }
    let mut r = TheoremReport::new(
        "m1_positional_control",
        trials,
        worst,
        WITNESS_THRESHOLD,
        worst > WITNESS_THRESHOLD,
    );
    r.notes.push("passes when the violation exceeds the tolerance".into());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> MetaTransModel<f64> {
        MetaTransModel::new(ModelConfig::desk(16, 8, 3), seed).unwrap()
    }

    #[test]
    fn identity_permutation_gives_exact_zero() {
        let m = model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Tensor<f64> = gaussian(8, 16, &mut rng);
        let id: Vec<usize> = (0..8).collect();
        let v = invariance_violation(|x| m.static_repr(x, 8), &x, &id).unwrap();
        assert_eq!(v, 0.0);
        let v = equivariance_violation(|x| m.temporal_repr(x, 8), &x, &id).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn random_model_is_invariant_and_lemmas_hold() {
        let r = check_permutation_invariance(&model(2), 20, 20, 1e-9, 7).unwrap();
        assert_eq!(r.trials, 400);
        assert!(r.all_pass(), "{}", r.to_json());
        assert_eq!(r.checks.len(), 9);
    }

    #[test]
    fn order_sensitive_map_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = gaussian(6, 4, &mut rng);
        let first_row = |x: &Tensor<f64>| x.slice_rows(0, 1);
        let v = invariance_violation(first_row, &x, &[1, 0, 2, 3, 4, 5]).unwrap();
        assert!(v > 1e-3);
        // a row map is equivariant but not invariant
        let square = |x: &Tensor<f64>| Ok(x.map(|v| v * v));
        assert!(equivariance_violation(square, &x, &[5, 4, 3, 2, 1, 0]).unwrap() == 0.0);
    }

    #[test]
    fn zero_positional_table_defeats_the_control() {
        let mut m = model(4);
        assert!(positional_witness(&m, 5, 0).unwrap().pass);
        m.set_positional_table(Tensor::zeros(vec![8, 16])).unwrap();
        let r = positional_witness(&m, 5, 0).unwrap();
        assert!(!r.pass && r.max_violation < 1e-9);
    }
}
