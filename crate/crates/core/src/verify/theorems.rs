use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::wasserstein::{random_directions, wasserstein1_1d};
use super::TheoremReport;
use crate::error::{Error, Result};
use crate::model::MetaTransModel;
use crate::scalar::Scalar;
use crate::synth::Split;
use crate::tensor::Tensor;

const MODEL_CHUNK: usize = 64;

/// Per-domain pieces of the post-subtraction bound, all in 64-bit.
#[derive(Clone, Debug)]
pub struct DomainSamples {
    /// `(n·T)×d` frame representations `Z_t`.
    pub z: Tensor<f64>,
    /// `n×d` static estimates `M2(X)`.
    pub m2: Tensor<f64>,
    /// `n×d` ground-truth statics `s`.
    pub s: Tensor<f64>,
}

#[derive(Clone, Debug)]
pub struct Theorem3Input {
    pub seq_len: usize,
    pub source: DomainSamples,
    pub target: DomainSamples,
    pub label: String,
}

fn statics_tensor(split: &Split) -> Result<Tensor<f64>> {
    if split.statics.len() != split.set.n || split.statics.iter().any(|s| s.len() != split.set.d) {
        return Err(Error::contract("ground-truth statics are missing or do not match the samples"));
    }
    Tensor::new(vec![split.set.n, split.set.d], split.statics.concat())
}

fn raw_frames(split: &Split) -> Result<Tensor<f64>> {
    Tensor::new(vec![split.set.n * split.set.t, split.set.d], split.set.data.clone())
}

/// Temporal mean per sequence, computed as `x₀ + Σ(x_t − x₀)/T` so that a
/// constant sequence returns its frame exactly.
pub fn temporal_mean(x: &Tensor<f64>, seq_len: usize) -> Result<Tensor<f64>> {
    if seq_len == 0 || x.rows() % seq_len != 0 {
        return Err(Error::dim(format!("{} rows do not split into sequences of {seq_len}", x.rows())));
    }
    let (b, d) = (x.rows() / seq_len, x.cols());
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        let first = x.row(i * seq_len);
        for c in 0..d {
            let dev: f64 = (1..seq_len).map(|t| x.at(i * seq_len + t, c) - first[c]).sum();
            out.push(first[c] + dev / seq_len as f64);
        }
    }
    Tensor::new(vec![b, d], out)
}

fn chunked<S: Scalar>(
    set_data: &Tensor<S>,
    seq_len: usize,
    f: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Tensor<f64>> {
    let n = set_data.rows() / seq_len;
    let mut parts = Vec::new();
    for start in (0..n).step_by(MODEL_CHUNK) {
        let len = MODEL_CHUNK.min(n - start);
        parts.push(f(&set_data.slice_rows(start * seq_len, len * seq_len)?)?.cast::<f64>());
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

impl Theorem3Input {
    fn oracle(source: &Split, target: &Split, label: &str, m2: impl Fn(&Split) -> Result<Tensor<f64>>) -> Result<Self> {
        let domain = |sp: &Split| -> Result<DomainSamples> {
            Ok(DomainSamples {
                z: raw_frames(sp)?,
                m2: m2(sp)?,
                s: statics_tensor(sp)?,
            })
        };
        Ok(Self {
            seq_len: source.set.t,
            source: domain(source)?,
            target: domain(target)?,
            label: label.into(),
        })
    }

    /// Frames as `Z`, the temporal mean as `M2`.
    pub fn mean_oracle(source: &Split, target: &Split) -> Result<Self> {
        Self::oracle(source, target, "mean_oracle", |sp| temporal_mean(&raw_frames(sp)?, sp.set.t))
    }

    /// Frames as `Z`, the true statics as `M2`, so `e ≡ 0`.
    pub fn exact_oracle(source: &Split, target: &Split) -> Result<Self> {
        Self::oracle(source, target, "exact_oracle", statics_tensor)
    }

    /// Both streams of a model. `Z` lives in representation space while `s`
    /// stays in input space; the bound makes no assumption tying the two.
    pub fn from_model<S: Scalar>(model: &MetaTransModel<S>, source: &Split, target: &Split) -> Result<Self> {
        let domain = |sp: &Split| -> Result<DomainSamples> {
            let t = sp.set.t;
            let x: Tensor<S> = raw_frames(sp)?.cast();
            if sp.set.is_empty() {
                return Err(Error::contract("theorem 3 needs samples in both domains"));
            }
            Ok(DomainSamples {
                z: chunked(&x, t, |c| model.temporal_repr(c, t))?,
                m2: chunked(&x, t, |c| model.static_repr(c, t))?,
                s: statics_tensor(sp)?,
            })
        };
        Ok(Self {
            seq_len: source.set.t,
            source: domain(source)?,
            target: domain(target)?,
            label: "model".into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Options {
    pub n_projections: usize,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Restrict to one frame index instead of pooling all frames.
    pub frame: Option<usize>,
}

impl Default for Theorem3Options {
    fn default() -> Self {
        Self {
            n_projections: 50,
            n_bootstrap: 50,
            seed: 0,
            frame: None,
        }
    }
}

/// Projected residuals of one domain: `proj[k][row]` for `F` and `F̃`, and
/// the per-sample error norms.
struct Projected {
    f: Vec<Vec<f64>>,
    ideal: Vec<Vec<f64>>,
    err: Vec<f64>,
    rows_per_sample: usize,
}

fn project_domain(ds: &DomainSamples, seq_len: usize, frame: Option<usize>, dirs: &[Vec<f64>]) -> Result<Projected> {
    let (n, d) = (ds.s.rows(), ds.s.cols());
    if ds.m2.rows() != n || ds.z.rows() != n * seq_len || ds.z.cols() != d || ds.m2.cols() != d {
        return Err(Error::dim("theorem 3 inputs disagree on sample count or width"));
    }
    if n == 0 {
        return Err(Error::contract("theorem 3 needs samples in both domains"));
    }
    let frames: Vec<usize> = match frame {
        Some(t) if t >= seq_len => return Err(Error::contract(format!("frame {t} out of {seq_len}"))),
        Some(t) => vec![t],
        None => (0..seq_len).collect(),
    };
    let mut f = vec![Vec::with_capacity(n * frames.len()); dirs.len()];
    let mut ideal = f.clone();
    let mut err = Vec::with_capacity(n);
    for i in 0..n {
        let (m2, s) = (ds.m2.row(i), ds.s.row(i));
        err.push(m2.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        for &t in &frames {
            let z = ds.z.row(i * seq_len + t);
            for (k, dir) in dirs.iter().enumerate() {
                let (mut pf, mut pi) = (0.0, 0.0);
                for c in 0..d {
                    pf += (z[c] - m2[c]) * dir[c];
                    pi += (z[c] - s[c]) * dir[c];
                }
                f[k].push(pf);
                ideal[k].push(pi);
            }
        }
    }
    Ok(Projected {
        f,
        ideal,
        err,
        rows_per_sample: frames.len(),
    })
}

fn gather(v: &[f64], idx: &[usize], per: usize) -> Vec<f64> {
    idx.iter().flat_map(|&i| v[i * per..(i + 1) * per].iter().copied()).collect()
}

/// `(LHS, RHS)` of the bound on the samples selected by `is` and `it`.
fn bound_terms(ps: &Projected, pt: &Projected, is: &[usize], it: &[usize]) -> Result<(f64, f64, [f64; 3])> {
    let k = ps.f.len();
    let (mut lhs, mut ideal) = (0.0, 0.0);
    for j in 0..k {
        let (fs, ft) = (gather(&ps.f[j], is, ps.rows_per_sample), gather(&pt.f[j], it, pt.rows_per_sample));
        lhs += wasserstein1_1d(&fs, &ft)?;
        let (gs, gt) = (
            gather(&ps.ideal[j], is, ps.rows_per_sample),
            gather(&pt.ideal[j], it, pt.rows_per_sample),
        );
        ideal += wasserstein1_1d(&gs, &gt)?;
    }
    let (lhs, ideal) = (lhs / k as f64, ideal / k as f64);
    let es = is.iter().map(|&i| ps.err[i]).sum::<f64>() / is.len() as f64;
    let et = it.iter().map(|&i| pt.err[i]).sum::<f64>() / it.len() as f64;
    Ok((lhs, ideal + es + et, [ideal, es, et]))
}

/// Theorem 3: `W1(F_S, F_T) ≤ W1(F̃_S, F̃_T) + E_S‖e‖ + E_T‖e‖`, with W1
/// replaced by sliced W1 over shared directions. The slack is three bootstrap
/// standard errors of `LHS − RHS`, resampling whole sequences.
pub fn verify_theorem3(input: &Theorem3Input, opts: &Theorem3Options) -> Result<TheoremReport> {
    if opts.n_projections == 0 {
        return Err(Error::contract("at least one projection is needed"));
    }
    let d = input.source.s.cols();
    let dirs = random_directions(d, opts.n_projections, opts.seed);
    let ps = project_domain(&input.source, input.seq_len, opts.frame, &dirs)?;
    let pt = project_domain(&input.target, input.seq_len, opts.frame, &dirs)?;
    let all_s: Vec<usize> = (0..ps.err.len()).collect();
    let all_t: Vec<usize> = (0..pt.err.len()).collect();
    let (lhs, rhs, [ideal, es, et]) = bound_terms(&ps, &pt, &all_s, &all_t)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let mut gaps = Vec::with_capacity(opts.n_bootstrap);
    for _ in 0..opts.n_bootstrap {
        let is: Vec<usize> = (0..all_s.len()).map(|_| rng.gen_range(0..all_s.len())).collect();
        let it: Vec<usize> = (0..all_t.len()).map(|_| rng.gen_range(0..all_t.len())).collect();
        let (l, r, _) = bound_terms(&ps, &pt, &is, &it)?;
        gaps.push(l - r);
    }
    let se = if gaps.len() > 1 {
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (gaps.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let slack = 3.0 * se;
    let name = match opts.frame {
        Some(t) => format!("theorem3_{}_frame{t}", input.label),
        None => format!("theorem3_{}", input.label),
    };
    let mut r = TheoremReport::new(name, 1, (lhs - rhs).max(0.0), slack, lhs <= rhs + slack);
    r.bound_lhs = vec![lhs];
    r.bound_rhs = vec![rhs];
    r.notes = vec![
        format!("ideal_discrepancy {ideal:.6}"),
        format!("source_error {es:.6}"),
        format!("target_error {et:.6}"),
        format!("bootstrap_se {se:.6}"),
    ];
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Options {
    pub t_grid: Vec<usize>,
    pub sigma: f64,
    pub d: usize,
    pub n_samples: usize,
    pub delta: f64,
    pub seed: u64,
    /// Stability constant `L` in the high-probability bound.
    pub lipschitz: f64,
    /// Accepted interval for the log-log slope of the median error.
    pub slope_range: (f64, f64),
}

impl Theorem4Options {
    pub fn oracle_defaults() -> Self {
        Self {
            t_grid: vec![8, 16, 32, 64, 128, 256, 512],
            sigma: 1.0,
            d: 16,
            n_samples: 500,
            delta: 0.05,
            seed: 0,
            lipschitz: 1.0,
            slope_range: (-0.6, -0.4),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = match (self.t_grid.iter().min(), self.t_grid.iter().max()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => return Err(Error::contract("empty T grid")),
        };
        if self.t_grid.len() < 4 || lo == 0 || hi < 10 * lo {
            return Err(Error::contract("the T grid needs at least 4 values spanning a decade"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.sigma >= 0.0) || self.d == 0 || self.n_samples == 0 {
            return Err(Error::contract("need δ in (0, 1), σ ≥ 0, d ≥ 1 and samples"));
        }
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn log_log_slope(ts: &[usize], ys: &[f64]) -> f64 {
    let xs: Vec<f64> = ts.iter().map(|&t| (t as f64).ln()).collect();
    let ls: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ls.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ls).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn row_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Theorem 4 on `x_t = s + u_t` with Gaussian `s ~ N(0, I)` and
/// `u_t ~ N(0, σ²I)`. `estimator` maps stacked `(B·T)×d` sequences to `B×d`.
///
/// Three nested checks: calibration on constant sequences (`ε_cal`, reported),
/// the log-log slope of the median calibration-removed error
/// `‖M2(X) − M2(s·1ᵀ)‖`, and the fraction of samples with
/// `‖M2(X) − s‖ > ε_cal + Lσ√(2d·log(2d/δ)/T)`, which must not exceed δ.
pub fn verify_theorem4(
    estimator: &dyn Fn(&Tensor<f64>, usize) -> Result<Tensor<f64>>,
    opts: &Theorem4Options,
) -> Result<TheoremReport> {
    opts.validate()?;
    let d = opts.d;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut medians, mut exceed, mut bounds, mut cal) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &t in &opts.t_grid {
        let (mut resid, mut over, mut eps_cal) = (Vec::with_capacity(opts.n_samples), 0usize, 0.0f64);
        let mut errs = Vec::with_capacity(opts.n_samples);
        let mut done = 0;
        while done < opts.n_samples {
            let b = MODEL_CHUNK.min(opts.n_samples - done);
            let statics: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let mut x = Vec::with_capacity(b * t * d);
            let mut constant = Vec::with_capacity(b * t * d);
            for s in &statics {
                for _ in 0..t {
                    for &v in s {
                        x.push(v + opts.sigma * rng.sample::<f64, _>(StandardNormal));
                    }
                    constant.extend_from_slice(s);
                }
            }
            let est = estimator(&Tensor::new(vec![b * t, d], x)?, t)?;
            let calib = estimator(&Tensor::new(vec![b * t, d], constant)?, t)?;
            for (i, s) in statics.iter().enumerate() {
                eps_cal = eps_cal.max(row_dist(calib.row(i), s));
                resid.push(row_dist(est.row(i), calib.row(i)));
                errs.push(row_dist(est.row(i), s));
            }
            done += b;
        }
        let radius = opts.lipschitz * opts.sigma * (2.0 * d as f64 * (2.0 * d as f64 / opts.delta).ln() / t as f64).sqrt();
        let bound = eps_cal + radius;
        over += errs.iter().filter(|&&e| e > bound).count();
        medians.push(median(&mut resid));
        exceed.push(over as f64 / opts.n_samples as f64);
        bounds.push(bound);
        cal.push(eps_cal);
    }

    let max_cal = cal.iter().cloned().fold(0.0, f64::max);
    let mut calibration = TheoremReport::new("theorem4_calibration", opts.t_grid.len(), max_cal, max_cal, true);
    calibration.notes.push("ε_cal is measured and folded into the bound, not tested".into());

    let (lo, hi) = opts.slope_range;
    let rate = if medians.iter().all(|&m| m == 0.0) {
        let mut r = TheoremReport::new("theorem4_rate", opts.t_grid.len(), 0.0, 0.0, opts.sigma == 0.0);
        r.notes.push("all errors equal ε_cal; the rate is vacuous".into());
        r
    } else if medians.iter().any(|&m| m <= 0.0) {
        TheoremReport::new("theorem4_rate", opts.t_grid.len(), f64::MAX, 0.0, false)
    } else {
        let slope = log_log_slope(&opts.t_grid, &medians);
        let off = (lo - slope).max(slope - hi).max(0.0);
        let mut r = TheoremReport::new("theorem4_rate", opts.t_grid.len(), off, 0.0, off == 0.0);
        r.notes.push(format!("slope {slope:.4} accepted in [{lo}, {hi}]"));
        r
    };
    let rate_medians = medians.clone();

    let worst = exceed.iter().cloned().fold(0.0, f64::max);
    let mut hp = TheoremReport::new("theorem4_high_probability", opts.t_grid.len(), worst, opts.delta, worst <= opts.delta);
    hp.bound_lhs = exceed;

    let mut r = TheoremReport::new(
        "theorem4",
        opts.t_grid.len() * opts.n_samples,
        rate.max_violation.max((worst - opts.delta).max(0.0)),
        opts.delta,
        rate.pass && hp.pass,
    );
    r.bound_lhs = rate_medians;
    r.bound_rhs = bounds;
    r.notes.push(format!("T grid {:?}", opts.t_grid));
    r.checks = vec![calibration, rate, hp];
    Ok(r)
}

/// Slope of the median error alone; convenient for reports on learned models.
pub fn rate_slope(report: &TheoremReport) -> Option<f64> {
    report
        .checks
        .iter()
        .find(|c| c.theorem == "theorem4_rate")?
        .notes
        .iter()
        .find_map(|n| n.strip_prefix("slope ")?.split_whitespace().next()?.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_domain_pair, GeneratorSpec, SplitCounts};

    fn small_pair(seed: u64) -> crate::synth::DomainPair {
        let mut spec = GeneratorSpec::benchmark(seed);
        spec.n_per_domain = SplitCounts { train: 8, eval: 64 };
        generate_domain_pair(&spec).unwrap()
    }

    #[test]
    fn temporal_mean_is_exact_on_constant_sequences() {
        let x = Tensor::from_f64(vec![6, 2], &[0.1, 0.7, 0.1, 0.7, 0.1, 0.7, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = temporal_mean(&x, 3).unwrap();
        assert_eq!(m.row(0), &[0.1, 0.7]);
        assert!((m.at(1, 0) - 3.0).abs() < 1e-15 && (m.at(1, 1) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn exact_oracle_collapses_to_the_ideal_term() {
        let p = small_pair(1);
        let inp = Theorem3Input::exact_oracle(&p.source_eval, &p.target_eval).unwrap();
        let r = verify_theorem3(&inp, &Theorem3Options::default()).unwrap();
        assert!(r.pass);
        assert!((r.bound_lhs[0] - r.bound_rhs[0]).abs() < 1e-12);
    }

    #[test]
    fn mean_oracle_satisfies_the_bound() {
        for seed in 0..3 {
            let p = small_pair(seed);
            let inp = Theorem3Input::mean_oracle(&p.source_eval, &p.target_eval).unwrap();
            let opts = Theorem3Options { seed, ..Default::default() };
            let r = verify_theorem3(&inp, &opts).unwrap();
            assert!(r.pass && r.bound_lhs[0] <= r.bound_rhs[0], "{}", r.to_json());
            let per_t = verify_theorem3(&inp, &Theorem3Options { frame: Some(3), ..opts }).unwrap();
            assert!(per_t.pass);
        }
    }

    #[test]
    fn missing_statics_is_a_contract_error() {
        let mut p = small_pair(2);
        p.target_eval.statics.clear();
        assert!(matches!(
            Theorem3Input::mean_oracle(&p.source_eval, &p.target_eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mean_oracle_rate_and_tail() {
        let opts = Theorem4Options {
            n_samples: 200,
            ..Theorem4Options::oracle_defaults()
        };
        let r = verify_theorem4(&temporal_mean, &opts).unwrap();
        assert!(r.all_pass(), "{}", r.to_json());
        let slope = rate_slope(&r).unwrap();
        assert!((slope + 0.5).abs() < 0.1);
        assert_eq!(r.checks[0].max_violation, 0.0);
    }

    #[test]
    fn noiseless_error_equals_calibration() {
        let opts = Theorem4Options {
            sigma: 0.0,
            n_samples: 20,
            ..Theorem4Options::oracle_defaults()
        };
        let r = verify_theorem4(&temporal_mean, &opts).unwrap();
        assert!(r.all_pass());
        assert!(r.bound_lhs.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn grid_must_span_a_decade() {
        let opts = Theorem4Options {
            t_grid: vec![8, 16, 32, 64],
            ..Theorem4Options::oracle_defaults()
        };
        assert!(verify_theorem4(&temporal_mean, &opts).is_err());
    }
}
