use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact 1-D Wasserstein-1 distance between two empirical measures.
///
/// Equal sizes use the sorted coupling. Unequal sizes integrate the gap
/// between the two step quantile functions over `[0, 1]`.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("wasserstein1_1d needs nonempty samples"));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    Ok(sorted_w1(&sa, &sb))
}

fn sorted_w1(sa: &[f64], sb: &[f64]) -> f64 {
    let (n, m) = (sa.len(), sb.len());
    if n == m {
        return sa.iter().zip(sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    // quantile breakpoints i/n and j/m on the common grid of n·m steps
    let (mut i, mut j, mut pos, mut acc) = (0usize, 0usize, 0usize, 0.0f64);
    let total = n * m;
    while pos < total {
        let next = ((i + 1) * m).min((j + 1) * n);
        acc += (next - pos) as f64 * (sa[i] - sb[j]).abs();
        pos = next;
        if pos == (i + 1) * m {
            i += 1;
        }
        if pos == (j + 1) * n {
            j += 1;
        }
    }
    acc / total as f64
}

/// `n` directions drawn uniformly from the unit sphere in `R^d`.
pub fn random_directions(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project(x: &Tensor<f64>, dir: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|r| x.row(r).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

/// Mean 1-D W1 of the row clouds `a` and `b` projected on the given directions.
pub fn sliced_w1_with(a: &Tensor<f64>, b: &Tensor<f64>, directions: &[Vec<f64>]) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim(format!("point clouds in R^{} and R^{}", a.cols(), b.cols())));
    }
    if directions.is_empty() {
        return Err(Error::contract("sliced_w1 needs at least one projection"));
    }
    if let Some(dir) = directions.iter().find(|dir| dir.len() != a.cols()) {
        return Err(Error::dim(format!("direction of length {} in R^{}", dir.len(), a.cols())));
    }
    let mut total = 0.0;
    for dir in directions {
        total += wasserstein1_1d(&project(a, dir), &project(b, dir))?;
    }
    Ok(total / directions.len() as f64)
}

/// Sliced W1 over `n_projections` random directions fixed by `seed`.
pub fn sliced_w1(a: &Tensor<f64>, b: &Tensor<f64>, n_projections: usize, seed: u64) -> Result<f64> {
    sliced_w1_with(a, b, &random_directions(a.cols(), n_projections, seed))
}
