use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{xavier, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![1, fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.w])?;
        g.add_row(h, p[self.b])
    }
}

/// Affine layers with ReLU between consecutive layers; applied to every row.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub layers: Vec<Linear>,
}

impl MlpHead {
    /// `widths = [in, hidden.., out]`.
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP head needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h)?;
            }
            h = layer.forward(g, p, h)?;
        }
        Ok(h)
    }
}

/// Temporal mean over each sequence of `seq_len` consecutive rows.
pub fn mean_pool_time<S: Scalar>(g: &mut Graph<S>, x: Var, seq_len: usize) -> Result<Var> {
    g.mean_segments(x, seq_len)
}

pub fn gradient_reversal<S: Scalar>(g: &mut Graph<S>, x: Var, lambda: S) -> Result<Var> {
    g.grad_reverse(x, lambda)
}
