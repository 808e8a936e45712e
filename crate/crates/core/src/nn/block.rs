use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{xavier, Bound, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Widths of one encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d_head == 0 || self.d_ff == 0 {
            return Err(Error::dim(format!("block widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Projections of one attention head, each `d×d_head`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![d], S::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], lit(eps))
    }
}

/// Pre-LN transformer encoder block:
/// `y = LN₁(x + MHA(LN₁(x)))`, `out = LN₂(y + FFN(LN₂(y)))`.
///
/// Every operation is either a row map or attention without positions, so the
/// block commutes with any reordering of the rows of a sequence.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub dims: BlockDims,
    pub heads: Vec<HeadParams>,
    /// `(heads·d_head)×d`.
    pub wo: ParamId,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub eps: f64,
}

/// Single-head self-attention `softmax(XW_q (XW_k)ᵀ · scale) XW_v` per sequence.
pub fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    seq_len: usize,
    scale: S,
) -> Result<Var> {
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    g.attention(q, k, v, seq_len, scale)
}

impl EncoderBlock {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dims: BlockDims,
        eps: f64,
    ) -> Result<Self> {
        dims.validate()?;
        let heads = (0..dims.heads)
            .map(|h| HeadParams {
                wq: store.add(format!("{name}.head{h}.wq"), xavier(rng, dims.d, dims.d_head)),
                wk: store.add(format!("{name}.head{h}.wk"), xavier(rng, dims.d, dims.d_head)),
                wv: store.add(format!("{name}.head{h}.wv"), xavier(rng, dims.d, dims.d_head)),
            })
            .collect();
        let wo = store.add(format!("{name}.wo"), xavier(rng, dims.heads * dims.d_head, dims.d));
        let ln1 = LayerNormParams::new(store, &format!("{name}.ln1"), dims.d);
        let ln2 = LayerNormParams::new(store, &format!("{name}.ln2"), dims.d);
        let ffn_in = Linear::new(store, rng, &format!("{name}.ffn_in"), dims.d, dims.d_ff);
        let ffn_out = Linear::new(store, rng, &format!("{name}.ffn_out"), dims.d_ff, dims.d);
        Ok(Self {
            dims,
            heads,
            wo,
            ln1,
            ln2,
            ffn_in,
            ffn_out,
            eps,
        })
    }

    pub fn scale<S: Scalar>(&self) -> S {
        lit(1.0 / (self.dims.d_head as f64).sqrt())
    }

    /// `Concat(SA₁(x), …, SA_H(x))·W_O`.
    pub fn multi_head_attention<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        let scale = self.scale();
        let outs = self
            .heads
            .iter()
            .map(|h| self_attention(g, x, p[h.wq], p[h.wk], p[h.wv], seq_len, scale))
            .collect::<Result<Vec<_>>>()?;
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        g.matmul(cat, p[self.wo])
    }

    pub fn feed_forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ffn_in.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.ffn_out.forward(g, p, h)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        let n1 = self.ln1.forward(g, p, x, self.eps)?;
        let a = self.multi_head_attention(g, p, n1, seq_len)?;
        let r1 = g.add(x, a)?;
        let y = self.ln1.forward(g, p, r1, self.eps)?;
        let n2 = self.ln2.forward(g, p, y, self.eps)?;
        let f = self.feed_forward(g, p, n2)?;
        let r2 = g.add(y, f)?;
        self.ln2.forward(g, p, r2, self.eps)
    }
}

/// A stack of encoder blocks applied in order.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        layers: usize,
        dims: BlockDims,
        eps: f64,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|l| EncoderBlock::new(store, rng, &format!("{name}.block{l}"), dims, eps))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, h, seq_len)?;
        }
        Ok(h)
    }

    /// Every parameter the stack reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            for h in &b.heads {
                ids.extend([h.wq, h.wk, h.wv]);
            }
            ids.extend([
                b.wo,
                b.ln1.gain,
                b.ln1.bias,
                b.ln2.gain,
                b.ln2.bias,
                b.ffn_in.w,
                b.ffn_in.b,
                b.ffn_out.w,
                b.ffn_out.b,
            ]);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: BlockDims = BlockDims {
        d: 6,
        heads: 2,
        d_head: 3,
        d_ff: 8,
    };

    fn rand_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(seed: u64, dims: BlockDims) -> (ParamStore<f64>, EncoderBlock, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, &mut rng, "b", dims, 1e-5).unwrap();
        // non-trivial norms so the gain/bias paths are exercised
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains(".ln") || store.name(id).ends_with(".b") {
                let mut t = store.get(id).clone();
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
                store.set(id, t).unwrap();
            }
        }
        (store, block, rng)
    }

    fn eval(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let vx = g.constant(x.clone()).unwrap();
        let y = f(&mut g, &p, vx).unwrap();
        g.value(y).clone()
    }

    fn row_vec_mat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
        (0..w.cols())
            .map(|j| x.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum())
            .collect()
    }

    #[test]
    fn single_frame_attention_has_closed_form() {
        let (store, block, mut rng) = setup(3, DIMS);
        let x = rand_rows(&mut rng, 1, 6);
        let got = eval(&store, &x, |g, p, v| block.multi_head_attention(g, p, v, 1));
        let mut cat = Vec::new();
        for h in &block.heads {
            cat.extend(row_vec_mat(x.row(0), store.get(h.wv)));
        }
        let want = row_vec_mat(&cat, store.get(block.wo));
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_head_matches_reference_attention() {
        let dims = BlockDims { heads: 1, ..DIMS };
        let (store, block, mut rng) = setup(4, dims);
        let t = 5;
        let x = rand_rows(&mut rng, t, 6);
        let got = eval(&store, &x, |g, p, v| block.multi_head_attention(g, p, v, t));

        let h = &block.heads[0];
        let q: Vec<Vec<f64>> = (0..t).map(|r| row_vec_mat(x.row(r), store.get(h.wq))).collect();
        let k: Vec<Vec<f64>> = (0..t).map(|r| row_vec_mat(x.row(r), store.get(h.wk))).collect();
        let v: Vec<Vec<f64>> = (0..t).map(|r| row_vec_mat(x.row(r), store.get(h.wv))).collect();
        let scale = 1.0 / 3f64.sqrt();
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut ctx = vec![0.0; 3];
            for j in 0..t {
                let w = scores[j].exp() / z;
                for c in 0..3 {
                    ctx[c] += w * v[j][c];
                }
            }
            let want = row_vec_mat(&ctx, store.get(block.wo));
            for (c, w) in want.iter().enumerate() {
                assert!((got.at(i, c) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_and_attention_commute_with_row_permutations() {
        let (store, block, mut rng) = setup(5, DIMS);
        let t = 7;
        let x = rand_rows(&mut rng, t, 6);
        let base_mha = eval(&store, &x, |g, p, v| block.multi_head_attention(g, p, v, t));
        let base = eval(&store, &x, |g, p, v| block.forward(g, p, v, t));
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..t).collect();
            perm.shuffle(&mut rng);
            let xp = x.permute_rows(&perm).unwrap();
            let mha = eval(&store, &xp, |g, p, v| block.multi_head_attention(g, p, v, t));
            let out = eval(&store, &xp, |g, p, v| block.forward(g, p, v, t));
            assert!(mha.max_abs_diff(&base_mha.permute_rows(&perm).unwrap()) <= 1e-9);
            assert!(out.max_abs_diff(&base.permute_rows(&perm).unwrap()) <= 1e-9);
        }
    }

    #[test]
    fn constant_rows_stay_constant() {
        let (store, block, mut rng) = setup(6, DIMS);
        let row = rand_rows(&mut rng, 1, 6);
        let x = Tensor::concat_rows(&[&row, &row, &row, &row]).unwrap();
        let out = eval(&store, &x, |g, p, v| block.forward(g, p, v, 4));
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn zero_weights_reduce_to_double_layer_norm() {
        let (mut store, block, mut rng) = setup(7, DIMS);
        let mut zero = |id: ParamId| {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        };
        for h in &block.heads {
            zero(h.wq);
            zero(h.wk);
            zero(h.wv);
        }
        for id in [block.wo, block.ffn_in.w, block.ffn_in.b, block.ffn_out.w, block.ffn_out.b] {
            zero(id);
        }
        let x = rand_rows(&mut rng, 5, 6);
        let out = eval(&store, &x, |g, p, v| block.forward(g, p, v, 5));
        let want = eval(&store, &x, |g, p, v| {
            let a = block.ln1.forward(g, p, v, 1e-5)?;
            block.ln2.forward(g, p, a, 1e-5)
        });
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn block_gradients_pass_finite_differences() {
        let dims = BlockDims {
            d: 4,
            heads: 2,
            d_head: 2,
            d_ff: 5,
        };
        let (store, block, mut rng) = setup(8, dims);
        let x = rand_rows(&mut rng, 6, 4);
        let w = rand_rows(&mut rng, 6, 4);
        let mut params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        params.push(x);
        let report = grad_check(
            |g, vars| {
                let p = Bound::from_vars(vars[..vars.len() - 1].to_vec());
                let y = block.forward(g, &p, vars[vars.len() - 1], 3)?;
                let wv = g.constant(w.clone())?;
                let s = g.mul(y, wv)?;
                g.sum(s)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error());
    }
}
