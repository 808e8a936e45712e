//! The two-stream MetaTrans network.
//!
//! `M1` encodes frames with positional embeddings added, `M2` encodes the raw
//! frames and averages over time. With no positional input and only row maps
//! and attention inside, `M2` is invariant to any reordering of the frames of
//! a sequence. The latent temporal embedding is `F = M1(X + P) − 1·M2(X)`.

mod checkpoint;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, read_params, write_checkpoint, write_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{mean_pool_time, BlockDims, Encoder, Linear, MlpHead, PositionalEmbedding};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub t_max: usize,
    /// Width of the video-level feature produced by the aggregation network.
    pub d_v: usize,
    /// Hidden width of the task and domain heads.
    pub head_hidden: usize,
    pub classes: usize,
    /// `M1` and `M2` read one encoder stack when true.
    pub share_encoder: bool,
}

impl ModelConfig {
    /// Small widths that train in seconds on one core.
    pub fn desk(d: usize, t_max: usize, classes: usize) -> Self {
        Self {
            d,
            heads: 4,
            d_head: (d / 4).max(1),
            d_ff: 2 * d,
            layers: 2,
            t_max,
            d_v: d,
            head_hidden: d,
            classes,
            share_encoder: true,
        }
    }

    /// Widths of the published configuration on 2048-dimensional features.
    pub fn paper(t_max: usize, classes: usize) -> Self {
        Self {
            d: 2048,
            heads: 8,
            d_head: 256,
            d_ff: 2048,
            layers: 4,
            t_max,
            d_v: 512,
            head_hidden: 512,
            classes,
            share_encoder: true,
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d: self.d,
            heads: self.heads,
            d_head: self.d_head,
            d_ff: self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if self.d % 2 != 0 {
            return Err(Error::dim(format!("feature width {} must be even", self.d)));
        }
        if self.layers == 0 || self.t_max == 0 || self.d_v == 0 || self.head_hidden == 0 {
            return Err(Error::dim("layers, t_max, d_v and head_hidden must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::dim("at least two classes are needed"));
        }
        Ok(())
    }
}

/// What is subtracted from the temporal stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StaticMode {
    /// `M2(X)`, the permutation-invariant static stream.
    Encoder,
    /// The temporal mean of `M1(X + P)`.
    PooledTemporal,
    /// Nothing; `F = M1(X + P)`.
    None,
}

/// Frame aggregation: a per-frame affine map with ReLU, temporal mean, then an
/// affine map to `d_v`. The first stage is optional.
#[derive(Clone, Debug)]
pub struct Fan {
    pub frame: Option<Linear>,
    pub out: Linear,
}

impl Fan {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, f: Var, seq_len: usize) -> Result<Var> {
        let h = match &self.frame {
            Some(l) => {
                let h = l.forward(g, p, f)?;
                g.relu(h)?
            }
            None => f,
        };
        let pooled = mean_pool_time(g, h, seq_len)?;
        self.out.forward(g, p, pooled)
    }
}

/// Graph handles produced by one forward pass over a batch of `B` sequences.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `(B·T)×d`.
    pub temporal: Var,
    /// `B×d`, absent when nothing is subtracted.
    pub static_repr: Option<Var>,
    /// `(B·T)×d`.
    pub features: Var,
    /// `B×d_v`.
    pub video: Var,
    /// `B×K`.
    pub task_logits: Var,
    /// `(B·T)×2`.
    pub frame_domain_logits: Var,
    /// `B×2`.
    pub video_domain_logits: Var,
}

#[derive(Debug)]
pub struct MetaTransModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub m1: Encoder,
    pub m2: Encoder,
    pub pos: PositionalEmbedding<S>,
    pub fan: Fan,
    pub task_head: MlpHead,
    pub domain_head_frame: MlpHead,
    pub domain_head_video: MlpHead,
    pos_reads: AtomicUsize,
}

impl<S: Scalar> Clone for MetaTransModel<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            m1: self.m1.clone(),
            m2: self.m2.clone(),
            pos: self.pos.clone(),
            fan: self.fan.clone(),
            task_head: self.task_head.clone(),
            domain_head_frame: self.domain_head_frame.clone(),
            domain_head_video: self.domain_head_video.clone(),
            pos_reads: AtomicUsize::new(self.pos_reads.load(Ordering::Relaxed)),
        }
    }
}

impl<S: Scalar> MetaTransModel<S> {
    /// Xavier-initialized weights, unit layer-norm gains and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = config.block_dims();
        let (m1, m2) = if config.share_encoder {
            let e = Encoder::new(&mut params, &mut rng, "encoder", config.layers, dims, LN_EPS)?;
            (e.clone(), e)
        } else {
            let a = Encoder::new(&mut params, &mut rng, "m1", config.layers, dims, LN_EPS)?;
            let b = Encoder::new(&mut params, &mut rng, "m2", config.layers, dims, LN_EPS)?;
            (a, b)
        };
        let fan = Fan {
            frame: Some(Linear::new(&mut params, &mut rng, "fan.frame", config.d, config.d_v)),
            out: Linear::new(&mut params, &mut rng, "fan.out", config.d_v, config.d_v),
        };
        let task_head = MlpHead::new(
            &mut params,
            &mut rng,
            "task",
            &[config.d_v, config.head_hidden, config.classes],
        );
        let domain_head_frame = MlpHead::new(&mut params, &mut rng, "domain_frame", &[config.d, config.head_hidden, 2]);
        let domain_head_video = MlpHead::new(&mut params, &mut rng, "domain_video", &[config.d_v, config.head_hidden, 2]);
        Ok(Self {
            pos: PositionalEmbedding::new(config.t_max, config.d)?,
            config,
            params,
            m1,
            m2,
            fan,
            task_head,
            domain_head_frame,
            domain_head_video,
            pos_reads: AtomicUsize::new(0),
        })
    }

    /// Number of times the positional table has been read.
    pub fn positional_reads(&self) -> usize {
        self.pos_reads.load(Ordering::Relaxed)
    }

    /// Replaces the positional table; a test seam for degenerate fixtures.
    pub fn set_positional_table(&mut self, table: Tensor<S>) -> Result<()> {
        if table.shape() != self.pos.table().shape() {
            return Err(Error::dim("positional table shape differs"));
        }
        self.pos = PositionalEmbedding::from_table(table);
        Ok(())
    }

    /// Parameters read by either encoder stream.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.m1.param_ids();
        if !self.config.share_encoder {
            ids.extend(self.m2.param_ids());
        }
        ids
    }

    fn check_input(&self, g: &Graph<S>, x: Var, seq_len: usize) -> Result<usize> {
        let t = g.value(x);
        if t.cols() != self.config.d {
            return Err(Error::dim(format!("input width {} but model width {}", t.cols(), self.config.d)));
        }
        if seq_len == 0 || t.rows() % seq_len != 0 {
            return Err(Error::dim(format!("{} rows do not split into sequences of {seq_len}", t.rows())));
        }
        Ok(t.rows() / seq_len)
    }

    /// `M1(X + P)`, per frame.
    pub fn forward_temporal(&self, g: &mut Graph<S>, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        let batch = self.check_input(g, x, seq_len)?;
        if seq_len > self.config.t_max {
            return Err(Error::dim(format!("{seq_len} frames exceed t_max {}", self.config.t_max)));
        }
        self.pos_reads.fetch_add(1, Ordering::Relaxed);
        let pos = g.constant(self.pos.tiled(seq_len, batch)?)?;
        let h = g.add(x, pos)?;
        self.m1.forward(g, p, h, seq_len)
    }

    /// `M2(X)`: encoder on the raw frames, then the temporal mean. One row per sequence.
    pub fn forward_static(&self, g: &mut Graph<S>, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        self.check_input(g, x, seq_len)?;
        let h = self.m2.forward(g, p, x, seq_len)?;
        mean_pool_time(g, h, seq_len)
    }

    /// The latent temporal embedding and the pieces it was built from.
    pub fn subtract_features(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        seq_len: usize,
        mode: StaticMode,
    ) -> Result<(Var, Option<Var>, Var)> {
        let z = self.forward_temporal(g, p, x, seq_len)?;
        let s = match mode {
            StaticMode::Encoder => Some(self.forward_static(g, p, x, seq_len)?),
            StaticMode::PooledTemporal => Some(mean_pool_time(g, z, seq_len)?),
            StaticMode::None => None,
        };
        let f = match s {
            Some(s) => {
                let rep = g.repeat_rows(s, seq_len)?;
                g.sub(z, rep)?
            }
            None => z,
        };
        Ok((z, s, f))
    }

    pub fn aggregate(&self, g: &mut Graph<S>, p: &Bound, f: Var, seq_len: usize) -> Result<Var> {
        self.fan.forward(g, p, f, seq_len)
    }

    /// Full forward pass. The gradient reversal with scale `lambda` sits
    /// between the features and both domain heads.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        seq_len: usize,
        lambda: S,
        mode: StaticMode,
    ) -> Result<Outputs> {
        let (temporal, static_repr, features) = self.subtract_features(g, p, x, seq_len, mode)?;
        let video = self.aggregate(g, p, features, seq_len)?;
        let task_logits = self.task_head.forward(g, p, video)?;
        let rf = g.grad_reverse(features, lambda)?;
        let frame_domain_logits = self.domain_head_frame.forward(g, p, rf)?;
        let rv = g.grad_reverse(video, lambda)?;
        let video_domain_logits = self.domain_head_video.forward(g, p, rv)?;
        Ok(Outputs {
            temporal,
            static_repr,
            features,
            video,
            task_logits,
            frame_domain_logits,
            video_domain_logits,
        })
    }

    /// `M2` on stacked sequences, evaluated outside any training graph.
    pub fn static_repr(&self, x: &Tensor<S>, seq_len: usize) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let vx = g.constant(x.clone())?;
        let s = self.forward_static(&mut g, &p, vx, seq_len)?;
        Ok(g.value(s).clone())
    }

    /// `M1` on stacked sequences, evaluated outside any training graph.
    pub fn temporal_repr(&self, x: &Tensor<S>, seq_len: usize) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let vx = g.constant(x.clone())?;
        let z = self.forward_temporal(&mut g, &p, vx, seq_len)?;
        Ok(g.value(z).clone())
    }

    /// Task logits `B×K` for stacked sequences.
    pub fn task_logits(&self, x: &Tensor<S>, seq_len: usize, mode: StaticMode) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let vx = g.constant(x.clone())?;
        let (_, _, f) = self.subtract_features(&mut g, &p, vx, seq_len, mode)?;
        let v = self.aggregate(&mut g, &p, f, seq_len)?;
        let logits = self.task_head.forward(&mut g, &p, v)?;
        Ok(g.value(logits).clone())
    }

    /// Rebuilds the architecture implied by `params` and adopts its values
    /// and the given positional table.
    pub fn from_params(params: ParamStore<S>, pos_table: Tensor<S>) -> Result<Self> {
        let config = infer_config(&params, pos_table.rows())?;
        let mut model = Self::new(config, 0)?;
        model
            .set_positional_table(pos_table)
            .map_err(|e| Error::format(checkpoint::POS_TABLE, e.to_string()))?;
        if model.params.len() != params.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} tensors, found {}", model.params.len(), params.len()),
            ));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = params
                .find(&name)
                .ok_or_else(|| Error::format("parameters", format!("missing `{name}`")))?;
            model
                .params
                .set(id, params.get(src).clone())
                .map_err(|e| Error::format(name.clone(), e.to_string()))?;
        }
        Ok(model)
    }
}

fn shape_of<S: Scalar>(params: &ParamStore<S>, name: &str) -> Result<Vec<usize>> {
    params
        .find(name)
        .map(|id| params.get(id).shape().to_vec())
        .ok_or_else(|| Error::format("parameters", format!("missing `{name}`")))
}

fn infer_config<S: Scalar>(params: &ParamStore<S>, t_max: usize) -> Result<ModelConfig> {
    let share_encoder = params.find("encoder.block0.head0.wq").is_some();
    let enc = if share_encoder { "encoder" } else { "m1" };
    let wq = shape_of(params, &format!("{enc}.block0.head0.wq"))?;
    let count = |pat: &dyn Fn(usize) -> String| (0..).take_while(|&i| params.find(&pat(i)).is_some()).count();
    let heads = count(&|h| format!("{enc}.block0.head{h}.wq"));
    let layers = count(&|l| format!("{enc}.block{l}.wo"));
    let ffn = shape_of(params, &format!("{enc}.block0.ffn_in.w"))?;
    let fan = shape_of(params, "fan.out.w")?;
    let task_hidden = shape_of(params, "task.0.w")?;
    let task_out = shape_of(params, "task.1.w")?;
    let config = ModelConfig {
        d: wq[0],
        heads,
        d_head: wq[1],
        d_ff: ffn[1],
        layers,
        t_max,
        d_v: fan[1],
        head_hidden: task_hidden[1],
        classes: task_out[1],
        share_encoder,
    };
    config
        .validate()
        .map_err(|e| Error::format("parameters", e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests;
