use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Sinusoidal table `T×d`: even columns `sin(pos / 10000^(2i/d))`, odd columns
/// the matching cosine.
pub fn positional_embedding<S: Scalar>(t: usize, d: usize) -> Result<Tensor<S>> {
    if t == 0 || d == 0 {
        return Err(Error::dim("positional table needs T ≥ 1 and d ≥ 1"));
    }
    if d % 2 != 0 {
        return Err(Error::dim(format!("sinusoidal table needs an even width, got {d}")));
    }
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            data.push(lit(angle.sin()));
            data.push(lit(angle.cos()));
        }
    }
    Tensor::new(vec![t, d], data)
}

/// Precomputed, non-trainable positional table up to `t_max` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding<S> {
    table: Tensor<S>,
}

impl<S: Scalar> PositionalEmbedding<S> {
    pub fn new(t_max: usize, d: usize) -> Result<Self> {
        Ok(Self {
            table: positional_embedding(t_max, d)?,
        })
    }

    /// Adopts an arbitrary table, e.g. one read back from a checkpoint.
    pub fn from_table(table: Tensor<S>) -> Self {
        Self { table }
    }

    pub fn t_max(&self) -> usize {
        self.table.rows()
    }

    pub fn d(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Tensor<S> {
        &self.table
    }

    /// First `t` rows, repeated for `batch` consecutive sequences.
    pub fn tiled(&self, t: usize, batch: usize) -> Result<Tensor<S>> {
        if t == 0 || t > self.t_max() {
            return Err(Error::dim(format!(
                "sequence length {t} outside 1..={}",
                self.t_max()
            )));
        }
        let head = self.table.slice_rows(0, t)?;
        let parts: Vec<&Tensor<S>> = std::iter::repeat(&head).take(batch).collect();
        Tensor::concat_rows(&parts)
    }
}
