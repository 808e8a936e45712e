//! Sequence datasets and training batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source = 0,
    Target = 1,
}

impl Domain {
    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

/// `n` sequences of `t` frames with `d` features, stored sample-major then
/// frame-major. May be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSet<S> {
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub data: Vec<S>,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
}

impl<S: Scalar> VideoSet<S> {
    pub fn new(t: usize, d: usize, data: Vec<S>, labels: Option<Vec<usize>>, domain: Domain) -> Result<Self> {
        if t == 0 || d == 0 {
            return Err(Error::dim("sequences need T ≥ 1 and d ≥ 1"));
        }
        if data.len() % (t * d) != 0 {
            return Err(Error::dim(format!("{} values do not split into {t}×{d} samples", data.len())));
        }
        let n = data.len() / (t * d);
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dim(format!("{} labels for {n} samples", l.len())));
            }
        }
        Ok(Self {
            n,
            t,
            d,
            data,
            labels,
            domain,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sample(&self, i: usize) -> &[S] {
        let len = self.t * self.d;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// The listed samples stacked into a `(len·t)×d` tensor.
    pub fn stack(&self, idx: &[usize]) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(idx.len() * self.t * self.d);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(vec![idx.len() * self.t, self.d], data)
    }

    /// A new set holding the listed samples.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.t * self.d);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            n: idx.len(),
            t: self.t,
            d: self.d,
            data,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
        }
    }

    pub fn cast<T: Scalar>(&self) -> VideoSet<T> {
        VideoSet {
            n: self.n,
            t: self.t,
            d: self.d,
            data: self.data.iter().map(|v| T::from(*v).expect("scalar cast")).collect(),
            labels: self.labels.clone(),
            domain: self.domain,
        }
    }
}

/// One optimization batch: stacked sequences with their supervision.
#[derive(Clone, Debug)]
pub struct VideoBatch<S> {
    /// `(B·T)×d`.
    pub x: Tensor<S>,
    pub seq_len: usize,
    /// True class for source samples; `None` marks unlabeled target samples.
    pub class_label: Vec<Option<usize>>,
    pub domain_label: Vec<Domain>,
    pub pseudo_label: Vec<Option<usize>>,
    pub pseudo_active: bool,
}

impl<S: Scalar> VideoBatch<S> {
    pub fn len(&self) -> usize {
        self.class_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_label.is_empty()
    }

    /// Targets for the classification loss: true labels, plus pseudo-labels
    /// where no true label exists and pseudo-labels are active.
    pub fn supervision(&self) -> Vec<Option<usize>> {
        self.class_label
            .iter()
            .zip(&self.pseudo_label)
            .map(|(c, p)| c.or(if self.pseudo_active { *p } else { None }))
            .collect()
    }
}
