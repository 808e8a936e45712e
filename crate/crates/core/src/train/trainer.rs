use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamParams, AdamState};
use super::loss::{total_loss, LossSpec};
use super::{EpochRecord, ExperimentReport, FinalRecord, TrainConfig};
use crate::autodiff::Graph;
use crate::data::{Domain, VideoBatch, VideoSet};
use crate::error::{Error, Result};
use crate::model::{MetaTransModel, StaticMode};
use crate::scalar::{to_f64, Scalar};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 64;

/// Labeled held-out sets used only for reporting accuracy.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a, S> {
    pub source: &'a VideoSet<S>,
    pub target: &'a VideoSet<S>,
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<(usize, S)> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            // strict comparison keeps the smaller index on ties
            let best = (1..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let max = row[best];
            let z: S = row.iter().map(|&v| (v - max).exp()).sum();
            (best, S::one() / z)
        })
        .collect()
}

fn logits_for<S: Scalar>(model: &MetaTransModel<S>, set: &VideoSet<S>, mode: StaticMode) -> Result<Vec<Tensor<S>>> {
    let idx: Vec<usize> = (0..set.n).collect();
    idx.chunks(EVAL_CHUNK)
        .map(|c| model.task_logits(&set.stack(c)?, set.t, mode))
        .collect()
}

/// Argmax class per sample, ties resolved toward the smaller index.
pub fn predict<S: Scalar>(model: &MetaTransModel<S>, set: &VideoSet<S>, mode: StaticMode) -> Result<Vec<usize>> {
    Ok(logits_for(model, set, mode)?
        .iter()
        .flat_map(|l| argmax_rows(l).into_iter().map(|(k, _)| k))
        .collect())
}

/// Predicted labels from the given model state. With a threshold, samples
/// whose top softmax probability falls below it get no label.
pub fn generate_pseudo_labels<S: Scalar>(
    model: &MetaTransModel<S>,
    set: &VideoSet<S>,
    mode: StaticMode,
    threshold: Option<f64>,
) -> Result<Vec<Option<usize>>> {
    Ok(logits_for(model, set, mode)?
        .iter()
        .flat_map(argmax_rows)
        .map(|(k, p)| match threshold {
            Some(t) if to_f64(p) < t => None,
            _ => Some(k),
        })
        .collect())
}

/// Percentage of correctly classified samples; zero for an empty set.
pub fn accuracy<S: Scalar>(model: &MetaTransModel<S>, set: &VideoSet<S>, mode: StaticMode) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let labels = set
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("accuracy needs a labeled set"))?;
    let pred = predict(model, set, mode)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / set.n as f64)
}

/// Stateful epoch loop over one source and one target training set.
pub struct Trainer<'a, S: Scalar> {
    pub model: MetaTransModel<S>,
    pub config: TrainConfig,
    source: &'a VideoSet<S>,
    target: &'a VideoSet<S>,
    state: AdamState<S>,
    rng: ChaCha8Rng,
    epoch: usize,
    pseudo: Vec<Option<usize>>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(source: &'a VideoSet<S>, target: &'a VideoSet<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        for (name, set) in [("source", source), ("target", target)] {
            if set.d != m.d || set.t > m.t_max {
                return Err(Error::config(
                    name,
                    format!("{}×{} sequences do not fit the model ({} features, at most {} frames)", set.t, set.d, m.d, m.t_max),
                ));
            }
        }
        if source.is_empty() || source.labels.is_none() {
            return Err(Error::config("source", "training needs labeled source samples"));
        }
        if config.variant.uses_target() && target.is_empty() {
            return Err(Error::config("target", "this variant needs target samples"));
        }
        let model = MetaTransModel::new(config.model.clone(), config.seed)?;
        let state = AdamState::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            config,
            source,
            target,
            state,
            rng,
            epoch: 0,
            pseudo: vec![None; target.n],
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn hp(&self) -> AdamParams {
        AdamParams::new(self.config.learning_rate, self.config.weight_decay)
    }

    /// Pseudo-label mask of the current epoch; never active before `pseudo_start_epoch`.
    pub fn pseudo_active(&self) -> bool {
        self.config.variant.uses_target() && self.epoch >= self.config.pseudo_start_epoch
    }

    fn build_batch(&self, src: &[usize], tgt: &[usize]) -> Result<VideoBatch<S>> {
        let xs = self.source.stack(src)?;
        let x = if tgt.is_empty() {
            xs
        } else {
            Tensor::concat_rows(&[&xs, &self.target.stack(tgt)?])?
        };
        let mut class_label: Vec<Option<usize>> = src.iter().map(|&i| self.source.label(i)).collect();
        class_label.extend(std::iter::repeat(None).take(tgt.len()));
        let mut pseudo_label = vec![None; src.len()];
        pseudo_label.extend(tgt.iter().map(|&i| self.pseudo[i]));
        let mut domain_label = vec![Domain::Source; src.len()];
        domain_label.extend(std::iter::repeat(Domain::Target).take(tgt.len()));
        Ok(VideoBatch {
            x,
            seq_len: self.source.t,
            class_label,
            domain_label,
            pseudo_label,
            pseudo_active: self.pseudo_active(),
        })
    }

    /// Runs one epoch and returns the mean losses `(cls, adv)`.
    pub fn run_epoch(&mut self) -> Result<(f64, f64)> {
        let cfg = &self.config;
        let variant = cfg.variant;
        let mode = variant.static_mode();
        if self.pseudo_active() {
            // parameters here are those at the end of the previous epoch
            self.pseudo = generate_pseudo_labels(&self.model, self.target, mode, cfg.pseudo_threshold)?;
        }
        let spec = LossSpec {
            lambda1: cfg.effective_lambda(),
            mode,
            adversarial: variant.adversarial() && (cfg.adversarial_warmup || self.epoch >= cfg.pseudo_start_epoch),
        };
        let half = cfg.batch_size / 2;
        let mut src: Vec<usize> = (0..self.source.n).collect();
        src.shuffle(&mut self.rng);
        let mut tgt: Vec<usize> = (0..self.target.n).collect();
        tgt.shuffle(&mut self.rng);

        let hp = self.hp();
        let (mut sum_cls, mut sum_adv, mut steps) = (0.0, 0.0, 0usize);
        for (s, chunk) in src.chunks(half).enumerate() {
            let t_idx: Vec<usize> = if variant.uses_target() {
                (0..chunk.len()).map(|j| tgt[(s * half + j) % tgt.len()]).collect()
            } else {
                Vec::new()
            };
            let batch = self.build_batch(chunk, &t_idx)?;
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g, true)?;
            let epoch = self.epoch;
            let parts = total_loss(&mut g, &self.model, &p, &batch, &spec)
                .map_err(|e| annotate(e, epoch, s))?;
            g.backward(parts.total).map_err(|e| annotate(e, epoch, s))?;
            let grads = self.model.params.grads_from(&g, &p);
            adam_step(&mut self.model.params, &grads, &mut self.state, &hp).map_err(|e| annotate(e, epoch, s))?;
            sum_cls += to_f64(g.value(parts.cls).item());
            sum_adv += parts.adv.map_or(0.0, |a| to_f64(g.value(a).item()));
            steps += 1;
        }
        self.epoch += 1;
        Ok((sum_cls / steps as f64, sum_adv / steps as f64))
    }

    /// Runs every remaining epoch, calling `on_epoch` after each.
    pub fn run<F>(mut self, eval: &EvalSets<'_, S>, mut on_epoch: F) -> Result<(MetaTransModel<S>, ExperimentReport)>
    where
        F: FnMut(&EpochRecord, &MetaTransModel<S>) -> Result<()>,
    {
        let mode = self.config.variant.static_mode();
        let mut records = Vec::with_capacity(self.config.epochs);
        while self.epoch < self.config.epochs {
            let pseudo_active = self.pseudo_active();
            let (loss_cls, loss_adv) = self.run_epoch()?;
            let record = EpochRecord {
                epoch: self.epoch - 1,
                loss_cls,
                loss_adv,
                source_acc: accuracy(&self.model, eval.source, mode)?,
                target_acc: accuracy(&self.model, eval.target, mode)?,
                pseudo_active,
            };
            log::debug!(
                "epoch {} cls {:.4} adv {:.4} src {:.1} tgt {:.1}",
                record.epoch,
                record.loss_cls,
                record.loss_adv,
                record.source_acc,
                record.target_acc
            );
            on_epoch(&record, &self.model)?;
            records.push(record);
        }
        let last = records.last().expect("at least one epoch");
        let final_ = FinalRecord {
            lambda1: self.config.effective_lambda(),
            target_acc: last.target_acc,
            source_acc: last.source_acc,
            seed: self.config.seed,
            preset: self.config.preset.clone(),
            variant: self.config.variant,
        };
        Ok((
            self.model,
            ExperimentReport {
                epochs: records,
                final_,
            },
        ))
    }
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, step {step}: {msg}")),
        other => other,
    }
}

/// Trains a fresh model; the report carries per-epoch losses and accuracies.
pub fn train<S: Scalar>(
    source: &VideoSet<S>,
    target: &VideoSet<S>,
    eval: &EvalSets<'_, S>,
    config: &TrainConfig,
) -> Result<(MetaTransModel<S>, ExperimentReport)> {
    Trainer::new(source, target, config.clone())?.run(eval, |_, _| Ok(()))
}
