use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trainer::{accuracy, Trainer};
use super::TrainConfig;
use crate::data::VideoSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `0.01, 0.02, …, 0.10`.
pub fn paper_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 100.0).collect()
}

/// Held-out split used to pick `λ1`: 20% of the labeled source set and a
/// disjoint 20% of the target set are withheld from training and scored.
#[derive(Clone, Debug)]
pub struct ValidationSplit<S> {
    pub source_train: VideoSet<S>,
    pub source_val: VideoSet<S>,
    pub target_train: VideoSet<S>,
    pub target_val: VideoSet<S>,
}

fn split<S: Scalar>(set: &VideoSet<S>, rng: &mut ChaCha8Rng) -> (VideoSet<S>, VideoSet<S>) {
    let mut idx: Vec<usize> = (0..set.n).collect();
    idx.shuffle(rng);
    let held = set.n / 5;
    let (val, train) = idx.split_at(held);
    (set.subset(train), set.subset(val))
}

impl<S: Scalar> ValidationSplit<S> {
    pub fn new(source: &VideoSet<S>, target: &VideoSet<S>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let (source_train, source_val) = split(source, &mut rng);
        let (target_train, target_val) = split(target, &mut rng);
        Self {
            source_train,
            source_val,
            target_train,
            target_val,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda1: f64,
    /// Target accuracy on the validation subset; the selection criterion.
    pub val_acc: f64,
    pub source_val_acc: f64,
    /// Accuracy on a separate target evaluation set, when one was given.
    pub target_eval_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_lambda: f64,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        self.rows
            .iter()
            .find(|r| r.lambda1 == self.best_lambda)
            .expect("best lambda is a grid value")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda1,val_acc,source_val_acc,target_eval_acc\n");
        for r in &self.rows {
            let eval = r.target_eval_acc.map_or(String::new(), |v| format!("{v:.4}"));
            out.push_str(&format!("{},{:.4},{:.4},{eval}\n", r.lambda1, r.val_acc, r.source_val_acc));
        }
        out
    }
}

/// Index of the highest score; ties go to the smallest `λ1`.
pub(crate) fn select_best(rows: &[GridRow]) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.val_acc > b.val_acc || (r.val_acc == b.val_acc && r.lambda1 < b.lambda1) {
            best = i;
        }
    }
    best
}

/// Trains once per grid value on the validation split and keeps the value
/// with the best held-out target accuracy.
pub fn grid_search_lambda<S: Scalar>(
    source: &VideoSet<S>,
    target: &VideoSet<S>,
    config: &TrainConfig,
    grid: &[f64],
    target_eval: Option<&VideoSet<S>>,
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::config("grid", "must contain at least one value"));
    }
    let split = ValidationSplit::new(source, target, config.seed);
    let mode = config.variant.static_mode();
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda1 in grid {
        let cfg = TrainConfig { lambda1, ..config.clone() };
        // only the final state is scored, so the per-epoch evaluation is skipped
        let mut trainer = Trainer::new(&split.source_train, &split.target_train, cfg)?;
        while trainer.epoch() < trainer.config.epochs {
            trainer.run_epoch()?;
        }
        let model = trainer.model;
        let val_acc = accuracy(&model, &split.target_val, mode)?;
        let source_val_acc = accuracy(&model, &split.source_val, mode)?;
        let target_eval_acc = target_eval.map(|t| accuracy(&model, t, mode)).transpose()?;
        log::info!("lambda1 {lambda1}: val {val_acc:.2}");
        rows.push(GridRow {
            lambda1,
            val_acc,
            source_val_acc,
            target_eval_acc,
        });
    }
    let best_lambda = rows[select_best(&rows)].lambda1;
    Ok(GridResult { best_lambda, rows })
}
