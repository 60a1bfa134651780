use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::TrainConfig;
use crate::dataset::{FeatureStore, FeatureTensor, LabelMatrix};
use crate::error::{Error, Result};
use crate::model::{init_params, joint_loss, loss_and_gradient, predict_records, Batch, Mode, ModelConfig, ModelParams};
use crate::N_TASKS;

/// Images evaluated per forward call outside of training steps.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss of each completed epoch, weighted by batch size.
    pub train_loss: Vec<f64>,
    /// Eval-mode joint loss on the inner validation split after each epoch.
    pub val_loss: Vec<f64>,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }
}

/// Target matrix for `ids`, restricted to `columns` of the label matrix.
pub fn target_matrix(ids: &[String], labels: &LabelMatrix, columns: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((ids.len(), columns.len()));
    for (i, id) in ids.iter().enumerate() {
        let row = labels.require(id)?;
        for (j, &c) in columns.iter().enumerate() {
            out[[i, j]] = row[c];
        }
    }
    Ok(out)
}

fn records<'a>(ids: &[String], features: &'a FeatureStore) -> Result<Vec<&'a FeatureTensor>> {
    ids.iter().map(|id| features.require(id)).collect()
}

/// Eval-mode joint loss over a record set.
pub fn evaluate_loss(params: &ModelParams, records: &[&FeatureTensor], targets: &Array2<f64>) -> Result<f64> {
    let out = predict_records(params, records, EVAL_CHUNK)?;
    joint_loss(out.y.view(), targets.view())
}

/// Splits the deduplicated `train_ids` into (validation, inner train) parts.
/// The split depends only on the id set and `shuffle_seed`.
pub fn inner_split(train_ids: &[String], cfg: &TrainConfig) -> Result<(Vec<String>, Vec<String>)> {
    let mut ids = train_ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    ids.shuffle(&mut rng);
    let n_val = (ids.len() as f64 * cfg.val_fraction).round() as usize;
    if n_val == 0 || n_val >= ids.len() {
        return Err(Error::Config(format!(
            "val_fraction {} of {} training images leaves {n_val} for validation",
            cfg.val_fraction,
            ids.len()
        )));
    }
    let inner = ids.split_off(n_val);
    Ok((ids, inner))
}

/// Trains a fresh multi-task model on all twelve dimensions.
pub fn train_fold(
    train_ids: &[String],
    features: &FeatureStore,
    labels: &LabelMatrix,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let columns: Vec<usize> = (0..N_TASKS).collect();
    let init = init_params(model_config)?;
    train_fold_from(init, train_ids, features, labels, &columns, train_config)
}

/// Trains `initial` against the label `columns` (one per model output).
///
/// `train_ids` are split into inner train and validation parts by the seeded
/// shuffle; each epoch reshuffles the inner train part and steps Adam once per
/// batch. Training stops after `patience` epochs without a strict improvement
/// of the validation loss, and the parameters of the best epoch are returned.
pub fn train_fold_from(
    initial: ModelParams,
    train_ids: &[String],
    features: &FeatureStore,
    labels: &LabelMatrix,
    columns: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if columns.len() != initial.config().n_tasks {
        return Err(Error::Argument(format!(
            "{} label columns for a model with {} outputs",
            columns.len(),
            initial.config().n_tasks
        )));
    }
    let (val_ids, mut inner) = inner_split(train_ids, cfg)?;
    let val_ids = &val_ids[..];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    dropout_rng.set_stream(1);
    let val_records = records(val_ids, features)?;
    let val_targets = target_matrix(val_ids, labels, columns)?;
    // Fail early on missing data in the training part too.
    records(&inner, features)?;
    target_matrix(&inner, labels, columns)?;

    let mut params = initial;
    let mut adam = AdamState::new(params.len());
    let initial_val_loss = evaluate_loss(&params, &val_records, &val_targets)?;
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        initial_val_loss,
        best_epoch: 0,
        stopped_epoch: 0,
    };
    for epoch in 1..=cfg.epochs {
        inner.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in inner.chunks(cfg.batch_size) {
            let recs = records(chunk, features)?;
            let batch = Batch::from_features(&recs)?;
            let targets = target_matrix(chunk, labels, columns)?;
            let (value, grad) = loss_and_gradient(&params, &batch, targets.view(), Mode::Train, &mut dropout_rng)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            adam_step(params.values_mut(), &grad, &mut adam)
                .map_err(|e| e.context(format!("epoch {epoch}")))?;
            total += value * chunk.len() as f64;
        }
        history.train_loss.push(total / inner.len() as f64);
        let val = evaluate_loss(&params, &val_records, &val_targets)?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.val_loss.push(val);
        history.stopped_epoch = epoch;
        match &best {
            Some((b, _, _)) if val >= *b => {}
            _ => best = Some((val, epoch, params.values().to_vec())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, values) = best.expect("at least one epoch runs");
    history.best_epoch = best_epoch;
    params.values_mut().copy_from_slice(&values);
    Ok((params, history))
}
