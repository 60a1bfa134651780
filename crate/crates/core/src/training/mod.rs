//! Optimisation, early stopping and the cross-validation driver.

mod ablation;
mod adam;
mod experiment;
mod fold;

pub use ablation::{ablation_suite, nontransfer_store, AblationInputs, AblationResult};
pub use adam::{adam_step, AdamState};
pub use experiment::{
    run_experiment, run_experiment_with, ExperimentResult, FoldLog, FoldOutcome, FoldTask, HeldOut, Learner,
    NeuralLearner,
};
pub use fold::{evaluate_loss, inner_split, target_matrix, train_fold, train_fold_from, TrainHistory, EVAL_CHUNK};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub n_runs: usize,
    pub val_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            patience: 10,
            n_runs: 5,
            val_fraction: 0.1,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.epochs, "epochs"),
            (self.batch_size, "batch_size"),
            (self.patience, "patience"),
            (self.n_runs, "n_runs"),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 0.5]", self.val_fraction)));
        }
        Ok(())
    }
}
