use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::fold::{train_fold_from, TrainHistory, EVAL_CHUNK};
use super::TrainConfig;
use crate::dataset::{FeatureStore, FeatureTensor, FoldPlan, LabelMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, MetricsReport, MetricsRow, Provenance};
use crate::model::{init_params, predict_records, write_checkpoint, ModelConfig, ModelParams};
use crate::{N_SUB_IMAGES, N_TASKS};

/// One (run, fold) training job handed to a [`Learner`].
#[derive(Debug, Clone, Copy)]
pub struct FoldTask<'a> {
    pub run: usize,
    pub fold: usize,
    pub train_ids: &'a [String],
    pub test_ids: &'a [String],
    pub features: &'a FeatureStore,
    pub labels: &'a LabelMatrix,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    /// `(test_ids.len(), 12)` held-out predictions.
    pub predictions: Array2<f64>,
    pub histories: Vec<TrainHistory>,
    pub models_trained: usize,
    /// Model-averaged primary attention per held-out image, when the model has one.
    pub primary_attention: Option<Array2<f64>>,
}

/// Something that can be trained on one fold and predict the held-out part.
pub trait Learner {
    fn name(&self) -> String;
    fn fit_predict(&self, task: &FoldTask<'_>) -> Result<FoldOutcome>;
}

/// Neural learner for any [`Variant`](crate::model::Variant). Task-specific
/// variants train one single-output model per dimension.
#[derive(Debug, Clone)]
pub struct NeuralLearner {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Writes `run{r}_fold{f}.amtp` (or `run{r}_fold{f}_task{k}.amtp`) here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl NeuralLearner {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        NeuralLearner {
            model,
            train,
            checkpoint_dir: None,
        }
    }

    /// Model and train configs for one run; run `r` offsets both seeds by `r`.
    pub fn seeded(&self, run: usize, task: Option<usize>) -> (ModelConfig, TrainConfig) {
        let mut model = self.model.clone();
        let mut train = self.train.clone();
        model.init_seed = model.init_seed.wrapping_add(run as u64);
        train.shuffle_seed = train.shuffle_seed.wrapping_add(run as u64);
        if let Some(k) = task {
            model.init_seed = model.init_seed.wrapping_add((k as u64) << 32);
        }
        (model, train)
    }

    fn save(&self, params: &ModelParams, task: &FoldTask<'_>, k: Option<usize>) -> Result<()> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        let name = match k {
            Some(k) => format!("run{}_fold{}_task{k}.amtp", task.run, task.fold),
            None => format!("run{}_fold{}.amtp", task.run, task.fold),
        };
        write_checkpoint(dir.join(name), params)
    }
}

fn model_averaged_primary(alpha: &ndarray::Array3<f64>) -> Array2<f64> {
    alpha.mean_axis(Axis(1)).expect("four model rows")
}

impl Learner for NeuralLearner {
    fn name(&self) -> String {
        self.model.variant.name().to_string()
    }

    fn fit_predict(&self, task: &FoldTask<'_>) -> Result<FoldOutcome> {
        let test: Vec<&FeatureTensor> = task
            .test_ids
            .iter()
            .map(|id| task.features.require(id))
            .collect::<Result<_>>()?;
        let expected = self.model.variant.layout();
        if task.features.layout().is_some_and(|l| l != expected) {
            return Err(Error::Config(format!(
                "variant {} needs {expected} features",
                self.model.variant
            )));
        }
        let mut outcome = FoldOutcome {
            predictions: Array2::zeros((test.len(), N_TASKS)),
            histories: Vec::new(),
            models_trained: 0,
            primary_attention: None,
        };
        let groups: Vec<(Option<usize>, Vec<usize>)> = if self.model.variant.is_task_specific() {
            (0..N_TASKS).map(|k| (Some(k), vec![k])).collect()
        } else {
            vec![(None, (0..N_TASKS).collect())]
        };
        let n_groups = groups.len() as f64;
        for (k, columns) in groups {
            let (model, train) = self.seeded(task.run, k);
            let init = init_params(&model)?;
            let (params, history) =
                train_fold_from(init, task.train_ids, task.features, task.labels, &columns, &train)?;
            self.save(&params, task, k)?;
            let out = predict_records(&params, &test, EVAL_CHUNK)?;
            for (j, &c) in columns.iter().enumerate() {
                outcome.predictions.column_mut(c).assign(&out.y.column(j));
            }
            if let Some(alpha) = &out.alpha_primary {
                let avg = model_averaged_primary(alpha) / n_groups;
                outcome.primary_attention = Some(match outcome.primary_attention.take() {
                    Some(acc) => acc + avg,
                    None => avg,
                });
            }
            outcome.histories.push(history);
            outcome.models_trained += 1;
        }
        Ok(outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub image_id: String,
    pub prediction: Vec<f64>,
}

/// Everything recorded about one (run, fold) pair; one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub run: usize,
    pub fold: usize,
    pub models_trained: usize,
    pub histories: Vec<TrainHistory>,
    pub metrics: Vec<MetricsRow>,
    pub held_out: Vec<HeldOut>,
    /// Held-out mean of the model-averaged primary attention over the 16 sub-images.
    pub mean_primary_attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub report: MetricsReport,
    pub folds: Vec<FoldLog>,
}

impl ExperimentResult {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for log in &self.folds {
            let line = serde_json::to_string(log).map_err(|e| Error::Argument(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("<fold log>", e))?;
        }
        Ok(())
    }

    /// Mean over every (run, fold) of the held-out mean primary attention.
    pub fn mean_primary_attention(&self) -> Option<Vec<f64>> {
        let logs: Vec<&Vec<f64>> = self
            .folds
            .iter()
            .map(|f| f.mean_primary_attention.as_ref())
            .collect::<Option<_>>()?;
        let mut acc = vec![0.0; N_SUB_IMAGES];
        for l in &logs {
            for (a, v) in acc.iter_mut().zip(l.iter()) {
                *a += v / logs.len() as f64;
            }
        }
        Some(acc)
    }

    pub fn models_trained(&self) -> usize {
        self.folds.iter().map(|f| f.models_trained).sum()
    }
}

/// Cross-validated training of a model configuration with the neural learner.
pub fn run_experiment(
    features: &FeatureStore,
    labels: &LabelMatrix,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    fold_plan: &FoldPlan,
) -> Result<ExperimentResult> {
    model_config.validate()?;
    let learner = NeuralLearner::new(model_config.clone(), train_config.clone());
    run_experiment_with(&learner, features, labels, fold_plan, train_config.n_runs)
}

/// Runs `learner` over every fold for `n_runs` runs and averages the
/// per-(run, fold) metrics arithmetically.
pub fn run_experiment_with<L: Learner + ?Sized>(
    learner: &L,
    features: &FeatureStore,
    labels: &LabelMatrix,
    fold_plan: &FoldPlan,
    n_runs: usize,
) -> Result<ExperimentResult> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be positive".into()));
    }
    for id in fold_plan.assignments().keys() {
        labels.require(id)?;
    }
    let provenance = Provenance {
        variant: learner.name(),
        label_mode: labels.aggregation(),
        folds: fold_plan.k(),
        runs: n_runs,
    };
    let mut logs = Vec::new();
    let mut reports = Vec::new();
    for run in 0..n_runs {
        for fold in 0..fold_plan.k() {
            let test_ids = fold_plan.fold_ids(fold);
            let train_ids = fold_plan.train_ids(fold);
            let task = FoldTask {
                run,
                fold,
                train_ids: &train_ids,
                test_ids: &test_ids,
                features,
                labels,
            };
            let ctx = || format!("run {run} fold {fold}");
            let outcome = learner.fit_predict(&task).map_err(|e| e.context(ctx()))?;
            if outcome.predictions.dim() != (test_ids.len(), N_TASKS) {
                return Err(Error::State(format!(
                    "{}: learner returned {:?} predictions for {} images",
                    ctx(),
                    outcome.predictions.dim(),
                    test_ids.len()
                )));
            }
            let columns: Vec<(Vec<f64>, Vec<f64>)> = (0..N_TASKS)
                .map(|k| {
                    let target = test_ids
                        .iter()
                        .map(|id| labels.require(id).map(|r| r[k]))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((outcome.predictions.column(k).to_vec(), target))
                })
                .collect::<Result<_>>()?;
            let report = build_report(&columns, provenance.clone()).map_err(|e| e.context(ctx()))?;
            let mean_primary_attention = outcome
                .primary_attention
                .as_ref()
                .and_then(|a| a.mean_axis(Axis(0)))
                .map(|a| a.to_vec());
            logs.push(FoldLog {
                run,
                fold,
                models_trained: outcome.models_trained,
                histories: outcome.histories,
                metrics: report.rows.clone(),
                held_out: test_ids
                    .iter()
                    .zip(outcome.predictions.rows())
                    .map(|(id, row)| HeldOut {
                        image_id: id.clone(),
                        prediction: row.to_vec(),
                    })
                    .collect(),
                mean_primary_attention,
            });
            reports.push(report);
        }
    }
    let report = MetricsReport::average(&reports, provenance)?;
    Ok(ExperimentResult { report, folds: logs })
}
