use super::experiment::{run_experiment, ExperimentResult};
use super::TrainConfig;
use crate::dataset::{FeatureStore, FoldPlan, LabelMatrix, Layout};
use crate::error::{Error, Result};
use crate::evaluation::{comparison_csv, comparison_table, MetricsReport};
use crate::model::{build_nontransfer_features, noise_surrogates, ModelConfig, RawBlocks, Variant, RAW_BLOCK_DIM};
use crate::N_SUB_IMAGES;

/// Feature sources for the ablation. Non-transfer variants project `raw`
/// through frozen random matrices; without raw blocks, seeded Gaussian noise
/// surrogates stand in for the pixels.
#[derive(Debug, Clone, Copy)]
pub struct AblationInputs<'a> {
    pub tiled: Option<&'a FeatureStore>,
    pub whole: Option<&'a FeatureStore>,
    pub raw: Option<&'a [RawBlocks]>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variants: Vec<Variant>,
    pub results: Vec<ExperimentResult>,
}

impl AblationResult {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.results.iter().map(|r| r.report.clone()).collect()
    }

    pub fn get(&self, variant: Variant) -> Option<&ExperimentResult> {
        self.variants.iter().position(|&v| v == variant).map(|i| &self.results[i])
    }

    pub fn table(&self) -> String {
        comparison_table(&self.reports())
    }

    pub fn csv(&self) -> String {
        comparison_csv(&self.reports())
    }
}

/// Non-transfer features for `ids`: frozen projections of `raw`, or of seeded
/// noise surrogates when no raw blocks are given.
pub fn nontransfer_store(
    raw: Option<&[RawBlocks]>,
    ids: &[String],
    layout: Layout,
    seed: u64,
) -> Result<FeatureStore> {
    let owned;
    let raw = match raw {
        Some(r) => r,
        None => {
            // Offset so the surrogates never share a stream with a projection.
            owned = noise_surrogates(ids, N_SUB_IMAGES, RAW_BLOCK_DIM, seed ^ 0x9e37_79b9_7f4a_7c15);
            &owned
        }
    };
    FeatureStore::new(build_nontransfer_features(raw, layout, seed)?)
}

/// Runs `variants` (all five when empty) on one fold plan and collects their reports.
pub fn ablation_suite(
    inputs: AblationInputs<'_>,
    labels: &LabelMatrix,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    fold_plan: &FoldPlan,
    variants: &[Variant],
) -> Result<AblationResult> {
    let variants = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.to_vec()
    };
    let ids: Vec<String> = fold_plan.assignments().keys().cloned().collect();
    let mut nt_tiled = None;
    let mut nt_whole = None;
    let mut results = Vec::new();
    for &variant in &variants {
        let store = match (variant.is_nontransfer(), variant.layout()) {
            (false, Layout::Tiled) => inputs.tiled,
            (false, Layout::Whole) => inputs.whole,
            (true, layout) => {
                let slot = if layout == Layout::Tiled { &mut nt_tiled } else { &mut nt_whole };
                if slot.is_none() {
                    *slot = Some(nontransfer_store(inputs.raw, &ids, layout, model_config.projection_seed)?);
                }
                slot.as_ref()
            }
        };
        let store = store.ok_or_else(|| {
            Error::Config(format!("variant {variant} needs {} features", variant.layout()))
        })?;
        if store.layout().is_some_and(|l| l != variant.layout()) {
            return Err(Error::Config(format!(
                "variant {variant} needs {} features, got {}",
                variant.layout(),
                store.layout().unwrap()
            )));
        }
        let config = model_config.with_variant(variant);
        let result = run_experiment(store, labels, &config, train_config, fold_plan)
            .map_err(|e| e.context(format!("variant {variant}")))?;
        results.push(result);
    }
    Ok(AblationResult { variants, results })
}
