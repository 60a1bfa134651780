//! Labels, feature files, fold plans and synthetic fixtures.

mod features;
mod folds;
mod labels;
mod synth;

pub use features::{
    decode_features, encode_features, pool_whole_from_tiled, read_features, write_features,
    FeatureTensor, Layout, FEATURE_MAGIC, FEATURE_VERSION, TILED_LEN,
};
pub use folds::{kfold_split, FoldPlan};
pub use labels::{
    aggregate_labels, aggregate_labels_for, scale_rating, Aggregation, Annotation, LabelMatrix,
    RawAnnotationTable,
};
pub use synth::{
    planted_coefficients, planted_image_id, planted_label, synth_planted_dataset,
    PlantedDataset, MARKER_VALUE, MARKER_WIDTH, NOISE_AMPLITUDE,
};

use std::collections::BTreeMap;

/// Feature records indexed by image id.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    layout: Option<Layout>,
    records: BTreeMap<String, FeatureTensor>,
}

impl FeatureStore {
    pub fn new(records: Vec<FeatureTensor>) -> crate::Result<Self> {
        let mut store = FeatureStore::default();
        for r in records {
            match store.layout {
                None => store.layout = Some(r.layout()),
                Some(l) if l != r.layout() => {
                    return Err(crate::Error::Argument(format!(
                        "record {:?} has layout {} in a {l} store",
                        r.image_id(),
                        r.layout()
                    )))
                }
                _ => {}
            }
            let id = r.image_id().to_string();
            if store.records.insert(id.clone(), r).is_some() {
                return Err(crate::Error::Argument(format!("duplicate feature record {id:?}")));
            }
        }
        Ok(store)
    }

    pub fn layout(&self) -> Option<Layout> {
        self.layout
    }

    pub fn get(&self, image_id: &str) -> Option<&FeatureTensor> {
        self.records.get(image_id)
    }

    pub fn require(&self, image_id: &str) -> crate::Result<&FeatureTensor> {
        self.get(image_id)
            .ok_or_else(|| crate::Error::MissingData(image_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.records.keys()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &FeatureTensor> {
        self.records.values()
    }
}
