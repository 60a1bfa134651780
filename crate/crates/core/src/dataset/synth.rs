//! Planted-attention fixture: the label signal lives in one sub-image only.
//!
//! Every sub-image vector is uniform noise in `[-NOISE_AMPLITUDE, NOISE_AMPLITUDE]`
//! except the planted one, whose coordinate 0 carries the latent `t` and whose
//! coordinates `1..=MARKER_WIDTH` carry a constant marker, in every backbone
//! row. Attention is content-based, so the marker is what makes the planted
//! cell locatable. Labels are affine in `t` with distinct slopes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::{FeatureTensor, TILED_LEN};
use super::labels::{Aggregation, LabelMatrix};
use crate::error::{Error, Result};
use crate::{DENSENET_DIM, FEATURE_DIM, N_MODELS, N_SUB_IMAGES, N_TASKS};

pub const NOISE_AMPLITUDE: f32 = 0.02;
pub const MARKER_WIDTH: usize = 32;
pub const MARKER_VALUE: f32 = 0.5;

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub features: Vec<FeatureTensor>,
    pub labels: LabelMatrix,
    /// Latent value per image, aligned with `features`.
    pub latents: Vec<f64>,
    pub planted_subimage: usize,
}

/// Slope and intercept of label column `k`.
pub fn planted_coefficients(k: usize) -> (f64, f64) {
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let slope = sign * (0.35 + 0.05 * k as f64);
    let intercept = (k as f64 - 5.5) * 0.006;
    (slope, intercept)
}

pub fn planted_label(k: usize, t: f64) -> f64 {
    let (slope, intercept) = planted_coefficients(k);
    slope * t + intercept
}

pub fn planted_image_id(i: usize) -> String {
    format!("img{i:05}")
}

pub fn synth_planted_dataset(n: usize, planted_subimage: usize, seed: u64) -> Result<PlantedDataset> {
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    if planted_subimage >= N_SUB_IMAGES {
        return Err(Error::Argument(format!(
            "planted sub-image {planted_subimage} outside 0..{N_SUB_IMAGES}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let t: f32 = rng.gen_range(-0.5..=0.5);
        let mut data = vec![0.0f32; TILED_LEN];
        for model in 0..N_MODELS {
            let width = if model == 3 { DENSENET_DIM } else { FEATURE_DIM };
            for j in 0..N_SUB_IMAGES {
                let start = (model * N_SUB_IMAGES + j) * FEATURE_DIM;
                let cell = &mut data[start..start + width];
                for v in cell.iter_mut() {
                    *v = rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                }
                if j == planted_subimage {
                    cell[0] = t;
                    cell[1..=MARKER_WIDTH].fill(MARKER_VALUE);
                }
            }
        }
        let id = planted_image_id(i);
        features.push(FeatureTensor::tiled(id.clone(), data)?);
        let t = f64::from(t);
        let mut row = [0.0; N_TASKS];
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = planted_label(k, t);
        }
        rows.push((id, row));
        latents.push(t);
    }
    Ok(PlantedDataset {
        features,
        labels: LabelMatrix::new(rows, Aggregation::Mean)?,
        latents,
        planted_subimage,
    })
}
