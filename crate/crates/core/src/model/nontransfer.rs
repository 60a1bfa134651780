//! Frozen random-projection feature sources for the non-transfer baselines.
//!
//! Each backbone is replaced by a fixed seeded Gaussian matrix mapping a raw
//! block to the backbone's native width (2048, or 1920 for Densenet). The
//! matrices are never trained. Output tensors have exactly the shape and
//! Densenet zero pad of real transfer features.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{FeatureTensor, Layout};
use crate::error::{Error, Result};
use crate::{DENSENET_DIM, FEATURE_DIM, N_MODELS, N_SUB_IMAGES};

/// Default width of a raw block.
pub const RAW_BLOCK_DIM: usize = 256;

/// Raw per-image content: 16 sub-image blocks, or a single whole-image block.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBlocks {
    pub image_id: String,
    pub blocks: Vec<Vec<f64>>,
}

/// Stand-in raw content for images whose pixels are not available: the
/// leading `raw_dim` coordinates of every Inception sub-image vector.
pub fn raw_blocks_from_tiled(tensor: &FeatureTensor, raw_dim: usize) -> Result<RawBlocks> {
    let view = tensor
        .tiled_view()
        .ok_or_else(|| Error::Argument(format!("{} is not tiled", tensor.image_id())))?;
    if raw_dim == 0 || raw_dim > view.dim().2 {
        return Err(Error::Argument(format!("raw_dim {raw_dim} out of range")));
    }
    let blocks = (0..N_SUB_IMAGES)
        .map(|j| (0..raw_dim).map(|d| f64::from(view[[0, j, d]])).collect())
        .collect();
    Ok(RawBlocks {
        image_id: tensor.image_id().to_string(),
        blocks,
    })
}

/// Zero-mean unit-variance Gaussian blocks, seeded.
pub fn noise_surrogates(image_ids: &[String], n_blocks: usize, raw_dim: usize, seed: u64) -> Vec<RawBlocks> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    image_ids
        .iter()
        .map(|id| RawBlocks {
            image_id: id.clone(),
            blocks: (0..n_blocks)
                .map(|_| (0..raw_dim).map(|_| normal.sample(&mut rng)).collect())
                .collect(),
        })
        .collect()
}

fn backbone_width(model: usize) -> usize {
    if model == N_MODELS - 1 {
        DENSENET_DIM
    } else {
        FEATURE_DIM
    }
}

fn projections(raw_dim: usize, seed: u64) -> Vec<Array2<f64>> {
    let normal = Normal::new(0.0, (1.0 / raw_dim as f64).sqrt()).unwrap();
    (0..N_MODELS)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            Array2::from_shape_simple_fn((backbone_width(i), raw_dim), || normal.sample(&mut rng))
        })
        .collect()
}

/// Projects raw blocks into feature tensors of the requested layout.
///
/// Tiled output needs 16 blocks per image. Whole output projects the mean of
/// the supplied blocks and concatenates the four backbone widths.
pub fn build_nontransfer_features(raw: &[RawBlocks], layout: Layout, seed: u64) -> Result<Vec<FeatureTensor>> {
    let Some(first) = raw.first() else {
        return Ok(Vec::new());
    };
    let raw_dim = first.blocks.first().map_or(0, Vec::len);
    if raw_dim == 0 {
        return Err(Error::Argument("raw blocks are empty".into()));
    }
    for r in raw {
        if r.blocks.is_empty() || r.blocks.iter().any(|b| b.len() != raw_dim) {
            return Err(Error::Argument(format!(
                "{}: every block must have {raw_dim} values",
                r.image_id
            )));
        }
        if layout == Layout::Tiled && r.blocks.len() != N_SUB_IMAGES {
            return Err(Error::Argument(format!(
                "{}: tiled output needs {N_SUB_IMAGES} blocks, got {}",
                r.image_id,
                r.blocks.len()
            )));
        }
    }
    let proj = projections(raw_dim, seed);
    raw.iter()
        .map(|r| {
            let data = match layout {
                Layout::Tiled => {
                    let mut data = vec![0.0f32; N_MODELS * N_SUB_IMAGES * FEATURE_DIM];
                    for (i, p) in proj.iter().enumerate() {
                        for (j, block) in r.blocks.iter().enumerate() {
                            let out = p.dot(&Array1::from(block.clone()));
                            let start = (i * N_SUB_IMAGES + j) * FEATURE_DIM;
                            for (dst, v) in data[start..].iter_mut().zip(out.iter()) {
                                *dst = *v as f32;
                            }
                        }
                    }
                    data
                }
                Layout::Whole => {
                    let mut mean = Array1::<f64>::zeros(raw_dim);
                    for b in &r.blocks {
                        mean += &Array1::from(b.clone());
                    }
                    mean /= r.blocks.len() as f64;
                    proj.iter()
                        .flat_map(|p| p.dot(&mean).into_iter().map(|v| v as f32))
                        .collect()
                }
            };
            FeatureTensor::new(r.image_id.clone(), layout, data)
        })
        .collect()
}
