//! Training and evaluation engine for attentive multi-task regression over
//! precomputed transfer-learning image features.
//!
//! Each image arrives as a `4 × 16 × 2048` tensor: four frozen ImageNet
//! backbones (Inception, Xception, Resnet, Densenet) applied to the sixteen
//! cells of a 4×4 tiling of the photo. A shared primary attention pools the
//! sixteen sub-images per backbone, twelve task-specific secondary attentions
//! pool the four backbones, and twelve small regression heads predict the
//! affective dimensions.

pub mod attention;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use error::{Error, FormatError, Result};

/// Number of pretrained backbones (rows of a tiled feature tensor).
pub const N_MODELS: usize = 4;
/// Number of sub-images in the 4×4 tiling.
pub const N_SUB_IMAGES: usize = 16;
/// Width of one transfer feature vector.
pub const FEATURE_DIM: usize = 2048;
/// Native Densenet output width before zero padding.
pub const DENSENET_DIM: usize = 1920;
/// Trailing zeros appended to every Densenet vector in the tiled layout.
pub const DENSENET_PAD: usize = FEATURE_DIM - DENSENET_DIM;
/// Length of a whole-image feature vector (2048 + 2048 + 2048 + 1920).
pub const WHOLE_DIM: usize = 3 * FEATURE_DIM + DENSENET_DIM;
/// Number of affective dimensions.
pub const N_TASKS: usize = 12;

/// Backbone names in tensor row order.
pub const MODEL_NAMES: [&str; N_MODELS] = ["inception", "xception", "resnet", "densenet"];

/// Affective dimensions in annotation order.
pub const DIMENSIONS: [&str; N_TASKS] = [
    "complexity",
    "quality",
    "appeal",
    "naturalness",
    "pleasantness",
    "arousal",
    "familiarity",
    "coping_potential",
    "comprehensibility",
    "coherence",
    "excitingness",
    "general_interest",
];
