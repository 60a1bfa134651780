//! Per-image attention artifacts: CSV weight tables and a 4×4 PGM heatmap.

use std::fmt::Write as _;

use ndarray::{ArrayView2, Axis};

use crate::attention::AttentionRecord;
use crate::{DIMENSIONS, MODEL_NAMES, N_SUB_IMAGES};

/// Side length of the sub-image grid.
pub const GRID: usize = 4;
/// Gray level used when every cell carries the same weight.
pub const FLAT_LEVEL: u8 = 128;

/// Heatmap levels for the model-averaged primary attention, in row-major
/// sub-image order, min–max normalized per image onto `0..=255`.
pub fn heatmap_levels(alpha_primary: ArrayView2<'_, f64>) -> [u8; N_SUB_IMAGES] {
    let mean = alpha_primary.mean_axis(Axis(0)).expect("at least one model row");
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [FLAT_LEVEL; N_SUB_IMAGES];
    if hi > lo {
        for (o, v) in out.iter_mut().zip(mean.iter()) {
            *o = ((v - lo) / (hi - lo) * 255.0).round() as u8;
        }
    }
    out
}

/// Binary 8-bit portable graymap of a 4×4 grid.
pub fn pgm_bytes(levels: &[u8; N_SUB_IMAGES]) -> Vec<u8> {
    let mut bytes = format!("P5\n{GRID} {GRID}\n255\n").into_bytes();
    bytes.extend_from_slice(levels);
    bytes
}

/// `model,s0..s15` rows, one per backbone.
pub fn primary_csv(record: &AttentionRecord) -> String {
    let mut s = String::from("model");
    for j in 0..N_SUB_IMAGES {
        let _ = write!(s, ",s{j}");
    }
    s.push('\n');
    for (name, row) in MODEL_NAMES.iter().zip(record.alpha_primary.rows()) {
        s.push_str(name);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// `dimension,inception,xception,resnet,densenet` rows, one per task.
pub fn secondary_csv(record: &AttentionRecord) -> String {
    let mut s = format!("dimension,{}\n", MODEL_NAMES.join(","));
    for (k, row) in record.alpha_secondary.rows().into_iter().enumerate() {
        let name = if record.alpha_secondary.nrows() == DIMENSIONS.len() {
            DIMENSIONS[k].to_string()
        } else {
            format!("task{k}")
        };
        s.push_str(&name);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Image id made safe for use as a file stem.
pub fn file_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}
