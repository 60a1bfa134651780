//! Flat parameter storage.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>` so that Adam,
//! checkpoints and gradient checks all share a single ordering:
//!
//! * attentive variants: primary `[W, b, v]` (once, or per backbone when
//!   `per_model_primary_attention`), then secondary `[W, b, v]` for tasks
//!   `0..n_tasks`, then heads `[W1, b1, W2, b2]` for tasks `0..n_tasks`;
//! * non-attentive variants: shared dense layers `[W, b]` in order, then per
//!   task its hidden layers followed by the output layer, tasks in order.
//!
//! Matrices are row-major with shape `(out, in)`.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::{AttentionGrads, AttentionParams};
use crate::error::{Error, Result};
use crate::N_MODELS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    /// Biases are zero at init; everything else is fan-scaled uniform.
    pub is_bias: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Slot index of the first tensor of an attention triple; `w`, `b`, `v` follow.
pub type TripleIdx = usize;
/// Slot index of `W1`; `b1`, `W2`, `b2` follow.
pub type HeadIdx = usize;
/// Slot index of a dense `W`; `b` follows.
pub type DenseIdx = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Structure {
    Attentive {
        primary: Vec<TripleIdx>,
        secondary: Vec<TripleIdx>,
        heads: Vec<HeadIdx>,
    },
    Dense {
        shared: Vec<DenseIdx>,
        /// Per task: hidden layers, then the single-output layer last.
        tasks: Vec<Vec<DenseIdx>>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<Slot>,
    len: usize,
    structure: Structure,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder::default();
        let structure = if config.variant.is_attentive() {
            let (dim, d_a, h) = (config.feature_dim, config.d_a, config.head_hidden);
            let n_primary = if config.per_model_primary_attention { N_MODELS } else { 1 };
            let primary = (0..n_primary)
                .map(|i| b.triple(&format!("primary[{i}]"), d_a, dim))
                .collect();
            let secondary = (0..config.n_tasks)
                .map(|k| b.triple(&format!("secondary[{k}]"), d_a, dim))
                .collect();
            let heads = (0..config.n_tasks)
                .map(|k| {
                    let first = b.matrix(&format!("head[{k}].w1"), h, dim);
                    b.bias(&format!("head[{k}].b1"), h);
                    b.matrix(&format!("head[{k}].w2"), 1, h);
                    b.bias(&format!("head[{k}].b2"), 1);
                    first
                })
                .collect();
            Structure::Attentive {
                primary,
                secondary,
                heads,
            }
        } else {
            let mut width = config.whole_dim;
            let mut shared = Vec::new();
            for (l, &out) in config.shared_hidden_sizes.iter().enumerate() {
                shared.push(b.dense(&format!("shared[{l}]"), out, width));
                width = out;
            }
            let tasks = (0..config.n_tasks)
                .map(|k| {
                    let mut w = width;
                    let mut layers = Vec::new();
                    for (l, &out) in config.task_hidden_sizes.iter().enumerate() {
                        layers.push(b.dense(&format!("task[{k}].hidden[{l}]"), out, w));
                        w = out;
                    }
                    layers.push(b.dense(&format!("task[{k}].out"), 1, w));
                    layers
                })
                .collect();
            Structure::Dense { shared, tasks }
        };
        Ok(Self {
            slots: b.slots,
            len: b.len,
            structure,
        })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn slot(&self, idx: usize) -> &Slot {
        &self.slots[idx]
    }

    pub fn find(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn matrix<'a>(&self, values: &'a [f64], idx: usize) -> ArrayView2<'a, f64> {
        let s = &self.slots[idx];
        ArrayView2::from_shape((s.rows, s.cols), &values[s.range()]).expect("slot shape")
    }

    pub fn vector<'a>(&self, values: &'a [f64], idx: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&values[self.slots[idx].range()])
    }

    pub fn triple<'a>(&self, values: &'a [f64], idx: TripleIdx) -> AttentionParams<'a> {
        AttentionParams {
            w: self.matrix(values, idx),
            b: self.vector(values, idx + 1),
            v: self.vector(values, idx + 2),
        }
    }

    /// Splits a gradient buffer into one mutable slice per slot.
    pub fn carve<'a>(&self, values: &'a mut [f64]) -> Vec<&'a mut [f64]> {
        let mut out = Vec::with_capacity(self.slots.len());
        let mut rest = values;
        for s in &self.slots {
            let (head, tail) = rest.split_at_mut(s.len());
            out.push(head);
            rest = tail;
        }
        out
    }
}

pub(crate) fn matrix_mut<'a>(slot: &Slot, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((slot.rows, slot.cols), data).expect("slot shape")
}

pub(crate) fn triple_grads<'a>(
    layout: &ParamLayout,
    pieces: &'a mut [&mut [f64]],
    idx: TripleIdx,
) -> AttentionGrads<'a> {
    match &mut pieces[idx..idx + 3] {
        [w, b, v] => AttentionGrads {
            w: matrix_mut(layout.slot(idx), w),
            b: ArrayViewMut1::from(&mut **b),
            v: ArrayViewMut1::from(&mut **v),
        },
        _ => unreachable!(),
    }
}

#[derive(Default)]
struct LayoutBuilder {
    slots: Vec<Slot>,
    len: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, rows: usize, cols: usize, is_bias: bool) -> usize {
        self.slots.push(Slot {
            name: name.to_string(),
            rows,
            cols,
            offset: self.len,
            is_bias,
        });
        self.len += rows * cols;
        self.slots.len() - 1
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, rows, cols, false)
    }

    fn bias(&mut self, name: &str, n: usize) -> usize {
        self.push(name, n, 1, true)
    }

    fn triple(&mut self, name: &str, d_a: usize, dim: usize) -> usize {
        let first = self.matrix(&format!("{name}.w"), d_a, dim);
        self.bias(&format!("{name}.b"), d_a);
        // The context vector is a d_a → 1 projection.
        self.matrix(&format!("{name}.v"), d_a, 1);
        first
    }

    fn dense(&mut self, name: &str, out: usize, input: usize) -> usize {
        let first = self.matrix(&format!("{name}.w"), out, input);
        self.bias(&format!("{name}.b"), out);
        first
    }
}

/// All learnable weights of one network plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let layout = ParamLayout::new(config)?;
        Ok(Self {
            config: config.clone(),
            values: vec![0.0; layout.len()],
            layout,
        })
    }

    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        let layout = ParamLayout::new(config)?;
        if values.len() != layout.len() {
            return Err(Error::Argument(format!(
                "parameter vector has {} values, {} expects {}",
                values.len(),
                config.variant,
                layout.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.values[s.range()])
    }

    pub fn slot_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range();
        Some(&mut self.values[range])
    }
}

/// Uniform limit `sqrt(6 / (fan_in + fan_out))` for a `(out, in)` matrix.
pub fn init_limit(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Seeded initialization: weights uniform in `±init_limit`, biases zero.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    for slot in params.layout.slots.clone() {
        if slot.is_bias {
            continue;
        }
        let limit = init_limit(slot.rows, slot.cols);
        for v in &mut params.values[slot.range()] {
            *v = rng.gen_range(-limit..=limit);
        }
    }
    Ok(params)
}
