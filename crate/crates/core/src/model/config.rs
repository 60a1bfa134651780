use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Layout;
use crate::error::{Error, Result};
use crate::{FEATURE_DIM, N_TASKS, WHOLE_DIM};

/// The full model and its four ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AttentiveMtl,
    AttentiveTaskSpecific,
    NonattentiveMtl,
    AttentiveMtlNontransfer,
    NonattentiveTaskSpecificNontransfer,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::AttentiveMtl,
        Variant::AttentiveTaskSpecific,
        Variant::NonattentiveMtl,
        Variant::AttentiveMtlNontransfer,
        Variant::NonattentiveTaskSpecificNontransfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AttentiveMtl => "attentive_mtl",
            Variant::AttentiveTaskSpecific => "attentive_task_specific",
            Variant::NonattentiveMtl => "nonattentive_mtl",
            Variant::AttentiveMtlNontransfer => "attentive_mtl_nontransfer",
            Variant::NonattentiveTaskSpecificNontransfer => "nonattentive_task_specific_nontransfer",
        }
    }

    pub fn tag(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.get(tag as usize).copied()
    }

    pub fn is_attentive(self) -> bool {
        matches!(
            self,
            Variant::AttentiveMtl | Variant::AttentiveTaskSpecific | Variant::AttentiveMtlNontransfer
        )
    }

    pub fn is_task_specific(self) -> bool {
        matches!(
            self,
            Variant::AttentiveTaskSpecific | Variant::NonattentiveTaskSpecificNontransfer
        )
    }

    pub fn is_nontransfer(self) -> bool {
        matches!(
            self,
            Variant::AttentiveMtlNontransfer | Variant::NonattentiveTaskSpecificNontransfer
        )
    }

    /// Feature layout the variant consumes.
    pub fn layout(self) -> Layout {
        if self.is_attentive() {
            Layout::Tiled
        } else {
            Layout::Whole
        }
    }

    /// Outputs per network: 12 for multi-task variants, 1 otherwise.
    pub fn tasks_per_model(self) -> usize {
        if self.is_task_specific() {
            1
        } else {
            N_TASKS
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Argument(format!("unknown variant {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Relu,
    Tanh,
}

impl HiddenActivation {
    pub fn tag(self) -> u8 {
        match self {
            HiddenActivation::Relu => 0,
            HiddenActivation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(HiddenActivation::Relu),
            1 => Some(HiddenActivation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            HiddenActivation::Relu => z.max(0.0),
            HiddenActivation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    pub(crate) fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            HiddenActivation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            HiddenActivation::Tanh => 1.0 - a * a,
        }
    }
}

impl FromStr for HiddenActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(HiddenActivation::Relu),
            "tanh" => Ok(HiddenActivation::Tanh),
            other => Err(Error::Argument(format!("unknown activation {other:?}"))),
        }
    }
}

/// Network shape and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of one transfer feature vector (tiled layout).
    pub feature_dim: usize,
    /// Width of the whole-image vector (non-attentive variants).
    pub whole_dim: usize,
    /// Hidden width of every attention MLP.
    pub d_a: usize,
    /// Hidden width of each attentive prediction head.
    pub head_hidden: usize,
    pub n_tasks: usize,
    pub dropout_rate: f64,
    pub per_model_primary_attention: bool,
    pub hidden_activation: HiddenActivation,
    pub shared_hidden_sizes: Vec<usize>,
    pub task_hidden_sizes: Vec<usize>,
    pub init_seed: u64,
    /// Seed of the frozen random projection used by non-transfer variants.
    pub projection_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(Variant::AttentiveMtl)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            feature_dim: FEATURE_DIM,
            whole_dim: WHOLE_DIM,
            d_a: 256,
            head_hidden: 256,
            n_tasks: variant.tasks_per_model(),
            dropout_rate: 0.5,
            per_model_primary_attention: false,
            hidden_activation: HiddenActivation::Relu,
            shared_hidden_sizes: vec![1024, 512],
            task_hidden_sizes: vec![256, 64],
            init_seed: 0,
            projection_seed: 0x5eed,
        }
    }

    /// Same settings with a different variant (and matching task count).
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            n_tasks: variant.tasks_per_model(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.n_tasks != self.variant.tasks_per_model() {
            return bad(format!(
                "variant {} needs n_tasks = {}, got {}",
                self.variant,
                self.variant.tasks_per_model(),
                self.n_tasks
            ));
        }
        if self.variant.is_attentive() {
            if self.feature_dim == 0 || self.d_a == 0 || self.head_hidden == 0 {
                return bad("feature_dim, d_a and head_hidden must be positive".into());
            }
        } else {
            if self.whole_dim == 0
                || self.shared_hidden_sizes.iter().chain(&self.task_hidden_sizes).any(|&s| s == 0)
            {
                return bad("layer sizes must be positive".into());
            }
            if self.per_model_primary_attention {
                return bad(format!(
                    "per_model_primary_attention has no meaning for {}",
                    self.variant
                ));
            }
        }
        Ok(())
    }
}
