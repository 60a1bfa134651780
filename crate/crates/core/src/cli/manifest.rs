//! Run settings from a `key = value` config file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataset::Aggregation;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

/// Every setting a command may read. Paths are optional because each command
/// needs a different subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub features: Option<PathBuf>,
    pub whole_features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub label_mode: Aggregation,
    pub folds: usize,
    pub fold_seed: u64,
    pub save_checkpoints: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            features: None,
            whole_features: None,
            labels: None,
            annotations: None,
            checkpoint: None,
            out_dir: None,
            out: None,
            label_mode: Aggregation::Mean,
            folds: 5,
            fold_seed: 0,
            save_checkpoints: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Keys accepted in config files and by `--set`.
pub const KEYS: &[&str] = &[
    "features",
    "whole_features",
    "labels",
    "annotations",
    "checkpoint",
    "out_dir",
    "out",
    "variant",
    "label_mode",
    "seed",
    "init_seed",
    "shuffle_seed",
    "fold_seed",
    "projection_seed",
    "epochs",
    "batch_size",
    "patience",
    "runs",
    "val_fraction",
    "folds",
    "d_a",
    "head_hidden",
    "dropout_rate",
    "per_model_primary_attention",
    "hidden_activation",
    "shared_hidden_sizes",
    "task_hidden_sizes",
    "save_checkpoints",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_sizes(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunManifest {
    /// Applies one setting. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let value = value.trim();
        let path = || -> PathBuf {
            let p = PathBuf::from(value);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        match key {
            "features" => self.features = Some(path()),
            "whole_features" => self.whole_features = Some(path()),
            "labels" => self.labels = Some(path()),
            "annotations" => self.annotations = Some(path()),
            "checkpoint" => self.checkpoint = Some(path()),
            "out_dir" => self.out_dir = Some(path()),
            "out" => self.out = Some(path()),
            "variant" => self.set_variant(parse(key, value)?),
            "label_mode" => self.label_mode = parse(key, value)?,
            "seed" => {
                let seed: u64 = parse(key, value)?;
                self.model.init_seed = seed;
                self.train.shuffle_seed = seed;
                self.fold_seed = seed;
            }
            "init_seed" => self.model.init_seed = parse(key, value)?,
            "shuffle_seed" => self.train.shuffle_seed = parse(key, value)?,
            "fold_seed" => self.fold_seed = parse(key, value)?,
            "projection_seed" => self.model.projection_seed = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "runs" => self.train.n_runs = parse(key, value)?,
            "val_fraction" => self.train.val_fraction = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "d_a" => self.model.d_a = parse(key, value)?,
            "head_hidden" => self.model.head_hidden = parse(key, value)?,
            "dropout_rate" => self.model.dropout_rate = parse(key, value)?,
            "per_model_primary_attention" => self.model.per_model_primary_attention = parse(key, value)?,
            "hidden_activation" => self.model.hidden_activation = parse(key, value)?,
            "shared_hidden_sizes" => self.model.shared_hidden_sizes = parse_sizes(key, value)?,
            "task_hidden_sizes" => self.model.task_hidden_sizes = parse_sizes(key, value)?,
            "save_checkpoints" => self.save_checkpoints = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn set_variant(&mut self, variant: Variant) {
        self.model = self.model.with_variant(variant);
    }

    /// Reads a config file: `key = value` lines, `#` comments, blank lines.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
            self.set(key.trim(), value, base.as_deref())
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds = {} (need at least 2)", self.folds)));
        }
        Ok(())
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing `{key}` (flag --{} or config key)", key.replace('_', "-"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        std::fs::write(
            &cfg,
            "# demo\nfeatures = tiled.amtf\nepochs = 7   # short\nvariant = nonattentive_mtl\n\nshared_hidden_sizes = 64, 32\nseed = 9\n",
        )
        .unwrap();
        let mut m = RunManifest::default();
        m.apply_file(&cfg).unwrap();
        assert_eq!(m.features.as_deref(), Some(dir.path().join("tiled.amtf").as_path()));
        assert_eq!(m.train.epochs, 7);
        assert_eq!(m.model.variant, Variant::NonattentiveMtl);
        assert_eq!(m.model.n_tasks, 12);
        assert_eq!(m.model.shared_hidden_sizes, vec![64, 32]);
        assert_eq!((m.model.init_seed, m.train.shuffle_seed, m.fold_seed), (9, 9, 9));
        m.set("epochs", "3", None).unwrap();
        assert_eq!(m.train.epochs, 3);
        m.set("variant", "attentive_task_specific", None).unwrap();
        assert_eq!(m.model.n_tasks, 1);
    }

    #[test]
    fn errors_name_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.conf");
        std::fs::write(&cfg, "epochs = 3\nbogus = 1\n").unwrap();
        let err = RunManifest::default().apply_file(&cfg).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("bogus"), "{err}");
        std::fs::write(&cfg, "epochs = many\n").unwrap();
        let err = RunManifest::default().apply_file(&cfg).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("epochs"), "{err}");
        std::fs::write(&cfg, "just words\n").unwrap();
        assert!(RunManifest::default().apply_file(&cfg).is_err());
    }
}
