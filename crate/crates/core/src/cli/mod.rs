//! Command-line surface.
//!
//! Every command reads its settings from built-in defaults, then an optional
//! `--config` file of `key = value` lines, then `--set key=value` pairs, then
//! explicit flags. Later sources win.

pub mod export;
mod manifest;

pub use manifest::{RunManifest, KEYS};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{
    aggregate_labels, kfold_split, pool_whole_from_tiled, read_features, synth_planted_dataset, write_features,
    Aggregation, FeatureStore, LabelMatrix, Layout, RawAnnotationTable,
};
use crate::error::{Error, Result};
use crate::evaluation::comparison_table;
use crate::model::{predict_records, read_checkpoint, write_checkpoint, Variant};
use crate::training::{
    ablation_suite, nontransfer_store, run_experiment_with, train_fold_from, AblationInputs, NeuralLearner,
    EVAL_CHUNK,
};

#[derive(Debug, Parser)]
#[command(name = "amtl", version, about = "Attentive multi-task regression over transfer features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate raw 1–7 ratings into a scaled label CSV.
    AggregateLabels(AggregateArgs),
    /// Cross-validate one variant and write a metrics report.
    Cv(RunArgs),
    /// Cross-validate all five variants side by side.
    Ablate(RunArgs),
    /// Train one model on every labeled image and save a checkpoint.
    Train(RunArgs),
    /// Predict all twelve dimensions for every image in a feature file.
    Predict(PredictArgs),
    /// Write per-image attention tables and heatmaps.
    AttentionExport(PredictArgs),
    /// Write a planted-attention synthetic dataset.
    Synth(SynthArgs),
}

/// Overrides shared by every command.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub label_mode: Option<Aggregation>,
    /// Sets the init, shuffle and fold seeds together.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Any config key, e.g. `--set d_a=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Annotation CSV: `image_id,annotator_id,<12 ratings>`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Output label CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Tiled feature file.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Whole-image feature file.
    #[arg(long)]
    pub whole_features: Option<PathBuf>,
    /// Aggregated label CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Raw annotation CSV, aggregated with the label mode when no label CSV is given.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output CSV (predict).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output directory (attention-export).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub planted: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives `tiled.amtf`, `whole.amtf` and `labels.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl Overrides {
    fn manifest(&self, paths: &[(&str, &Option<PathBuf>)]) -> Result<RunManifest> {
        let mut m = RunManifest::default();
        if let Some(cfg) = &self.config {
            m.apply_file(cfg)?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            m.set(k.trim(), v, None)?;
        }
        for (key, value) in paths {
            if let Some(p) = value {
                m.set(key, &p.to_string_lossy(), None)?;
            }
        }
        if let Some(v) = self.variant {
            m.set_variant(v);
        }
        if let Some(mode) = self.label_mode {
            m.label_mode = mode;
        }
        if let Some(seed) = self.seed {
            m.set("seed", &seed.to_string(), None)?;
        }
        if let Some(e) = self.epochs {
            m.train.epochs = e;
        }
        if let Some(f) = self.folds {
            m.folds = f;
        }
        if let Some(r) = self.runs {
            m.train.n_runs = r;
        }
        m.validate()?;
        Ok(m)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Argument(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::AggregateLabels(a) => cmd_aggregate_labels(&a),
        Command::Cv(a) => cmd_cv(&run_manifest(&a)?),
        Command::Ablate(a) => cmd_ablate(&run_manifest(&a)?),
        Command::Train(a) => cmd_train(&run_manifest(&a)?),
        Command::Predict(a) => cmd_predict(&predict_manifest(&a)?),
        Command::AttentionExport(a) => cmd_attention_export(&predict_manifest(&a)?),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn run_manifest(a: &RunArgs) -> Result<RunManifest> {
    a.overrides.manifest(&[
        ("features", &a.features),
        ("whole_features", &a.whole_features),
        ("labels", &a.labels),
        ("annotations", &a.annotations),
        ("out_dir", &a.out_dir),
    ])
}

fn predict_manifest(a: &PredictArgs) -> Result<RunManifest> {
    a.overrides.manifest(&[
        ("checkpoint", &a.checkpoint),
        ("features", &a.features),
        ("out", &a.out),
        ("out_dir", &a.out_dir),
    ])
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_dir(m: &RunManifest) -> Result<&PathBuf> {
    let dir = m.require(&m.out_dir, "out_dir")?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn load_store(path: &Path) -> Result<FeatureStore> {
    FeatureStore::new(read_features(path)?).map_err(|e| e.context(path.display().to_string()))
}

fn load_labels(m: &RunManifest) -> Result<LabelMatrix> {
    if let Some(path) = &m.labels {
        return LabelMatrix::read_csv(path, m.label_mode);
    }
    if let Some(path) = &m.annotations {
        return aggregate_labels(&RawAnnotationTable::read_csv(path)?, m.label_mode);
    }
    Err(Error::Config("missing `labels` or `annotations`".into()))
}

/// Feature store a variant trains on: tiled or whole transfer features, or
/// frozen projections of noise surrogates for non-transfer variants.
fn store_for_variant(m: &RunManifest, variant: Variant, ids: &[String]) -> Result<FeatureStore> {
    let layout = variant.layout();
    if variant.is_nontransfer() {
        return nontransfer_store(None, ids, layout, m.model.projection_seed);
    }
    let (path, key) = match layout {
        Layout::Tiled => (&m.features, "features"),
        Layout::Whole => (&m.whole_features, "whole_features"),
    };
    let path = path.as_ref().ok_or_else(|| {
        Error::Config(format!("variant {variant} needs {layout} features (`{key}`)"))
    })?;
    let store = load_store(path)?;
    match store.layout() {
        Some(l) if l != layout => Err(Error::Config(format!(
            "variant {variant} needs {layout} features, {} holds {l}",
            path.display()
        ))),
        _ => Ok(store),
    }
}

pub fn cmd_aggregate_labels(a: &AggregateArgs) -> Result<()> {
    let m = a
        .overrides
        .manifest(&[("annotations", &a.annotations), ("out", &a.out)])?;
    let input = m.require(&m.annotations, "annotations")?;
    let out = m.require(&m.out, "out")?;
    let labels = aggregate_labels(&RawAnnotationTable::read_csv(input)?, m.label_mode)?;
    let mut buf = Vec::new();
    labels.write_csv(&mut buf)?;
    write_file(out, buf)?;
    println!(
        "wrote {} rows x {} columns ({}) to {}",
        labels.len(),
        crate::N_TASKS,
        m.label_mode,
        out.display()
    );
    Ok(())
}

pub fn cmd_cv(m: &RunManifest) -> Result<()> {
    let labels = load_labels(m)?;
    let ids = labels.image_ids().to_vec();
    let store = store_for_variant(m, m.model.variant, &ids)?;
    let plan = kfold_split(&ids, m.folds, m.fold_seed)?;
    let dir = out_dir(m)?;
    let mut learner = NeuralLearner::new(m.model.clone(), m.train.clone());
    if m.save_checkpoints {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        learner.checkpoint_dir = Some(ck);
    }
    let result = run_experiment_with(&learner, &store, &labels, &plan, m.train.n_runs)?;
    let mut logs = Vec::new();
    result.write_jsonl(&mut logs)?;
    write_file(&dir.join("folds.jsonl"), logs)?;
    write_manifest(dir, m)?;
    result.report.save_csv(dir.join("report.csv"))?;
    print!("{}", comparison_table(std::slice::from_ref(&result.report)));
    Ok(())
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(m).map_err(|e| Error::Argument(e.to_string()))?;
    write_file(&dir.join("manifest.json"), json + "\n")
}

pub fn cmd_ablate(m: &RunManifest) -> Result<()> {
    let labels = load_labels(m)?;
    let ids = labels.image_ids().to_vec();
    let tiled = m.features.as_deref().map(load_store).transpose()?;
    let whole = m.whole_features.as_deref().map(load_store).transpose()?;
    let plan = kfold_split(&ids, m.folds, m.fold_seed)?;
    let dir = out_dir(m)?;
    let inputs = AblationInputs {
        tiled: tiled.as_ref(),
        whole: whole.as_ref(),
        raw: None,
    };
    let result = ablation_suite(inputs, &labels, &m.model, &m.train, &plan, &[])?;
    for (variant, r) in result.variants.iter().zip(&result.results) {
        r.report.save_csv(dir.join(format!("report_{variant}.csv")))?;
    }
    write_file(&dir.join("ablation.csv"), result.csv())?;
    let table = result.table();
    write_file(&dir.join("ablation.txt"), &table)?;
    write_manifest(dir, m)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_train(m: &RunManifest) -> Result<()> {
    if m.model.variant.is_task_specific() {
        return Err(Error::Config(format!(
            "train writes one checkpoint; variant {} needs twelve (use cv with save_checkpoints = true)",
            m.model.variant
        )));
    }
    let labels = load_labels(m)?;
    let ids = labels.image_ids().to_vec();
    let store = store_for_variant(m, m.model.variant, &ids)?;
    let dir = out_dir(m)?;
    let columns: Vec<usize> = (0..crate::N_TASKS).collect();
    let init = crate::model::init_params(&m.model)?;
    let (params, history) = train_fold_from(init, &ids, &store, &labels, &columns, &m.train)?;
    write_checkpoint(dir.join("model.amtp"), &params)?;
    let json = serde_json::to_string(&history).map_err(|e| Error::Argument(e.to_string()))?;
    write_file(&dir.join("history.json"), json + "\n")?;
    write_manifest(dir, m)?;
    println!(
        "best epoch {} of {} (validation loss {})",
        history.best_epoch,
        history.stopped_epoch,
        history.best_val_loss()
    );
    Ok(())
}

fn load_model_and_features(m: &RunManifest) -> Result<(crate::model::ModelParams, FeatureStore)> {
    let ck = m.require(&m.checkpoint, "checkpoint")?;
    let params = read_checkpoint(ck)?;
    let features = m.require(&m.features, "features")?;
    let store = load_store(features)?;
    let want = params.config().variant.layout();
    if let Some(l) = store.layout() {
        if l != want {
            return Err(Error::Config(format!(
                "checkpoint {} ({}) needs {want} features, {} holds {l}",
                ck.display(),
                params.config().variant,
                features.display()
            )));
        }
    }
    Ok((params, store))
}

pub fn cmd_predict(m: &RunManifest) -> Result<()> {
    let (params, store) = load_model_and_features(m)?;
    let out = m.require(&m.out, "out")?;
    let records: Vec<_> = store.records().collect();
    let pred = predict_records(&params, &records, EVAL_CHUNK)?;
    let mut s = String::from("image_id");
    for k in 1..=pred.y.ncols() {
        s.push_str(&format!(",d{k}"));
    }
    s.push('\n');
    for (r, row) in records.iter().zip(pred.y.rows()) {
        s.push_str(r.image_id());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    write_file(out, s)?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

pub fn cmd_attention_export(m: &RunManifest) -> Result<()> {
    let (params, store) = load_model_and_features(m)?;
    if !params.config().variant.is_attentive() {
        return Err(Error::Config(format!(
            "variant {} has no attention to export",
            params.config().variant
        )));
    }
    let dir = out_dir(m)?;
    let records: Vec<_> = store.records().collect();
    let out = predict_records(&params, &records, EVAL_CHUNK)?;
    for (i, r) in records.iter().enumerate() {
        let att = out.attention(i).ok_or_else(|| Error::State("missing attention".into()))?;
        let stem = export::file_stem(r.image_id());
        write_file(&dir.join(format!("{stem}.primary.csv")), export::primary_csv(&att))?;
        write_file(&dir.join(format!("{stem}.secondary.csv")), export::secondary_csv(&att))?;
        let levels = export::heatmap_levels(att.alpha_primary.view());
        write_file(&dir.join(format!("{stem}.pgm")), export::pgm_bytes(&levels))?;
    }
    let meta = serde_json::json!({
        "checkpoint": m.checkpoint,
        "variant": params.config().variant,
        "images": records.len(),
        "heatmap": {
            "format": "P5 binary graymap, 4x4, 8-bit",
            "source": "primary attention averaged over the four backbones",
            "pixel_order": "row-major sub-image grid",
            "normalization": "per-image min-max onto 0..255",
            "flat_level": export::FLAT_LEVEL,
        }
    });
    write_file(&dir.join("attention_meta.json"), format!("{meta:#}\n"))?;
    println!("exported attention for {} images to {}", records.len(), dir.display());
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let ds = synth_planted_dataset(a.n, a.planted, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let whole = ds.features.iter().map(pool_whole_from_tiled).collect::<Result<Vec<_>>>()?;
    write_features(a.out_dir.join("tiled.amtf"), &ds.features)?;
    write_features(a.out_dir.join("whole.amtf"), &whole)?;
    let mut buf = Vec::new();
    ds.labels.write_csv(&mut buf)?;
    write_file(&a.out_dir.join("labels.csv"), buf)?;
    println!("wrote {} planted images to {}", a.n, a.out_dir.display());
    Ok(())
}
