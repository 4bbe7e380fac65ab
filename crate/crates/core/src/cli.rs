//! Config-driven command-line front end.
//!
//! Every subcommand resolves one [`ExperimentConfig`] (file, then `--set`
//! overrides, then `--seed`/`--out`), validates it completely, writes it
//! back as `resolved_config.json` and only then starts work.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{self, DatasetBundle, SplitFractions};
use crate::evaluation::{self, FidelityConfig};
use crate::influence::{self, Estimator};
use crate::network::{Activation, LayerSpec, Mlp};
use crate::trainer::{self, TrainerConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Config { path: Option<String>, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError::Config {
            path: None,
            message: message.into(),
        }
    }

    fn at(path: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            path: Some(path.to_string()),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        let (kind, path) = match self {
            CliError::Config { path, .. } => ("config", path.clone()),
            CliError::Runtime(_) => ("runtime", None),
        };
        serde_json::json!({
            "status": "error",
            "kind": kind,
            "path": path,
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub spread: f64,
    pub flip_rate: f64,
    pub fractions: SplitFractions,
    /// Directory holding `train.csv`, `validation.csv`, `test.csv` (csv source).
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            num_classes: 3,
            per_class: 200,
            feature_dim: 8,
            spread: 1.0,
            flip_rate: 0.2,
            fractions: SplitFractions::default(),
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<HiddenLayer>,
    pub output_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![HiddenLayer {
                width: 16,
                activation: Activation::Relu,
            }],
            output_activation: Activation::Linear,
        }
    }
}

impl ModelConfig {
    pub fn layer_specs(&self, input_dim: usize, num_classes: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = input_dim;
        for h in &self.hidden {
            specs.push(LayerSpec::new(prev, h.width, h.activation));
            prev = h.width;
        }
        specs.push(LayerSpec::new(prev, num_classes, self.output_activation));
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Checkpoint to diagnose; defaults to `<output_dir>/model.json`.
    pub checkpoint: Option<PathBuf>,
    /// (validation, train) pairs fed to the bound diagnostic.
    pub pairs: usize,
    pub resamples: usize,
    pub subset_size: usize,
    /// Training samples scored by each estimator in the cost comparison.
    pub cost_batch: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            pairs: 32,
            resamples: 200,
            subset_size: 16,
            cost_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub fidelity: FidelityConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            fidelity: FidelityConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Seeds derived from the global seed so one number pins every stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedSeeds {
    pub data: u64,
    pub init: u64,
    pub trainer: u64,
    pub diagnostics: u64,
}

impl DerivedSeeds {
    pub fn from_global(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed.wrapping_add(1_000_003),
            trainer: seed.wrapping_add(2_000_003),
            diagnostics: seed.wrapping_add(3_000_017),
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON document, reporting the offending field path on error.
    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::at(&path, format!("{path}: {}", e.inner()))
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            CliError::at(&path, format!("{path}: {}", e.inner()))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn seeds(&self) -> DerivedSeeds {
        DerivedSeeds::from_global(self.seed)
    }

    /// Checks every field; nothing runs until this passes.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            DataSource::Blobs => {
                if d.num_classes < 2 {
                    return Err(CliError::at("dataset.num_classes", "need at least two classes"));
                }
                if d.per_class == 0 {
                    return Err(CliError::at("dataset.per_class", "must be positive"));
                }
                if d.feature_dim == 0 {
                    return Err(CliError::at("dataset.feature_dim", "must be positive"));
                }
                if !(d.spread >= 0.0 && d.spread.is_finite()) {
                    return Err(CliError::at("dataset.spread", "must be finite and non-negative"));
                }
            }
            DataSource::Csv => {
                if d.dir.is_none() {
                    return Err(CliError::at("dataset.dir", "csv source needs a directory"));
                }
                if d.num_classes == 0 {
                    return Err(CliError::at("dataset.num_classes", "must be positive"));
                }
            }
        }
        if !(0.0..=1.0).contains(&d.flip_rate) {
            return Err(CliError::at("dataset.flip_rate", "must lie in [0, 1]"));
        }
        let f = d.fractions;
        if [f.train, f.validation, f.test].iter().any(|v| !(*v > 0.0)) || (f.train + f.validation + f.test - 1.0).abs() > 1e-9 {
            return Err(CliError::at("dataset.fractions", "must be positive and sum to 1"));
        }
        if let Some(k) = self.model.hidden.iter().position(|h| h.width == 0) {
            return Err(CliError::at(&format!("model.hidden[{k}].width"), "must be positive"));
        }
        self.trainer
            .validate()
            .map_err(|e| CliError::at("trainer", e.to_string()))?;
        self.fidelity
            .validate()
            .map_err(|e| CliError::at("fidelity", e.to_string()))?;
        let g = &self.diagnostics;
        if g.pairs == 0 {
            return Err(CliError::at("diagnostics.pairs", "must be positive"));
        }
        if g.resamples < 2 {
            return Err(CliError::at("diagnostics.resamples", "need at least two"));
        }
        if g.subset_size == 0 {
            return Err(CliError::at("diagnostics.subset_size", "must be positive"));
        }
        if g.cost_batch == 0 {
            return Err(CliError::at("diagnostics.cost_batch", "must be positive"));
        }
        Ok(())
    }
}

/// Sets `a.b.c` in a JSON object. The value is read as JSON when it parses,
/// otherwise as a bare string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (k, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::at(&parts[..k].join("."), "is not a section"))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("at least one key part")
}

#[derive(Debug, Parser)]
#[command(name = "lai", version, about = "Online data valuation with layer-aware influence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/validation/test CSVs + manifest).
    Generate(CommonArgs),
    /// Train with online curation and write the training report.
    Train(CommonArgs),
    /// Compare estimators against Monte Carlo Shapley across checkpoints.
    Fidelity(CommonArgs),
    /// Bound, variance and cost diagnostics on a saved checkpoint.
    Diagnose(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Field override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Global seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                let doc: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                if !doc.is_object() {
                    return Err(CliError::config(format!("{}: expected a JSON object", path.display())));
                }
                doc
            }
            None => Value::Object(Default::default()),
        };
        for s in &self.set {
            apply_override(&mut doc, s)?;
        }
        let mut cfg = ExperimentConfig::from_value(doc)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.trainer.seed = cfg.seeds().trainer;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(runtime)?;
    fs::write(cfg.output_dir.join("resolved_config.json"), cfg.to_json()).map_err(runtime)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Blobs => data::build_blob_bundle(
            d.num_classes,
            d.per_class,
            d.feature_dim,
            d.spread,
            d.flip_rate,
            d.fractions,
            cfg.seeds().data,
        )
        .map_err(runtime),
        DataSource::Csv => {
            let dir = d.dir.as_deref().expect("validated");
            if dir.join("manifest.json").exists() {
                return DatasetBundle::read_dir(dir).map(|(b, _)| b).map_err(runtime);
            }
            let read = |name: &str| data::load_csv(&dir.join(name)).map_err(runtime);
            let train = read("train.csv")?;
            let feature_dim = train.first().map(|s| s.features.len()).unwrap_or(0);
            Ok(DatasetBundle {
                train,
                validation: read("validation.csv")?,
                test: read("test.csv")?,
                num_classes: d.num_classes,
                feature_dim,
                noise_rate: d.flip_rate,
                seed: cfg.seeds().data,
            })
        }
    }
}

pub fn build_model(cfg: &ExperimentConfig, data: &DatasetBundle) -> Result<Mlp> {
    Mlp::new(
        &cfg.model.layer_specs(data.feature_dim, data.num_classes),
        cfg.seeds().init,
    )
    .map_err(|e| CliError::at("model", e.to_string()))
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.dataset.source != DataSource::Blobs {
        return Err(CliError::at("dataset.source", "generate needs the blobs source"));
    }
    write_resolved(cfg)?;
    let bundle = load_dataset(cfg)?;
    bundle
        .write_dir(&cfg.output_dir, cfg.dataset.fractions)
        .map_err(runtime)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    write_resolved(cfg)?;
    let data = load_dataset(cfg)?;
    let net = build_model(cfg, &data)?;
    let out = &cfg.output_dir;
    let every = cfg.trainer.checkpoint_every as u64;
    let ckpt_dir = out.join("checkpoints");
    let mut save_err = None;
    let run = trainer::train_with(&cfg.trainer, &net, &data, |step, net| {
        let done = step + 1;
        if every > 0 && done % every == 0 && save_err.is_none() {
            let res = fs::create_dir_all(&ckpt_dir)
                .map_err(runtime)
                .and_then(|_| net.save(&ckpt_dir.join(format!("step_{done:08}.json"))).map_err(runtime));
            save_err = res.err();
        }
    })
    .map_err(runtime)?;
    if let Some(e) = save_err {
        return Err(e);
    }
    run.net.save(&out.join("model.json")).map_err(runtime)?;
    evaluation::write_training_report(&run.report, out).map_err(runtime)
}

pub fn cmd_fidelity(cfg: &ExperimentConfig) -> Result<()> {
    write_resolved(cfg)?;
    let data = load_dataset(cfg)?;
    let net = build_model(cfg, &data)?;
    let out = evaluation::run_fidelity(&cfg.trainer, &net, &data, &cfg.fidelity).map_err(runtime)?;
    evaluation::emit_reports(&out.records, &out.summary, &out.training, &cfg.output_dir).map_err(runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(runtime)
}

pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<()> {
    let ckpt = cfg
        .diagnostics
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("model.json"));
    if !ckpt.exists() {
        return Err(CliError::Runtime(format!("missing checkpoint {}", ckpt.display())));
    }
    write_resolved(cfg)?;
    let net = Mlp::load(&ckpt).map_err(runtime)?;
    let data = load_dataset(cfg)?;
    if net.input_dim() != data.feature_dim || net.num_classes() != data.num_classes {
        return Err(CliError::Runtime(format!(
            "checkpoint {} does not match the dataset",
            ckpt.display()
        )));
    }
    let g = &cfg.diagnostics;
    let out = &cfg.output_dir;

    let n = g.pairs.min(data.validation.len()).min(data.train.len());
    let taps = |s: &data::Sample| net.sample_taps(&s.features, s.label).map_err(runtime);
    let val_taps = data.validation[..n].iter().map(taps).collect::<Result<Vec<_>>>()?;
    let train_taps = data.train[..n].iter().map(taps).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = val_taps.iter().zip(&train_taps).collect();
    let bound = influence::bound_diagnostics(&pairs).map_err(runtime)?;
    write_json(&out.join("bound.json"), &bound)?;

    if data.train.len() < 2 {
        return Err(CliError::Runtime("variance diagnostic needs two train samples".into()));
    }
    let variance = influence::variance_diagnostic(
        &net,
        (&data.train[0], &data.train[1]),
        &data.validation,
        g.resamples,
        g.subset_size.min(data.validation.len()),
        cfg.seeds().diagnostics,
    )
    .map_err(runtime)?;
    write_json(&out.join("variance.json"), &variance)?;

    let methods = [Estimator::Ghost, Estimator::Lai, Estimator::Lli];
    let val_take = ((cfg.trainer.val_fraction_per_batch * data.validation.len() as f64).ceil() as usize)
        .clamp(1, data.validation.len());
    let batch = &data.train[..g.cost_batch.min(data.train.len())];
    let ledger = trainer::measure_scoring_cost(&net, batch, &data.validation[..val_take], &methods, &cfg.trainer)
        .map_err(runtime)?;
    let cmp = trainer::ledger_compare(&ledger, &methods).map_err(runtime)?;
    write_json(&out.join("cost.json"), &cmp)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(&a.resolve()?),
        Command::Train(a) => cmd_train(&a.resolve()?),
        Command::Fidelity(a) => cmd_fidelity(&a.resolve()?),
        Command::Diagnose(a) => cmd_diagnose(&a.resolve()?),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
/// Errors go to stderr as one JSON record.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::config(e.to_string().trim().to_string());
            eprintln!("{}", err.record());
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::default();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_json(), cfg.to_json());
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::from_json(r#"{"trainer": {"learning_rat": 0.1}}"#).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path.as_deref(), Some("trainer.learning_rat")),
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::from_json(r#"{"dataset": {"flip_rate": "high"}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { path: Some(ref p), .. } if p == "dataset.flip_rate"));
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut doc = Value::Object(Default::default());
        apply_override(&mut doc, "trainer.learning_rate=0.5").unwrap();
        apply_override(&mut doc, "trainer.estimator=ghost").unwrap();
        apply_override(&mut doc, "trainer.mode=\"off\"").unwrap();
        apply_override(&mut doc, "model.hidden=[]").unwrap();
        let cfg = ExperimentConfig::from_value(doc).unwrap();
        assert_eq!(cfg.trainer.learning_rate, 0.5);
        assert_eq!(cfg.trainer.estimator, Some(Estimator::Ghost));
        assert_eq!(cfg.trainer.mode, trainer::CurationMode::Off);
        assert!(cfg.model.hidden.is_empty());
        let mut doc = Value::Object(Default::default());
        assert!(apply_override(&mut doc, "noequals").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
        apply_override(&mut doc, "seed=3").unwrap();
        assert!(apply_override(&mut doc, "seed.x=1").is_err());
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.flip_rate = 1.5;
        assert!(matches!(cfg.validate(), Err(CliError::Config { path: Some(ref p), .. }) if p == "dataset.flip_rate"));
        let mut cfg = ExperimentConfig::default();
        cfg.trainer.warmup_epochs = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.source = DataSource::Csv;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_specs_chain_widths() {
        let m = ModelConfig {
            hidden: vec![
                HiddenLayer { width: 16, activation: Activation::Relu },
                HiddenLayer { width: 4, activation: Activation::Tanh },
            ],
            output_activation: Activation::Linear,
        };
        let specs = m.layer_specs(8, 3);
        let dims: Vec<(usize, usize)> = specs.iter().map(|s| (s.in_dim, s.out_dim)).collect();
        assert_eq!(dims, vec![(8, 16), (16, 4), (4, 3)]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::config("x").exit_code(), 1);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 2);
        assert_eq!(run(["lai", "bogus"]), 1);
        assert_eq!(run(["lai", "train", "--set", "trainer.momentum=2"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nowhere");
        assert_eq!(
            run([
                "lai".into(),
                "diagnose".into(),
                "--out".into(),
                missing.into_os_string(),
            ] as [OsString; 4]),
            2
        );
    }
}
