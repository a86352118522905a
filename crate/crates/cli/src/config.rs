//! Run configuration: presets, TOML files, manifests and overrides.
//!
//! Resolution order, later layers winning:
//!
//! 1. the preset (`--preset`, default `desk`)
//! 2. the config file (`--config`): TOML, or a run manifest (JSON) whose
//!    resolved config replaces the preset entirely
//! 3. environment variables `LTR_<SECTION>__<KEY>`, e.g.
//!    `LTR_TRAINING__EPOCHS=5` or `LTR_DATA__GENERATOR__LISTS=1000`
//! 4. `--set section.key=value` flags
//! 5. the dedicated flags (`--seed`, `--out`, subcommand paths)
//!
//! Values in layers 3 and 4 are parsed as TOML literals, falling back to a
//! plain string. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ltr_core::data::GeneratorConfig;
use ltr_core::gbdt::LambdaMartConfig;
use ltr_core::losses::{LossConfig, LossKind};
use ltr_core::rankers::{ArchitectureKind, NeuralConfig};
use ltr_core::train::TrainConfig;

pub const ENV_PREFIX: &str = "LTR_";
pub const PRESETS: [&str; 4] = ["tiny", "desk", "paper-ratio", "paper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub training: TrainingSection,
    pub gbdt: LambdaMartConfig,
    pub eval: EvalSection,
    pub abtest: AbtestSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training dataset (JSONL); read by `train`.
    pub train: Option<PathBuf>,
    /// Held-out dataset; validation for `train`, test set for `evaluate`
    /// and `compare`.
    pub test: Option<PathBuf>,
    /// Share of lists, by time, that `generate` puts into the train file.
    pub train_fraction: f64,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Neural,
    Lambdamart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: ModelFamily,
    pub architecture: ArchitectureKind,
    /// Residual blocks in the backbone (k).
    pub blocks: usize,
    /// Backbone width (h).
    pub hidden: usize,
    pub d_cat: usize,
    pub d_text: usize,
    /// Falls back to the preset's value for the chosen architecture.
    pub dropout: Option<f64>,
    /// Artifact file stem; defaults to e.g. `ce_tt` or `lambdamart`.
    pub name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Falls back to the preset's value for the chosen architecture.
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub cutoff: usize,
    /// Model specs: `name=path`, a bare artifact path (named by its file
    /// stem), or one of the built-in scorers `@oracle` (planted utility),
    /// `@ideal` (the logged labels) and `@random`.
    pub models: Vec<String>,
    /// Reference model for relative improvements; defaults to the first.
    pub baseline: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbtestSection {
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    /// CSV column holding the samples; without it every file is read as
    /// one number per line.
    pub column: Option<String>,
    pub confidence: f64,
}

/// Learning rate and dropout for an architecture under a preset.
pub fn architecture_defaults(preset: &str, arch: ArchitectureKind) -> (f64, f64) {
    match (preset, arch) {
        ("paper", ArchitectureKind::TwoTower) => (1e-3, 0.0),
        ("paper", ArchitectureKind::CrossEncoder) => (1e-3, 0.3),
        ("paper", ArchitectureKind::Transformer) => (1e-4, 0.5),
        _ => (3e-3, 0.1),
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            preset: name.to_string(),
            seed: 42,
            out: PathBuf::from("ltr-out"),
            data: DataSection {
                train: None,
                test: None,
                train_fraction: 0.95,
                generator: GeneratorConfig {
                    lists: 20_000,
                    ..GeneratorConfig::default()
                },
            },
            model: ModelSection {
                family: ModelFamily::Neural,
                architecture: ArchitectureKind::TwoTower,
                blocks: 3,
                hidden: 32,
                d_cat: 8,
                d_text: 16,
                dropout: None,
                name: None,
            },
            loss: LossConfig::new(LossKind::Ce, 0.5)?,
            training: TrainingSection {
                epochs: 3,
                batch_size: 64,
                learning_rate: None,
            },
            gbdt: LambdaMartConfig::desk(),
            eval: EvalSection {
                cutoff: ltr_core::metrics::DEFAULT_CUTOFF,
                models: Vec::new(),
                baseline: None,
            },
            abtest: AbtestSection {
                a: None,
                b: None,
                column: None,
                confidence: 0.95,
            },
        };
        match name {
            "desk" => {}
            "tiny" => {
                cfg.data.train_fraction = 0.8;
                cfg.data.generator = GeneratorConfig {
                    lists: 400,
                    min_len: 5,
                    max_len: 12,
                    catalog_size: 300,
                    ..GeneratorConfig::default()
                };
                cfg.model.blocks = 2;
                cfg.model.hidden = 8;
                cfg.model.d_cat = 4;
                cfg.model.d_text = 4;
                cfg.training.epochs = 2;
                cfg.training.batch_size = 32;
                cfg.gbdt.trees = 10;
                cfg.gbdt.min_samples_leaf = 5;
            }
            "paper-ratio" | "paper" => {
                cfg.data.generator.lists = 62_000;
                cfg.data.train_fraction = 61.0 / 62.0;
                if name == "paper" {
                    cfg.model.hidden = 1024;
                    cfg.model.d_cat = 128;
                    cfg.model.d_text = 512;
                    cfg.training.batch_size = 1000;
                    cfg.gbdt = LambdaMartConfig::paper();
                }
            }
            other => bail!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")),
        }
        Ok(cfg)
    }

    pub fn learning_rate(&self) -> f64 {
        self.training
            .learning_rate
            .unwrap_or_else(|| architecture_defaults(&self.preset, self.model.architecture).0)
    }

    pub fn dropout(&self) -> f64 {
        self.model
            .dropout
            .unwrap_or_else(|| architecture_defaults(&self.preset, self.model.architecture).1)
    }

    /// Replaces architecture-dependent fallbacks with concrete values so
    /// the manifest records exactly what ran.
    pub fn fill_architecture_defaults(&mut self) {
        self.training.learning_rate = Some(self.learning_rate());
        self.model.dropout = Some(self.dropout());
    }

    pub fn neural_config(&self) -> NeuralConfig {
        NeuralConfig {
            architecture: self.model.architecture,
            hidden: self.model.hidden,
            blocks: self.model.blocks,
            dropout: self.dropout(),
            d_cat: self.model.d_cat,
            d_text: self.model.d_text,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.learning_rate(),
            seed: self.seed,
        }
    }

    pub fn model_name(&self) -> String {
        if let Some(name) = &self.model.name {
            return name.clone();
        }
        match self.model.family {
            ModelFamily::Lambdamart => "lambdamart".to_string(),
            ModelFamily::Neural => format!(
                "{}_{}",
                self.loss.kind.label().to_lowercase(),
                self.model.architecture.short().to_lowercase()
            ),
        }
    }

    /// Range checks on everything that is not checked where it is used.
    pub fn validate(&self) -> Result<()> {
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            bail!("invalid configuration `data.train_fraction`: must lie in (0, 1), got {f}");
        }
        if self.training.batch_size == 0 {
            bail!("invalid configuration `training.batch_size`: must be >= 1");
        }
        if !(self.abtest.confidence > 0.0 && self.abtest.confidence < 1.0) {
            bail!("invalid configuration `abtest.confidence`: must lie in (0, 1)");
        }
        self.data.generator.validate()?;
        self.loss.validate()?;
        self.gbdt.validate()?;
        ltr_core::metrics::EvalConfig { cutoff: self.eval.cutoff }.validate()?;
        if self.model.family == ModelFamily::Neural {
            self.neural_config().validate()?;
            self.train_config().validate()?;
        }
        Ok(())
    }
}

/// Overrides collected from the command line and environment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `section.key=value` assignments from `--set`.
    pub set: Vec<String>,
    /// Assignments applied last, from subcommand flags.
    pub flags: Vec<(String, Value)>,
}

pub fn resolve<I>(overrides: &Overrides, env: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut value = match &overrides.config {
        Some(path) if is_manifest(path) => manifest_config(path)?,
        Some(path) => {
            let file = read_toml(path)?;
            let preset = overrides
                .preset
                .clone()
                .or_else(|| file.get("preset").and_then(Value::as_str).map(str::to_string))
                .unwrap_or_else(|| "desk".into());
            let mut base = serde_json::to_value(RunConfig::preset(&preset)?)?;
            merge(&mut base, file);
            base
        }
        None => serde_json::to_value(RunConfig::preset(overrides.preset.as_deref().unwrap_or("desk"))?)?,
    };
    if let (Some(preset), Some(path)) = (&overrides.preset, &overrides.config) {
        if is_manifest(path) {
            log::warn!("--preset {preset} ignored: {} is a resolved manifest", path.display());
        }
    }

    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            rest.contains("__").then(|| (rest.to_lowercase().replace("__", "."), v))
        })
        .collect();
    env.sort();
    for (key, raw) in env {
        assign(&mut value, &key, parse_literal(&raw)).with_context(|| format!("environment override {ENV_PREFIX}{}", key.to_uppercase().replace('.', "__")))?;
    }
    for item in &overrides.set {
        let (key, raw) = item
            .split_once('=')
            .with_context(|| format!("--set expects section.key=value, got `{item}`"))?;
        assign(&mut value, key.trim(), parse_literal(raw.trim()))?;
    }
    if let Some(seed) = overrides.seed {
        assign(&mut value, "seed", Value::from(seed))?;
    }
    if let Some(out) = &overrides.out {
        assign(&mut value, "out", Value::from(out.to_string_lossy().into_owned()))?;
    }
    for (key, v) in &overrides.flags {
        assign(&mut value, key, v.clone())?;
    }

    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        anyhow::anyhow!("invalid configuration `{key}`: {}", e.inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

fn manifest_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let mut manifest: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    match manifest.get_mut("config") {
        Some(cfg) => Ok(cfg.take()),
        None => bail!("{}: manifest has no `config` section", path.display()),
    }
}

fn read_toml(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(serde_json::to_value(table)?)
}

/// Deep merge of `patch` into `base`; tables merge key by key, anything
/// else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn assign(root: &mut Value, dotted: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            bail!("invalid configuration `{dotted}`: `{}` is not a section", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), v);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

fn parse_literal(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
