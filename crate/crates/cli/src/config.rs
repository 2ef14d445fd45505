//! JSON run and sweep configuration. Documents are parsed leniently into
//! partial forms, then materialized into fully explicit effective configs.
//! Effective configs are what gets echoed next to outputs, and they re-parse
//! to themselves.

use std::path::{Path, PathBuf};

use mlpscale::data::{AugmentConfig, SynthPattern};
use mlpscale::model::{parse_notation, Activation, BlockKind, ModelConfig};
use mlpscale::optim::OptimizerConfig;
use mlpscale::train::{TrainConfig, TrainMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the default CIFAR-10 binary directory.
pub const CIFAR_ENV: &str = "CIFAR10_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("reading {file}: {source}")]
    Io { file: PathBuf, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Syntax(serde_json::Error),
}

impl ConfigError {
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            _ => None,
        }
    }
}

fn invalid(path: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.to_string(),
    }
}

fn join(prefix: &str, inner: &str) -> String {
    match (prefix.is_empty(), inner.is_empty() || inner == ".") {
        (true, _) => inner.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{inner}"),
    }
}

/// Deserializes `value` reporting failures with a key path under `prefix`.
fn from_value<T: DeserializeOwned>(value: Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        invalid(join(prefix, &inner), e.into_inner())
    })
}

fn default_expansion() -> usize {
    ModelConfig::DEFAULT_EXPANSION
}

fn default_block() -> BlockKind {
    BlockKind::InvertedBottleneck
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// Architecture without the dataset-dependent input shape and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_block")]
    pub block: BlockKind,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    /// Square input side the images are resized to; `None` keeps the dataset's.
    #[serde(default)]
    pub resolution: Option<usize>,
}

impl ModelSpec {
    pub fn from_notation(s: &str) -> mlpscale::Result<Self> {
        let (depth, width) = parse_notation(s)?;
        Ok(Self {
            depth,
            width,
            expansion: default_expansion(),
            block: default_block(),
            activation: default_activation(),
            dropout: 0.0,
            resolution: None,
        })
    }

    fn parse(value: Value, path: &str) -> Result<Self, ConfigError> {
        let spec = match value {
            Value::String(s) => Self::from_notation(&s).map_err(|e| invalid(path, e))?,
            other => from_value::<Self>(other, path)?,
        };
        spec.check(path)?;
        Ok(spec)
    }

    fn check(&self, path: &str) -> Result<(), ConfigError> {
        if self.depth == 0 {
            return Err(invalid(join(path, "depth"), "must be at least 1"));
        }
        if self.width == 0 {
            return Err(invalid(join(path, "width"), "must be at least 1"));
        }
        if self.expansion == 0 {
            return Err(invalid(join(path, "expansion"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(join(path, "dropout"), "must lie in [0, 1)"));
        }
        if self.resolution == Some(0) {
            return Err(invalid(join(path, "resolution"), "must be positive"));
        }
        Ok(())
    }

    pub fn notation(&self) -> String {
        mlpscale::model::format_notation(self.depth, self.width)
    }

    /// Completes the spec with a dataset's (possibly resized) input shape and class count.
    pub fn build(&self, height: usize, width: usize, channels: usize, num_classes: usize) -> ModelConfig {
        let (h, w) = self.resolution.map_or((height, width), |r| (r, r));
        ModelConfig {
            depth: self.depth,
            width: self.width,
            expansion: self.expansion,
            input: mlpscale::model::InputShape::new(h, w, channels),
            num_classes,
            block: self.block,
            activation: self.activation,
            dropout: self.dropout,
        }
    }
}

fn synth_n() -> usize {
    2000
}
fn synth_test_n() -> usize {
    500
}
fn synth_side() -> usize {
    8
}
fn synth_channels() -> usize {
    3
}
fn synth_classes() -> usize {
    10
}
fn synth_pattern() -> SynthPattern {
    SynthPattern::Prototype { mix: 0.6 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    #[serde(default = "synth_n")]
    pub n: usize,
    #[serde(default = "synth_test_n")]
    pub test_n: usize,
    #[serde(default = "synth_side")]
    pub height: usize,
    #[serde(default = "synth_side")]
    pub width: usize,
    #[serde(default = "synth_channels")]
    pub channels: usize,
    #[serde(default = "synth_classes")]
    pub num_classes: usize,
    #[serde(default = "synth_pattern")]
    pub pattern: SynthPattern,
    /// Generator seed; the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSource {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MldsSource {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Where images come from. In JSON either a bare name (`"synth"`,
/// `"cifar10"`) or an object with a `kind` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synth(SynthSource),
    Cifar10(CifarSource),
    Mlds(MldsSource),
}

impl DatasetSpec {
    fn parse(value: Value, path: &str) -> Result<Self, ConfigError> {
        let (kind, mut body) = match value {
            Value::String(s) => (s, Value::Object(Default::default())),
            Value::Object(mut map) => {
                let kind = match map.remove("kind") {
                    Some(Value::String(k)) => k,
                    Some(_) => return Err(invalid(join(path, "kind"), "must be a string")),
                    None => return Err(invalid(join(path, "kind"), "missing dataset kind")),
                };
                (kind, Value::Object(map))
            }
            _ => return Err(invalid(path, "expected a dataset name or object")),
        };
        let spec = match kind.as_str() {
            "synth" => DatasetSpec::Synth(from_value(body, path)?),
            "cifar10" => {
                if let Value::Object(map) = &mut body {
                    if !map.contains_key("dir") {
                        let dir = std::env::var(CIFAR_ENV).unwrap_or_else(|_| "data/cifar-10-batches-bin".into());
                        map.insert("dir".into(), Value::String(dir));
                    }
                }
                DatasetSpec::Cifar10(from_value(body, path)?)
            }
            "mlds" => DatasetSpec::Mlds(from_value(body, path)?),
            other => {
                return Err(invalid(
                    join(path, "kind"),
                    format!("unknown dataset {other:?}; expected synth, cifar10 or mlds"),
                ))
            }
        };
        if let DatasetSpec::Synth(s) = &spec {
            for (key, v) in [("n", s.n), ("height", s.height), ("width", s.width), ("channels", s.channels)] {
                if v == 0 {
                    return Err(invalid(join(path, key), "must be positive"));
                }
            }
            if s.num_classes < 2 || s.num_classes > s.n {
                return Err(invalid(join(path, "num_classes"), "must lie in [2, n]"));
            }
            if s.test_n < s.num_classes {
                return Err(invalid(join(path, "test_n"), "must be at least num_classes"));
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Partial augmentation settings; absent fields take protocol defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentPatch {
    flip: Option<bool>,
    crop_pad: Option<usize>,
    mixup_alpha: Option<f64>,
    label_smoothing: Option<f64>,
}

/// Training keys shared by run and sweep documents.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainPatch {
    mode: Option<TrainMode>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    optimizer: Option<Value>,
    augment: Option<AugmentPatch>,
    seed: Option<u64>,
    eval_every: Option<usize>,
    warmup_epochs: Option<usize>,
    grad_clip: Option<f64>,
    auto_resize: Option<bool>,
}

impl TrainPatch {
    fn materialize(self, mode: TrainMode, prefix: &str) -> Result<TrainConfig, ConfigError> {
        let mut t = TrainConfig::defaults(mode);
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.optimizer {
            t.optimizer = from_value::<OptimizerConfig>(v, &join(prefix, "optimizer"))?;
        }
        if let Some(a) = self.augment {
            let d = t.augment;
            t.augment = AugmentConfig {
                flip: a.flip.unwrap_or(d.flip),
                crop_pad: a.crop_pad.unwrap_or(d.crop_pad),
                mixup_alpha: a.mixup_alpha.unwrap_or(d.mixup_alpha),
                label_smoothing: a.label_smoothing.unwrap_or(d.label_smoothing),
            };
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = self.warmup_epochs {
            t.warmup_epochs = v;
        }
        if self.grad_clip.is_some() {
            t.grad_clip = self.grad_clip;
        }
        if let Some(v) = self.auto_resize {
            t.auto_resize = v;
        }
        check_train(&t, prefix)?;
        Ok(t)
    }
}

fn check_train(t: &TrainConfig, prefix: &str) -> Result<(), ConfigError> {
    if t.epochs == 0 {
        return Err(invalid(join(prefix, "epochs"), "must be at least 1"));
    }
    if t.batch_size == 0 {
        return Err(invalid(join(prefix, "batch_size"), "must be at least 1"));
    }
    if let Some(c) = t.grad_clip {
        if c.is_nan() || c <= 0.0 {
            return Err(invalid(join(prefix, "grad_clip"), "must be positive"));
        }
    }
    t.optimizer
        .validate()
        .map_err(|e| invalid(join(prefix, "optimizer"), e))?;
    t.augment.validate().map_err(|e| invalid(join(prefix, "augment"), e))?;
    t.validate().map_err(|e| invalid(prefix, e))
}

/// A single training run, fully explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub precision: Precision,
    /// Checkpoint to start from (fine-tuning and probing).
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    model: Value,
    dataset: Value,
    #[serde(default)]
    precision: Option<Precision>,
    #[serde(default)]
    pretrained: Option<PathBuf>,
    /// Nested training block, as written in effective configs.
    #[serde(default)]
    train: Option<Value>,
    // Top-level shorthands for the training block.
    #[serde(default)]
    mode: Option<TrainMode>,
    #[serde(default)]
    epochs: Option<usize>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    optimizer: Option<Value>,
    #[serde(default)]
    augment: Option<Value>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    eval_every: Option<usize>,
    #[serde(default)]
    warmup_epochs: Option<usize>,
    #[serde(default)]
    grad_clip: Option<f64>,
    #[serde(default)]
    auto_resize: Option<bool>,
}

/// Merges the top-level shorthands into a `train` patch, rejecting keys given twice.
fn merge_train(mut train: serde_json::Map<String, Value>, top: Vec<(&str, Option<Value>)>) -> Result<Value, ConfigError> {
    for (key, v) in top {
        if let Some(v) = v {
            if train.contains_key(key) {
                return Err(invalid(key, "given both at top level and under train"));
            }
            train.insert(key.to_string(), v);
        }
    }
    Ok(Value::Object(train))
}

fn to_json<T: Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(|x| serde_json::to_value(x).expect("plain data serializes"))
}

fn train_from(train: Option<Value>, top: Vec<(&str, Option<Value>)>, default_mode: TrainMode, prefix: &str) -> Result<TrainConfig, ConfigError> {
    let base = match train {
        None => Default::default(),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(invalid(prefix, "expected an object")),
    };
    let patch: TrainPatch = from_value(merge_train(base, top)?, prefix)?;
    let mode = patch.mode.unwrap_or(default_mode);
    patch.materialize(mode, prefix)
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_json_str_with_mode(text, TrainMode::Scratch)
    }

    /// Parses with `default_mode` applied when the document names none.
    pub fn from_json_str_with_mode(text: &str, default_mode: TrainMode) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(ConfigError::Syntax)?;
        Self::from_value(value, default_mode)
    }

    pub fn from_value(value: Value, default_mode: TrainMode) -> Result<Self, ConfigError> {
        let raw: RawRun = from_value(value, "")?;
        let model = ModelSpec::parse(raw.model, "model")?;
        let dataset = DatasetSpec::parse(raw.dataset, "dataset")?;
        // Shorthands are reported under their own key; nested ones under train.
        let prefix = if raw.train.is_some() { "train" } else { "" };
        let top = vec![
            ("mode", to_json(&raw.mode)),
            ("epochs", to_json(&raw.epochs)),
            ("batch_size", to_json(&raw.batch_size)),
            ("optimizer", raw.optimizer),
            ("augment", raw.augment),
            ("seed", to_json(&raw.seed)),
            ("eval_every", to_json(&raw.eval_every)),
            ("warmup_epochs", to_json(&raw.warmup_epochs)),
            ("grad_clip", to_json(&raw.grad_clip)),
            ("auto_resize", to_json(&raw.auto_resize)),
        ];
        let train = train_from(raw.train, top, default_mode, prefix)?;
        Ok(Self {
            model,
            dataset,
            train,
            precision: raw.precision.unwrap_or(Precision::F32),
            pretrained: raw.pretrained,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_mode(path, TrainMode::Scratch)
    }

    pub fn load_with_mode(path: &Path, default_mode: TrainMode) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            file: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str_with_mode(&text, default_mode)
    }

    /// The effective configuration as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Downstream evaluation attached to every sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSpec {
    pub dataset: DatasetSpec,
    pub probe: Option<TrainConfig>,
    pub finetune: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub models: Vec<ModelSpec>,
    pub fractions: Vec<f64>,
    pub epochs: Vec<usize>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub precision: Precision,
    pub downstream: Option<DownstreamSpec>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    models: Vec<Value>,
    fractions: Vec<f64>,
    epochs: Vec<usize>,
    dataset: Value,
    #[serde(default)]
    train: Option<Value>,
    #[serde(default)]
    precision: Option<Precision>,
    #[serde(default)]
    downstream: Option<RawDownstream>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDownstream {
    dataset: Value,
    #[serde(default)]
    probe: Option<Value>,
    #[serde(default)]
    finetune: Option<Value>,
}

impl SweepSpec {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(ConfigError::Syntax)?;
        let raw: RawSweep = from_value(value, "")?;
        if raw.models.is_empty() {
            return Err(invalid("models", "must list at least one model"));
        }
        let models = raw
            .models
            .into_iter()
            .enumerate()
            .map(|(i, v)| ModelSpec::parse(v, &format!("models[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        if raw.fractions.is_empty() {
            return Err(invalid("fractions", "must list at least one fraction"));
        }
        for (i, f) in raw.fractions.iter().enumerate() {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(invalid(format!("fractions[{i}]"), "must lie in (0, 1]"));
            }
        }
        if raw.epochs.is_empty() {
            return Err(invalid("epochs", "must list at least one epoch budget"));
        }
        if let Some(i) = raw.epochs.iter().position(|&t| t == 0) {
            return Err(invalid(format!("epochs[{i}]"), "must be at least 1"));
        }
        let mut epochs = raw.epochs;
        epochs.sort_unstable();
        epochs.dedup();
        let dataset = DatasetSpec::parse(raw.dataset, "dataset")?;
        let mut train = train_from(raw.train, vec![], TrainMode::Pretrain, "train")?;
        // Budgets come from the epochs list.
        train.epochs = *epochs.last().expect("non-empty");
        let downstream = match raw.downstream {
            None => None,
            Some(d) => {
                let dataset = DatasetSpec::parse(d.dataset, "downstream.dataset")?;
                let probe = d
                    .probe
                    .map(|v| train_from(Some(v), vec![], TrainMode::Probe, "downstream.probe"))
                    .transpose()?;
                let finetune = d
                    .finetune
                    .map(|v| train_from(Some(v), vec![], TrainMode::Finetune, "downstream.finetune"))
                    .transpose()?;
                if probe.is_none() && finetune.is_none() {
                    return Err(invalid("downstream", "needs a probe or finetune block"));
                }
                Some(DownstreamSpec {
                    dataset,
                    probe,
                    finetune,
                })
            }
        };
        Ok(Self {
            models,
            fractions: raw.fractions,
            epochs,
            dataset,
            train,
            precision: raw.precision.unwrap_or(Precision::F32),
            downstream,
            output_dir: raw.output_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            file: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn cell_count(&self) -> usize {
        self.models.len() * self.fractions.len() * self.epochs.len()
    }
}
