//! Run configuration as flat, dotted keys.
//!
//! Files are TOML; nested tables and dotted keys are equivalent (`[model]
//! backbone = "conv4"` is the same as `model.backbone = "conv4"`). Every key has a
//! default, unknown keys are rejected, and errors name the offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::backbone::BackboneKind;
use crate::data::{AugmentationPolicy, Dataset, SyntheticSpec};
use crate::episode::TaskSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{Monitor, TrainConfig, ValMode};

/// Environment variable holding the directory that contains on-disk datasets.
pub const DATA_ROOT_ENV: &str = "PROXYNET_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cub,
    MiniImagenet,
    /// Any manifest given by `dataset.manifest`.
    Manifest,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cub => "cub",
            DatasetKind::MiniImagenet => "mini_imagenet",
            DatasetKind::Manifest => "manifest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Manifest path; relative paths resolve against the data root.
    pub manifest: Option<PathBuf>,
    /// Overrides the data-root environment variable.
    pub root: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub t_query: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub augment: bool,
    pub policy: AugmentationPolicy,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                kind: DatasetKind::Synthetic,
                manifest: None,
                root: None,
                synthetic: SyntheticSpec::default(),
            },
            model: ModelConfig::default(),
            task: TaskSpec {
                n_way: 5,
                k_shot: 1,
                t_query: 15,
            },
            train: TrainConfig::default(),
            augment: true,
            policy: AugmentationPolicy::default(),
            eval: EvalConfig {
                n_tasks: 600,
                t_query: 15,
                seed: 0,
            },
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .filter(|i| *i >= 0)
        .map(|i| i as usize)
        .ok_or_else(|| err(key, format!("expected a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(err(key, format!("expected a number, got {v}"))),
    }
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str().ok_or_else(|| err(key, format!("expected a string, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| err(key, format!("expected true or false, got {v}")))
}

fn as_f32x3(key: &str, v: &Value) -> Result<[f32; 3]> {
    let items = v.as_array().filter(|a| a.len() == 3).ok_or_else(|| err(key, format!("expected a 3-element array, got {v}")))?;
    let mut out = [0f32; 3];
    for (o, item) in out.iter_mut().zip(items) {
        *o = as_f64(key, item)? as f32;
    }
    Ok(out)
}

fn as_usizex3(key: &str, v: &Value) -> Result<[usize; 3]> {
    let items = v.as_array().filter(|a| a.len() == 3).ok_or_else(|| err(key, format!("expected a 3-element array, got {v}")))?;
    let mut out = [0usize; 3];
    for (o, item) in out.iter_mut().zip(items) {
        *o = as_usize(key, item)?;
    }
    Ok(out)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// The dotted keys of a TOML document with their values, sorted by key.
pub fn flat_pairs(text: &str) -> Result<Vec<(String, Value)>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| err("<file>", e.message().to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    Ok(flat.into_iter().collect())
}

/// Parses the right-hand side of a `key=value` override. Bare words are strings.
pub fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

impl RunConfig {
    /// Defaults overridden by the keys of a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_pairs(&flat_pairs(text)?)
    }

    /// Defaults with each pair applied in order, then validated.
    pub fn from_pairs(pairs: &[(String, Value)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let s = &mut self.dataset.synthetic;
        let p = &mut self.policy;
        let t = &mut self.train;
        match key {
            "dataset.kind" | "dataset" => {
                self.dataset.kind = match as_str(key, v)? {
                    "synthetic" => DatasetKind::Synthetic,
                    "cub" => DatasetKind::Cub,
                    "mini_imagenet" | "miniimagenet" => DatasetKind::MiniImagenet,
                    "manifest" => DatasetKind::Manifest,
                    other => return Err(err(key, format!("unknown dataset {other:?} (expected synthetic, cub, mini_imagenet or manifest)"))),
                }
            }
            "dataset.manifest" => self.dataset.manifest = Some(as_str(key, v)?.into()),
            "dataset.root" => self.dataset.root = Some(as_str(key, v)?.into()),
            "synthetic.n_classes" => s.n_classes = as_usize(key, v)?,
            "synthetic.samples_per_class" => s.samples_per_class = as_usize(key, v)?,
            "synthetic.image_size" => s.image_size = as_usize(key, v)?,
            "synthetic.noise_std" => s.noise_std = as_f64(key, v)?,
            "synthetic.jitter" => s.jitter = as_f64(key, v)?,
            "synthetic.split" => s.split = as_usizex3(key, v)?,
            "model.backbone" => self.model.backbone.kind = as_str(key, v)?.parse::<BackboneKind>().map_err(|e| err(key, e.to_string()))?,
            "model.width" => self.model.backbone.width = as_usize(key, v)?,
            "model.proxy" => self.model.proxy = as_str(key, v)?.parse().map_err(|e: String| err(key, e))?,
            "model.metric" => self.model.metric = as_str(key, v)?.parse().map_err(|e: String| err(key, e))?,
            "model.normalize_weights" => self.model.normalize_weights = as_bool(key, v)?,
            "task.n_way" => self.task.n_way = as_usize(key, v)?,
            "task.k_shot" => self.task.k_shot = as_usize(key, v)?,
            "task.t_query" => self.task.t_query = as_usize(key, v)?,
            "train.lr" => t.lr = as_f64(key, v)?,
            "train.momentum" => t.momentum = as_f64(key, v)?,
            "train.weight_decay" => t.weight_decay = as_f64(key, v)?,
            "train.epochs" => t.epochs = as_usize(key, v)?,
            "train.episodes_per_epoch" => t.episodes_per_epoch = as_usize(key, v)?,
            "train.val_tasks" => t.val_tasks = as_usize(key, v)?,
            "train.val_query" => t.val_query = as_usize(key, v)?,
            "train.monitor" => {
                t.monitor = match as_str(key, v)? {
                    "val_accuracy" => Monitor::ValAccuracy,
                    "train_loss" => Monitor::TrainLoss,
                    other => return Err(err(key, format!("unknown monitor {other:?} (expected val_accuracy or train_loss)"))),
                }
            }
            "train.val_mode" => {
                t.val_mode = match as_str(key, v)? {
                    "resample" => ValMode::Resample,
                    "fixed" => ValMode::Fixed,
                    other => return Err(err(key, format!("unknown validation mode {other:?} (expected resample or fixed)"))),
                }
            }
            "plateau.factor" => t.plateau.factor = as_f64(key, v)?,
            "plateau.patience" => t.plateau.patience = as_usize(key, v)?,
            "plateau.min_delta" => t.plateau.min_delta = as_f64(key, v)?,
            "plateau.min_lr" => t.plateau.min_lr = as_f64(key, v)?,
            "augment.enabled" => self.augment = as_bool(key, v)?,
            "augment.resize_to" => p.resize_to = as_usize(key, v)?,
            "augment.crop_to" => {
                p.crop_to = as_usize(key, v)?;
                self.model.image_size = p.crop_to;
            }
            "augment.random_crop" => p.random_crop = as_bool(key, v)?,
            "augment.color_jitter" => p.color_jitter = as_f32x3(key, v)?,
            "augment.flip_prob" => p.horizontal_flip_prob = as_f64(key, v)? as f32,
            "augment.mean" => p.mean = as_f32x3(key, v)?,
            "augment.std" => p.std = as_f32x3(key, v)?,
            "eval.n_tasks" => self.eval.n_tasks = as_usize(key, v)?,
            "eval.t_query" => self.eval.t_query = as_usize(key, v)?,
            "eval.seed" => self.eval.seed = as_u64(key, v)?,
            "seed" => self.seed = as_u64(key, v)?,
            "out" => self.out = as_str(key, v)?.into(),
            _ => return Err(err(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Checks cross-field constraints; the key named in an error is the first one involved.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, e: Error| err(key, e.to_string());
        self.task.validate().map_err(|e| wrap("task.n_way", e))?;
        self.policy.validate().map_err(|e| wrap("augment.crop_to", e))?;
        self.train.validate().map_err(|e| wrap("train", e))?;
        if self.model.backbone.width == 0 {
            return Err(err("model.width", "width must be at least 1"));
        }
        if self.model.image_size != self.policy.crop_to {
            return Err(err("augment.crop_to", format!("crop size {} differs from model input {}", self.policy.crop_to, self.model.image_size)));
        }
        if self.dataset.kind == DatasetKind::Synthetic {
            self.dataset.synthetic.validate().map_err(|e| wrap("synthetic.split", e))?;
        }
        if self.dataset.kind == DatasetKind::Manifest && self.dataset.manifest.is_none() {
            return Err(err("dataset.manifest", "required when dataset.kind = \"manifest\""));
        }
        Ok(())
    }

    /// The training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn eval_spec(&self) -> TaskSpec {
        TaskSpec {
            t_query: self.eval.t_query,
            ..self.task
        }
    }

    /// Every key with its resolved value, as a TOML document that reproduces this run.
    pub fn to_toml(&self) -> String {
        let s = &self.dataset.synthetic;
        let p = &self.policy;
        let t = &self.train;
        let arr3 = |a: [f32; 3]| format!("[{}, {}, {}]", fmt_f(a[0] as f64), fmt_f(a[1] as f64), fmt_f(a[2] as f64));
        let q = |x: &str| Value::String(x.to_string()).to_string();
        let mut lines = vec![format!("dataset.kind = {}", q(self.dataset.kind.name()))];
        if let Some(m) = &self.dataset.manifest {
            lines.push(format!("dataset.manifest = {}", q(&m.display().to_string())));
        }
        if let Some(r) = &self.dataset.root {
            lines.push(format!("dataset.root = {}", q(&r.display().to_string())));
        }
        lines.extend([
            format!("synthetic.n_classes = {}", s.n_classes),
            format!("synthetic.samples_per_class = {}", s.samples_per_class),
            format!("synthetic.image_size = {}", s.image_size),
            format!("synthetic.noise_std = {}", fmt_f(s.noise_std)),
            format!("synthetic.jitter = {}", fmt_f(s.jitter)),
            format!("synthetic.split = [{}, {}, {}]", s.split[0], s.split[1], s.split[2]),
            format!("model.backbone = {}", q(self.model.backbone.kind.name())),
            format!("model.width = {}", self.model.backbone.width),
            format!("model.proxy = {}", q(self.model.proxy.name())),
            format!("model.metric = {}", q(self.model.metric.name())),
            format!("model.normalize_weights = {}", self.model.normalize_weights),
            format!("task.n_way = {}", self.task.n_way),
            format!("task.k_shot = {}", self.task.k_shot),
            format!("task.t_query = {}", self.task.t_query),
            format!("train.lr = {}", fmt_f(t.lr)),
            format!("train.momentum = {}", fmt_f(t.momentum)),
            format!("train.weight_decay = {}", fmt_f(t.weight_decay)),
            format!("train.epochs = {}", t.epochs),
            format!("train.episodes_per_epoch = {}", t.episodes_per_epoch),
            format!("train.val_tasks = {}", t.val_tasks),
            format!("train.val_query = {}", t.val_query),
            format!(
                "train.monitor = {}",
                q(match t.monitor {
                    Monitor::ValAccuracy => "val_accuracy",
                    Monitor::TrainLoss => "train_loss",
                })
            ),
            format!(
                "train.val_mode = {}",
                q(match t.val_mode {
                    ValMode::Resample => "resample",
                    ValMode::Fixed => "fixed",
                })
            ),
            format!("plateau.factor = {}", fmt_f(t.plateau.factor)),
            format!("plateau.patience = {}", t.plateau.patience),
            format!("plateau.min_delta = {}", fmt_f(t.plateau.min_delta)),
            format!("plateau.min_lr = {}", fmt_f(t.plateau.min_lr)),
            format!("augment.enabled = {}", self.augment),
            format!("augment.resize_to = {}", p.resize_to),
            format!("augment.crop_to = {}", p.crop_to),
            format!("augment.random_crop = {}", p.random_crop),
            format!("augment.color_jitter = {}", arr3(p.color_jitter)),
            format!("augment.flip_prob = {}", fmt_f(p.horizontal_flip_prob as f64)),
            format!("augment.mean = {}", arr3(p.mean)),
            format!("augment.std = {}", arr3(p.std)),
            format!("eval.n_tasks = {}", self.eval.n_tasks),
            format!("eval.t_query = {}", self.eval.t_query),
            format!("eval.seed = {}", self.eval.seed),
            format!("seed = {}", self.seed),
            format!("out = {}", q(&self.out.display().to_string())),
        ]);
        lines.join("\n") + "\n"
    }

    /// Directory holding on-disk datasets: `dataset.root`, else the environment variable, else `data`.
    pub fn data_root(&self) -> PathBuf {
        self.dataset
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Loads or generates the configured dataset.
    pub fn open_dataset(&self) -> Result<Dataset> {
        let policy = self.policy.clone();
        let mut ds = match self.dataset.kind {
            DatasetKind::Synthetic => {
                let synth = crate::data::generate_synthetic(&self.dataset.synthetic, self.seed)?;
                Dataset::from_synthetic(synth, policy)
            }
            kind => {
                let root = self.data_root();
                let manifest = match (&self.dataset.manifest, kind) {
                    (Some(m), _) => root.join(m),
                    (None, DatasetKind::Cub) => root.join("cub").join("manifest.csv"),
                    (None, DatasetKind::MiniImagenet) => root.join("mini_imagenet").join("manifest.csv"),
                    (None, _) => return Err(err("dataset.manifest", "no manifest configured")),
                };
                Dataset::open(&manifest, None, policy)?
            }
        };
        ds.augment = self.augment;
        Ok(ds)
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_integer()
        .filter(|i| *i >= 0)
        .map(|i| i as u64)
        .ok_or_else(|| err(key, format!("expected a non-negative integer, got {v}")))
}

/// A float literal TOML reads back as a float.
fn fmt_f(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::MetricKind;

    #[test]
    fn nested_and_dotted_keys_agree() {
        let a = RunConfig::from_toml_str("model.metric = \"euclidean\"\ntrain.epochs = 3\n").unwrap();
        let b = RunConfig::from_toml_str("[model]\nmetric = \"euclidean\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.metric, MetricKind::Euclidean);
        assert_eq!(a.train.epochs, 3);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_toml_str("model.metric = \"manhattan\"\n").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "model.metric"), "{e}");
        let e = RunConfig::from_toml_str("train.epochz = 3\n").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "train.epochz"), "{e}");
        let e = RunConfig::from_toml_str("task.k_shot = \"one\"\n").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "task.k_shot"), "{e}");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::from_toml_str("model.proxy = \"sum\"\naugment.color_jitter = [0.1, 0.2, 0.3]\ntrain.lr = 0.05\n").unwrap();
        cfg.dataset.manifest = Some("x/manifest.csv".into());
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str(&RunConfig::default().to_toml()).unwrap(), RunConfig::default());
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("mean"), Value::String("mean".into()));
        assert_eq!(parse_value("\"mean\""), Value::String("mean".into()));
        assert_eq!(parse_value("[1, 2, 3]").as_array().unwrap().len(), 3);
    }

    #[test]
    fn crop_size_sets_model_input() {
        let cfg = RunConfig::from_toml_str("augment.crop_to = 32\naugment.resize_to = 36\n").unwrap();
        assert_eq!(cfg.model.image_size, 32);
        let e = RunConfig::from_toml_str("augment.crop_to = 100\n").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "augment.crop_to"), "{e}");
    }
}
