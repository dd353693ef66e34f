//! Flat key=value run configuration with command-line overrides.
//!
//! Every run writes its fully resolved configuration back into the output
//! directory (`config.resolved`), so results are self-describing and a run
//! can be reproduced by pointing `--config` at the echo.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dcq_core::distill::{LossKind, LossSpec, TrainMode};
use dcq_core::error::{DcqError, Result};
use dcq_core::quant::{QuantConfig, Scheme};
use dcq_core::section::SplitPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Blobs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    /// Input checkpoint for commands that start from a trained network.
    pub teacher: Option<PathBuf>,
    /// Second checkpoint for `analyze` / comparisons.
    pub student: Option<PathBuf>,
    pub quant: Scheme,
    pub bits: u32,
    pub split_policy: String, // "per_k" | "per_block"
    pub split_k: usize,
    pub loss: LossKind,
    pub huber_delta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine_decay: bool,
    pub teacher_lr: f64,
    pub teacher_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub record_every: usize,
    /// Cap on training items (0 = use everything).
    pub limit_train: usize,
    pub blobs_per_class: usize,
    pub study_steps: usize,
    pub study_eval_every: usize,
    pub calib_size: usize,
    pub n_pairs: usize,
    pub n_points: usize,
    pub empirical_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "lenet".into(),
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            teacher: None,
            student: None,
            quant: Scheme::Binary,
            bits: 4,
            split_policy: "per_k".into(),
            split_k: 2,
            loss: LossKind::Mse,
            huber_delta: 1.0,
            lr: 0.01,
            momentum: 0.9,
            epochs: 5,
            batch_size: 64,
            cosine_decay: true,
            teacher_lr: 0.1,
            teacher_epochs: 3,
            seed: 42,
            mode: TrainMode::Parallel,
            out_dir: default_out_dir(),
            run_id: String::new(),
            record_every: 50,
            limit_train: 0,
            blobs_per_class: 600,
            study_steps: 1200,
            study_eval_every: 40,
            calib_size: 512,
            n_pairs: 10_000,
            n_points: 10_000,
            empirical_pairs: 1_000,
        }
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("DCQ_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

const KEYS: &[&str] = &[
    "model",
    "dataset",
    "mnist_dir",
    "teacher",
    "student",
    "quant",
    "bits",
    "split_policy",
    "split_k",
    "loss",
    "huber_delta",
    "lr",
    "momentum",
    "epochs",
    "batch_size",
    "cosine_decay",
    "teacher_lr",
    "teacher_epochs",
    "seed",
    "mode",
    "out_dir",
    "run_id",
    "record_every",
    "limit_train",
    "blobs_per_class",
    "study_steps",
    "study_eval_every",
    "calib_size",
    "n_pairs",
    "n_points",
    "empirical_pairs",
];

impl RunConfig {
    /// Parses a config file (when given) and applies `key=value` overrides on
    /// top, in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    DcqError::Config(format!("config line {}: expected key = value", lineno + 1))
                })?;
                config.set(key.trim(), value.trim())?;
            }
        }
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                DcqError::Config(format!("override '{entry}': expected key=value"))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| DcqError::Config(format!("key '{key}': cannot parse '{value}'")))
        }
        match key {
            "model" => self.model = value.to_string(),
            "dataset" => {
                self.dataset = match value {
                    "mnist" => DatasetKind::Mnist,
                    "blobs" => DatasetKind::Blobs,
                    _ => {
                        return Err(DcqError::Config(format!(
                            "key 'dataset': '{value}' is not one of mnist|blobs"
                        )))
                    }
                }
            }
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "teacher" => {
                self.teacher = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "student" => {
                self.student = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "quant" => {
                self.quant = match value {
                    "binary" => Scheme::Binary,
                    "ternary" => Scheme::Ternary,
                    "kbit" => Scheme::KBit,
                    _ => {
                        return Err(DcqError::Config(format!(
                            "key 'quant': '{value}' is not one of binary|ternary|kbit"
                        )))
                    }
                }
            }
            "bits" => self.bits = parse(key, value)?,
            "split_policy" => {
                if value != "per_k" && value != "per_block" {
                    return Err(DcqError::Config(format!(
                        "key 'split_policy': '{value}' is not one of per_k|per_block"
                    )));
                }
                self.split_policy = value.to_string();
            }
            "split_k" => self.split_k = parse(key, value)?,
            "loss" => {
                self.loss = match value {
                    "mse" => LossKind::Mse,
                    "mae" => LossKind::Mae,
                    "huber" => LossKind::Huber,
                    _ => {
                        return Err(DcqError::Config(format!(
                            "key 'loss': '{value}' is not one of mse|mae|huber"
                        )))
                    }
                }
            }
            "huber_delta" => self.huber_delta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "cosine_decay" => self.cosine_decay = parse(key, value)?,
            "teacher_lr" => self.teacher_lr = parse(key, value)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => {
                self.mode = match value {
                    "parallel" => TrainMode::Parallel,
                    "sequential" => TrainMode::Sequential,
                    "chained" => TrainMode::SequentialChained,
                    _ => {
                        return Err(DcqError::Config(format!(
                            "key 'mode': '{value}' is not one of parallel|sequential|chained"
                        )))
                    }
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "run_id" => self.run_id = value.to_string(),
            "record_every" => self.record_every = parse(key, value)?,
            "limit_train" => self.limit_train = parse(key, value)?,
            "blobs_per_class" => self.blobs_per_class = parse(key, value)?,
            "study_steps" => self.study_steps = parse(key, value)?,
            "study_eval_every" => self.study_eval_every = parse(key, value)?,
            "calib_size" => self.calib_size = parse(key, value)?,
            "n_pairs" => self.n_pairs = parse(key, value)?,
            "n_points" => self.n_points = parse(key, value)?,
            "empirical_pairs" => self.empirical_pairs = parse(key, value)?,
            _ => {
                return Err(DcqError::Config(format!(
                    "unknown config key '{key}'; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.quant_config().validate()?;
        if self.lr <= 0.0 || self.teacher_lr <= 0.0 {
            return Err(DcqError::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DcqError::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.split_k == 0 {
            return Err(DcqError::Config("batch_size and split_k must be positive".into()));
        }
        Ok(())
    }

    pub fn quant_config(&self) -> QuantConfig {
        match self.quant {
            Scheme::Binary => QuantConfig::binary(),
            Scheme::Ternary => QuantConfig::ternary(),
            Scheme::KBit => QuantConfig::kbit(self.bits),
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec { kind: self.loss, huber_delta: self.huber_delta }
    }

    pub fn split_policy(&self) -> SplitPolicy {
        match self.split_policy.as_str() {
            "per_block" => SplitPolicy::PerBlock,
            _ => SplitPolicy::PerKLayers(self.split_k),
        }
    }

    /// Run id falls back to `<command>-s<seed>`.
    pub fn effective_run_id(&self, command: &str) -> String {
        if self.run_id.is_empty() {
            format!("{command}-s{}", self.seed)
        } else {
            self.run_id.clone()
        }
    }

    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("model", self.model.clone());
        put(
            "dataset",
            match self.dataset {
                DatasetKind::Mnist => "mnist".into(),
                DatasetKind::Blobs => "blobs".into(),
            },
        );
        put("mnist_dir", self.mnist_dir.display().to_string());
        put("teacher", self.teacher.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put("student", self.student.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put(
            "quant",
            match self.quant {
                Scheme::Binary => "binary".into(),
                Scheme::Ternary => "ternary".into(),
                Scheme::KBit => "kbit".into(),
            },
        );
        put("bits", self.bits.to_string());
        put("split_policy", self.split_policy.clone());
        put("split_k", self.split_k.to_string());
        put(
            "loss",
            match self.loss {
                LossKind::Mse => "mse".into(),
                LossKind::Mae => "mae".into(),
                LossKind::Huber => "huber".into(),
            },
        );
        put("huber_delta", self.huber_delta.to_string());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("cosine_decay", self.cosine_decay.to_string());
        put("teacher_lr", self.teacher_lr.to_string());
        put("teacher_epochs", self.teacher_epochs.to_string());
        put("seed", self.seed.to_string());
        put(
            "mode",
            match self.mode {
                TrainMode::Parallel => "parallel".into(),
                TrainMode::Sequential => "sequential".into(),
                TrainMode::SequentialChained => "chained".into(),
            },
        );
        put("out_dir", self.out_dir.display().to_string());
        put("run_id", self.run_id.clone());
        put("record_every", self.record_every.to_string());
        put("limit_train", self.limit_train.to_string());
        put("blobs_per_class", self.blobs_per_class.to_string());
        put("study_steps", self.study_steps.to_string());
        put("study_eval_every", self.study_eval_every.to_string());
        put("calib_size", self.calib_size.to_string());
        put("n_pairs", self.n_pairs.to_string());
        put("n_points", self.n_points.to_string());
        put("empirical_pairs", self.empirical_pairs.to_string());
        map
    }

    /// Writes the resolved config into `dir/config.resolved`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved");
        let mut text = String::new();
        for (k, v) in self.to_flat() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sources_give_defaults() {
        let config = RunConfig::load(None, &[]).unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn file_then_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 7\nlr = 0.5\n# comment\n\nquant = ternary\n").unwrap();
        let config = RunConfig::load(Some(&path), &["lr=0.25".into()]).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.lr, 0.25, "flag overrides file");
        assert_eq!(config.quant, Scheme::Ternary);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::load(None, &["learning_rate=1".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key"), "{msg}");
        assert!(msg.contains("lr"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_an_error() {
        assert!(RunConfig::load(None, &["epochs=three".into()]).is_err());
        assert!(RunConfig::load(None, &["quant=int8".into()]).is_err());
        assert!(RunConfig::load(None, &["momentum=1.5".into()]).is_err());
    }

    #[test]
    fn echo_roundtrips_to_an_identical_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::load(
            None,
            &["seed=99".into(), "quant=kbit".into(), "bits=3".into(), "mode=chained".into()],
        )
        .unwrap();
        let path = config.echo(dir.path()).unwrap();
        let reloaded = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(config, reloaded);
    }
}
