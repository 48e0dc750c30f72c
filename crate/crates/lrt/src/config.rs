//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use lrt_core::eval::EvalMode;
use lrt_core::trainer::{TrainMode, Visibility};
use lrt_core::{LrtConfig, ModelConfig, Real};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Interleaved,
    Chunked,
    /// Exact token-by-token recurrence. Slow; meant for tiny runs.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityName {
    Fresh,
    Stale,
}

impl From<VisibilityName> for Visibility {
    fn from(v: VisibilityName) -> Self {
        match v {
            VisibilityName::Fresh => Visibility::Fresh,
            VisibilityName::Stale => Visibility::Stale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Interleaved subsets `S`.
    pub stages: usize,
    pub visibility: VisibilityName,
    /// Chunk size for the chunked strategy.
    pub chunk: usize,
    /// Tokens per parameter. Ignored when `steps` is non-zero.
    pub ratio: Real,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub weight_decay: Real,
    pub log_every: usize,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Interleaved,
            stages: 2,
            visibility: VisibilityName::Fresh,
            chunk: 16,
            ratio: 1.0,
            steps: 0,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 0.1,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn mode(&self) -> TrainMode {
        match self.strategy {
            Strategy::Baseline => TrainMode::Baseline,
            Strategy::Interleaved => TrainMode::Interleaved {
                stages: self.stages,
                visibility: self.visibility.into(),
            },
            Strategy::Chunked => TrainMode::Chunked { chunk: self.chunk },
            Strategy::Sequential => TrainMode::Sequential,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic generator name.
    pub name: String,
    /// Corpus file for `source = "file"`, relative to the working directory.
    pub path: PathBuf,
    /// Bytes to generate for synthetic corpora.
    pub length: usize,
    pub validation_fraction: f64,
    /// Seed of the synthetic generator; batches use the run seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            name: "fib_mod".into(),
            path: PathBuf::new(),
            length: 200_000,
            validation_fraction: 0.1,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModeName {
    Sequential,
    Parallel,
    /// Same stages as training (`train.stages`, `train.visibility`).
    Interleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalModeName,
    /// Validation windows of `model.seq_len` tokens.
    pub windows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalModeName::Sequential,
            windows: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default().with_lrt(LrtConfig::for_depth(4)),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Two-layer width-16 model on a short synthetic corpus; finishes in
    /// seconds.
    pub fn tiny() -> Self {
        let mut model = ModelConfig::tiny().with_lrt(LrtConfig::for_depth(2));
        model.vocab_size = 256;
        Self {
            out: PathBuf::from("runs/tiny"),
            model,
            train: TrainConfig {
                steps: 6,
                batch_size: 2,
                ..TrainConfig::default()
            },
            data: DataConfig {
                length: 4_000,
                ..DataConfig::default()
            },
            eval: EvalConfig {
                windows: 2,
                ..EvalConfig::default()
            },
            ..Self::default()
        }
    }

    /// Parses TOML text, applies `overrides` (`a.b.c=value`), then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, Error> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        Self::load_over(&Self::default(), path, overrides)
    }

    /// `base`, then the file's keys, then `overrides`.
    pub fn load_over(base: &RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = base.to_table();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io(p.to_path_buf(), e))?;
            let file: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self, Error> {
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Table {
        Table::try_from(self).expect("run config serializes to a table")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if t.strategy == Strategy::Interleaved && (t.stages == 0 || t.stages > self.model.seq_len) {
            return Err(Error::Config(format!(
                "train.stages = {} must be in 1..={}",
                t.stages, self.model.seq_len
            )));
        }
        if t.strategy == Strategy::Chunked && t.chunk == 0 {
            return Err(Error::Config("train.chunk must be at least 1".into()));
        }
        if t.steps == 0 && !(t.ratio > 0.0) {
            return Err(Error::Config("either train.steps or a positive train.ratio is required".into()));
        }
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("train.lr and train.weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) || self.data.validation_fraction == 0.0 {
            return Err(Error::Config("data.validation_fraction must be in (0, 1)".into()));
        }
        if self.data.source == DataSource::File && self.data.path.as_os_str().is_empty() {
            return Err(Error::Config("data.path is required for data.source = \"file\"".into()));
        }
        if self.model.vocab_size < lrt_core::data::BYTE_VOCAB {
            return Err(Error::Config(format!(
                "model.vocab_size = {} is below the byte vocabulary of {}",
                self.model.vocab_size,
                lrt_core::data::BYTE_VOCAB
            )));
        }
        Ok(())
    }

    pub fn eval_mode(&self) -> EvalMode {
        match self.eval.mode {
            EvalModeName::Sequential => EvalMode::Sequential,
            EvalModeName::Parallel => EvalMode::Parallel,
            EvalModeName::Interleaved => EvalMode::Interleaved {
                stages: self.train.stages.min(self.model.seq_len).max(1),
                visibility: self.train.visibility.into(),
            },
        }
    }
}

/// Recursively overlays `top` onto `base`. A `"none"` string removes the
/// key, as in [`set_dotted`].
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (_, Value::String(s)) if s == "none" => {
                base.remove(&k);
            }
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`--set train.strategy=chunked`).
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `key` (dotted) in `table` to `value`, creating intermediate tables.
/// The string `none` removes the key, restoring its default; for
/// `model.lrt` that means no recurrent memory.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for (i, p) in path.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{} is not a table", parts[..=i].join(".")))),
        };
    }
    if value.as_str() == Some("none") {
        cur.remove(*last);
    } else {
        cur.insert(last.to_string(), value);
    }
    Ok(())
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), Error> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    set_dotted(table, key, parse_value(value))
}
