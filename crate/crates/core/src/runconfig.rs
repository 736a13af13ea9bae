//! The JSON run description: strict keys, every default written out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ArchConfig;
use crate::data::DatasetConfig;
use crate::error::{CoreError, Result};
use crate::training::{TrainConfig, UnrollSchedule};

/// Relative output directories are resolved against this variable when it is set.
pub const OUTPUT_ROOT_ENV: &str = "CELLSEG_OUTPUT_ROOT";

/// Keys that must be present in a config file.
pub const REQUIRED_KEYS: [&str; 2] = ["output_dir", "train.steps"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub pool_size: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch: t.batch,
            steps: t.steps,
            pool_size: t.pool_size,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub schedule: UnrollSchedule,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            schedule: UnrollSchedule::default(),
            train: TrainSection::default(),
        }
    }
}

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |cur, k| cur.get(k))
}

/// Collects keys of `doc` that `template` does not have. A `null` template value (an
/// unset optional) accepts anything.
fn unknown_keys(doc: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(t)) = (doc, template) else {
        return;
    };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match t.get(k) {
            None => out.push(path),
            Some(tv) => unknown_keys(v, tv, &path, out),
        }
    }
}

fn dataset_template(doc: &Value) -> Value {
    let kind = doc.get("dataset").and_then(|d| d.get("kind")).and_then(Value::as_str);
    let ds = match kind {
        Some("pets") => DatasetConfig::Pets {
            root: PathBuf::new(),
            resolution: DatasetConfig::default().resolution(),
        },
        _ => DatasetConfig::default(),
    };
    serde_json::to_value(ds).expect("dataset serializes")
}

impl RunConfig {
    /// Parses a config document, reporting every unknown and missing key at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| CoreError::config(format!("malformed JSON: {e}")))?;
        if !doc.is_object() {
            return Err(CoreError::config("config must be a JSON object"));
        }
        let mut template = serde_json::to_value(RunConfig::default()).expect("config serializes");
        template["dataset"] = dataset_template(&doc);
        let mut problems = Vec::new();
        let mut unknown = Vec::new();
        unknown_keys(&doc, &template, "", &mut unknown);
        problems.extend(unknown.into_iter().map(|k| format!("unknown key `{k}`")));
        for k in REQUIRED_KEYS {
            if lookup(&doc, k).is_none() {
                problems.push(format!("missing required key `{k}`"));
            }
        }
        if !problems.is_empty() {
            return Err(CoreError::config(problems.join("; ")));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            CoreError::config(format!("bad value at `{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every default made explicit.
    pub fn resolved(mut self) -> Self {
        self.schedule = self.schedule.resolved();
        self.train.pool_size = Some(self.train.pool_size.unwrap_or(4 * self.train.batch));
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch: self.train.batch,
            steps: self.train.steps,
            pool_size: self.train.pool_size,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
            arch: self.arch.clone(),
            schedule: self.schedule.clone(),
        }
    }

    /// `output_dir`, under `$CELLSEG_OUTPUT_ROOT` when relative and the variable is set.
    pub fn output_path(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
