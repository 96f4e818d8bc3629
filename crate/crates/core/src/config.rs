//! Line-based `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key of [`TrainConfig`]
//! and [`Variant`] is addressable; unknown keys and unparsable values are
//! errors naming the offending key.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::training::TrainConfig;

/// Hyperparameters plus ablation switches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub variant: Variant,
}

pub const KEYS: &[&str] = &[
    "dim",
    "layers",
    "learning_rate",
    "beta",
    "batch_size",
    "epochs",
    "patience",
    "node_dropout",
    "message_dropout",
    "seed",
    "negatives",
    "task_schedule",
    "reg_scope",
    "use_unified",
    "user_agg",
    "item_weighting",
    "fuse_global",
    "multi_task",
    "delta_query",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("invalid value `{value}`: {e}")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = &mut self.variant;
        match key {
            "dim" => t.dim = parse(key, value)?,
            "layers" => t.layers = parse(key, value)?,
            "learning_rate" | "lr" => t.learning_rate = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "node_dropout" => t.node_dropout = parse(key, value)?,
            "message_dropout" => t.message_dropout = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "negatives" => t.negatives_per_positive = parse(key, value)?,
            "task_schedule" => t.task_schedule = parse(key, value)?,
            "reg_scope" => t.reg_scope = parse(key, value)?,
            "use_unified" => v.use_unified = parse(key, value)?,
            "user_agg" => v.user_agg = parse(key, value)?,
            "item_weighting" => v.item_weighting = parse(key, value)?,
            "fuse_global" => v.fuse_global = parse(key, value)?,
            "multi_task" => v.multi_task = parse(key, value)?,
            "delta_query" => v.delta_query = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format("config", idx + 1, "expected `key = value`"));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
