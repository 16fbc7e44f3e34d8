//! Experiment configuration: a TOML file plus `--set key.path=value`
//! overrides.

use std::path::Path;

use ktg_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::models::BackboneConfig;
use crate::search::SearchConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub model: BackboneConfig,
    pub search: SearchConfig,
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configs always serialize")
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`, creating intermediate tables as needed.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds a config from optional TOML text and overrides, then validates it.
pub fn config_from_str(text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match text {
        Some(t) => parse_table(t)?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = path
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .transpose()?;
    config_from_str(text.as_deref(), overrides)
}
