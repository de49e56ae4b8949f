//! Run configuration: a TOML file with `[data]`, `[model]` and `[train]`
//! sections, completed from the dataset and patched by `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use esa::graph::{Graph, Target};
use esa::model::{ModelConfig, TaskLevel, TokenMode};
use esa::training::{Task, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Graph text file.
    pub graphs: PathBuf,
    /// Split manifest; drawn from `train.split` and `train.seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
}

/// Fully resolved run configuration, written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError::new(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError::new(format!("{}: {e}", path.display())).into())
    }
}

/// Parses `section.key=value`; the value is read as a TOML literal and falls
/// back to a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let Some((key, raw)) = s.split_once('=') else {
        return Err(UsageError::new(format!("override '{s}' is not key=value")).into());
    };
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(UsageError::new(format!("override key '{key}' is malformed")).into());
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(inner) => inner,
            _ => return Err(UsageError::new(format!("override '{}' descends into a value", path.join("."))).into()),
        };
    }
    t.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn section<'a>(t: &'a Table, name: &str) -> Option<&'a Table> {
    t.get(name).and_then(Value::as_table)
}

/// Token width and output width implied by the data.
pub fn data_dims(graphs: &[Graph], tokens: TokenMode, task: Task) -> Result<(usize, usize)> {
    let g = graphs.first().context("dataset holds no graphs")?;
    let in_dim = match tokens {
        TokenMode::Edge => 2 * g.node_dim() + g.edge_dim(),
        TokenMode::Node => g.node_dim(),
    };
    let mut width = 0usize;
    let mut max_label = 0.0f64;
    for g in graphs {
        let values = match &g.target {
            Some(Target::Graph(v)) => {
                width = width.max(v.len());
                v
            }
            Some(Target::Nodes(v)) => {
                width = width.max(1);
                v
            }
            None => continue,
        };
        max_label = values.iter().copied().fold(max_label, f64::max);
    }
    let out_dim = match task {
        Task::Multiclass => max_label as usize + 1,
        _ => width.max(1),
    };
    Ok((in_dim, out_dim))
}

/// Builds the resolved config. Relative data paths are taken relative to the
/// config file. Model fields not given default from the layer string, level and data.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<(RunConfig, Vec<Graph>)> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<Table>().map_err(|e| UsageError::new(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut table, &path, value)?;
    }
    if let Some(s) = seed {
        set_path(&mut table, &["train".into(), "seed".into()], Value::Integer(s as i64))?;
    }
    let base = file.and_then(Path::parent).unwrap_or(Path::new(""));
    if let Some(Value::Table(d)) = table.get_mut("data") {
        for key in ["graphs", "split"] {
            if let Some(Value::String(p)) = d.get_mut(key) {
                let joined = base.join(&*p);
                *p = joined.to_string_lossy().into_owned();
            }
        }
    }

    let data: DataSection = section(&table, "data")
        .context("config has no [data] section")
        .and_then(|t| {
            Value::Table(t.clone())
                .try_into()
                .map_err(|e| UsageError::new(format!("[data]: {e}")).into())
        })?;
    let train: TrainConfig = Value::Table(section(&table, "train").cloned().unwrap_or_default())
        .try_into()
        .map_err(|e| UsageError::new(format!("[train]: {e}")))?;
    train.validate().map_err(|e| UsageError::new(e.to_string()))?;
    let graphs = esa::graph::read_graphs(&data.graphs).map_err(UsageError::from_esa)?;

    let user_model = section(&table, "model").cloned().unwrap_or_default();
    let layers = user_model
        .get("layers")
        .and_then(Value::as_str)
        .ok_or_else(|| UsageError::new("[model] needs a layer string, e.g. layers = \"MSMSP\""))?
        .to_owned();
    let level = match user_model.get("level").and_then(Value::as_str) {
        Some("node") => TaskLevel::Node,
        Some("graph") => TaskLevel::Graph,
        Some(other) => return Err(UsageError::new(format!("[model] level '{other}' is not graph or node")).into()),
        None if graphs.iter().any(|g| matches!(g.target, Some(Target::Nodes(_)))) => TaskLevel::Node,
        None => TaskLevel::Graph,
    };
    let mut defaults = match level {
        TaskLevel::Graph => ModelConfig::graph_default(&layers, 1, 1),
        TaskLevel::Node => ModelConfig::node_default(&layers, 1, 1),
    };
    if let Some(Value::String(t)) = user_model.get("tokens") {
        defaults.tokens = if t == "node" { TokenMode::Node } else { TokenMode::Edge };
    }
    (defaults.in_dim, defaults.out_dim) = data_dims(&graphs, defaults.tokens, train.task)?;
    let mut model_table = Table::try_from(&defaults).expect("model config serialises");
    merge(&mut model_table, user_model);
    let model: ModelConfig = Value::Table(model_table)
        .try_into()
        .map_err(|e| UsageError::new(format!("[model]: {e}")))?;
    model.validate().map_err(|e| UsageError::new(e.to_string()))?;
    Ok((RunConfig { data, model, train }, graphs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values() {
        let (p, v) = parse_override("train.lr=1e-3").unwrap();
        assert_eq!(p, ["train", "lr"]);
        assert_eq!(v, Value::Float(1e-3));
        assert_eq!(parse_override("model.layers=MSP").unwrap().1, Value::String("MSP".into()));
        assert_eq!(parse_override("train.split=[0.5,0.25,0.25]").unwrap().1.as_array().unwrap().len(), 3);
        assert!(parse_override("train.lr").is_err());
        assert!(parse_override(".lr=1").is_err());
    }

    #[test]
    fn nested_merge() {
        let mut a: Table = "[m]\nx = 1\ny = 2".parse().unwrap();
        merge(&mut a, "[m]\ny = 3".parse().unwrap());
        assert_eq!(a["m"]["x"].as_integer(), Some(1));
        assert_eq!(a["m"]["y"].as_integer(), Some(3));
    }
}
