//! Configuration assembly: preset, then the TOML file, then `--set`
//! overrides, then typed flags.

use std::fs;
use std::path::Path;

use synthcap::pipeline::PipelineConfig;
use synthcap::{Error, Result};
use toml::{Table, Value};

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let last = last.ok_or_else(|| Error::Config(format!("empty key in override {key:?}")))?;
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part} in {key:?} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
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

/// Parses `KEY=VALUE` overrides into a nested table. Values are read as
/// TOML literals and fall back to plain strings.
pub fn overrides(sets: &[String]) -> Result<Table> {
    let mut table = Table::new();
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))?;
        insert_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    Ok(table)
}

fn toy_requested(table: &Table) -> bool {
    table
        .get("toy")
        .and_then(|t| t.get("enabled"))
        .and_then(Value::as_bool)
        .unwrap_or(false)
}

/// Builds a config from an optional TOML file and overrides. The toy preset
/// is the base when `toy` is set or the merged input enables toy mode.
pub fn assemble(file: Option<&Path>, sets: &[String], toy: bool) -> Result<PipelineConfig> {
    let mut input = match file {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str::<Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    merge(&mut input, overrides(sets)?);
    let preset = if toy || toy_requested(&input) {
        PipelineConfig::toy()
    } else {
        PipelineConfig::default()
    };
    let mut base = Table::try_from(&preset).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, input);
    let cfg: PipelineConfig = Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(cfg)
}
