//! `--set section.key=value` overrides layered on a TOML config file.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::failure::{invalid, require, Failure};

pub fn load_table(path: Option<&Path>) -> Result<Table, Failure> {
    let Some(path) = path else { return Ok(Table::new()) };
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| crate::failure::io(path, e))?;
    text.parse::<Table>().map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Values are read as TOML literals (`3`, `true`, `1e-3`, `[1, 2]`); anything
/// that does not parse is taken as a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply(table: &mut Table, assignments: &[String]) -> Result<(), Failure> {
    for a in assignments {
        let (key, raw) = a.split_once('=').ok_or_else(|| invalid(format!("--set {a:?}: expected key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(invalid(format!("--set {a:?}: empty key segment")));
        }
        let (last, parents) = path.split_last().expect("split yields at least one segment");
        let mut node = &mut *table;
        for p in parents {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            node = entry.as_table_mut().ok_or_else(|| invalid(format!("--set {a:?}: {p} is not a section")))?;
        }
        node.insert(last.to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

pub fn decode<T: DeserializeOwned>(table: Table) -> Result<T, Failure> {
    Value::Table(table).try_into().map_err(|e| invalid(format!("invalid configuration: {e}")))
}
