//! Configuration grids for ablation sweeps.
//!
//! A grid file is JSON. An object maps dotted config key paths to value
//! lists and expands to their Cartesian product:
//!
//! ```json
//! { "loss.tau_t": [0.2], "loss.tau_s": [0.15, 0.2, 0.4, 0.6] }
//! ```
//!
//! A list of such objects expands to the union of their products, in
//! order. `{}` is a single cell running the base configuration.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};
use srepa_core::TrainConfig;

/// Largest number of cells a grid may expand to.
pub const MAX_CELLS: usize = 512;

/// Metric columns appended after the varied keys.
pub const METRIC_COLUMNS: [&str; 4] = ["gram_discrepancy", "frechet", "loss_total", "status"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    blocks: Vec<Vec<(String, Vec<Value>)>>,
}

/// One expanded configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    /// The value of every varied key for this cell, in column order.
    pub values: Vec<Value>,
    pub config: TrainConfig,
}

fn parse_block(obj: &Map<String, Value>) -> Result<Vec<(String, Vec<Value>)>> {
    obj.iter()
        .map(|(key, v)| match v {
            Value::Array(vals) if !vals.is_empty() => Ok((key.clone(), vals.clone())),
            Value::Array(_) => bail!("grid axis '{key}' has no values"),
            _ => bail!("grid axis '{key}' must be a list of values"),
        })
        .collect()
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<SweepGrid> {
        let value: Value = serde_json::from_str(text).context("grid is not valid JSON")?;
        let blocks = match &value {
            Value::Object(obj) => vec![parse_block(obj)?],
            Value::Array(items) => items
                .iter()
                .enumerate()
                .map(|(i, item)| match item {
                    Value::Object(obj) => parse_block(obj),
                    _ => bail!("grid entry {i} is not an object"),
                })
                .collect::<Result<_>>()?,
            _ => bail!("grid must be an object or a list of objects"),
        };
        if blocks.is_empty() {
            bail!("grid list is empty");
        }
        Ok(SweepGrid { blocks })
    }

    pub fn load(path: &Path) -> Result<SweepGrid> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading grid {}", path.display()))?;
        SweepGrid::parse(&text).with_context(|| format!("grid {}", path.display()))
    }

    /// Number of cells, computed without expanding (saturating).
    pub fn cell_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.iter().fold(1usize, |n, (_, v)| n.saturating_mul(v.len())))
            .fold(0usize, |a, b| a.saturating_add(b))
    }

    /// Varied keys in column order: first appearance across blocks.
    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        for (k, _) in self.blocks.iter().flatten() {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
        keys
    }

    /// Expands the grid against `base`. Every key path must exist and every
    /// resulting configuration must validate.
    pub fn cells(&self, base: &TrainConfig) -> Result<Vec<Cell>> {
        let count = self.cell_count();
        if count > MAX_CELLS {
            bail!("grid expands to {count} cells, more than the limit of {MAX_CELLS}");
        }
        let keys = self.keys();
        let base_tree = serde_json::to_value(base).expect("config serializes");
        let mut cells = Vec::with_capacity(count);
        for block in &self.blocks {
            let mut counters = vec![0usize; block.len()];
            loop {
                let mut config = base.clone();
                for ((key, vals), &i) in block.iter().zip(&counters) {
                    config = config.with_override(key, &vals[i])?;
                }
                let values = keys
                    .iter()
                    .map(|k| {
                        block
                            .iter()
                            .zip(&counters)
                            .find(|((bk, _), _)| bk == k)
                            .map(|((_, vals), &i)| vals[i].clone())
                            .unwrap_or_else(|| lookup(&base_tree, k).cloned().unwrap_or(Value::Null))
                    })
                    .collect();
                cells.push(Cell {
                    index: cells.len(),
                    values,
                    config,
                });
                // odometer increment, last axis fastest
                let mut axis = block.len();
                loop {
                    if axis == 0 {
                        break;
                    }
                    axis -= 1;
                    counters[axis] += 1;
                    if counters[axis] < block[axis].1.len() {
                        break;
                    }
                    counters[axis] = 0;
                }
                if counters.iter().all(|&c| c == 0) {
                    break;
                }
            }
        }
        Ok(cells)
    }
}

fn lookup<'a>(tree: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(tree, |node, key| node.get(key))
}

/// CSV field for a JSON value: strings unquoted, other values compact.
pub fn format_value(v: &Value) -> String {
    match v {
        Value::String(s) => csv_escape(s),
        other => csv_escape(&other.to_string()),
    }
}

pub fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Final numbers of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub gram_discrepancy: f64,
    pub frechet: f64,
    pub loss_total: f64,
}

/// Writes sweep rows, flushing after each.
pub struct SweepWriter {
    path: PathBuf,
    file: File,
}

impl SweepWriter {
    pub fn create(path: &Path, keys: &[String]) -> Result<SweepWriter> {
        let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let header: Vec<String> = keys
            .iter()
            .map(|k| csv_escape(k))
            .chain(METRIC_COLUMNS.iter().map(|c| c.to_string()))
            .collect();
        writeln!(file, "{}", header.join(",")).with_context(|| format!("writing {}", path.display()))?;
        Ok(SweepWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn row(&mut self, cell: &Cell, outcome: &Result<CellMetrics>) -> Result<()> {
        let mut fields: Vec<String> = cell.values.iter().map(format_value).collect();
        match outcome {
            Ok(m) => {
                fields.push(m.gram_discrepancy.to_string());
                fields.push(m.frechet.to_string());
                fields.push(m.loss_total.to_string());
                fields.push("ok".into());
            }
            Err(e) => {
                fields.extend(["", "", ""].map(String::from));
                fields.push(csv_escape(&format!("error: {e:#}")));
            }
        }
        writeln!(self.file, "{}", fields.join(","))
            .and_then(|_| self.file.flush())
            .with_context(|| format!("writing {}", self.path.display()))
    }
}

/// Directory holding the per-cell runs of a sweep writing `out`:
/// `<out without extension>_cells/`.
pub fn cells_dir(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sweep".into());
    out.with_file_name(format!("{stem}_cells"))
}
