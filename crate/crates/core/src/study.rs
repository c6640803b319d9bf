//! Persisted study records and plot data.
//!
//! A [`StudyResult`] serializes to JSON with schema tag [`SCHEMA`]:
//!
//! ```text
//! {
//!   "schema": "stoch-unfold.study/1",
//!   "kind": "convergence" | "quenched" | "flow" | ...,
//!   "config": { ... echo of the inputs ... },
//!   "tables": [ { "name": ..., "columns": [ { "name": ..., "values": [...] } ] } ],
//!   "assertions": [ { "name": ..., "passed": bool, "detail": ... } ],
//!   "timings": { "<stage>": seconds }
//! }
//! ```
//!
//! Everything except `timings` and columns named `seconds` is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "stoch-unfold.study/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn new(name: &str, names: &[&str]) -> Self {
        Table { name: name.into(), columns: names.iter().map(|n| Column { name: (*n).into(), values: Vec::new() }).collect() }
    }

    /// Appends one row; `row` must have one entry per column.
    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match table {}", self.name);
        for (c, v) in self.columns.iter_mut().zip(row) {
            c.values.push(*v);
        }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.name == name).map(|c| c.values.as_slice())
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(self.columns.iter().map(|c| c.name.as_str())).map_err(csv_err)?;
        for r in 0..self.rows() {
            w.write_record(self.columns.iter().map(|c| format_value(c.values[r]))).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub schema: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub tables: Vec<Table>,
    pub assertions: Vec<Assertion>,
    pub timings: BTreeMap<String, f64>,
}

impl StudyResult {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        StudyResult { schema: SCHEMA.into(), kind: kind.into(), config, tables: Vec::new(), assertions: Vec::new(), timings: BTreeMap::new() }
    }

    pub fn assert(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study results serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: StudyResult = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if r.schema != SCHEMA {
            return Err(Error::Parse(format!("unknown schema {}", r.schema)));
        }
        Ok(r)
    }

    /// JSON without wall-clock data, for determinism checks.
    pub fn deterministic_json(&self) -> String {
        let mut copy = self.clone();
        copy.timings.clear();
        for t in &mut copy.tables {
            t.columns.retain(|c| c.name != "seconds");
        }
        copy.to_json()
    }

    /// Writes `<stem>.json` and one `<stem>_<table>.csv` per table; returns the paths.
    /// The CSVs leave out `seconds` columns, so they are byte-identical across runs.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json())?;
        out.push(json);
        for t in &self.tables {
            let p = dir.join(format!("{stem}_{}.csv", t.name));
            let mut t = t.clone();
            t.columns.retain(|c| c.name != "seconds");
            t.write_csv(&p)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// The figure-style CSV of a study: `gap_vs_eps.csv` (convergence), `scatter.csv` (quenched)
/// or `energy_vs_time.csv` (flow).
pub fn emit_plotdata(result: &StudyResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut emit = |file: &str, table: &str, cols: &[(&str, &str)]| -> Result<()> {
        let Some(t) = result.table(table) else { return Ok(()) };
        let mut plot = Table::new(file, &cols.iter().map(|c| c.1).collect::<Vec<_>>());
        let sources: Vec<&[f64]> = cols
            .iter()
            .map(|c| t.column(c.0).ok_or_else(|| Error::Empty(format!("table {table} has no column {}", c.0))))
            .collect::<Result<_>>()?;
        for r in 0..t.rows() {
            plot.push(&sources.iter().map(|s| s[r]).collect::<Vec<_>>());
        }
        let p = dir.join(format!("{file}.csv"));
        plot.write_csv(&p)?;
        out.push(p);
        Ok(())
    };
    match result.kind.as_str() {
        "convergence" => emit("gap_vs_eps", "sweep", &[("eps", "eps"), ("gap", "gap")])?,
        "quenched" => emit("scatter", "scatter", &[("eps", "eps"), ("seed", "seed"), ("l2_distance", "l2_distance")])?,
        "flow" => emit("energy_vs_time", "trajectory", &[("time", "time"), ("energy", "energy")])?,
        _ => {}
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("study '{}' has no plottable table", result.kind)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_timing_strip() {
        let mut r = StudyResult::new("convergence", serde_json::json!({"n": 16}));
        let mut t = Table::new("sweep", &["eps", "gap", "seconds"]);
        t.push(&[0.25, 1e-3, 0.5]);
        t.push(&[0.125, 2.5e-4, 0.7]);
        r.tables.push(t);
        r.timings.insert("total".into(), 1.2);
        r.assert("gap decreases", true, "");
        let back = StudyResult::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let mut other = r.clone();
        other.timings.insert("total".into(), 9.9);
        other.tables[0].columns[2].values[0] = 3.0;
        assert_eq!(other.deterministic_json(), r.deterministic_json());
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plotdata(&r, dir.path()).unwrap();
        let text = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text, "eps,gap\n0.25,0.001\n0.125,0.00025\n");
        assert!(emit_plotdata(&StudyResult::new("x", serde_json::Value::Null), dir.path()).is_err());
        let files = r.write(dir.path(), "run").unwrap();
        assert_eq!(fs::read_to_string(&files[1]).unwrap(), "eps,gap\n0.25,0.001\n0.125,0.00025\n");
    }
}
