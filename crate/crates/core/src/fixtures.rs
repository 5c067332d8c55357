//! Golden-data tables and the residual checker used by the verification
//! suite. Fixture files live under `fixtures/v1/` and are read-only inputs;
//! every row carries its provenance and an explicit tolerance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TolKind {
    Abs,
    Rel,
    /// Pass if within the relative tolerance OR within half a unit of the
    /// printed decimal precision (a table printed as `0.50` only constrains
    /// the value to [0.495, 0.505)).
    RelOrPrintedHalfUlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenRow {
    pub key: String,
    pub expected: f64,
    pub kind: TolKind,
    pub tol: f64,
    /// Decimal places of the printed value (for the half-ULP rule).
    #[serde(default)]
    pub decimals: Option<u32>,
    pub provenance: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenTable {
    pub name: String,
    pub rows: Vec<GoldenRow>,
}

impl GoldenTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub key: String,
    pub expected: f64,
    pub got: f64,
    /// Signed residual `got - expected`.
    pub residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub rows: Vec<RowResult>,
    pub all_pass: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "[{}] {} :: {} expected {} got {:.6} residual {:+.3e}",
                if r.pass { "PASS" } else { "FAIL" },
                self.name,
                r.key,
                r.expected,
                r.got,
                r.residual
            )?;
        }
        Ok(())
    }
}

fn row_passes(row: &GoldenRow, got: f64) -> bool {
    let diff = (got - row.expected).abs();
    match row.kind {
        TolKind::Abs => diff <= row.tol,
        TolKind::Rel => diff <= row.tol * row.expected.abs(),
        TolKind::RelOrPrintedHalfUlp => {
            let half_ulp = row
                .decimals
                .map(|d| 0.5 * 10f64.powi(-(d as i32)))
                .unwrap_or(0.0);
            diff <= row.tol * row.expected.abs() || diff <= half_ulp
        }
    }
}

/// Compare computed values against a golden table key-by-key.
pub fn check(table: &GoldenTable, computed: &BTreeMap<String, f64>) -> Result<CheckReport> {
    let mut rows = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let got = *computed
            .get(&row.key)
            .ok_or_else(|| Error::Fixture(format!("table {}: no computed value for key '{}'", table.name, row.key)))?;
        rows.push(RowResult {
            key: row.key.clone(),
            expected: row.expected,
            got,
            residual: got - row.expected,
            pass: row_passes(row, got),
        });
    }
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(CheckReport { name: table.name.clone(), rows, all_pass })
}

/// Path of a versioned fixture file in this repository.
pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/v1").join(name)
}
