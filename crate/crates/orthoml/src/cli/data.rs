//! CSV ingestion with role resolution and validation.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use super::config::Roles;
use crate::error::{Error, Result};

/// Numeric data resolved by role. Optional roles are empty when unset.
#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    pub n: usize,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    #[serde(skip)]
    pub x: DMatrix<f64>,
    pub control_names: Vec<String>,
    #[serde(skip)]
    pub effect_x: DMatrix<f64>,
    pub effect_names: Vec<String>,
    pub group: Vec<f64>,
    pub time: Vec<f64>,
    pub running: Vec<f64>,
    pub outcome_pre: Vec<f64>,
    pub placebo_pre: Vec<f64>,
    /// Rows in the file before frequency expansion.
    pub file_rows: usize,
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "NaN" | "nan" | "." | "null" | "NULL")
}

/// Expand `prefix*` globs against the header; plain names must exist.
fn resolve(patterns: &[String], header: &[String], role: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for p in patterns {
        let hits: Vec<&String> = match p.strip_suffix('*') {
            Some(prefix) => header.iter().filter(|h| h.starts_with(prefix)).collect(),
            None => header.iter().filter(|h| *h == p).collect(),
        };
        if hits.is_empty() {
            return Err(Error::Data(format!("{role} column `{p}` matches nothing in the header")));
        }
        for h in hits {
            if !out.contains(h) {
                out.push(h.clone());
            }
        }
    }
    Ok(out)
}

/// Read a headed CSV file and pull out the columns named by `roles`.
///
/// Every role column must parse as a number. Cells that are empty or hold a
/// missing-value marker are never dropped silently: the file is rejected with
/// a count and the first offending row. `binary` names columns that must
/// hold only 0 and 1.
pub fn ingest_csv(path: &Path, roles: &Roles, binary: &[String]) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("cannot open `{}`: {e}", path.display())))?;
    ingest_reader(file, roles, binary)
}

/// [`ingest_csv`] over any reader.
pub fn ingest_reader<R: std::io::Read>(reader: R, roles: &Roles, binary: &[String]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 0, column: String::new(), message: format!("unreadable header: {e}") })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Data("file has no header row".into()));
    }

    let controls = resolve(&roles.controls, &header, "control")?;
    let effect = if roles.effect_covariates.is_empty() {
        controls.clone()
    } else {
        resolve(&roles.effect_covariates, &header, "effect covariate")?
    };
    let scalar = roles.scalar();
    let mut wanted: Vec<String> = scalar.iter().map(|(_, c)| c.to_string()).collect();
    for c in controls.iter().chain(&effect) {
        if !wanted.contains(c) {
            wanted.push(c.clone());
        }
    }
    let index: Vec<usize> = wanted
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Data(format!("column `{c}` is not in the header")))
        })
        .collect::<Result<_>>()?;

    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    let mut missing_rows = 0usize;
    let mut first_missing: Option<(usize, String)> = None;
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse { row, column: String::new(), message: e.to_string() })?;
        let mut row_missing = false;
        for (slot, &j) in index.iter().enumerate() {
            let cell = rec.get(j).unwrap_or("");
            if is_missing(cell) {
                row_missing = true;
                first_missing.get_or_insert((row, wanted[slot].clone()));
                cols[slot].push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: wanted[slot].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: wanted[slot].clone(), message: format!("`{cell}` is not finite") });
            }
            cols[slot].push(v);
        }
        missing_rows += row_missing as usize;
    }
    let file_rows = cols.first().map_or(0, Vec::len);
    if let Some((row, column)) = first_missing {
        return Err(Error::Data(format!(
            "{missing_rows} of {file_rows} rows have missing values in role columns (first at row {row}, column `{column}`); \
             rows are never dropped automatically because discarding incomplete records can condition on \
             post-treatment variables and bias the estimate; impute or remove them explicitly before estimation"
        )));
    }
    if file_rows == 0 {
        return Err(Error::Data("file has a header but no data rows".into()));
    }

    let get = |name: &str| -> Vec<f64> { cols[wanted.iter().position(|w| w == name).expect("resolved column")].clone() };
    for b in binary {
        for (i, v) in get(b).iter().enumerate() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::NonBinaryTreatment { column: b.clone(), row: i + 1, value: *v });
            }
        }
    }

    // Frequency expansion.
    let reps: Vec<usize> = match &roles.count {
        None => vec![1; file_rows],
        Some(c) => get(c)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if *v < 0.0 || v.fract() != 0.0 {
                    Err(Error::Parse { row: i + 1, column: c.clone(), message: format!("count {v} is not a nonnegative integer") })
                } else {
                    Ok(*v as usize)
                }
            })
            .collect::<Result<_>>()?,
    };
    let n: usize = reps.iter().sum();
    if n == 0 {
        return Err(Error::Data("all counts are zero".into()));
    }
    let expand = |v: &[f64]| -> Vec<f64> { v.iter().zip(&reps).flat_map(|(x, k)| std::iter::repeat_n(*x, *k)).collect() };
    let opt = |c: &Option<String>| -> Vec<f64> { c.as_deref().map(|c| expand(&get(c))).unwrap_or_default() };
    let matrix = |names: &[String]| -> DMatrix<f64> {
        let cs: Vec<Vec<f64>> = names.iter().map(|c| expand(&get(c))).collect();
        DMatrix::from_fn(n, names.len(), |i, j| cs[j][i])
    };
    Ok(Dataset {
        n,
        y: opt(&roles.outcome),
        d: opt(&roles.treatment),
        z: opt(&roles.instrument),
        x: matrix(&controls),
        effect_x: matrix(&effect),
        control_names: controls,
        effect_names: effect,
        group: opt(&roles.group),
        time: opt(&roles.time),
        running: opt(&roles.running),
        outcome_pre: opt(&roles.outcome_pre),
        placebo_pre: opt(&roles.placebo_pre),
        file_rows,
    })
}
