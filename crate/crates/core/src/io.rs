//! CSV ingestion, result tables and `key=value` configuration files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{FpwError, Result};
use crate::estimator::FpwFit;
use crate::inference::UniformBand;
use crate::sample::Sample;
use crate::simulation::{LinearStudy, NonlinearStudy, RateResult};

/// Which CSV columns hold the model variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMap {
    pub outcome: String,
    /// Cells matching a missing marker here mark `Δ = 0`.
    pub covariate: String,
    pub instrument: String,
    pub controls: Vec<String>,
    pub missing_markers: HashSet<String>,
}

impl ColumnMap {
    pub fn new(outcome: &str, covariate: &str, instrument: &str) -> Self {
        Self {
            outcome: outcome.into(),
            covariate: covariate.into(),
            instrument: instrument.into(),
            controls: Vec::new(),
            missing_markers: ["", "NA", "."].into_iter().map(String::from).collect(),
        }
    }

    pub fn with_controls<S: AsRef<str>>(mut self, controls: &[S]) -> Self {
        self.controls = controls.iter().map(|c| c.as_ref().to_string()).collect();
        self
    }

    fn columns(&self) -> Vec<&str> {
        let mut cols = vec![self.outcome.as_str(), self.covariate.as_str(), self.instrument.as_str()];
        cols.extend(self.controls.iter().map(String::as_str));
        cols
    }

    fn is_missing(&self, cell: &str) -> bool {
        self.missing_markers.contains(cell.trim())
    }
}

fn parse_cell(cell: &str, column: &str, row: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| FpwError::CsvRow {
        row,
        message: format!("column '{column}': cannot parse '{cell}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(FpwError::CsvRow {
            row,
            message: format!("column '{column}': non-finite value"),
        });
    }
    Ok(v)
}

/// Read a sample from a headed CSV file. Row numbers in errors count data
/// rows from 1.
pub fn load_csv(path: &Path, map: &ColumnMap) -> Result<Sample> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = map.columns();
    let mut seen = HashSet::new();
    for c in &cols {
        if !seen.insert(*c) {
            return Err(FpwError::InvalidArgument(format!("column '{c}' is mapped twice")));
        }
    }
    let index: Vec<usize> = cols
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == *c)
                .ok_or_else(|| FpwError::InvalidArgument(format!("column '{c}' not in header")))
        })
        .collect::<Result<_>>()?;

    let (mut delta, mut y, mut x, mut w) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut controls: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let cell = |j: usize| record.get(index[j]).unwrap_or("");
        for j in (0..cols.len()).filter(|&j| j != 1) {
            if map.is_missing(cell(j)) {
                return Err(FpwError::CsvRow {
                    row,
                    message: format!("missing value in required column '{}'", cols[j]),
                });
            }
        }
        y.push(parse_cell(cell(0), cols[0], row)?);
        if map.is_missing(cell(1)) {
            delta.push(false);
            x.push(0.0);
        } else {
            delta.push(true);
            x.push(parse_cell(cell(1), cols[1], row)?);
        }
        w.push(parse_cell(cell(2), cols[2], row)?);
        for j in 3..cols.len() {
            controls.push(parse_cell(cell(j), cols[j], row)?);
        }
    }
    if delta.is_empty() {
        return Err(FpwError::EmptyData);
    }
    let n = delta.len();
    let sample = Sample::new(delta, y, x, w)?;
    let c = map.controls.len();
    let sample = if c > 0 {
        sample.with_controls(map.controls.clone(), DMatrix::from_row_slice(n, c, &controls))?
    } else {
        sample
    };
    log::info!(
        "loaded {} rows, {} with the covariate observed, {} controls",
        n,
        sample.n_selected(),
        c
    );
    Ok(sample)
}

/// Write `sample` so that [`load_csv`] with `map` reads it back unchanged.
/// Unobserved covariates are written as `NA`.
pub fn write_sample_csv(path: &Path, sample: &Sample, map: &ColumnMap) -> Result<()> {
    if map.controls.len() != sample.n_controls() {
        return Err(FpwError::DimensionMismatch {
            context: "control columns",
            expected: sample.n_controls(),
            found: map.controls.len(),
        });
    }
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(map.columns())?;
    for i in 0..sample.n() {
        let mut rec = vec![
            fmt(sample.y()[i]),
            if sample.delta()[i] { fmt(sample.x()[i]) } else { "NA".into() },
            fmt(sample.w()[i]),
        ];
        if let Some(c) = sample.controls() {
            rec.extend(c.row(i).iter().map(|&v| fmt(v)));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are
/// ignored; later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            FpwError::InvalidArgument(format!("config line {}: expected key=value", i + 1))
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(FpwError::InvalidArgument(format!("config line {}: empty key", i + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&fs::read_to_string(path)?)
}

pub const LINEAR_TABLE_HEADER: [&str; 4] = ["estimator", "coefficient", "abs_median_bias", "coverage"];
pub const CURVE_HEADER: [&str; 6] = ["x", "truth", "median", "q025", "q975", "estimator"];

pub fn write_linear_table(path: &Path, study: &LinearStudy) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(LINEAR_TABLE_HEADER)?;
    for r in &study.rows {
        wtr.write_record([
            r.estimator.to_string(),
            r.coefficient.to_string(),
            fmt(r.abs_median_bias),
            fmt(r.coverage),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Long-format curve file with FPW rows first, then MAR. `q025` and `q975`
/// are pointwise quantiles of the replicated estimates.
pub fn write_curves(path: &Path, study: &NonlinearStudy) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(CURVE_HEADER)?;
    for (name, c) in [("FPW", &study.fpw), ("MAR", &study.mar)] {
        for j in 0..study.grid.len() {
            wtr.write_record([
                fmt(study.grid[j]),
                fmt(study.truth[j]),
                fmt(c.median[j]),
                fmt(c.q025[j]),
                fmt(c.q975[j]),
                name.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_rate(path: &Path, rate: &RateResult) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["n", "median_mse"])?;
    for (n, e) in rate.ns.iter().zip(&rate.errors) {
        wtr.write_record([n.to_string(), fmt(*e)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Coefficients and diagnostics of a series fit as `term,value` rows.
pub fn write_fit(path: &Path, fit: &FpwFit, control_names: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["term", "value"])?;
    for (j, g) in fit.gamma.iter().enumerate() {
        wtr.write_record([format!("gamma_{j}"), fmt(*g)])?;
    }
    for (j, c) in fit.control_coefs.iter().enumerate() {
        let name = control_names.get(j).cloned().unwrap_or_else(|| format!("control_{j}"));
        wtr.write_record([name, fmt(*c)])?;
    }
    let diag = [
        ("n", fit.n as f64),
        ("n_selected", fit.design.nrows() as f64),
        ("K", fit.k() as f64),
        ("clamped_weights", fit.clamped_weights as f64),
        ("used_pseudoinverse", f64::from(u8::from(fit.used_pseudoinverse))),
        (
            "first_stage_objective",
            fit.selection.as_ref().map_or(f64::NAN, |s| s.objective_value()),
        ),
    ];
    for (k, v) in diag {
        wtr.write_record([k.to_string(), fmt(v)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_band(path: &Path, band: &UniformBand) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["x", "estimate", "se", "lower", "upper", "critical_value"])?;
    for j in 0..band.grid.len() {
        wtr.write_record([
            fmt(band.grid[j]),
            fmt(band.estimates[j]),
            fmt(band.se[j]),
            fmt(band.lower[j]),
            fmt(band.upper[j]),
            fmt(band.critical_value),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
