//! CSV and run-summary writers.
//!
//! Every CSV is schema-stable: one header row, comma separator, values as
//! full-precision decimal floats (17 significant digits), final newline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ehrenfest::{GaussianComponent, MixtureSnapshot};

use crate::CliError;

/// 17 significant digits: enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvWriter {
    path: PathBuf,
    lines: Vec<String>,
}

impl CsvWriter {
    pub fn new(path: PathBuf, header: &[String]) -> Self {
        Self {
            path,
            lines: vec![header.join(",")],
        }
    }

    pub fn row(&mut self, values: &[f64]) {
        self.lines
            .push(values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let mut file = fs::File::create(&self.path)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", self.path.display())))?;
        for line in &self.lines {
            writeln!(file, "{line}")
                .map_err(|e| CliError::Runtime(format!("write {}: {e}", self.path.display())))?;
        }
        Ok(self.path)
    }
}

/// Header for a trajectory-style table: t, centroid coordinates, the upper
/// triangle of sigma in row-major order, then the named observables.
pub fn state_header(d: usize, observable_names: &[String]) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for i in 1..=d {
        cols.push(format!("x{i}"));
    }
    for i in 1..=d {
        cols.push(format!("p{i}"));
    }
    let n = 2 * d;
    for i in 1..=n {
        for j in i..=n {
            cols.push(format!("sigma_{i}_{j}"));
        }
    }
    cols.extend(observable_names.iter().cloned());
    cols
}

/// Row values matching [`state_header`] minus the observable columns.
pub fn state_values(t: f64, state: &GaussianComponent) -> Vec<f64> {
    let n = 2 * state.dof();
    let mut out = Vec::with_capacity(1 + n + n * (n + 1) / 2);
    out.push(t);
    out.extend(state.alpha.coords().iter());
    for i in 0..n {
        for j in i..n {
            out.push(state.sigma.entries()[(i, j)]);
        }
    }
    out
}

/// Invariant checks recorded into the run summary.
pub fn snapshot_invariants(
    snapshots: &[MixtureSnapshot],
    hbar: f64,
    nts_xi: f64,
) -> serde_json::Value {
    let mut uncertainty_ok = true;
    let mut min_nts_margin = f64::INFINITY;
    let mut max_weight_err = 0.0f64;
    for snap in snapshots {
        max_weight_err = max_weight_err.max((snap.weight_sum() - 1.0).abs());
        for comp in &snap.components {
            if !ehrenfest::uncertainty_check(&comp.sigma, hbar, 1e-9) {
                uncertainty_ok = false;
            }
            let margin = comp.sigma.min_eigenvalue() - nts_xi * hbar / 2.0;
            min_nts_margin = min_nts_margin.min(margin);
        }
    }
    serde_json::json!({
        "uncertainty_ok": uncertainty_ok,
        "min_nts_margin": min_nts_margin,
        "nts_xi": nts_xi,
        "max_weight_sum_error": max_weight_err,
    })
}

pub fn write_summary(path: &Path, summary: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Runtime(format!("serialize summary: {e}")))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}
