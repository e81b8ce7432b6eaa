//! Solution files and CSV exports.
//!
//! Solutions are stored as JSON with a fixed field order, no timestamps, and
//! plain nested arrays for vectors and matrices (row-major), so repeating a
//! seeded run produces a byte-identical file. Loading reconstructs the full
//! [`Solution`], rebuilding the policy basis from the stored calendar and
//! harmonics (the construction is deterministic).

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{ControlBox, DecisionRule, PeriodicBasis, PolicyCoeffs, TimeFeatures};
use crate::calendar::SeasonCalendar;
use crate::error::{Error, Result};
use crate::pamar::{EnsembleStats, NoisePath};
use crate::solver::{Diagnostics, RollingReport, Solution};

/// Bumped when the stored layout changes incompatibly.
pub const SOLUTION_FORMAT: u32 = 1;

/// On-disk form of a [`Solution`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub format: u32,
    /// Problem kind the rule was trained on (`hydropower`, `vpp`, `generic`).
    pub kind: String,
    /// Scenario seed the solve used.
    pub seed: u64,
    pub calendar: Vec<u64>,
    /// Harmonics per calendar period; the basis is rebuilt from these.
    pub harmonics: Vec<u32>,
    pub state_dim: usize,
    pub control_dim: usize,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
    /// Per-feature intercept vectors `k_m`.
    pub intercepts: Vec<Vec<f64>>,
    /// Per-feature gain matrices `K_m`, row-major.
    pub gains: Vec<Vec<Vec<f64>>>,
    pub initial_states: Vec<Vec<f64>>,
    pub terminal_states: Vec<Vec<f64>>,
    pub per_phase_count: Vec<usize>,
    pub per_phase_mean: Vec<Vec<f64>>,
    /// Per-phase covariance matrices, row-major.
    pub per_phase_cov: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Diagnostics,
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn vec_to(name: &str, v: &[f64]) -> Result<DVector<f64>> {
    if v.is_empty() {
        return Err(Error::Format(format!("{name} is empty")));
    }
    Ok(DVector::from_column_slice(v))
}

fn rows_to(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Format(format!("{name} is empty")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{name} rows have unequal lengths")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl SolutionFile {
    /// Snapshot of an in-memory solution.
    pub fn from_solution(kind: &str, solution: &Solution) -> Self {
        let rule = &solution.rule;
        let period = solution.per_phase.period();
        SolutionFile {
            format: SOLUTION_FORMAT,
            kind: kind.to_string(),
            seed: solution.seed,
            calendar: rule.basis.calendar().periods().to_vec(),
            harmonics: rule.basis.harmonics().to_vec(),
            state_dim: rule.state_dim,
            control_dim: rule.control_box.dim(),
            control_lower: vec_of(&rule.control_box.lower),
            control_upper: vec_of(&rule.control_box.upper),
            intercepts: rule.coeffs.intercepts.iter().map(vec_of).collect(),
            gains: rule.coeffs.gains.iter().map(rows_of).collect(),
            initial_states: solution.initial_states.iter().map(vec_of).collect(),
            terminal_states: solution.terminal_states.iter().map(vec_of).collect(),
            per_phase_count: (0..period).map(|tau| solution.per_phase.count(tau)).collect(),
            per_phase_mean: (0..period)
                .map(|tau| vec_of(solution.per_phase.mean(tau)))
                .collect(),
            per_phase_cov: (0..period)
                .map(|tau| rows_of(solution.per_phase.cov(tau)))
                .collect(),
            diagnostics: solution.diagnostics.clone(),
        }
    }

    /// Reconstructs the in-memory solution, rebuilding the basis.
    pub fn into_solution(self) -> Result<(String, Solution)> {
        if self.format != SOLUTION_FORMAT {
            return Err(Error::Format(format!(
                "solution format {} is not supported (expected {})",
                self.format, SOLUTION_FORMAT
            )));
        }
        let calendar = SeasonCalendar::new(self.calendar.clone())?;
        let basis = PeriodicBasis::build_basis(calendar, &self.harmonics)?;
        if basis.count() != self.intercepts.len() || basis.count() != self.gains.len() {
            return Err(Error::Format(format!(
                "stored coefficients cover {} features but the basis has {}",
                self.intercepts.len(),
                basis.count()
            )));
        }
        let control_box = ControlBox::new(
            vec_to("control_lower", &self.control_lower)?,
            vec_to("control_upper", &self.control_upper)?,
        )?;
        let coeffs = PolicyCoeffs {
            intercepts: self
                .intercepts
                .iter()
                .map(|v| vec_to("intercepts", v))
                .collect::<Result<Vec<_>>>()?,
            gains: self
                .gains
                .iter()
                .map(|m| rows_to("gains", m))
                .collect::<Result<Vec<_>>>()?,
        };
        let rule = DecisionRule {
            basis,
            coeffs,
            control_box,
            state_dim: self.state_dim,
        };
        rule.validate()?;
        let per_phase = EnsembleStats::from_parts(
            self.per_phase_count.clone(),
            self.per_phase_mean
                .iter()
                .map(|v| vec_to("per_phase_mean", v))
                .collect::<Result<Vec<_>>>()?,
            self.per_phase_cov
                .iter()
                .map(|m| rows_to("per_phase_cov", m))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let solution = Solution {
            rule,
            initial_states: self
                .initial_states
                .iter()
                .map(|v| vec_to("initial_states", v))
                .collect::<Result<Vec<_>>>()?,
            terminal_states: self
                .terminal_states
                .iter()
                .map(|v| vec_to("terminal_states", v))
                .collect::<Result<Vec<_>>>()?,
            per_phase,
            seed: self.seed,
            diagnostics: self.diagnostics,
        };
        Ok((self.kind, solution))
    }
}

/// Serializes a solution to its canonical JSON text (trailing newline
/// included). Identical solutions serialize byte-identically.
pub fn solution_json(kind: &str, solution: &Solution) -> Result<String> {
    let file = SolutionFile::from_solution(kind, solution);
    let mut text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes a solution file.
pub fn save_solution(path: &Path, kind: &str, solution: &Solution) -> Result<()> {
    let text = solution_json(kind, solution)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads a solution file back. Returns the stored problem kind alongside the
/// reconstructed solution.
pub fn load_solution(path: &Path) -> Result<(String, Solution)> {
    let text = std::fs::read_to_string(path)?;
    let file: SolutionFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    file.into_solution()
}

/// Writes simulated noise paths in long form:
/// `path,time,component,value`.
pub fn write_ensemble_csv(path: &Path, paths: &[NoisePath]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["path", "time", "component", "value"])
        .map_err(csv_err)?;
    for (p, noise) in paths.iter().enumerate() {
        for (k, value) in noise.values.iter().enumerate() {
            let t = noise.start_time + k as u64;
            for (c, v) in value.iter().enumerate() {
                w.write_record([
                    p.to_string(),
                    t.to_string(),
                    c.to_string(),
                    format_float(*v),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes realized closed-loop trajectories:
/// `replication,step,time,state_*,control_*,loss`.
pub fn write_rolling_csv(path: &Path, report: &RollingReport) -> Result<()> {
    let state_dim = report.states[0][0].len();
    let control_dim = report.controls[0][0].len();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["replication".to_string(), "step".to_string(), "time".to_string()];
    header.extend((0..state_dim).map(|i| format!("state_{i}")));
    header.extend((0..control_dim).map(|i| format!("control_{i}")));
    header.push("loss".to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (r, (xs, (us, ls))) in report
        .states
        .iter()
        .zip(report.controls.iter().zip(report.losses.iter()))
        .enumerate()
    {
        for k in 0..us.len() {
            let mut row = vec![
                r.to_string(),
                k.to_string(),
                (report.start_time + k as u64).to_string(),
            ];
            row.extend(xs[k].iter().map(|v| format_float(*v)));
            row.extend(us[k].iter().map(|v| format_float(*v)));
            row.push(format_float(ls[k]));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn format_float(v: f64) -> String {
    // f64::to_string is shortest round-trip in Rust, so re-reading the CSV
    // recovers the exact values.
    v.to_string()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
