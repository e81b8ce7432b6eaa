//! TOML run configurations.
//!
//! A run configuration fully describes a solvable instance: season calendar,
//! problem (one of `hydropower`, `vpp`, `generic`), risk aggregator, policy
//! basis, solver settings, and seed. The schema is strict — unknown keys are
//! rejected with the offending field named, and cross-field validation
//! reports the full field path — so typos fail loudly instead of silently
//! falling back to defaults.
//!
//! See `docs/config-schema.md` for a field-by-field reference.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::PeriodicBasis;
use crate::calendar::SeasonCalendar;
use crate::error::{Error, Result};
use crate::model::{
    build_hydropower, build_vpp, GenericProblem, HydropowerSpec, LinearStateModel,
    QuadraticLoss, StateConstraint, VppSpec,
};
use crate::basis::ControlBox;
use crate::pamar::{PamarModel, PamarSpec};
use crate::risk::RiskAggregator;
use crate::solver::SolverSettings;

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for scenario generation.
    pub seed: u64,
    /// Output directory for solution files and reports.
    #[serde(default)]
    pub out_dir: Option<String>,
    pub calendar: CalendarConfig,
    pub problem: ProblemSection,
    pub risk: RiskConfig,
    pub basis: BasisConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub hydropower: Option<HydropowerConfig>,
    #[serde(default)]
    pub vpp: Option<VppConfig>,
    #[serde(default)]
    pub generic: Option<GenericConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalendarConfig {
    /// Nested periods, strictly increasing, each dividing the next.
    pub periods: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Hydropower,
    Vpp,
    Generic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub kind: RiskKind,
    /// Tail fraction; required for `cvar`, forbidden for `expectation`.
    #[serde(default)]
    pub tail: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Expectation,
    Cvar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    /// Harmonics per calendar period (`2·M < T` each).
    pub harmonics: Vec<u32>,
}

/// Mirror of [`SolverSettings`] with every field optional in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub num_scenarios: usize,
    pub burn_in_cycles: usize,
    pub max_iterations: usize,
    pub initial_step: f64,
    pub step_decay: f64,
    pub step_growth: f64,
    pub min_step: f64,
    pub momentum: f64,
    pub picard_rounds: usize,
    pub chance_weight: f64,
    pub wrap_weight: f64,
    pub terminal_weight: f64,
    pub objective_tol: f64,
    pub wrap_tol: f64,
    pub patience: usize,
    pub initial_state: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig {
            num_scenarios: s.num_scenarios,
            burn_in_cycles: s.burn_in_cycles,
            max_iterations: s.max_iterations,
            initial_step: s.initial_step,
            step_decay: s.step_decay,
            step_growth: s.step_growth,
            min_step: s.min_step,
            momentum: s.momentum,
            picard_rounds: s.picard_rounds,
            chance_weight: s.chance_weight,
            wrap_weight: s.wrap_weight,
            terminal_weight: s.terminal_weight,
            objective_tol: s.objective_tol,
            wrap_tol: s.wrap_tol,
            patience: s.patience,
            initial_state: s.initial_state,
        }
    }
}

/// Periodic ARMA noise description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PamarConfig {
    /// Series dimension.
    pub dim: usize,
    /// Per-phase mean vectors; the list length must divide the master period.
    pub mean: Vec<Vec<f64>>,
    /// Componentwise innovation standard deviation (`≥ 0`).
    pub sigma: Vec<f64>,
    /// Per-phase innovation means; zero when omitted.
    #[serde(default)]
    pub innovation_mean: Option<Vec<Vec<f64>>>,
    /// Autoregressive terms by lag.
    #[serde(default)]
    pub ar: Vec<LagCoeffs>,
    /// Moving-average terms by lag (`lag ≥ 1`).
    #[serde(default)]
    pub ma: Vec<LagCoeffs>,
    /// Per-phase matrix in front of the contemporaneous innovation;
    /// identity when omitted.
    #[serde(default)]
    pub contemporaneous: Option<Vec<Vec<Vec<f64>>>>,
}

/// Coefficients of one lag: a per-phase list of `dim × dim` matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagCoeffs {
    pub lag: usize,
    pub coeffs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydropowerConfig {
    /// Carryover matrix `A` (rows of the state dimension).
    pub carryover: Vec<Vec<f64>>,
    /// Release routing `B` (state × turbines).
    pub routing: Vec<Vec<f64>>,
    /// Per-phase inflow vectors (cycled).
    pub inflow: Vec<Vec<f64>>,
    /// Power per unit release, per turbine.
    pub efficiencies: Vec<f64>,
    /// Demand-intercept noise process (component 0 is the intercept).
    pub demand_intercept: PamarConfig,
    /// Demand slope per phase (cycled).
    pub demand_slope: Vec<f64>,
    pub storage_lower: Vec<f64>,
    pub storage_upper: Vec<f64>,
    /// Allowed probability of leaving the storage box.
    pub alpha: f64,
    pub release_lower: Vec<f64>,
    pub release_upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VppConfig {
    /// Noise over (availability, day-ahead price, real-time price).
    pub noise: PamarConfig,
    pub battery_retention: f64,
    pub battery_lower: f64,
    pub battery_upper: f64,
    pub alpha: f64,
    pub charge_max: f64,
    pub discharge_max: f64,
    pub conventional_max: f64,
    pub conventional_cost: f64,
    pub renewable_cap_max: f64,
    pub day_ahead_lower: f64,
    pub day_ahead_upper: f64,
    pub line_limit: f64,
    pub line_penalty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericConfig {
    pub state_matrix: Vec<Vec<f64>>,
    pub input_matrix: Vec<Vec<f64>>,
    /// Per-phase forcing vectors (cycled).
    pub forcing: Vec<Vec<f64>>,
    pub noise: PamarConfig,
    pub state_weight: Vec<Vec<f64>>,
    pub control_weight: Vec<Vec<f64>>,
    pub state_ref: Vec<f64>,
    pub control_ref: Vec<f64>,
    /// Optional control × noise pricing matrix.
    #[serde(default)]
    pub noise_price: Option<Vec<Vec<f64>>>,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub alpha: f64,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
}

/// Reads and fully validates a run configuration.
///
/// Missing files surface as I/O errors; parse errors carry the line, column,
/// and field reported by the TOML parser; semantic errors name the field
/// path that failed.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parses and validates a configuration from TOML text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig =
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    /// Cross-field validation beyond what the schema enforces.
    pub fn validate(&self) -> Result<()> {
        SeasonCalendar::new(self.calendar.periods.clone())
            .map_err(|e| Error::config(format!("calendar.periods: {e}")))?;
        match (self.risk.kind, self.risk.tail) {
            (RiskKind::Cvar, None) => {
                return Err(Error::config("risk.tail is required when risk.kind = \"cvar\""))
            }
            (RiskKind::Expectation, Some(_)) => {
                return Err(Error::config(
                    "risk.tail is only valid when risk.kind = \"cvar\"",
                ))
            }
            _ => {}
        }
        let section = match self.problem.kind {
            ProblemKind::Hydropower => self.hydropower.is_some(),
            ProblemKind::Vpp => self.vpp.is_some(),
            ProblemKind::Generic => self.generic.is_some(),
        };
        if !section {
            return Err(Error::config(format!(
                "problem.kind = {:?} requires the matching problem section",
                self.problem.kind
            )));
        }
        // Building everything exercises the full validation stack.
        self.build_problem()?;
        self.build_basis()?;
        self.solver_settings().validate()?;
        Ok(())
    }

    /// The season calendar.
    pub fn build_calendar(&self) -> Result<SeasonCalendar> {
        SeasonCalendar::new(self.calendar.periods.clone())
    }

    /// The risk aggregator.
    pub fn build_risk(&self) -> Result<RiskAggregator> {
        let agg = match self.risk.kind {
            RiskKind::Expectation => RiskAggregator::Expectation,
            RiskKind::Cvar => RiskAggregator::Cvar {
                tail: self
                    .risk
                    .tail
                    .ok_or_else(|| Error::config("risk.tail is required for cvar"))?,
            },
        };
        agg.validate()?;
        Ok(agg)
    }

    /// The policy basis.
    pub fn build_basis(&self) -> Result<PeriodicBasis> {
        PeriodicBasis::build_basis(self.build_calendar()?, &self.basis.harmonics)
            .map_err(|e| Error::config(format!("basis.harmonics: {e}")))
    }

    /// Solver settings with the run seed folded in.
    pub fn solver_settings(&self) -> SolverSettings {
        let s = &self.solver;
        SolverSettings {
            num_scenarios: s.num_scenarios,
            burn_in_cycles: s.burn_in_cycles,
            max_iterations: s.max_iterations,
            initial_step: s.initial_step,
            step_decay: s.step_decay,
            step_growth: s.step_growth,
            min_step: s.min_step,
            momentum: s.momentum,
            picard_rounds: s.picard_rounds,
            chance_weight: s.chance_weight,
            wrap_weight: s.wrap_weight,
            terminal_weight: s.terminal_weight,
            objective_tol: s.objective_tol,
            wrap_tol: s.wrap_tol,
            patience: s.patience,
            seed: self.seed,
            initial_state: s.initial_state.clone(),
        }
    }

    /// Assembles the configured problem.
    pub fn build_problem(&self) -> Result<GenericProblem> {
        let calendar = self.build_calendar()?;
        let risk = self.build_risk()?;
        match self.problem.kind {
            ProblemKind::Hydropower => {
                let h = self
                    .hydropower
                    .as_ref()
                    .ok_or_else(|| Error::config("missing [hydropower] section"))?;
                let spec = HydropowerSpec {
                    calendar: calendar.clone(),
                    carryover: to_matrix("hydropower.carryover", &h.carryover)?,
                    routing: to_matrix("hydropower.routing", &h.routing)?,
                    inflow: to_vectors("hydropower.inflow", &h.inflow)?,
                    efficiencies: DVector::from_column_slice(&h.efficiencies),
                    demand_intercept: h
                        .demand_intercept
                        .to_model(&calendar)
                        .map_err(|e| Error::config(format!("hydropower.demand_intercept: {e}")))?,
                    demand_slope: h.demand_slope.clone(),
                    storage_lower: DVector::from_column_slice(&h.storage_lower),
                    storage_upper: DVector::from_column_slice(&h.storage_upper),
                    alpha: h.alpha,
                    release_lower: DVector::from_column_slice(&h.release_lower),
                    release_upper: DVector::from_column_slice(&h.release_upper),
                    risk,
                };
                build_hydropower(spec).map_err(|e| Error::config(format!("hydropower: {e}")))
            }
            ProblemKind::Vpp => {
                let v = self
                    .vpp
                    .as_ref()
                    .ok_or_else(|| Error::config("missing [vpp] section"))?;
                let spec = VppSpec {
                    calendar: calendar.clone(),
                    noise: v
                        .noise
                        .to_model(&calendar)
                        .map_err(|e| Error::config(format!("vpp.noise: {e}")))?,
                    battery_retention: v.battery_retention,
                    battery_lower: v.battery_lower,
                    battery_upper: v.battery_upper,
                    alpha: v.alpha,
                    charge_max: v.charge_max,
                    discharge_max: v.discharge_max,
                    conventional_max: v.conventional_max,
                    conventional_cost: v.conventional_cost,
                    renewable_cap_max: v.renewable_cap_max,
                    day_ahead_lower: v.day_ahead_lower,
                    day_ahead_upper: v.day_ahead_upper,
                    line_limit: v.line_limit,
                    line_penalty: v.line_penalty,
                    risk,
                };
                build_vpp(spec).map_err(|e| Error::config(format!("vpp: {e}")))
            }
            ProblemKind::Generic => {
                let g = self
                    .generic
                    .as_ref()
                    .ok_or_else(|| Error::config("missing [generic] section"))?;
                let dynamics = LinearStateModel::new(
                    to_matrix("generic.state_matrix", &g.state_matrix)?,
                    to_matrix("generic.input_matrix", &g.input_matrix)?,
                    to_vectors("generic.forcing", &g.forcing)?,
                    calendar.clone(),
                )
                .map_err(|e| Error::config(format!("generic dynamics: {e}")))?;
                let noise = g
                    .noise
                    .to_model(&calendar)
                    .map_err(|e| Error::config(format!("generic.noise: {e}")))?;
                let loss = QuadraticLoss {
                    state_weight: to_matrix("generic.state_weight", &g.state_weight)?,
                    control_weight: to_matrix("generic.control_weight", &g.control_weight)?,
                    state_ref: DVector::from_column_slice(&g.state_ref),
                    control_ref: DVector::from_column_slice(&g.control_ref),
                    noise_price: match &g.noise_price {
                        None => None,
                        Some(m) => Some(to_matrix("generic.noise_price", m)?),
                    },
                };
                let constraint = StateConstraint::new(
                    None,
                    DVector::from_column_slice(&g.state_lower),
                    DVector::from_column_slice(&g.state_upper),
                    g.alpha,
                )
                .map_err(|e| Error::config(format!("generic bounds: {e}")))?;
                let control_box = ControlBox::new(
                    DVector::from_column_slice(&g.control_lower),
                    DVector::from_column_slice(&g.control_upper),
                )
                .map_err(|e| Error::config(format!("generic control bounds: {e}")))?;
                let problem = GenericProblem {
                    dynamics,
                    noise,
                    loss: std::sync::Arc::new(loss),
                    risk,
                    constraint,
                    control_box,
                    kind: "generic".to_string(),
                };
                problem
                    .validate()
                    .map_err(|e| Error::config(format!("generic: {e}")))?;
                Ok(problem)
            }
        }
    }
}

impl PamarConfig {
    /// Builds the noise model against a calendar.
    pub fn to_model(&self, calendar: &SeasonCalendar) -> Result<PamarModel> {
        let dim = self.dim;
        let check_mats = |name: &str, lag: &LagCoeffs| -> Result<Vec<DMatrix<f64>>> {
            lag.coeffs
                .iter()
                .map(|m| to_matrix(&format!("{name} lag {}", lag.lag), m))
                .collect()
        };
        let max_lag = |lags: &[LagCoeffs]| lags.iter().map(|l| l.lag).max().unwrap_or(0);

        // Dense per-lag lists with zero matrices where a lag is absent.
        let mut ar = vec![vec![DMatrix::zeros(dim, dim)]; max_lag(&self.ar)];
        let mut seen = std::collections::HashSet::new();
        for lag in &self.ar {
            if lag.lag == 0 {
                return Err(Error::config(
                    "ar lag 0 is not allowed (use `contemporaneous` for the innovation matrix)",
                ));
            }
            if !seen.insert(lag.lag) {
                return Err(Error::config(format!("duplicate ar lag {}", lag.lag)));
            }
            ar[lag.lag - 1] = check_mats("ar", lag)?;
        }
        let mut ma = vec![vec![DMatrix::zeros(dim, dim)]; max_lag(&self.ma)];
        seen.clear();
        for lag in &self.ma {
            if lag.lag == 0 {
                return Err(Error::config(
                    "ma lag 0 is not allowed (use `contemporaneous` instead)",
                ));
            }
            if !seen.insert(lag.lag) {
                return Err(Error::config(format!("duplicate ma lag {}", lag.lag)));
            }
            ma[lag.lag - 1] = check_mats("ma", lag)?;
        }

        PamarSpec {
            calendar: calendar.clone(),
            mean: to_vectors("mean", &self.mean)?,
            ar,
            ma,
            contemporaneous: match &self.contemporaneous {
                None => None,
                Some(list) => Some(
                    list.iter()
                        .map(|m| to_matrix("contemporaneous", m))
                        .collect::<Result<Vec<_>>>()?,
                ),
            },
            innovation_mean: match &self.innovation_mean {
                None => None,
                Some(list) => Some(to_vectors("innovation_mean", list)?),
            },
            sigma: DVector::from_column_slice(&self.sigma),
        }
        .build()
    }
}

fn to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::config(format!("{name} must have at least one row")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::config(format!("{name} rows must be non-empty")));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::config(format!(
                "{name} row {i} has {} entries, expected {ncols}",
                r.len()
            )));
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn to_vectors(name: &str, rows: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
    if rows.is_empty() {
        return Err(Error::config(format!("{name} must have at least one entry")));
    }
    let dim = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::config(format!(
                "{name} entry {i} has {} values, expected {dim}",
                r.len()
            )));
        }
    }
    Ok(rows.iter().map(|r| DVector::from_column_slice(r)).collect())
}

/// Applies dotted-path overrides (`section.key=value`) to raw TOML text and
/// re-validates. Values parse as TOML (numbers, booleans, arrays, strings).
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    if overrides.is_empty() {
        return Ok(text.to_string());
    }
    let mut root: toml::Value =
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    for entry in overrides {
        let (path, raw_value) = entry
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{entry}` must look like key=value")))?;
        let value = parse_toml_value(raw_value.trim())?;
        let mut node = &mut root;
        let segments: Vec<&str> = path.trim().split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(Error::config(format!("override path `{path}` has empty segments")));
        }
        for seg in &segments[..segments.len() - 1] {
            node = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override path `{path}` crosses a non-table")))?
                .entry(seg.to_string())
                .or_insert(toml::Value::Table(Default::default()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::config(format!("override path `{path}` crosses a non-table")))?
            .insert(segments.last().unwrap().to_string(), value);
    }
    toml::to_string(&root).map_err(|e| Error::config(e.to_string()))
}

fn parse_toml_value(raw: &str) -> Result<toml::Value> {
    // Parse through a one-key document so any TOML value syntax works.
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Value>(&doc) {
        Ok(toml::Value::Table(mut t)) => Ok(t.remove("v").expect("the document defines v")),
        _ => {
            // Bare words become strings.
            Ok(toml::Value::String(raw.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 7
        [calendar]
        periods = [4]
        [problem]
        kind = "hydropower"
        [risk]
        kind = "expectation"
        [basis]
        harmonics = [1]
        [solver]
        num_scenarios = 4
        [hydropower]
        carryover = [[1.0]]
        routing = [[-1.0]]
        inflow = [[5.0]]
        efficiencies = [2.0]
        demand_slope = [1.0]
        storage_lower = [20.0]
        storage_upper = [80.0]
        alpha = 0.1
        release_lower = [0.0]
        release_upper = [10.0]
        [hydropower.demand_intercept]
        dim = 1
        mean = [[10.0], [12.0], [10.0], [8.0]]
        sigma = [0.5]
        [[hydropower.demand_intercept.ar]]
        lag = 1
        coeffs = [[[0.3]]]
    "#;

    #[test]
    fn minimal_hydropower_config_builds() {
        let cfg = parse_config(MINIMAL).unwrap();
        let problem = cfg.build_problem().unwrap();
        assert_eq!(problem.kind, "hydropower");
        assert_eq!(problem.dynamics.state_dim(), 1);
        assert_eq!(problem.noise.order(), (1, 0));
        let settings = cfg.solver_settings();
        assert_eq!(settings.seed, 7);
        assert_eq!(settings.num_scenarios, 4);
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_name() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\nbanana = 1");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("banana"), "error should name the field: {err}");
    }

    #[test]
    fn parse_errors_carry_position_information() {
        let err = parse_config("seed = \n").unwrap_err().to_string();
        assert!(
            err.contains("line"),
            "toml errors should include a position: {err}"
        );
    }

    #[test]
    fn risk_tail_is_cross_checked() {
        let missing = MINIMAL.replace("kind = \"expectation\"", "kind = \"cvar\"");
        assert!(parse_config(&missing).is_err());
        let extra = MINIMAL.replace(
            "kind = \"expectation\"",
            "kind = \"expectation\"\ntail = 0.2",
        );
        assert!(parse_config(&extra).is_err());
        let good = MINIMAL.replace(
            "kind = \"expectation\"",
            "kind = \"cvar\"\ntail = 0.2",
        );
        let cfg = parse_config(&good).unwrap();
        assert_eq!(cfg.build_risk().unwrap(), RiskAggregator::Cvar { tail: 0.2 });
    }

    #[test]
    fn kind_and_section_must_match() {
        let text = MINIMAL.replace("kind = \"hydropower\"", "kind = \"vpp\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("section"), "{err}");
    }

    #[test]
    fn overrides_rewrite_nested_keys() {
        let text = apply_overrides(
            MINIMAL,
            &["solver.num_scenarios=16".into(), "seed=99".into()],
        )
        .unwrap();
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.solver.num_scenarios, 16);
    }

    #[test]
    fn override_values_parse_as_toml() {
        let text = apply_overrides(MINIMAL, &["solver.initial_state=[50.0]".into()]).unwrap();
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.solver.initial_state, Some(vec![50.0]));
    }

    #[test]
    fn ragged_matrices_are_rejected() {
        let text = MINIMAL.replace("carryover = [[1.0]]", "carryover = [[1.0], [1.0, 2.0]]");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn duplicate_ar_lags_are_rejected() {
        let text = MINIMAL.replace(
            "[[hydropower.demand_intercept.ar]]\n        lag = 1\n        coeffs = [[[0.3]]]",
            "[[hydropower.demand_intercept.ar]]\n        lag = 1\n        coeffs = [[[0.3]]]\n        [[hydropower.demand_intercept.ar]]\n        lag = 1\n        coeffs = [[[0.1]]]",
        );
        assert!(parse_config(&text).is_err());
    }
}
