//! Sample-average policy optimization.
//!
//! The solvers share one engine: roll an affine policy through every noise
//! scenario, aggregate stage losses with the problem's risk functional, add
//! soft-constraint penalties, and improve the policy coefficients by
//! subgradient descent with a step-halving acceptance rule (a step is taken
//! only when it does not increase the sampled objective).
//!
//! Three entry points build on the engine:
//!
//! * [`solve_offline`] — a periodic policy over one master cycle, with a
//!   wrap penalty tying the terminal state distribution back to the initial
//!   one and an outer fixed-point loop that feeds each round's terminal
//!   ensemble in as the next round's initial ensemble;
//! * [`solve_transient`] — a free per-step policy over a finite window,
//!   conditioned on observed history and pinned to the offline solution's
//!   per-phase statistics at the far end;
//! * [`solve_tree_baseline`] — exhaustive grid search on a scenario tree,
//!   for certifying the policy class on small instances.
//!
//! [`rolling_evaluate`] closes the loop: it applies a solved policy (with or
//!   without transient re-solving) to held-out noise over several cycles and
//!   reports realized losses, bound violations, and per-phase state
//!   statistics.

mod evaluate;
mod gradient;
mod objective;
mod offline;
mod rollout;
mod subgradient;
mod transient;
mod tree;

pub use evaluate::{rolling_evaluate, PolicyMode, RollingOptions, RollingReport};
pub use gradient::saa_gradient;
pub use objective::{saa_objective, ObjectiveBreakdown};
pub use transient::{solve_transient, StepFeatures, TransientRule, TransientSolution};
pub use tree::{solve_tree_baseline, TreeSolution};

pub use offline::solve_offline;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::GenericProblem;
use crate::pamar::{EnsembleStats, NoisePath};

/// A sampled finite-horizon problem: scenarios plus per-scenario initial
/// states over a common time window.
#[derive(Debug, Clone)]
pub struct SaaInstance {
    pub problem: GenericProblem,
    pub scenarios: Vec<NoisePath>,
    /// One initial state per scenario (a point mass is `m` copies).
    pub initial_states: Vec<DVector<f64>>,
    /// Absolute time of the first stage.
    pub start_time: u64,
    /// Number of stages.
    pub horizon: usize,
}

impl SaaInstance {
    /// Checks scenario coverage and dimensional consistency.
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        if self.scenarios.is_empty() {
            return Err(Error::invalid("instance has no scenarios"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("instance horizon must be positive"));
        }
        if self.initial_states.len() != self.scenarios.len() {
            return Err(Error::invalid(format!(
                "{} initial states for {} scenarios",
                self.initial_states.len(),
                self.scenarios.len()
            )));
        }
        let sd = self.problem.dynamics.state_dim();
        for x in &self.initial_states {
            if x.len() != sd {
                return Err(Error::invalid("initial state dimension mismatch"));
            }
        }
        let end = self.start_time + self.horizon as u64;
        for path in &self.scenarios {
            let covered = path.start_time <= self.start_time
                && path.start_time + path.len() as u64 >= end;
            if !covered {
                return Err(Error::invalid(format!(
                    "scenario covers [{}, {}) but the instance needs [{}, {})",
                    path.start_time,
                    path.start_time + path.len() as u64,
                    self.start_time,
                    end
                )));
            }
            if path.values[0].len() != self.problem.noise.dim() {
                return Err(Error::invalid("scenario noise dimension mismatch"));
            }
        }
        Ok(())
    }

    /// Number of scenarios.
    pub fn samples(&self) -> usize {
        self.scenarios.len()
    }
}

/// Penalty weights and optional terminal pin for the sampled objective.
#[derive(Debug, Clone, Default)]
pub struct ObjectiveWeights {
    /// Weight on the per-stage chance penalty (quantile of bound excess).
    pub chance_weight: f64,
    /// Weight on the initial-vs-terminal distribution gap.
    pub wrap_weight: f64,
    /// Pin the terminal ensemble to fixed target moments instead.
    pub terminal: Option<TerminalTarget>,
}

/// Target moments for the terminal state ensemble.
#[derive(Debug, Clone)]
pub struct TerminalTarget {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: nalgebra::DMatrix<f64>,
}

/// Tuning knobs shared by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Ensemble size for the sampled objective.
    pub num_scenarios: usize,
    /// Master cycles simulated before the optimization window.
    pub burn_in_cycles: usize,
    /// Subgradient iterations per outer round.
    pub max_iterations: usize,
    /// Initial coefficient-space step length.
    pub initial_step: f64,
    /// Step shrink factor after a rejected step (in (0, 1)).
    pub step_decay: f64,
    /// Step growth factor after an accepted step (≥ 1).
    pub step_growth: f64,
    /// Step length below which the inner loop stops.
    pub min_step: f64,
    /// Heavy-ball momentum on accepted steps (in [0, 1); reset on rejects).
    pub momentum: f64,
    /// Outer rounds feeding terminal ensembles back as initial ensembles.
    pub picard_rounds: usize,
    /// Weight on the chance penalty.
    pub chance_weight: f64,
    /// Weight on the wrap (periodicity) penalty.
    pub wrap_weight: f64,
    /// Weight on the terminal pin of transient solves.
    pub terminal_weight: f64,
    /// Relative objective improvement under which the inner loop converges.
    pub objective_tol: f64,
    /// Wrap gap under which the outer loop stops early.
    pub wrap_tol: f64,
    /// Accepted steps over which `objective_tol` is measured.
    pub patience: usize,
    /// Seed for scenario generation.
    pub seed: u64,
    /// Anchor initial state; the state-bound box midpoint when `None`.
    pub initial_state: Option<Vec<f64>>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            num_scenarios: 200,
            burn_in_cycles: 3,
            max_iterations: 300,
            initial_step: 0.5,
            step_decay: 0.5,
            step_growth: 1.1,
            min_step: 1e-10,
            momentum: 0.9,
            picard_rounds: 4,
            chance_weight: 100.0,
            wrap_weight: 100.0,
            terminal_weight: 100.0,
            objective_tol: 1e-6,
            wrap_tol: 1e-3,
            patience: 20,
            seed: 0,
            initial_state: None,
        }
    }
}

impl SolverSettings {
    /// Validates ranges of every knob.
    pub fn validate(&self) -> Result<()> {
        if self.num_scenarios == 0 {
            return Err(Error::invalid("num_scenarios must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::invalid("initial_step must be positive"));
        }
        if !(self.step_decay > 0.0 && self.step_decay < 1.0) {
            return Err(Error::invalid("step_decay must lie in (0, 1)"));
        }
        if !(self.step_growth >= 1.0 && self.step_growth.is_finite()) {
            return Err(Error::invalid("step_growth must be at least 1"));
        }
        if !(self.min_step > 0.0) {
            return Err(Error::invalid("min_step must be positive"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.picard_rounds == 0 {
            return Err(Error::invalid("picard_rounds must be positive"));
        }
        for (name, v) in [
            ("chance_weight", self.chance_weight),
            ("wrap_weight", self.wrap_weight),
            ("terminal_weight", self.terminal_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if !(self.objective_tol >= 0.0) || !(self.wrap_tol >= 0.0) {
            return Err(Error::invalid("tolerances must be non-negative"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be positive"));
        }
        Ok(())
    }
}

/// Convergence and cost diagnostics of an offline solve.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    /// Final sampled objective (risk + penalties).
    pub objective: f64,
    /// Risk-aggregated stage losses.
    pub risk_term: f64,
    /// Weighted chance penalty.
    pub chance_term: f64,
    /// Raw initial-vs-terminal distribution gap.
    pub wrap_gap: f64,
    /// Weighted wrap penalty.
    pub wrap_term: f64,
    /// Total accepted + rejected inner iterations across rounds.
    pub iterations: usize,
    /// Outer rounds actually run.
    pub picard_rounds: usize,
    /// Whether the solve met its tolerances.
    pub converged: bool,
    /// Human-readable reason the solve stopped.
    pub termination: String,
    /// Accepted objective values in order.
    pub objective_trace: Vec<f64>,
    /// Fraction of training scenarios violating the state bounds, per stage.
    pub violation_rate_per_stage: Vec<f64>,
}

/// A solved periodic policy with its supporting ensembles.
#[derive(Debug, Clone)]
pub struct Solution {
    pub rule: crate::basis::DecisionRule,
    /// Initial states of the final round (one per scenario).
    pub initial_states: Vec<DVector<f64>>,
    /// Terminal states under the final rule.
    pub terminal_states: Vec<DVector<f64>>,
    /// Per-phase state statistics under the final rule.
    pub per_phase: EnsembleStats,
    /// Scenario seed the solve used.
    pub seed: u64,
    pub diagnostics: Diagnostics,
}
