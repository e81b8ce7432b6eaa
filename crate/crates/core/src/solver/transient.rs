//! Transient solve: a free per-step policy over a finite window, conditioned
//! on observed history and pinned to the offline solution at the far end.
//!
//! The per-step rule reuses the whole offline machinery by expressing
//! "independent coefficients at every step" as one-hot time features: feature
//! `k` is active exactly at time `start + k`, so each stage owns one
//! intercept and one state gain. The terminal ensemble is pulled toward the
//! offline solution's per-phase moments at the phase where the window ends,
//! which makes the transient policy hand over smoothly to periodic
//! operation.

use nalgebra::DVector;

use crate::basis::{ControlBox, PolicyCoeffs, TimeFeatures};
use crate::error::{Error, Result};
use crate::model::GenericProblem;
use crate::pamar::History;

use super::objective::ObjectiveBreakdown;
use super::subgradient::descend;
use super::{ObjectiveWeights, SaaInstance, Solution, SolverSettings, TerminalTarget};

/// One-hot time features over a window: feature `k` is 1 at `start + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFeatures {
    pub start_time: u64,
    pub steps: usize,
}

impl TimeFeatures for StepFeatures {
    fn count(&self) -> usize {
        self.steps
    }

    fn eval_into(&self, t: u64, out: &mut [f64]) {
        out.fill(0.0);
        if let Some(k) = t.checked_sub(self.start_time) {
            if (k as usize) < self.steps {
                out[k as usize] = 1.0;
            }
        }
    }
}

/// An affine rule with independent coefficients at each step of a window.
#[derive(Debug, Clone)]
pub struct TransientRule {
    pub features: StepFeatures,
    pub coeffs: PolicyCoeffs,
    pub control_box: ControlBox,
    pub state_dim: usize,
}

impl TransientRule {
    /// Evaluates the rule at a time inside its window.
    pub fn eval_policy(&self, t: u64, x: &DVector<f64>) -> DVector<f64> {
        let features = self.features.eval(t);
        self.control_box.clamp(&self.coeffs.eval_raw(&features, x))
    }
}

/// A solved transient window.
#[derive(Debug, Clone)]
pub struct TransientSolution {
    pub rule: TransientRule,
    /// The control the rule takes right now (at the window start).
    pub first_control: DVector<f64>,
    pub objective: ObjectiveBreakdown,
    pub iterations: usize,
    pub converged: bool,
    pub termination: String,
}

/// Scenario seed for a transient window, derived so that re-solves at
/// different times use fresh but reproducible draws.
fn window_seed(seed: u64, start_time: u64) -> u64 {
    seed ^ start_time.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Solves the transient problem at `start_time`, starting from the known
/// state `current_state` with realized noise `history`, over `window` steps.
pub fn solve_transient(
    problem: &GenericProblem,
    offline: &Solution,
    start_time: u64,
    window: usize,
    history: &History,
    current_state: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<TransientSolution> {
    problem.validate()?;
    settings.validate()?;
    if window == 0 {
        return Err(Error::invalid("transient window must be positive"));
    }
    if current_state.len() != problem.dynamics.state_dim() {
        return Err(Error::invalid("current state dimension mismatch"));
    }

    // Scenarios are conditional continuations of the observed history; the
    // initial state is known, so the ensemble starts as a point mass.
    let scenarios = problem.noise.simulate_conditional(
        start_time,
        window,
        history,
        settings.num_scenarios,
        window_seed(settings.seed, start_time),
    )?;
    let instance = SaaInstance {
        problem: problem.clone(),
        scenarios,
        initial_states: vec![current_state.clone(); settings.num_scenarios],
        start_time,
        horizon: window,
    };
    instance.validate()?;

    // Pin the window's end to the offline per-phase moments there.
    let end_phase = problem.calendar().phase(start_time + window as u64);
    let terminal = TerminalTarget {
        weight: settings.terminal_weight,
        mean: offline.per_phase.mean(end_phase).clone(),
        cov: offline.per_phase.cov(end_phase).clone(),
    };
    let weights = ObjectiveWeights {
        chance_weight: settings.chance_weight,
        wrap_weight: 0.0,
        terminal: Some(terminal),
    };

    // Warm start: follow the offline rule from the known state (the state
    // path is deterministic given the controls), taking its clamped controls
    // as per-step intercepts.
    let features = StepFeatures {
        start_time,
        steps: window,
    };
    let mut coeffs = PolicyCoeffs::zeros(
        window,
        problem.dynamics.control_dim(),
        problem.dynamics.state_dim(),
    );
    let mut x = current_state.clone();
    for k in 0..window {
        let t = start_time + k as u64;
        let u = offline.rule.eval_policy(t, &x);
        coeffs.intercepts[k] = u.clone();
        x = problem.dynamics.step_dynamics(t + 1, &x, &u);
    }

    let control_box = problem.control_box.clone();
    let outcome = descend(
        &instance,
        &features,
        &mut coeffs,
        &control_box,
        &weights,
        settings,
    )?;

    let rule = TransientRule {
        features,
        coeffs,
        control_box,
        state_dim: problem.dynamics.state_dim(),
    };
    let first_control = rule.eval_policy(start_time, current_state);
    Ok(TransientSolution {
        rule,
        first_control,
        objective: outcome.breakdown,
        iterations: outcome.iterations,
        converged: outcome.converged,
        termination: outcome.termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_features_are_one_hot_inside_the_window() {
        let f = StepFeatures {
            start_time: 10,
            steps: 3,
        };
        assert_eq!(f.eval(10), vec![1.0, 0.0, 0.0]);
        assert_eq!(f.eval(12), vec![0.0, 0.0, 1.0]);
        assert_eq!(f.eval(13), vec![0.0, 0.0, 0.0]);
        assert_eq!(f.eval(9), vec![0.0, 0.0, 0.0]);
    }
}
