//! Offline solve: a periodic affine policy over one master cycle.
//!
//! The periodicity requirement — operating the policy forever should keep
//! the state distribution cycling — is enforced in two complementary ways:
//!
//! * a wrap penalty on the gap between the initial and terminal state
//!   ensembles inside each solve, and
//! * an outer fixed-point loop: each round's terminal ensemble becomes the
//!   next round's initial ensemble (round 0 starts from a point mass at an
//!   anchor state), until the wrap gap falls under tolerance.

use nalgebra::DVector;

use crate::basis::{DecisionRule, PeriodicBasis};
use crate::error::{Error, Result};
use crate::model::GenericProblem;
use crate::pamar::StatsAccumulator;

use super::objective::violation_rates;
use super::subgradient::descend;
use super::{Diagnostics, ObjectiveWeights, SaaInstance, Solution, SolverSettings};

/// The anchor state a cold solve starts from: the explicit override, or the
/// midpoint of the state bounds when the constraint applies to the state
/// directly, or the origin.
pub(crate) fn anchor_state(problem: &GenericProblem, settings: &SolverSettings) -> Result<DVector<f64>> {
    let sd = problem.dynamics.state_dim();
    match &settings.initial_state {
        Some(x) => {
            if x.len() != sd {
                return Err(Error::invalid(format!(
                    "initial_state has {} entries but the state is {sd}-dimensional",
                    x.len()
                )));
            }
            Ok(DVector::from_column_slice(x))
        }
        None => {
            if problem.constraint.state_dim() == sd && problem.constraint.lower().len() == sd {
                Ok((problem.constraint.lower() + problem.constraint.upper()) * 0.5)
            } else {
                Ok(DVector::zeros(sd))
            }
        }
    }
}

/// Solves for a periodic decision rule on the given basis.
pub fn solve_offline(
    problem: &GenericProblem,
    basis: &PeriodicBasis,
    settings: &SolverSettings,
) -> Result<Solution> {
    problem.validate()?;
    settings.validate()?;
    if basis.calendar() != problem.calendar() {
        return Err(Error::invalid(
            "policy basis and problem must share one season calendar",
        ));
    }

    let horizon = problem.period() as usize;
    let ensemble = problem.noise.simulate_ensemble(
        settings.num_scenarios,
        horizon,
        settings.burn_in_cycles,
        settings.seed,
    )?;
    if ensemble.divergence.diverged {
        return Err(Error::Divergence(format!(
            "noise ensemble diverged: {:?}",
            ensemble.divergence
        )));
    }
    let start_time = ensemble.paths[0].start_time;

    let anchor = anchor_state(problem, settings)?;
    let mut instance = SaaInstance {
        problem: problem.clone(),
        scenarios: ensemble.paths,
        initial_states: vec![anchor; settings.num_scenarios],
        start_time,
        horizon,
    };
    instance.validate()?;

    // Start from the control-box midpoint (constant intercept only).
    let mut rule = DecisionRule::zeros(
        basis.clone(),
        problem.control_box.clone(),
        problem.dynamics.state_dim(),
    );
    rule.coeffs.intercepts[0] = problem.control_box.midpoint();

    let weights = ObjectiveWeights {
        chance_weight: settings.chance_weight,
        wrap_weight: settings.wrap_weight,
        terminal: None,
    };

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut rounds_used = 0;
    let mut last = None;
    for _round in 0..settings.picard_rounds {
        rounds_used += 1;
        let outcome = descend(
            &instance,
            &rule.basis,
            &mut rule.coeffs,
            &rule.control_box,
            &weights,
            settings,
        )?;
        iterations += outcome.iterations;
        trace.extend_from_slice(&outcome.trace);

        let wrap_ok = outcome.breakdown.wrap_gap <= settings.wrap_tol;
        // Terminal ensemble feeds the next round.
        instance.initial_states = outcome
            .trajectories
            .iter()
            .map(|tr| tr.states[horizon].clone())
            .collect();
        last = Some(outcome);
        if wrap_ok {
            break;
        }
    }
    let outcome = last.expect("picard_rounds is validated positive");

    // Per-phase state statistics under the final rule; phase τ pools the
    // states visited at times ≡ τ.
    let calendar = problem.calendar();
    let mut acc = StatsAccumulator::new(horizon, problem.dynamics.state_dim());
    for tr in &outcome.trajectories {
        for k in 0..horizon {
            acc.add(calendar.phase(start_time + k as u64), &tr.states[k]);
        }
    }
    let per_phase = acc.finish();

    let violation_rate_per_stage = violation_rates(&instance, &outcome.trajectories);
    let wrap_ok = outcome.breakdown.wrap_gap <= settings.wrap_tol;
    let converged = outcome.converged && wrap_ok;
    let termination = if wrap_ok {
        format!("inner: {}; wrap gap within tolerance", outcome.termination)
    } else {
        format!(
            "inner: {}; wrap gap {:.3e} above tolerance {:.3e} after {rounds_used} rounds",
            outcome.termination, outcome.breakdown.wrap_gap, settings.wrap_tol
        )
    };

    let diagnostics = Diagnostics {
        objective: outcome.breakdown.total,
        risk_term: outcome.breakdown.risk_term,
        chance_term: outcome.breakdown.chance_term,
        wrap_gap: outcome.breakdown.wrap_gap,
        wrap_term: outcome.breakdown.wrap_term,
        iterations,
        picard_rounds: rounds_used,
        converged,
        termination,
        objective_trace: trace,
        violation_rate_per_stage,
    };

    // The instance's initial states are already the terminal ensemble (the
    // Picard update ran); recover the matching initial ensemble from the
    // final trajectories instead.
    let initial_states = outcome
        .trajectories
        .iter()
        .map(|tr| tr.states[0].clone())
        .collect();
    let terminal_states = outcome
        .trajectories
        .iter()
        .map(|tr| tr.states[horizon].clone())
        .collect();

    Ok(Solution {
        rule,
        initial_states,
        terminal_states,
        per_phase,
        seed: settings.seed,
        diagnostics,
    })
}
