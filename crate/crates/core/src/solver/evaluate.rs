//! Closed-loop evaluation of solved policies on held-out noise.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::GenericProblem;
use crate::pamar::{EnsembleStats, History, StatsAccumulator};

use super::transient::solve_transient;
use super::{SolverSettings, Solution};

/// How controls are chosen during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// Apply the offline periodic rule directly.
    Offline,
    /// Re-solve a transient window at every step on the realized history and
    /// apply its first control (model-predictive operation).
    Transient { window: usize },
}

/// What to evaluate and on how much held-out noise.
#[derive(Debug, Clone)]
pub struct RollingOptions {
    /// Master cycles to run.
    pub cycles: usize,
    /// Independent noise replications.
    pub replications: usize,
    pub mode: PolicyMode,
    /// Seed for the held-out noise (keep distinct from training seeds).
    pub seed: u64,
    /// Burn-in cycles for the held-out noise, so it starts near-stationary.
    pub burn_in_cycles: usize,
    /// Starting state; the mean of the solution's initial ensemble when
    /// `None`.
    pub initial_state: Option<DVector<f64>>,
}

/// Realized closed-loop behavior across replications.
#[derive(Debug, Clone)]
pub struct RollingReport {
    /// Absolute time of step 0 (after burn-in), a multiple of the master
    /// period.
    pub start_time: u64,
    /// `states[r][k]` is replication `r`'s state at step `k` (length
    /// `cycles·T + 1` each).
    pub states: Vec<Vec<DVector<f64>>>,
    /// `controls[r][k]` is the control applied at step `k`.
    pub controls: Vec<Vec<DVector<f64>>>,
    /// `losses[r][k]` is the realized stage loss.
    pub losses: Vec<Vec<f64>>,
    /// Mean over replications of the summed loss in each cycle.
    pub loss_per_cycle: Vec<f64>,
    /// `end_of_cycle_states[c][r]`: the state after cycle `c` completes.
    pub end_of_cycle_states: Vec<Vec<DVector<f64>>>,
    /// Fraction of violating post-decision states per stage, over
    /// replications.
    pub per_stage_violations: Vec<f64>,
    /// Overall fraction of (replication, stage) pairs violating the bounds.
    pub violation_frequency: f64,
    /// States pooled by phase across replications and cycles.
    pub per_phase: EnsembleStats,
}

/// Evaluates a solution in closed loop on fresh noise.
///
/// Each replication simulates its own noise path (with burn-in, so the noise
/// starts near-stationary at phase 0), then steps the dynamics under the
/// chosen policy mode: the state after each control is checked against the
/// soft bounds, exactly as the chance penalty prices them during training.
pub fn rolling_evaluate(
    problem: &GenericProblem,
    solution: &Solution,
    options: &RollingOptions,
    settings: &SolverSettings,
) -> Result<RollingReport> {
    problem.validate()?;
    if options.cycles == 0 || options.replications == 0 {
        return Err(Error::invalid("cycles and replications must be positive"));
    }
    let period = problem.period() as usize;
    let horizon = options.cycles * period;

    let ensemble = problem.noise.simulate_ensemble(
        options.replications,
        horizon,
        options.burn_in_cycles,
        options.seed,
    )?;
    if ensemble.divergence.diverged {
        return Err(Error::Divergence(format!(
            "held-out noise diverged: {:?}",
            ensemble.divergence
        )));
    }

    let x0 = match &options.initial_state {
        Some(x) => {
            if x.len() != problem.dynamics.state_dim() {
                return Err(Error::invalid("initial state dimension mismatch"));
            }
            x.clone()
        }
        None => {
            let m = solution.initial_states.len() as f64;
            let mut mean = DVector::zeros(problem.dynamics.state_dim());
            for x in &solution.initial_states {
                mean += x;
            }
            mean / m
        }
    };

    let mut states = Vec::with_capacity(options.replications);
    let mut controls = Vec::with_capacity(options.replications);
    let mut losses = Vec::with_capacity(options.replications);
    let mut violation_flags: Vec<Vec<bool>> = Vec::with_capacity(options.replications);

    for path in &ensemble.paths {
        let start = path.start_time;
        let mut xs = Vec::with_capacity(horizon + 1);
        let mut us = Vec::with_capacity(horizon);
        let mut ls = Vec::with_capacity(horizon);
        let mut flags = Vec::with_capacity(horizon);
        xs.push(x0.clone());
        for k in 0..horizon {
            let t = start + k as u64;
            let x = xs[k].clone();
            let u = match options.mode {
                PolicyMode::Offline => solution.rule.eval_policy(t, &x),
                PolicyMode::Transient { window } => {
                    // Condition on everything realized so far: the stored
                    // pre-window history plus the path's values up to k.
                    let history = History {
                        values: path
                            .history
                            .values
                            .iter()
                            .chain(path.values[..k].iter())
                            .cloned()
                            .collect(),
                        innovations: path
                            .history
                            .innovations
                            .iter()
                            .chain(path.innovations[..k].iter())
                            .cloned()
                            .collect(),
                    };
                    solve_transient(problem, solution, t, window, &history, &x, settings)?
                        .first_control
                }
            };
            let w = path.value_at_time(t).expect("path covers the horizon");
            ls.push(problem.loss.loss(t, &x, w, &u));
            let next = problem.dynamics.step_dynamics(t + 1, &x, &u);
            flags.push(problem.constraint.violated(&next));
            xs.push(next);
            us.push(u);
        }
        states.push(xs);
        controls.push(us);
        losses.push(ls);
        violation_flags.push(flags);
    }

    let loss_per_cycle = (0..options.cycles)
        .map(|c| {
            let total: f64 = losses
                .iter()
                .map(|ls| ls[c * period..(c + 1) * period].iter().sum::<f64>())
                .sum();
            total / options.replications as f64
        })
        .collect();

    let end_of_cycle_states = (0..options.cycles)
        .map(|c| {
            states
                .iter()
                .map(|xs| xs[(c + 1) * period].clone())
                .collect()
        })
        .collect();

    let per_stage_violations: Vec<f64> = (0..horizon)
        .map(|k| {
            let count = violation_flags.iter().filter(|f| f[k]).count();
            count as f64 / options.replications as f64
        })
        .collect();
    let violation_frequency =
        per_stage_violations.iter().sum::<f64>() / horizon as f64;

    let start = ensemble.paths[0].start_time;
    let calendar = problem.calendar();
    let mut acc = StatsAccumulator::new(period, problem.dynamics.state_dim());
    for xs in &states {
        for (k, x) in xs[..horizon].iter().enumerate() {
            acc.add(calendar.phase(start + k as u64), x);
        }
    }
    let per_phase = acc.finish();

    Ok(RollingReport {
        start_time: start,
        states,
        controls,
        losses,
        loss_per_cycle,
        end_of_cycle_states,
        per_stage_violations,
        violation_frequency,
        per_phase,
    })
}
