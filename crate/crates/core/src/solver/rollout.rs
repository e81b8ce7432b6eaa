//! Forward simulation of an affine policy through sampled scenarios.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::basis::{ControlBox, PolicyCoeffs, TimeFeatures};
use crate::model::GenericProblem;
use crate::pamar::NoisePath;

/// A policy described by its parts (with features tabulated separately), so
/// the offline (Fourier) and transient (per-step) rules share one engine.
#[derive(Clone, Copy)]
pub(crate) struct PolicyParts<'a> {
    pub coeffs: &'a PolicyCoeffs,
    pub control_box: &'a ControlBox,
}

/// One scenario's closed-loop path under a policy.
#[derive(Debug, Clone)]
pub(crate) struct Trajectory {
    /// `horizon + 1` states, `states[0]` the given initial state.
    pub states: Vec<DVector<f64>>,
    /// Clamped controls applied at each stage.
    pub controls: Vec<DVector<f64>>,
    /// Pre-clamp controls (for saturation masks).
    pub raw_controls: Vec<DVector<f64>>,
    /// Stage losses.
    pub losses: Vec<f64>,
    /// Whether any state, control, or loss is non-finite.
    pub non_finite: bool,
}

/// Time features evaluated once per stage, shared across scenarios.
pub(crate) fn feature_table(
    features: &dyn TimeFeatures,
    start_time: u64,
    horizon: usize,
) -> Vec<Vec<f64>> {
    (0..horizon)
        .map(|k| features.eval(start_time + k as u64))
        .collect()
}

/// Rolls one scenario forward:
/// `u_k = clamp(policy(t_k, x_k))`, `loss_k = loss(t_k, x_k, ω_k, u_k)`,
/// `x_{k+1} = dynamics(t_k + 1, x_k, u_k)`.
pub(crate) fn rollout_one(
    problem: &GenericProblem,
    policy: PolicyParts<'_>,
    features: &[Vec<f64>],
    scenario: &NoisePath,
    initial_state: &DVector<f64>,
    start_time: u64,
    horizon: usize,
) -> Trajectory {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut raw_controls = Vec::with_capacity(horizon);
    let mut losses = Vec::with_capacity(horizon);
    let mut non_finite = false;

    states.push(initial_state.clone());
    for k in 0..horizon {
        let t = start_time + k as u64;
        let x = &states[k];
        let w = scenario
            .value_at_time(t)
            .expect("scenario coverage is validated");
        let raw = policy.coeffs.eval_raw(&features[k], x);
        let u = policy.control_box.clamp(&raw);
        let loss = problem.loss.loss(t, x, w, &u);
        let next = problem.dynamics.step_dynamics(t + 1, x, &u);
        if !loss.is_finite()
            || next.iter().any(|v| !v.is_finite())
            || raw.iter().any(|v| !v.is_finite())
        {
            non_finite = true;
        }
        raw_controls.push(raw);
        controls.push(u);
        losses.push(loss);
        states.push(next);
    }
    Trajectory {
        states,
        controls,
        raw_controls,
        losses,
        non_finite,
    }
}

/// Rolls every scenario in parallel; the output order matches the scenario
/// order, so downstream reductions are deterministic.
pub(crate) fn rollout_all(
    problem: &GenericProblem,
    policy: PolicyParts<'_>,
    features: &[Vec<f64>],
    scenarios: &[NoisePath],
    initial_states: &[DVector<f64>],
    start_time: u64,
    horizon: usize,
) -> Vec<Trajectory> {
    scenarios
        .par_iter()
        .zip(initial_states.par_iter())
        .map(|(scenario, x0)| {
            rollout_one(problem, policy, features, scenario, x0, start_time, horizon)
        })
        .collect()
}
