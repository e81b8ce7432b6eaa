//! Reverse-mode (adjoint) gradient of the sampled objective in the policy
//! coefficients.
//!
//! For each scenario the rollout is differentiated backwards: an adjoint
//! state `p_k = ∂J/∂x_k` is propagated from the horizon to the start, picking
//! up contributions from the stage-loss risk weights, the chance penalty's
//! selected quantile scenario, the wrap/terminal ensemble-moment penalties,
//! and the policy's own state feedback. Clamped control coordinates are
//! masked out (the box projection has zero slope there), which makes the
//! result a subgradient at saturation boundaries.
//!
//! Ensemble-moment derivatives used at the horizon, with `μ, C` the sample
//! mean and population covariance over `M` scenarios:
//!
//! * mean term `‖μ − a‖²` → `(2/M)(μ − a)` per scenario;
//! * covariance term `‖C − S‖²_F` → `(4/M)(C − S)(x_m − μ)` per scenario
//!   (the inner `∂μ` cross-terms cancel because `Σ_m (x_m − μ) = 0`).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::PolicyCoeffs;

use super::objective::{ensemble_moments, StageAux};
use super::rollout::{PolicyParts, Trajectory};
use super::{ObjectiveWeights, SaaInstance};

/// Adds `scale · src` into `dst`, coefficient by coefficient.
pub(crate) fn coeffs_axpy(dst: &mut PolicyCoeffs, src: &PolicyCoeffs, scale: f64) {
    for (d, s) in dst.intercepts.iter_mut().zip(src.intercepts.iter()) {
        d.axpy(scale, s, 1.0);
    }
    for (d, s) in dst.gains.iter_mut().zip(src.gains.iter()) {
        d.zip_apply(s, |a, b| *a += scale * b);
    }
}

/// Gradient of [`saa_objective`](super::saa_objective) in the rule's
/// coefficients, by the adjoint recursion described in the module docs.
///
/// At kinks of the sampled objective (clamp boundaries, risk/quantile ties)
/// this is a subgradient.
pub fn saa_gradient(
    instance: &SaaInstance,
    rule: &crate::basis::DecisionRule,
    weights: &ObjectiveWeights,
) -> crate::error::Result<PolicyCoeffs> {
    instance.validate()?;
    rule.validate()?;
    let policy = PolicyParts {
        coeffs: &rule.coeffs,
        control_box: &rule.control_box,
    };
    let features =
        super::rollout::feature_table(&rule.basis, instance.start_time, instance.horizon);
    let trajectories = super::rollout::rollout_all(
        &instance.problem,
        policy,
        &features,
        &instance.scenarios,
        &instance.initial_states,
        instance.start_time,
        instance.horizon,
    );
    let (_, aux) = super::objective::evaluate_trajectories(instance, &trajectories, weights)?;
    Ok(policy_gradient(
        instance,
        policy,
        &features,
        &trajectories,
        &aux,
        weights,
    ))
}

/// Euclidean norm over all coefficients.
pub(crate) fn coeffs_scale(c: &mut PolicyCoeffs, scale: f64) {
    for k in &mut c.intercepts {
        *k *= scale;
    }
    for g in &mut c.gains {
        *g *= scale;
    }
}

pub(crate) fn coeffs_norm(c: &PolicyCoeffs) -> f64 {
    let mut sq = 0.0;
    for k in &c.intercepts {
        sq += k.norm_squared();
    }
    for g in &c.gains {
        sq += g.norm_squared();
    }
    sq.sqrt()
}

/// Gradient of the sampled objective with respect to every intercept and
/// gain, holding the scenario set and initial states fixed.
pub(crate) fn policy_gradient(
    instance: &SaaInstance,
    policy: PolicyParts<'_>,
    features: &[Vec<f64>],
    trajectories: &[Trajectory],
    aux: &StageAux,
    weights: &ObjectiveWeights,
) -> PolicyCoeffs {
    let horizon = instance.horizon;
    let m = trajectories.len();
    let m_f = m as f64;
    let problem = &instance.problem;
    let sd = problem.dynamics.state_dim();
    let cd = problem.dynamics.control_dim();
    let n_features = policy.coeffs.features();

    // Per-stage state gain G_k = Σ_f f_k[f] · K_f, shared across scenarios.
    let state_gains: Vec<DMatrix<f64>> = (0..horizon)
        .map(|k| policy.coeffs.state_gain(&features[k]))
        .collect();

    // Horizon-moment terms common to every scenario.
    let (mu0, cov0) = ensemble_moments(trajectories, 0);
    let (mu_h, cov_h) = ensemble_moments(trajectories, horizon);
    let wrap_mean = (&mu_h - &mu0) * (2.0 / m_f) * weights.wrap_weight;
    let wrap_cov = (&cov_h - &cov0) * (4.0 / m_f) * weights.wrap_weight;
    let (pin_mean, pin_cov) = match &weights.terminal {
        None => (DVector::zeros(sd), DMatrix::zeros(sd, sd)),
        Some(t) => (
            (&mu_h - &t.mean) * (2.0 / m_f) * t.weight,
            (&cov_h - &t.cov) * (4.0 / m_f) * t.weight,
        ),
    };

    let a_t = problem.dynamics.a().transpose();
    let b_t = problem.dynamics.b().transpose();

    let partials: Vec<PolicyCoeffs> = trajectories
        .par_iter()
        .enumerate()
        .map(|(mi, tr)| {
            let mut grad = PolicyCoeffs::zeros(n_features, cd, sd);

            // Adjoint at the horizon: wrap + terminal pin + chance pick.
            let x_h = &tr.states[horizon];
            let mut p = &wrap_mean + &wrap_cov * (x_h - &mu_h);
            p += &pin_mean + &pin_cov * (x_h - &mu_h);
            if aux.chance_pick[horizon - 1] == Some(mi) {
                p.axpy(
                    weights.chance_weight,
                    &problem.constraint.excess_grad(x_h),
                    1.0,
                );
            }

            for k in (0..horizon).rev() {
                let t = instance.start_time + k as u64;
                let x = &tr.states[k];
                let u = &tr.controls[k];
                let w = instance.scenarios[mi]
                    .value_at_time(t)
                    .expect("scenario coverage is validated");
                let lambda = aux.tail_weights[k][mi];

                // Total derivative in the applied control, masked through
                // the box projection.
                let mut g_u = b_t.clone() * &p;
                if lambda != 0.0 {
                    g_u.axpy(lambda, &problem.loss.grad_u(t, x, w, u), 1.0);
                }
                let mask = policy.control_box.active_mask(&tr.raw_controls[k]);
                for (i, active) in mask.iter().enumerate() {
                    if !active {
                        g_u[i] = 0.0;
                    }
                }

                // Coefficient contributions: ∂u_raw/∂k_f = f_k[f]·I,
                // ∂u_raw/∂K_f = f_k[f]·x.
                for (f, &fv) in features[k].iter().enumerate() {
                    if fv == 0.0 {
                        continue;
                    }
                    grad.intercepts[f].axpy(fv, &g_u, 1.0);
                    grad.gains[f].ger(fv, &g_u, x, 1.0);
                }

                // Adjoint recursion into x_k.
                let mut p_prev = a_t.clone() * &p;
                p_prev.gemv_tr(1.0, &state_gains[k], &g_u, 1.0);
                if lambda != 0.0 {
                    p_prev.axpy(lambda, &problem.loss.grad_x(t, x, w, u), 1.0);
                }
                if k >= 1 && aux.chance_pick[k - 1] == Some(mi) {
                    p_prev.axpy(
                        weights.chance_weight,
                        &problem.constraint.excess_grad(x),
                        1.0,
                    );
                }
                p = p_prev;
            }
            grad
        })
        .collect();

    // Deterministic reduction in scenario order.
    let mut total = PolicyCoeffs::zeros(n_features, cd, sd);
    for g in &partials {
        coeffs_axpy(&mut total, g, 1.0);
    }
    total
}
