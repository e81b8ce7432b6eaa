//! The sampled objective: risk-aggregated stage losses plus soft penalties.

use nalgebra::{DMatrix, DVector};

use crate::basis::DecisionRule;
use crate::error::{Error, Result};
use crate::risk::lower_quantile_index;

use super::rollout::{feature_table, rollout_all, PolicyParts, Trajectory};
use super::{ObjectiveWeights, SaaInstance};

/// Value of the sampled objective, split into its terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBreakdown {
    /// Σ over stages of the risk aggregator applied to that stage's losses.
    pub risk_term: f64,
    /// Weighted sum over stages of the bound-excess quantile.
    pub chance_term: f64,
    /// Raw wrap gap: ‖μ₀ − μ_H‖² + ‖C₀ − C_H‖²_F over the sample ensembles.
    pub wrap_gap: f64,
    /// `wrap_weight · wrap_gap`.
    pub wrap_term: f64,
    /// Weighted distance of the terminal ensemble from pinned target moments.
    pub terminal_term: f64,
    /// Sum of every term.
    pub total: f64,
}

/// Byproducts of an objective evaluation that the gradient pass reuses.
#[derive(Debug, Clone)]
pub(crate) struct StageAux {
    /// Per stage, the risk tail weights over scenarios (sum to one).
    pub tail_weights: Vec<Vec<f64>>,
    /// Per stage `k = 1..=H`, the scenario whose bound excess sits at the
    /// penalized quantile, when its excess is positive.
    pub chance_pick: Vec<Option<usize>>,
}

/// Evaluates the objective for already-rolled trajectories.
pub(crate) fn evaluate_trajectories(
    instance: &SaaInstance,
    trajectories: &[Trajectory],
    weights: &ObjectiveWeights,
) -> Result<(ObjectiveBreakdown, StageAux)> {
    if trajectories.iter().any(|tr| tr.non_finite) {
        return Err(Error::Divergence(
            "policy rollout produced non-finite values".into(),
        ));
    }
    let horizon = instance.horizon;
    let m = trajectories.len();
    let risk = &instance.problem.risk;
    let constraint = &instance.problem.constraint;

    // Risk-aggregated stage losses.
    let mut risk_term = 0.0;
    let mut tail_weights = Vec::with_capacity(horizon);
    let mut stage_losses = vec![0.0; m];
    for k in 0..horizon {
        for (mi, tr) in trajectories.iter().enumerate() {
            stage_losses[mi] = tr.losses[k];
        }
        risk_term += risk.aggregate(&stage_losses, None)?;
        tail_weights.push(risk.tail_weights(&stage_losses, None)?);
    }

    // Chance penalty: at each visited state x_k (k ≥ 1), the lower
    // (1 − α)-quantile of the scenario bound excesses.
    let level = 1.0 - constraint.alpha();
    let mut chance_raw = 0.0;
    let mut chance_pick = Vec::with_capacity(horizon);
    let mut excesses: Vec<(f64, usize)> = Vec::with_capacity(m);
    for k in 1..=horizon {
        excesses.clear();
        for (mi, tr) in trajectories.iter().enumerate() {
            excesses.push((constraint.excess(&tr.states[k]), mi));
        }
        excesses.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (value, scenario) = excesses[lower_quantile_index(m, level)];
        chance_raw += value;
        chance_pick.push(if value > 0.0 { Some(scenario) } else { None });
    }
    let chance_term = weights.chance_weight * chance_raw;

    // Wrap gap between the initial and terminal ensembles.
    let (mu0, cov0) = ensemble_moments(trajectories, 0);
    let (mu_h, cov_h) = ensemble_moments(trajectories, horizon);
    let wrap_gap = (&mu0 - &mu_h).norm_squared() + (&cov0 - &cov_h).norm_squared();
    let wrap_term = weights.wrap_weight * wrap_gap;

    // Terminal pin towards fixed target moments.
    let terminal_term = match &weights.terminal {
        None => 0.0,
        Some(target) => {
            let gap = (&mu_h - &target.mean).norm_squared()
                + (&cov_h - &target.cov).norm_squared();
            target.weight * gap
        }
    };

    let total = risk_term + chance_term + wrap_term + terminal_term;
    if !total.is_finite() {
        return Err(Error::Divergence("objective is non-finite".into()));
    }
    Ok((
        ObjectiveBreakdown {
            risk_term,
            chance_term,
            wrap_gap,
            wrap_term,
            terminal_term,
            total,
        },
        StageAux {
            tail_weights,
            chance_pick,
        },
    ))
}

/// Mean and population covariance of the scenario states at one stage index.
pub(crate) fn ensemble_moments(
    trajectories: &[Trajectory],
    stage: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let m = trajectories.len() as f64;
    let dim = trajectories[0].states[stage].len();
    let mut mean = DVector::zeros(dim);
    for tr in trajectories {
        mean += &tr.states[stage];
    }
    mean /= m;
    let mut cov = DMatrix::zeros(dim, dim);
    for tr in trajectories {
        let d = &tr.states[stage] - &mean;
        cov.syger(1.0 / m, &d, &d, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for r in 0..dim {
        for c in (r + 1)..dim {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    (mean, cov)
}

/// Fraction of scenarios violating the state bounds at each stage `1..=H`.
pub(crate) fn violation_rates(instance: &SaaInstance, trajectories: &[Trajectory]) -> Vec<f64> {
    let constraint = &instance.problem.constraint;
    (1..=instance.horizon)
        .map(|k| {
            let violated = trajectories
                .iter()
                .filter(|tr| constraint.violated(&tr.states[k]))
                .count();
            violated as f64 / trajectories.len() as f64
        })
        .collect()
}

/// Evaluates the sampled objective of a periodic decision rule on an
/// instance: risk-aggregated stage losses, chance penalty, and wrap penalty.
pub fn saa_objective(
    instance: &SaaInstance,
    rule: &DecisionRule,
    weights: &ObjectiveWeights,
) -> Result<ObjectiveBreakdown> {
    instance.validate()?;
    rule.validate()?;
    let policy = PolicyParts {
        coeffs: &rule.coeffs,
        control_box: &rule.control_box,
    };
    let features = feature_table(&rule.basis, instance.start_time, instance.horizon);
    let trajectories = rollout_all(
        &instance.problem,
        policy,
        &features,
        &instance.scenarios,
        &instance.initial_states,
        instance.start_time,
        instance.horizon,
    );
    let (breakdown, _) = evaluate_trajectories(instance, &trajectories, weights)?;
    Ok(breakdown)
}
