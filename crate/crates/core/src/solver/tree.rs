//! Exhaustive scenario-tree baseline.
//!
//! Builds a tree of conditionally sampled noise realizations (`branching`
//! children per node, `depth` stages) and solves the resulting finite-horizon
//! problem exactly over a per-dimension control grid by backward recursion.
//! Decisions are made before observing the stage's noise — the same
//! information pattern as the affine policies, which see the state (a
//! function of past noise) but not the current shock — so the tree's optimal
//! value is directly comparable to the sampled objective of a policy on the
//! same problem and bounds it from below up to sampling error.
//!
//! Only the expectation aggregator is supported: nested per-node expectations
//! compose into the overall expectation, whereas tail risks (CVaR) do not
//! factorize across stages, so a tree recursion would optimize a different
//! functional than the per-stage sample aggregation.
//!
//! Cost grows as `(grid^controls · branching)^depth`; the solver refuses
//! instances beyond a fixed work budget rather than silently grinding.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::GenericProblem;
use crate::pamar::History;
use crate::risk::RiskAggregator;

use super::offline::anchor_state;
use super::SolverSettings;

/// Hard cap on `branching^depth` (tree nodes per stage path count).
const MAX_NODES: f64 = 1e6;
/// Hard cap on total loss evaluations `(grid^controls · branching)^depth`.
const MAX_EVALS: f64 = 1e8;

/// Result of the tree baseline.
#[derive(Debug, Clone)]
pub struct TreeSolution {
    /// Optimal expected total loss (plus chance penalty) over the tree.
    pub objective: f64,
    /// Optimal first-stage control.
    pub first_control: DVector<f64>,
    /// Number of noise nodes in the tree.
    pub nodes: usize,
}

struct NoiseNode {
    value: DVector<f64>,
    children: Vec<NoiseNode>,
}

/// Samples `branching` conditional realizations of the noise at time `t`,
/// recursing `depth_left − 1` further stages. Each node draws from its own
/// counter stream, so the tree is reproducible.
fn sample_children(
    problem: &GenericProblem,
    t: u64,
    history: &History,
    branching: usize,
    depth_left: usize,
    seed: u64,
    counter: &mut u64,
    nodes: &mut usize,
) -> Result<Vec<NoiseNode>> {
    let mut children = Vec::with_capacity(branching);
    for _ in 0..branching {
        let stream = *counter;
        *counter += 1;
        let path = problem.noise.simulate_from(t, 1, history, seed, stream)?;
        let value = path.values[0].clone();
        let mut next_history = History {
            values: history.values.clone(),
            innovations: history.innovations.clone(),
        };
        next_history.values.push(value.clone());
        next_history.innovations.push(path.innovations[0].clone());
        *nodes += 1;
        let grandchildren = if depth_left > 1 {
            sample_children(
                problem,
                t + 1,
                &next_history,
                branching,
                depth_left - 1,
                seed,
                counter,
                nodes,
            )?
        } else {
            Vec::new()
        };
        children.push(NoiseNode {
            value,
            children: grandchildren,
        });
    }
    Ok(children)
}

/// Cartesian grid over the control box with `points` values per dimension.
fn control_grid(problem: &GenericProblem, points: usize) -> Vec<DVector<f64>> {
    let lower = &problem.control_box.lower;
    let upper = &problem.control_box.upper;
    let dim = lower.len();
    let axis = |i: usize| -> Vec<f64> {
        if points == 1 {
            vec![0.5 * (lower[i] + upper[i])]
        } else {
            (0..points)
                .map(|k| lower[i] + (upper[i] - lower[i]) * k as f64 / (points - 1) as f64)
                .collect()
        }
    };
    let axes: Vec<Vec<f64>> = (0..dim).map(axis).collect();
    let mut grid = vec![DVector::zeros(dim)];
    for (i, axis) in axes.iter().enumerate() {
        let mut next = Vec::with_capacity(grid.len() * axis.len());
        for base in &grid {
            for &v in axis {
                let mut u = base.clone();
                u[i] = v;
                next.push(u);
            }
        }
        grid = next;
    }
    grid
}

/// Optimal cost-to-go at a decision node: the stage's noise realizations are
/// `outcomes`, the state is `x`, and each outcome leads to its own
/// sub-decision with the post-decision state (which is common across
/// outcomes because the dynamics are noise-free).
fn node_value(
    problem: &GenericProblem,
    grid: &[DVector<f64>],
    outcomes: &[NoiseNode],
    t: u64,
    x: &DVector<f64>,
    chance_weight: f64,
) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    for (idx, u) in grid.iter().enumerate() {
        let x_next = problem.dynamics.step_dynamics(t + 1, x, u);
        let mut cost = chance_weight * problem.constraint.excess(&x_next);
        let share = 1.0 / outcomes.len() as f64;
        for outcome in outcomes {
            let mut branch = problem.loss.loss(t, x, &outcome.value, u);
            if !outcome.children.is_empty() {
                branch += node_value(
                    problem,
                    grid,
                    &outcome.children,
                    t + 1,
                    &x_next,
                    chance_weight,
                )
                .0;
            }
            cost += share * branch;
        }
        if cost < best {
            best = cost;
            best_idx = idx;
        }
    }
    (best, best_idx)
}

/// Solves the scenario-tree relaxation by exhaustive grid search.
///
/// The tree starts at phase 0 with the model's stationary-mean history, the
/// anchor initial state from `settings`, and `settings.seed` for the noise
/// draws; `settings.chance_weight` prices bound violations exactly as the
/// sampled objective does (wrap penalties do not apply to a finite tree).
pub fn solve_tree_baseline(
    problem: &GenericProblem,
    settings: &SolverSettings,
    depth: usize,
    branching: usize,
    grid_points: usize,
) -> Result<TreeSolution> {
    problem.validate()?;
    settings.validate()?;
    if depth == 0 || branching == 0 || grid_points == 0 {
        return Err(Error::invalid(
            "tree depth, branching, and grid points must be positive",
        ));
    }
    if problem.risk != RiskAggregator::Expectation {
        return Err(Error::invalid(
            "the tree baseline requires the expectation aggregator; nested \
             tail-risk recursions optimize a different functional than the \
             per-stage sample aggregation",
        ));
    }
    let nodes_est = (branching as f64).powi(depth as i32);
    if nodes_est > MAX_NODES {
        return Err(Error::invalid(format!(
            "tree would have ~{nodes_est:.1e} nodes (cap {MAX_NODES:.0e})"
        )));
    }
    let cd = problem.dynamics.control_dim() as i32;
    let evals_est = ((grid_points as f64).powi(cd) * branching as f64).powi(depth as i32);
    if evals_est > MAX_EVALS {
        return Err(Error::invalid(format!(
            "tree search needs ~{evals_est:.1e} evaluations (cap {MAX_EVALS:.0e})"
        )));
    }

    let history = problem.noise.cold_start_history();
    let mut counter = 0;
    let mut nodes = 0;
    let outcomes = sample_children(
        problem,
        0,
        &history,
        branching,
        depth,
        settings.seed,
        &mut counter,
        &mut nodes,
    )?;

    let grid = control_grid(problem, grid_points);
    let x0 = anchor_state(problem, settings)?;
    let (objective, best_idx) = node_value(
        problem,
        &grid,
        &outcomes,
        0,
        &x0,
        settings.chance_weight,
    );
    if !objective.is_finite() {
        return Err(Error::Divergence("tree recursion produced a non-finite value".into()));
    }
    Ok(TreeSolution {
        objective,
        first_control: grid[best_idx].clone(),
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::ControlBox;
    use crate::calendar::SeasonCalendar;
    use crate::model::{LinearStateModel, QuadraticLoss, StateConstraint};
    use crate::pamar::PamarModel;
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    fn toy_problem() -> GenericProblem {
        let cal = SeasonCalendar::single(2).unwrap();
        let noise = PamarModel::scalar_ar1(cal.clone(), &[1.0, 2.0], &[0.0], 0.0).unwrap();
        GenericProblem {
            dynamics: LinearStateModel::new(
                DMatrix::identity(1, 1),
                DMatrix::from_element(1, 1, 1.0),
                vec![DVector::zeros(1)],
                cal,
            )
            .unwrap(),
            noise,
            // loss = ½(u − w)²: best grid control tracks the noise mean.
            loss: Arc::new(QuadraticLoss {
                state_weight: DMatrix::zeros(1, 1),
                control_weight: DMatrix::identity(1, 1),
                state_ref: DVector::zeros(1),
                control_ref: DVector::zeros(1),
                noise_price: Some(DMatrix::from_element(1, 1, -1.0)),
            }),
            risk: RiskAggregator::Expectation,
            constraint: StateConstraint::new(
                None,
                DVector::from_element(1, -100.0),
                DVector::from_element(1, 100.0),
                0.1,
            )
            .unwrap(),
            control_box: ControlBox::new(
                DVector::from_element(1, 0.0),
                DVector::from_element(1, 4.0),
            )
            .unwrap(),
            kind: "generic".into(),
        }
    }

    #[test]
    fn deterministic_single_branch_tree_minimizes_stagewise() {
        // loss = ½u² − u·w with w deterministic (1, 2): over grid {0..4},
        // stage 0 picks u = 1 (cost −0.5), stage 1 picks u = 2 (cost −2).
        let problem = toy_problem();
        let settings = SolverSettings {
            chance_weight: 0.0,
            ..SolverSettings::default()
        };
        let sol = solve_tree_baseline(&problem, &settings, 2, 1, 5).unwrap();
        assert!((sol.objective - (-2.5)).abs() < 1e-12);
        assert!((sol.first_control[0] - 1.0).abs() < 1e-12);
        assert_eq!(sol.nodes, 2);
    }

    #[test]
    fn work_budget_is_enforced() {
        let problem = toy_problem();
        let settings = SolverSettings::default();
        assert!(solve_tree_baseline(&problem, &settings, 30, 4, 3).is_err());
    }

    #[test]
    fn tail_risk_aggregators_are_rejected() {
        let mut problem = toy_problem();
        problem.risk = RiskAggregator::Cvar { tail: 0.5 };
        let settings = SolverSettings::default();
        assert!(solve_tree_baseline(&problem, &settings, 2, 2, 3).is_err());
    }
}
