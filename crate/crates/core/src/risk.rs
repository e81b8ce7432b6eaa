//! Risk functionals over empirical loss distributions.
//!
//! The central object is [`RiskAggregator`], which maps a finite sample of
//! losses (optionally weighted) to a scalar risk value. Two aggregators are
//! supported:
//!
//! * `Expectation` — the (weighted) sample mean;
//! * `Cvar { tail }` — conditional value-at-risk at tail fraction
//!   `β ∈ (0, 1]`: the average of the worst `β`-fraction of the loss
//!   distribution, with the boundary atom split fractionally so the tail mass
//!   is exactly `β`. `β = 1` recovers the mean.
//!
//! CVaR is computed exactly by sorting. The same computation also yields the
//! tail weights `λ_m ≥ 0, Σ λ_m = 1` such that `CVaR = Σ λ_m ℓ_m`; these
//! weights are a subgradient of CVaR with respect to the individual losses
//! and are reused by the policy optimizer.
//!
//! Loss convention: larger values are worse. Revenue maximization problems
//! feed `loss = −revenue` into the aggregator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A law-invariant risk functional on empirical distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskAggregator {
    /// Weighted sample mean.
    Expectation,
    /// Conditional value-at-risk over the worst `tail` fraction.
    Cvar {
        /// Tail fraction `β ∈ (0, 1]`.
        tail: f64,
    },
}

impl RiskAggregator {
    /// Validates the aggregator parameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            RiskAggregator::Expectation => Ok(()),
            RiskAggregator::Cvar { tail } => {
                if !tail.is_finite() || *tail <= 0.0 || *tail > 1.0 {
                    Err(Error::invalid(format!(
                        "cvar tail fraction must lie in (0, 1], got {tail}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Aggregates a sample of losses into a scalar risk value.
    ///
    /// `weights`, when given, must be the same length as `losses`, have
    /// non-negative entries and positive total mass; they are normalized
    /// internally. `None` means uniform weights.
    pub fn aggregate(&self, losses: &[f64], weights: Option<&[f64]>) -> Result<f64> {
        let w = normalized_weights(losses.len(), weights)?;
        check_finite(losses)?;
        match self {
            RiskAggregator::Expectation => {
                Ok(losses.iter().zip(w.iter()).map(|(l, w)| l * w).sum())
            }
            RiskAggregator::Cvar { tail } => {
                self.validate()?;
                if *tail >= 1.0 {
                    // The whole sample is the tail; sum in input order so the
                    // value is bit-identical to the plain weighted mean.
                    return Ok(losses.iter().zip(w.iter()).map(|(l, w)| l * w).sum());
                }
                let lambda = tail_weights_normalized(losses, &w, *tail);
                Ok(losses.iter().zip(lambda.iter()).map(|(l, s)| l * s).sum())
            }
        }
    }

    /// The per-sample weights `λ` with `Σ λ_m = 1` such that the aggregated
    /// risk equals `Σ λ_m ℓ_m`. For the expectation these are the normalized
    /// input weights; for CVaR they are supported on the tail, with the
    /// boundary atom weighted fractionally. They form a subgradient of the
    /// risk value with respect to the loss vector.
    pub fn tail_weights(&self, losses: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
        let w = normalized_weights(losses.len(), weights)?;
        check_finite(losses)?;
        match self {
            RiskAggregator::Expectation => Ok(w),
            RiskAggregator::Cvar { tail } => {
                self.validate()?;
                Ok(tail_weights_normalized(losses, &w, *tail))
            }
        }
    }
}

/// Tail weights for CVaR given already-normalized sample weights.
///
/// Samples are visited in order of decreasing loss (ties broken by index so
/// the result is deterministic); weight is consumed until exactly `tail` mass
/// has been taken, splitting the boundary sample if necessary.
fn tail_weights_normalized(losses: &[f64], weights: &[f64], tail: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));

    let mut lambda = vec![0.0; losses.len()];
    let mut remaining = tail;
    for &idx in &order {
        if remaining <= 0.0 {
            break;
        }
        let take = weights[idx].min(remaining);
        lambda[idx] = take / tail;
        remaining -= take;
    }
    // Floating-point slack: if rounding left a sliver of tail mass unassigned
    // after visiting every sample, renormalize so the weights sum to one.
    let total: f64 = lambda.iter().sum();
    if total > 0.0 && (total - 1.0).abs() > 1e-12 {
        for l in lambda.iter_mut() {
            *l /= total;
        }
    }
    lambda
}

/// The lower empirical `level`-quantile of a sample: the smallest order
/// statistic `x_(k)` whose empirical CDF value `k/M` reaches `level`.
///
/// `level = 0` returns the minimum, `level = 1` the maximum.
pub fn empirical_quantile(samples: &[f64], level: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::invalid(format!(
            "quantile level must lie in [0, 1], got {level}"
        )));
    }
    check_finite(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted[lower_quantile_index(samples.len(), level)])
}

/// Index (0-based, into the ascending sort) of the lower empirical
/// `level`-quantile of a sample of size `len`.
pub fn lower_quantile_index(len: usize, level: f64) -> usize {
    debug_assert!(len > 0);
    let r = level * len as f64;
    // Guard against float noise turning an exact k·len product into k±ε.
    let k = if (r - r.round()).abs() < 1e-9 {
        r.round() as usize
    } else {
        r.ceil() as usize
    };
    k.max(1).min(len) - 1
}

/// Fraction of `true` entries in a sequence of violation flags.
pub fn violation_rate(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&v| v).count() as f64 / flags.len() as f64
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(
            "risk aggregation received non-finite losses".into(),
        ));
    }
    Ok(())
}

fn normalized_weights(len: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::invalid("risk aggregation over an empty sample"));
    }
    match weights {
        None => Ok(vec![1.0 / len as f64; len]),
        Some(w) => {
            if w.len() != len {
                return Err(Error::invalid(format!(
                    "weights length {} does not match sample length {}",
                    w.len(),
                    len
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::invalid("weights must be finite and non-negative"));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::invalid("weights must have positive total mass"));
            }
            Ok(w.iter().map(|x| x / total).collect())
        }
    }
}
