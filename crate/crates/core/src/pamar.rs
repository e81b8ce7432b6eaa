//! Periodic autoregressive moving-average (vector) noise models.
//!
//! The model generates a `d`-dimensional series `Y_t` whose coefficients are
//! periodic functions of time through a [`SeasonCalendar`]: with phase
//! `τ = t mod T`,
//!
//! ```text
//! Y_t = μ_τ + Σ_{i=1..p} Φ_{i,τ} Y_{t−i} + ε_t + Σ_{j=1..q} Θ_{j,τ} ε_{t−j}
//! ```
//!
//! where the innovations `ε_t` are independent Gaussians with periodic mean
//! `η̄_τ` and componentwise standard deviation `σ` (a degenerate `σ = 0`
//! model is allowed and useful for deterministic fixtures). An optional
//! contemporaneous matrix replaces the implicit identity in front of `ε_t`.
//!
//! Design choices worth knowing about:
//!
//! * **Warm cold-starts.** When no history is supplied, simulation seeds the
//!   recursion with the analytic periodic-mean fixed point (and innovation
//!   history at its mean), so the expected trajectory is the stationary mean
//!   from step one and short burn-ins do not bias ensemble statistics. Models
//!   without a finite fixed point fall back to zeros.
//! * **Reproducibility.** Each ensemble member draws from its own counter
//!   stream of a seeded ChaCha generator, so ensembles are bit-reproducible
//!   for a given seed regardless of thread count, and any path can be
//!   replayed from its stored innovations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::calendar::SeasonCalendar;
use crate::error::{Error, Result};

/// RNG used for all path simulation.
pub type PathRng = ChaCha8Rng;

/// Absolute-value ceiling beyond which a simulated path is reported as
/// divergent even when the variance-growth diagnostic cannot be computed.
const MAGNITUDE_CEILING: f64 = 1e12;

/// Default threshold on the first-to-last-cycle variance growth ratio above
/// which an ensemble is reported as divergent.
pub const DEFAULT_VARIANCE_GROWTH_THRESHOLD: f64 = 50.0;

/// Specification of a periodic ARMA model; build one with [`PamarSpec::build`].
///
/// All per-phase lists may have any length that divides the master period;
/// they are cycled out to full length. Coefficient list `ar[i]` holds the
/// matrices for lag `i + 1`, one per phase, and likewise for `ma`.
#[derive(Debug, Clone)]
pub struct PamarSpec {
    pub calendar: SeasonCalendar,
    /// Periodic level `μ_τ`.
    pub mean: Vec<DVector<f64>>,
    /// Autoregressive coefficients; `ar[i]` is the per-phase list for lag `i+1`.
    pub ar: Vec<Vec<DMatrix<f64>>>,
    /// Moving-average coefficients; `ma[j]` is the per-phase list for lag `j+1`.
    pub ma: Vec<Vec<DMatrix<f64>>>,
    /// Matrix applied to the contemporaneous innovation; identity when `None`.
    pub contemporaneous: Option<Vec<DMatrix<f64>>>,
    /// Periodic innovation mean `η̄_τ`; zero when `None`.
    pub innovation_mean: Option<Vec<DVector<f64>>>,
    /// Componentwise innovation standard deviation, `σ ≥ 0`.
    pub sigma: DVector<f64>,
}

/// A fitted/parameterized periodic ARMA model ready for simulation.
#[derive(Debug, Clone)]
pub struct PamarModel {
    calendar: SeasonCalendar,
    dim: usize,
    mean: Vec<DVector<f64>>,
    ar: Vec<Vec<DMatrix<f64>>>,
    /// Lag 0..=q innovation matrices per phase; index 0 is contemporaneous.
    ma: Vec<Vec<DMatrix<f64>>>,
    innovation_mean: Vec<DVector<f64>>,
    sigma: DVector<f64>,
}

/// Realized values and innovations immediately preceding a simulation start.
///
/// Entries are ordered oldest first, most recent last: `values.last()` is
/// `Y_{start−1}`. A history must carry at least `p` values and `q`
/// innovations for a model of orders `(p, q)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub values: Vec<DVector<f64>>,
    pub innovations: Vec<DVector<f64>>,
}

impl History {
    /// An empty history, valid only for models with `p = q = 0`.
    pub fn empty() -> Self {
        History::default()
    }

    /// Keeps only the most recent `p` values and `q` innovations.
    fn truncated(&self, p: usize, q: usize) -> History {
        let skip_v = self.values.len().saturating_sub(p);
        let skip_e = self.innovations.len().saturating_sub(q);
        History {
            values: self.values[skip_v..].to_vec(),
            innovations: self.innovations[skip_e..].to_vec(),
        }
    }
}

/// One simulated trajectory together with everything needed to replay it.
#[derive(Debug, Clone)]
pub struct NoisePath {
    /// Absolute time of `values[0]`.
    pub start_time: u64,
    /// Realized series, `values[k]` is `Y_{start_time + k}`.
    pub values: Vec<DVector<f64>>,
    /// Realized innovations, aligned with `values`.
    pub innovations: Vec<DVector<f64>>,
    /// History immediately preceding `start_time`.
    pub history: History,
    /// Seed of the generator that produced the path.
    pub seed: u64,
    /// Counter stream within the seed (the ensemble member index).
    pub stream: u64,
}

impl NoisePath {
    /// Number of steps in the path.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Whether the path has no steps.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The value at absolute time `t`, if the path covers it.
    pub fn value_at_time(&self, t: u64) -> Option<&DVector<f64>> {
        t.checked_sub(self.start_time)
            .and_then(|k| self.values.get(k as usize))
    }
}

/// Divergence diagnostics for a simulated ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    /// Any path contained a NaN or infinity.
    pub non_finite: bool,
    /// Largest absolute value seen across all paths (including burn-in).
    pub max_abs: f64,
    /// Max over phases/components of Var(last retained cycle) divided by
    /// Var(first retained cycle); `None` when fewer than two full cycles were
    /// retained or the ensemble has a single member.
    pub variance_growth: Option<f64>,
    /// Threshold applied to `variance_growth`.
    pub threshold: f64,
    /// Overall verdict.
    pub diverged: bool,
}

/// A collection of simulated paths sharing a common time grid.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub paths: Vec<NoisePath>,
    pub divergence: DivergenceReport,
}

impl Ensemble {
    /// Per-phase mean and covariance of the ensemble values.
    pub fn periodic_moments(&self, calendar: &SeasonCalendar) -> Result<EnsembleStats> {
        periodic_moments(&self.paths, calendar)
    }
}

impl PamarSpec {
    /// Validates the specification and produces a simulation-ready model.
    pub fn build(self) -> Result<PamarModel> {
        let period = self.calendar.master_period() as usize;
        let mean = cycle_to_period("mean", self.mean, period)?;
        if mean.is_empty() {
            return Err(Error::invalid("pamar mean must have at least one entry"));
        }
        let dim = mean[0].len();
        if dim == 0 {
            return Err(Error::invalid("pamar dimension must be positive"));
        }
        for (i, m) in mean.iter().enumerate() {
            check_vector("mean", i, m, dim)?;
        }

        let mut ar = Vec::with_capacity(self.ar.len());
        for (lag_idx, coeffs) in self.ar.into_iter().enumerate() {
            let coeffs = cycle_to_period("ar", coeffs, period)?;
            for (i, c) in coeffs.iter().enumerate() {
                check_matrix(&format!("ar lag {}", lag_idx + 1), i, c, dim)?;
            }
            ar.push(coeffs);
        }

        let theta0 = match self.contemporaneous {
            None => vec![DMatrix::identity(dim, dim); period],
            Some(list) => {
                let list = cycle_to_period("contemporaneous", list, period)?;
                for (i, c) in list.iter().enumerate() {
                    check_matrix("contemporaneous", i, c, dim)?;
                }
                list
            }
        };
        let mut ma = vec![theta0];
        for (lag_idx, coeffs) in self.ma.into_iter().enumerate() {
            let coeffs = cycle_to_period("ma", coeffs, period)?;
            for (i, c) in coeffs.iter().enumerate() {
                check_matrix(&format!("ma lag {}", lag_idx + 1), i, c, dim)?;
            }
            ma.push(coeffs);
        }

        let innovation_mean = match self.innovation_mean {
            None => vec![DVector::zeros(dim); period],
            Some(list) => {
                let list = cycle_to_period("innovation_mean", list, period)?;
                for (i, m) in list.iter().enumerate() {
                    check_vector("innovation_mean", i, m, dim)?;
                }
                list
            }
        };

        if self.sigma.len() != dim {
            return Err(Error::invalid(format!(
                "sigma has {} entries for a {}-dimensional model",
                self.sigma.len(),
                dim
            )));
        }
        if self.sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid(
                "sigma entries must be finite and non-negative",
            ));
        }

        Ok(PamarModel {
            calendar: self.calendar,
            dim,
            mean,
            ar,
            ma,
            innovation_mean,
            sigma: self.sigma,
        })
    }
}

impl PamarModel {
    /// Scalar periodic AR(1): `Y_t = μ_τ + φ_τ Y_{t−1} + ε_t`.
    pub fn scalar_ar1(
        calendar: SeasonCalendar,
        mean: &[f64],
        phi: &[f64],
        sigma: f64,
    ) -> Result<Self> {
        PamarSpec {
            calendar,
            mean: mean.iter().map(|&m| DVector::from_element(1, m)).collect(),
            ar: vec![phi
                .iter()
                .map(|&p| DMatrix::from_element(1, 1, p))
                .collect()],
            ma: vec![],
            contemporaneous: None,
            innovation_mean: None,
            sigma: DVector::from_element(1, sigma),
        }
        .build()
    }

    /// Independent periodic noise without memory: `Y_t = μ_τ + ε_t`.
    pub fn independent(calendar: SeasonCalendar, mean: Vec<DVector<f64>>, sigma: DVector<f64>) -> Result<Self> {
        PamarSpec {
            calendar,
            mean,
            ar: vec![],
            ma: vec![],
            contemporaneous: None,
            innovation_mean: None,
            sigma,
        }
        .build()
    }

    /// The season calendar the coefficients cycle over.
    pub fn calendar(&self) -> &SeasonCalendar {
        &self.calendar
    }

    /// Series dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Autoregressive and moving-average orders `(p, q)`.
    pub fn order(&self) -> (usize, usize) {
        (self.ar.len(), self.ma.len() - 1)
    }

    /// The season tuple at time `t` (see [`SeasonCalendar::season_index`]).
    pub fn season_index(&self, t: u64) -> Vec<u64> {
        self.calendar.season_index(t)
    }

    /// Periodic innovation mean at a phase.
    pub fn innovation_mean_at(&self, phase: usize) -> &DVector<f64> {
        &self.innovation_mean[phase]
    }

    /// Componentwise innovation standard deviation.
    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    /// Draws one innovation `ε_t` at the given phase. This is the single
    /// place the innovation distribution lives.
    fn sample_innovation(&self, phase: usize, rng: &mut PathRng) -> DVector<f64> {
        let mean = &self.innovation_mean[phase];
        DVector::from_fn(self.dim, |i, _| {
            let z: f64 = rng.sample(StandardNormal);
            mean[i] + self.sigma[i] * z
        })
    }

    /// Validates that a history is long enough and dimensionally consistent.
    fn check_history(&self, history: &History) -> Result<()> {
        let (p, q) = self.order();
        if history.values.len() < p {
            return Err(Error::invalid(format!(
                "history carries {} values but the model has autoregressive order {}",
                history.values.len(),
                p
            )));
        }
        if history.innovations.len() < q {
            return Err(Error::invalid(format!(
                "history carries {} innovations but the model has moving-average order {}",
                history.innovations.len(),
                q
            )));
        }
        for v in history.values.iter().chain(history.innovations.iter()) {
            if v.len() != self.dim {
                return Err(Error::invalid(format!(
                    "history entry has dimension {} but the model is {}-dimensional",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("history entries must be finite"));
            }
        }
        Ok(())
    }

    /// Core recursion: runs `steps` steps starting at `start_time`, with
    /// innovations supplied by `eps_source(t, phase)`.
    fn run_recursion(
        &self,
        start_time: u64,
        steps: usize,
        history: &History,
        mut eps_source: impl FnMut(u64, usize) -> DVector<f64>,
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let hist_v = history.values.len();
        let hist_e = history.innovations.len();

        let mut vals: Vec<DVector<f64>> = Vec::with_capacity(hist_v + steps);
        vals.extend(history.values.iter().cloned());
        let mut eps: Vec<DVector<f64>> = Vec::with_capacity(hist_e + steps);
        eps.extend(history.innovations.iter().cloned());

        for k in 0..steps {
            let t = start_time + k as u64;
            let phase = self.calendar.phase(t);
            let e_t = eps_source(t, phase);
            eps.push(e_t);

            let mut y = self.mean[phase].clone();
            for (i, coeffs) in self.ar.iter().enumerate() {
                // lag = i + 1; Y_{t−lag} sits `lag` entries back from the end.
                let idx = hist_v + k - (i + 1);
                y += &coeffs[phase] * &vals[idx];
            }
            for (j, coeffs) in self.ma.iter().enumerate() {
                // lag = j; ε_{t−lag}. eps currently ends at ε_t.
                let idx = hist_e + k - j;
                y += &coeffs[phase] * &eps[idx];
            }
            vals.push(y);
        }

        (vals.split_off(hist_v), eps.split_off(hist_e))
    }

    /// Simulates one path of `length` steps starting at time 0 from the given
    /// history, using stream 0 of the seeded generator.
    pub fn simulate_path(&self, length: usize, history: &History, seed: u64) -> Result<NoisePath> {
        self.simulate_from(0, length, history, seed, 0)
    }

    /// Simulates one path of `length` steps starting at `start_time` from the
    /// given history, on the chosen counter stream.
    pub fn simulate_from(
        &self,
        start_time: u64,
        length: usize,
        history: &History,
        seed: u64,
        stream: u64,
    ) -> Result<NoisePath> {
        if length == 0 {
            return Err(Error::invalid("path length must be positive"));
        }
        self.check_history(history)?;
        let (p, q) = self.order();
        let history = history.truncated(p, q);

        let mut rng = PathRng::seed_from_u64(seed);
        rng.set_stream(stream);
        let (values, innovations) = self.run_recursion(start_time, length, &history, |_, phase| {
            self.sample_innovation(phase, &mut rng)
        });
        Ok(NoisePath {
            start_time,
            values,
            innovations,
            history,
            seed,
            stream,
        })
    }

    /// Deterministically re-runs the recursion with the innovations supplied;
    /// reproduces a stored path bit-for-bit from its history and innovations.
    pub fn replay(
        &self,
        start_time: u64,
        history: &History,
        innovations: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        self.check_history(history)?;
        let (values, _) = self.run_recursion(start_time, innovations.len(), history, |t, _| {
            innovations[(t - start_time) as usize].clone()
        });
        Ok(values)
    }

    /// Conditional mean forecast: future innovations are replaced by their
    /// periodic mean while realized innovations in the history keep feeding
    /// the moving-average terms.
    pub fn forecast(
        &self,
        start_time: u64,
        history: &History,
        horizon: usize,
    ) -> Result<Vec<DVector<f64>>> {
        if horizon == 0 {
            return Err(Error::invalid("forecast horizon must be positive"));
        }
        self.check_history(history)?;
        let (values, _) = self.run_recursion(start_time, horizon, history, |_, phase| {
            self.innovation_mean[phase].clone()
        });
        Ok(values)
    }

    /// Simulates an ensemble of `m` paths of `length` steps each, after a
    /// burn-in of `burn_in_cycles` master cycles. Retained paths start at
    /// phase 0 (absolute time `burn_in_cycles · T`). Member `k` draws from
    /// counter stream `k`, so the ensemble is reproducible and
    /// embarrassingly parallel.
    ///
    /// When the model has a finite periodic-mean fixed point, the burn-in is
    /// seeded there (see module docs), so per-phase ensemble means are
    /// unbiased for any number of burn-in cycles.
    pub fn simulate_ensemble(
        &self,
        m: usize,
        length: usize,
        burn_in_cycles: usize,
        seed: u64,
    ) -> Result<Ensemble> {
        if m == 0 {
            return Err(Error::invalid("ensemble size must be positive"));
        }
        if length == 0 {
            return Err(Error::invalid("path length must be positive"));
        }
        let period = self.calendar.master_period();
        let burn = burn_in_cycles as u64 * period;
        let total = burn as usize + length;
        let history0 = self.cold_start_history();
        self.check_history(&history0)?;
        let (p, q) = self.order();

        let paths: Vec<NoisePath> = (0..m)
            .into_par_iter()
            .map(|k| {
                let mut rng = PathRng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let (values, innovations) =
                    self.run_recursion(0, total, &history0, |_, phase| {
                        self.sample_innovation(phase, &mut rng)
                    });
                // Retain the last `length` steps; the burn-in tail becomes
                // the stored history so the retained path replays exactly.
                let split = burn as usize;
                let history = History {
                    values: history0.values.iter().cloned().chain(values[..split].iter().cloned()).collect::<Vec<_>>(),
                    innovations: history0
                        .innovations
                        .iter()
                        .cloned()
                        .chain(innovations[..split].iter().cloned())
                        .collect::<Vec<_>>(),
                }
                .truncated(p, q);
                NoisePath {
                    start_time: burn,
                    values: values[split..].to_vec(),
                    innovations: innovations[split..].to_vec(),
                    history,
                    seed,
                    stream: k as u64,
                }
            })
            .collect();

        let divergence = divergence_report(&paths, period as usize, DEFAULT_VARIANCE_GROWTH_THRESHOLD);
        Ok(Ensemble { paths, divergence })
    }

    /// Simulates `m` paths conditional on a realized history, starting at
    /// `start_time`. Member `k` draws from counter stream `k`.
    pub fn simulate_conditional(
        &self,
        start_time: u64,
        length: usize,
        history: &History,
        m: usize,
        seed: u64,
    ) -> Result<Vec<NoisePath>> {
        if m == 0 {
            return Err(Error::invalid("ensemble size must be positive"));
        }
        self.check_history(history)?;
        let (p, q) = self.order();
        let history = history.truncated(p, q);
        (0..m)
            .into_par_iter()
            .map(|k| self.simulate_from(start_time, length, &history, seed, k as u64))
            .collect()
    }

    /// The periodic fixed point `m_τ` of the mean recursion
    /// `m_τ = μ_τ + Σ_i Φ_{i,τ} m_{(τ−i) mod T} + Σ_j Θ_{j,τ} η̄_{(τ−j) mod T}`,
    /// or `None` when the linear system is singular (mean-unstable models).
    pub fn periodic_mean_fixed_point(&self) -> Option<Vec<DVector<f64>>> {
        let period = self.calendar.master_period() as usize;
        let d = self.dim;
        let n = period * d;
        let mut system = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);

        for tau in 0..period {
            let mut b = self.mean[tau].clone();
            for (j, coeffs) in self.ma.iter().enumerate() {
                let src = (tau + period - (j % period)) % period;
                b += &coeffs[tau] * &self.innovation_mean[src];
            }
            rhs.rows_mut(tau * d, d).copy_from(&b);

            for (i, coeffs) in self.ar.iter().enumerate() {
                let lag = i + 1;
                let src = (tau + period - (lag % period)) % period;
                let block = &coeffs[tau];
                for r in 0..d {
                    for c in 0..d {
                        system[(tau * d + r, src * d + c)] -= block[(r, c)];
                    }
                }
            }
        }

        let solution = system.lu().solve(&rhs)?;
        if solution.iter().any(|x| !x.is_finite()) {
            return None;
        }
        Some(
            (0..period)
                .map(|tau| solution.rows(tau * d, d).into_owned())
                .collect(),
        )
    }

    /// History used when simulation starts with no observed data: the
    /// periodic-mean fixed point for values and the periodic innovation mean
    /// for innovations, falling back to zeros when no fixed point exists.
    pub fn cold_start_history(&self) -> History {
        let (p, q) = self.order();
        let period = self.calendar.master_period() as usize;
        let phase_before = |steps_back: usize| -> usize {
            // phase of time −steps_back
            (period - (steps_back % period)) % period
        };
        match self.periodic_mean_fixed_point() {
            Some(fixed) => History {
                values: (1..=p).rev().map(|i| fixed[phase_before(i)].clone()).collect(),
                innovations: (1..=q)
                    .rev()
                    .map(|j| self.innovation_mean[phase_before(j)].clone())
                    .collect(),
            },
            None => {
                if p > 0 || q > 0 {
                    log::warn!(
                        "periodic mean recursion is singular; cold starts fall back to zeros"
                    );
                }
                History {
                    values: vec![DVector::zeros(self.dim); p],
                    innovations: vec![DVector::zeros(self.dim); q],
                }
            }
        }
    }
}

/// Per-phase first and second moments of a collection of vector samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    period: usize,
    dim: usize,
    count: Vec<usize>,
    mean: Vec<DVector<f64>>,
    cov: Vec<DMatrix<f64>>,
}

impl EnsembleStats {
    /// Reassembles statistics from stored parts (e.g. a solution file).
    pub fn from_parts(
        count: Vec<usize>,
        mean: Vec<DVector<f64>>,
        cov: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let period = count.len();
        if period == 0 || mean.len() != period || cov.len() != period {
            return Err(Error::invalid(
                "per-phase statistics need equal, non-zero counts of means and covariances",
            ));
        }
        let dim = mean[0].len();
        for (tau, (m, c)) in mean.iter().zip(&cov).enumerate() {
            if m.len() != dim || c.nrows() != dim || c.ncols() != dim {
                return Err(Error::invalid(format!(
                    "phase {tau} statistics have inconsistent dimensions"
                )));
            }
        }
        Ok(EnsembleStats {
            period,
            dim,
            count,
            mean,
            cov,
        })
    }

    /// Master period the phases cycle over.
    pub fn period(&self) -> usize {
        self.period
    }

    /// Sample dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of samples accumulated at a phase.
    pub fn count(&self, phase: usize) -> usize {
        self.count[phase]
    }

    /// Per-phase sample mean.
    pub fn mean(&self, phase: usize) -> &DVector<f64> {
        &self.mean[phase]
    }

    /// Per-phase population covariance.
    pub fn cov(&self, phase: usize) -> &DMatrix<f64> {
        &self.cov[phase]
    }

    /// Per-phase componentwise standard deviation.
    pub fn std(&self, phase: usize) -> DVector<f64> {
        self.cov[phase].diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Standard error of the per-phase mean (componentwise).
    pub fn standard_error(&self, phase: usize) -> DVector<f64> {
        let n = self.count[phase].max(1) as f64;
        self.std(phase) / n.sqrt()
    }
}

/// Streaming accumulator for [`EnsembleStats`].
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    period: usize,
    dim: usize,
    count: Vec<usize>,
    sum: Vec<DVector<f64>>,
    sum_outer: Vec<DMatrix<f64>>,
}

impl StatsAccumulator {
    /// New accumulator over `period` phases of `dim`-dimensional samples.
    pub fn new(period: usize, dim: usize) -> Self {
        StatsAccumulator {
            period,
            dim,
            count: vec![0; period],
            sum: vec![DVector::zeros(dim); period],
            sum_outer: vec![DMatrix::zeros(dim, dim); period],
        }
    }

    /// Adds one sample observed at the given phase.
    pub fn add(&mut self, phase: usize, sample: &DVector<f64>) {
        debug_assert_eq!(sample.len(), self.dim);
        self.count[phase] += 1;
        self.sum[phase] += sample;
        // Accumulate xxᵀ; the mean outer product is subtracted in finish().
        self.sum_outer[phase].syger(1.0, sample, sample, 1.0);
    }

    /// Finalizes into per-phase mean and population covariance. Phases with
    /// no samples get zero mean and covariance.
    pub fn finish(self) -> EnsembleStats {
        let mut mean = Vec::with_capacity(self.period);
        let mut cov = Vec::with_capacity(self.period);
        for tau in 0..self.period {
            if self.count[tau] == 0 {
                mean.push(DVector::zeros(self.dim));
                cov.push(DMatrix::zeros(self.dim, self.dim));
                continue;
            }
            let n = self.count[tau] as f64;
            let mu = &self.sum[tau] / n;
            let mut c = &self.sum_outer[tau] / n;
            // syger only touched the lower triangle; mirror it before use.
            for i in 0..self.dim {
                for j in 0..i {
                    c[(j, i)] = c[(i, j)];
                }
            }
            c -= &mu * mu.transpose();
            mean.push(mu);
            cov.push(c);
        }
        EnsembleStats {
            period: self.period,
            dim: self.dim,
            count: self.count,
            mean,
            cov,
        }
    }
}

/// Per-phase mean and covariance of a set of paths, pooling every sample
/// whose absolute time is congruent to the phase modulo the master period.
pub fn periodic_moments(paths: &[NoisePath], calendar: &SeasonCalendar) -> Result<EnsembleStats> {
    let first = paths
        .first()
        .ok_or_else(|| Error::invalid("periodic moments of an empty ensemble"))?;
    let dim = first
        .values
        .first()
        .ok_or_else(|| Error::invalid("periodic moments of empty paths"))?
        .len();
    let period = calendar.master_period() as usize;
    let mut acc = StatsAccumulator::new(period, dim);
    for path in paths {
        for (k, v) in path.values.iter().enumerate() {
            let phase = calendar.phase(path.start_time + k as u64);
            acc.add(phase, v);
        }
    }
    Ok(acc.finish())
}

/// Builds the divergence report for an ensemble of phase-0-aligned paths.
fn divergence_report(paths: &[NoisePath], period: usize, threshold: f64) -> DivergenceReport {
    let mut non_finite = false;
    let mut max_abs: f64 = 0.0;
    for path in paths {
        for v in path.values.iter().chain(path.history.values.iter()) {
            for &x in v.iter() {
                if !x.is_finite() {
                    non_finite = true;
                } else {
                    max_abs = max_abs.max(x.abs());
                }
            }
        }
    }

    // Variance growth between the first and last fully retained cycle.
    let length = paths.first().map_or(0, |p| p.len());
    let cycles = length / period;
    let variance_growth = if paths.len() >= 2 && cycles >= 2 && !non_finite {
        let var_at = |offset: usize| -> Vec<f64> {
            // Componentwise variance across paths at each index of the cycle.
            let dim = paths[0].values[0].len();
            let mut vars = Vec::with_capacity(period * dim);
            for idx in offset..offset + period {
                let n = paths.len() as f64;
                let mut mean = DVector::zeros(dim);
                for p in paths {
                    mean += &p.values[idx];
                }
                mean /= n;
                let mut var = DVector::zeros(dim);
                for p in paths {
                    let d = &p.values[idx] - &mean;
                    var += d.component_mul(&d);
                }
                var /= n;
                vars.extend(var.iter().copied());
            }
            vars
        };
        let first = var_at(0);
        let last = var_at((cycles - 1) * period);
        let scale = 1e-9 * (1.0 + max_abs * max_abs);
        Some(
            first
                .iter()
                .zip(last.iter())
                .map(|(f, l)| (l + scale) / (f + scale))
                .fold(0.0f64, f64::max),
        )
    } else {
        None
    };

    let diverged = non_finite
        || max_abs > MAGNITUDE_CEILING
        || variance_growth.is_some_and(|g| g > threshold);
    DivergenceReport {
        non_finite,
        max_abs,
        variance_growth,
        threshold,
        diverged,
    }
}

fn cycle_to_period<T: Clone>(name: &str, list: Vec<T>, period: usize) -> Result<Vec<T>> {
    if list.is_empty() {
        return Err(Error::invalid(format!(
            "{name} must have at least one per-phase entry"
        )));
    }
    if period % list.len() != 0 {
        return Err(Error::invalid(format!(
            "{name} has {} entries, which does not divide the master period {period}",
            list.len()
        )));
    }
    Ok((0..period).map(|i| list[i % list.len()].clone()).collect())
}

fn check_vector(name: &str, phase: usize, v: &DVector<f64>, dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::invalid(format!(
            "{name} at phase {phase} has dimension {} but the model is {dim}-dimensional",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!(
            "{name} at phase {phase} has non-finite entries"
        )));
    }
    Ok(())
}

fn check_matrix(name: &str, phase: usize, m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::invalid(format!(
            "{name} at phase {phase} is {}×{} but the model is {dim}-dimensional",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!(
            "{name} at phase {phase} has non-finite entries"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_season_ar1(sigma: f64) -> PamarModel {
        let cal = SeasonCalendar::single(2).unwrap();
        PamarModel::scalar_ar1(cal, &[1.0, 2.0], &[0.5, 0.8], sigma).unwrap()
    }

    #[test]
    fn ar1_recursion_from_zero_history_matches_hand_computation() {
        let model = two_season_ar1(0.0);
        let history = History {
            values: vec![DVector::from_element(1, 0.0)],
            innovations: vec![],
        };
        let path = model.simulate_path(6, &history, 7).unwrap();
        let got: Vec<f64> = path.values.iter().map(|v| v[0]).collect();
        // Y_0 = 1 + 0.5·0, Y_1 = 2 + 0.8·Y_0, …
        let expected = [1.0, 2.8, 2.4, 3.92, 2.96, 4.368];
        for (g, e) in got.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn periodic_mean_fixed_point_matches_analytic_solution() {
        // m_0 = 1 + 0.5 m_1, m_1 = 2 + 0.8 m_0 → m_0 = 10/3, m_1 = 14/3.
        let model = two_season_ar1(1.0);
        let fixed = model.periodic_mean_fixed_point().unwrap();
        assert_abs_diff_eq!(fixed[0][0], 10.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fixed[1][0], 14.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_cold_start_sits_on_the_fixed_point_forever() {
        let model = two_season_ar1(0.0);
        let history = model.cold_start_history();
        let path = model.simulate_path(10, &history, 0).unwrap();
        for (k, v) in path.values.iter().enumerate() {
            let expected = if k % 2 == 0 { 10.0 / 3.0 } else { 14.0 / 3.0 };
            assert_abs_diff_eq!(v[0], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn moving_average_terms_feed_from_past_innovations() {
        // Y_t = ε_t + 0.5 ε_{t−1} with replayed innovations (1, −1, 2) and
        // ε_{−1} = 0: expect (1, −0.5, 1.5).
        let cal = SeasonCalendar::single(1).unwrap();
        let model = PamarSpec {
            calendar: cal,
            mean: vec![DVector::from_element(1, 0.0)],
            ar: vec![],
            ma: vec![vec![DMatrix::from_element(1, 1, 0.5)]],
            contemporaneous: None,
            innovation_mean: None,
            sigma: DVector::from_element(1, 1.0),
        }
        .build()
        .unwrap();
        let history = History {
            values: vec![],
            innovations: vec![DVector::from_element(1, 0.0)],
        };
        let innovations = [1.0, -1.0, 2.0]
            .iter()
            .map(|&e| DVector::from_element(1, e))
            .collect::<Vec<_>>();
        let values = model.replay(0, &history, &innovations).unwrap();
        let expected = [1.0, -0.5, 1.5];
        for (v, e) in values.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(v[0], e, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_innovation_mean_shifts_the_ma_level() {
        // Y_t = ε_t + 0.5 ε_{t−1} with ε ≡ 2 (σ = 0) settles at 3.
        let cal = SeasonCalendar::single(1).unwrap();
        let model = PamarSpec {
            calendar: cal,
            mean: vec![DVector::from_element(1, 0.0)],
            ar: vec![],
            ma: vec![vec![DMatrix::from_element(1, 1, 0.5)]],
            contemporaneous: None,
            innovation_mean: Some(vec![DVector::from_element(1, 2.0)]),
            sigma: DVector::from_element(1, 0.0),
        }
        .build()
        .unwrap();
        let path = model
            .simulate_path(4, &model.cold_start_history(), 0)
            .unwrap();
        for v in &path.values {
            assert_abs_diff_eq!(v[0], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forecast_propagates_the_conditional_mean() {
        let model = two_season_ar1(1.0);
        let history = History {
            values: vec![DVector::from_element(1, 5.0)],
            innovations: vec![],
        };
        // Forecast Y_1, Y_2, Y_3 given Y_0 = 5.
        let f = model.forecast(1, &history, 3).unwrap();
        let expected = [2.0 + 0.8 * 5.0, 1.0 + 0.5 * 6.0, 2.0 + 0.8 * 4.0];
        for (v, e) in f.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(v[0], e, epsilon = 1e-12);
        }
    }

    #[test]
    fn same_seed_reproduces_paths_bitwise() {
        let model = two_season_ar1(0.7);
        let h = model.cold_start_history();
        let a = model.simulate_from(0, 16, &h, 42, 3).unwrap();
        let b = model.simulate_from(0, 16, &h, 42, 3).unwrap();
        assert_eq!(a.values, b.values);
        let c = model.simulate_from(0, 16, &h, 42, 4).unwrap();
        assert_ne!(a.values, c.values, "different streams must differ");
        let d = model.simulate_from(0, 16, &h, 43, 3).unwrap();
        assert_ne!(a.values, d.values, "different seeds must differ");
    }

    #[test]
    fn replay_reconstructs_a_simulated_path_exactly() {
        let model = two_season_ar1(1.3);
        let ens = model.simulate_ensemble(5, 8, 2, 99).unwrap();
        for path in &ens.paths {
            let replayed = model
                .replay(path.start_time, &path.history, &path.innovations)
                .unwrap();
            assert_eq!(replayed, path.values);
        }
    }

    #[test]
    fn ensemble_paths_start_at_phase_zero_after_burn_in() {
        let model = two_season_ar1(1.0);
        let ens = model.simulate_ensemble(3, 6, 2, 1).unwrap();
        assert_eq!(ens.paths.len(), 3);
        for path in &ens.paths {
            assert_eq!(path.start_time, 4);
            assert_eq!(model.calendar().phase(path.start_time), 0);
            assert_eq!(path.len(), 6);
        }
        assert!(!ens.divergence.diverged);
    }

    #[test]
    fn periodic_moments_pool_by_phase() {
        // Two deterministic paths (σ = 0 model, means 1/2 alternating) give
        // per-phase means exactly at the fixed point with zero variance.
        let model = two_season_ar1(0.0);
        let ens = model.simulate_ensemble(2, 4, 1, 0).unwrap();
        let stats = ens.periodic_moments(model.calendar()).unwrap();
        assert_eq!(stats.count(0), 4); // 2 paths × 2 cycles
        assert_abs_diff_eq!(stats.mean(0)[0], 10.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.mean(1)[0], 14.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.std(0)[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn explosive_model_is_reported_divergent() {
        let cal = SeasonCalendar::single(2).unwrap();
        let model = PamarModel::scalar_ar1(cal, &[0.0, 0.0], &[3.0, 3.0], 1.0).unwrap();
        let ens = model.simulate_ensemble(64, 8, 3, 5).unwrap();
        assert!(
            ens.divergence.diverged,
            "variance growth {:?} should exceed threshold",
            ens.divergence.variance_growth
        );

        let stable = two_season_ar1(1.0);
        let ens = stable.simulate_ensemble(64, 8, 3, 5).unwrap();
        assert!(!ens.divergence.diverged);
    }

    #[test]
    fn histories_shorter_than_the_order_are_rejected() {
        let model = two_season_ar1(1.0);
        assert!(model.simulate_path(4, &History::empty(), 0).is_err());
    }

    #[test]
    fn per_phase_lists_cycle_up_to_the_master_period() {
        let cal = SeasonCalendar::new(vec![2, 4]).unwrap();
        // Two mean entries cycle over the four master phases.
        let model = PamarModel::scalar_ar1(cal, &[1.0, 2.0], &[0.0, 0.0], 0.0).unwrap();
        let path = model
            .simulate_path(4, &model.cold_start_history(), 0)
            .unwrap();
        let got: Vec<f64> = path.values.iter().map(|v| v[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 1.0, 2.0]);
        // Three entries do not divide four.
        let cal = SeasonCalendar::new(vec![2, 4]).unwrap();
        assert!(PamarModel::scalar_ar1(cal, &[1.0, 2.0, 3.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn vector_model_couples_components_through_ar_matrix() {
        // Y_t = Φ Y_{t−1} with Φ = [[0, 1], [0, 0]] swaps the second
        // component into the first.
        let cal = SeasonCalendar::single(1).unwrap();
        let model = PamarSpec {
            calendar: cal,
            mean: vec![DVector::zeros(2)],
            ar: vec![vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])]],
            ma: vec![],
            contemporaneous: None,
            innovation_mean: None,
            sigma: DVector::zeros(2),
        }
        .build()
        .unwrap();
        let history = History {
            values: vec![DVector::from_vec(vec![0.0, 7.0])],
            innovations: vec![],
        };
        let path = model.simulate_path(2, &history, 0).unwrap();
        assert_eq!(path.values[0], DVector::from_vec(vec![7.0, 0.0]));
        assert_eq!(path.values[1], DVector::from_vec(vec![0.0, 0.0]));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            // Stationary scalar AR(1): ensemble paths replay exactly and the
            // divergence flag stays off.
            #[test]
            fn stable_models_replay_and_do_not_diverge(
                phi in -0.9..0.9f64,
                mu in -5.0..5.0f64,
                sigma in 0.0..2.0f64,
                seed in 0u64..1000,
            ) {
                let cal = SeasonCalendar::single(3).unwrap();
                let model = PamarModel::scalar_ar1(cal, &[mu], &[phi], sigma).unwrap();
                let ens = model.simulate_ensemble(8, 6, 2, seed).unwrap();
                prop_assert!(!ens.divergence.non_finite);
                for path in &ens.paths {
                    let replayed = model
                        .replay(path.start_time, &path.history, &path.innovations)
                        .unwrap();
                    prop_assert_eq!(&replayed, &path.values);
                }
            }

            // The fixed point satisfies the mean recursion at every phase.
            #[test]
            fn fixed_point_satisfies_recursion(
                phi0 in -0.9..0.9f64,
                phi1 in -0.9..0.9f64,
                mu0 in -5.0..5.0f64,
                mu1 in -5.0..5.0f64,
            ) {
                let cal = SeasonCalendar::single(2).unwrap();
                let model = PamarModel::scalar_ar1(cal, &[mu0, mu1], &[phi0, phi1], 1.0).unwrap();
                if let Some(m) = model.periodic_mean_fixed_point() {
                    let mus = [mu0, mu1];
                    let phis = [phi0, phi1];
                    for tau in 0..2usize {
                        let prev = (tau + 1) % 2;
                        let rhs = mus[tau] + phis[tau] * m[prev][0];
                        prop_assert!((m[tau][0] - rhs).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
