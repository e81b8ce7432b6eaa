//! Periodic feature bases and affine decision rules.
//!
//! A policy maps `(t, x)` to a control `u = clamp(Σ_m f_m(t) (k_m + K_m x))`
//! where the time features `f_m` come from a [`TimeFeatures`] implementation
//! and the clamp projects onto the control box. The standard feature set is
//! a [`PeriodicBasis`]: one constant atom plus cosine/sine pairs
//! `cos(2π k (t mod T_i) / T_i)`, `sin(…)` for harmonics `k = 1..=M_i` of
//! each calendar period `T_i`.
//!
//! Two structural rules keep the basis non-degenerate:
//!
//! * **Harmonic ownership.** A harmonic of period `T_i` with index `k` has
//!   fundamental period `T_i / gcd(k, T_i)`; if some smaller calendar period
//!   `T_j` is a multiple of it, the atom already lives in component `j`'s
//!   span. Each atom is kept only on the smallest period that spans it, so
//!   no two atoms are identical functions of time. The constant atom is
//!   owned by the master period.
//! * **Nyquist bound.** Harmonics per period are limited to `2·M_i < T_i`,
//!   so distinct coefficients remain distinguishable on the integer grid.
//!
//! Atoms are evaluated through `t mod T_i` before any floating-point work,
//! which makes every feature exactly `T`-periodic in `t` — policies evaluate
//! bit-identically at `t` and `t + T`.

use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::calendar::SeasonCalendar;
use crate::error::{Error, Result};

/// Time-indexed feature vectors driving an affine policy.
pub trait TimeFeatures: Send + Sync {
    /// Number of features.
    fn count(&self) -> usize;

    /// Writes the feature vector at time `t` into `out` (length `count()`).
    fn eval_into(&self, t: u64, out: &mut [f64]);

    /// The feature vector at time `t`.
    fn eval(&self, t: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.count()];
        self.eval_into(t, &mut out);
        out
    }
}

/// One basis function of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Atom {
    /// The constant function 1.
    Constant,
    /// `cos(2π · harmonic · (t mod period) / period)`.
    Cos { period: u64, harmonic: u32 },
    /// `sin(2π · harmonic · (t mod period) / period)`.
    Sin { period: u64, harmonic: u32 },
}

impl Atom {
    /// Evaluates the atom at time `t`. The remainder is taken in integer
    /// arithmetic first, so the result is exactly periodic.
    pub fn eval(&self, t: u64) -> f64 {
        match *self {
            Atom::Constant => 1.0,
            Atom::Cos { period, harmonic } => {
                let phase = (t % period) as f64 / period as f64;
                (std::f64::consts::TAU * harmonic as f64 * phase).cos()
            }
            Atom::Sin { period, harmonic } => {
                let phase = (t % period) as f64 / period as f64;
                (std::f64::consts::TAU * harmonic as f64 * phase).sin()
            }
        }
    }
}

/// A periodic Fourier basis over a season calendar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicBasis {
    calendar: SeasonCalendar,
    harmonics: Vec<u32>,
    atoms: Vec<Atom>,
}

impl PeriodicBasis {
    /// Builds the basis with `harmonics[i]` cosine/sine pairs for calendar
    /// period `i`, plus one constant atom.
    ///
    /// Fails when `2 · harmonics[i] ≥ periods[i]` (Nyquist bound). Harmonics
    /// whose time function already lies in a shorter period's span are
    /// dropped (see module docs), so the atom list is duplicate-free.
    pub fn build_basis(calendar: SeasonCalendar, harmonics: &[u32]) -> Result<Self> {
        let periods = calendar.periods();
        if harmonics.len() != periods.len() {
            return Err(Error::invalid(format!(
                "harmonic counts ({}) must match calendar components ({})",
                harmonics.len(),
                periods.len()
            )));
        }
        for (&m, &p) in harmonics.iter().zip(periods.iter()) {
            if 2 * m as u64 >= p {
                return Err(Error::invalid(format!(
                    "{m} harmonics exceed the resolution of period {p} (need 2·M < T)"
                )));
            }
        }

        let mut atoms = vec![Atom::Constant];
        for (i, &p) in periods.iter().enumerate() {
            for k in 1..=harmonics[i] {
                // Fundamental period of this harmonic on the integer grid.
                let fundamental = p / gcd(k as u64, p);
                // Owned by the smallest calendar period that spans it.
                let owner = periods
                    .iter()
                    .position(|&q| q % fundamental == 0)
                    .expect("the period itself spans its own harmonics");
                if owner < i {
                    continue;
                }
                atoms.push(Atom::Cos { period: p, harmonic: k });
                atoms.push(Atom::Sin { period: p, harmonic: k });
            }
        }
        Ok(PeriodicBasis {
            calendar,
            harmonics: harmonics.to_vec(),
            atoms,
        })
    }

    /// The underlying calendar.
    pub fn calendar(&self) -> &SeasonCalendar {
        &self.calendar
    }

    /// Requested harmonics per calendar period.
    pub fn harmonics(&self) -> &[u32] {
        &self.harmonics
    }

    /// The atom list, constant first.
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }
}

impl TimeFeatures for PeriodicBasis {
    fn count(&self) -> usize {
        self.atoms.len()
    }

    fn eval_into(&self, t: u64, out: &mut [f64]) {
        for (o, atom) in out.iter_mut().zip(self.atoms.iter()) {
            *o = atom.eval(t);
        }
    }
}

/// Axis-aligned box that controls are clamped into.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlBox {
    /// Builds a box, checking `lower ≤ upper` componentwise and finiteness.
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid("control box bounds differ in dimension"));
        }
        for i in 0..lower.len() {
            if !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(Error::invalid("control box bounds must be finite"));
            }
            if lower[i] > upper[i] {
                return Err(Error::invalid(format!(
                    "control box is empty in coordinate {i}: lower {} > upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(ControlBox { lower, upper })
    }

    /// Control dimension.
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Componentwise projection into the box.
    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lower[i], self.upper[i]))
    }

    /// For each coordinate, whether the raw value lies strictly inside the
    /// box (true) or is clipped at a bound (false). Values exactly on a bound
    /// count as interior so that gradients keep pushing along the boundary.
    pub fn active_mask(&self, raw: &DVector<f64>) -> Vec<bool> {
        (0..raw.len())
            .map(|i| raw[i] >= self.lower[i] && raw[i] <= self.upper[i])
            .collect()
    }

    /// Midpoint of the box.
    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }
}

/// Affine policy coefficients: one intercept and one state-gain per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCoeffs {
    /// `k_m`, one control-dimensional vector per feature.
    pub intercepts: Vec<DVector<f64>>,
    /// `K_m`, one `control_dim × state_dim` matrix per feature.
    pub gains: Vec<DMatrix<f64>>,
}

impl PolicyCoeffs {
    /// All-zero coefficients for `features` features.
    pub fn zeros(features: usize, control_dim: usize, state_dim: usize) -> Self {
        PolicyCoeffs {
            intercepts: vec![DVector::zeros(control_dim); features],
            gains: vec![DMatrix::zeros(control_dim, state_dim); features],
        }
    }

    /// Number of features the coefficients cover.
    pub fn features(&self) -> usize {
        self.intercepts.len()
    }

    /// The affine map at fixed time features: `u_raw = Σ_m f_m (k_m + K_m x)`.
    pub fn eval_raw(&self, features: &[f64], x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(features.len(), self.intercepts.len());
        let mut u = DVector::zeros(self.intercepts[0].len());
        for (m, &f) in features.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            u.axpy(f, &self.intercepts[m], 1.0);
            u.gemv(f, &self.gains[m], x, 1.0);
        }
        u
    }

    /// The state gain at fixed time features: `G(t) = Σ_m f_m K_m`.
    pub fn state_gain(&self, features: &[f64]) -> DMatrix<f64> {
        let (r, c) = self.gains[0].shape();
        let mut g = DMatrix::zeros(r, c);
        for (m, &f) in features.iter().enumerate() {
            if f != 0.0 {
                g.zip_apply(&self.gains[m], |a, b| *a += f * b);
            }
        }
        g
    }
}

/// A time-periodic affine decision rule on a [`PeriodicBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule {
    pub basis: PeriodicBasis,
    pub coeffs: PolicyCoeffs,
    pub control_box: ControlBox,
    pub state_dim: usize,
}

impl DecisionRule {
    /// A zero rule (controls at the box midpoint would require a nonzero
    /// constant intercept; zero coefficients clamp to whatever the box
    /// allows around zero).
    pub fn zeros(basis: PeriodicBasis, control_box: ControlBox, state_dim: usize) -> Self {
        let coeffs = PolicyCoeffs::zeros(basis.count(), control_box.dim(), state_dim);
        DecisionRule {
            basis,
            coeffs,
            control_box,
            state_dim,
        }
    }

    /// Validates dimensional consistency of the coefficient list.
    pub fn validate(&self) -> Result<()> {
        let f = self.basis.count();
        if self.coeffs.intercepts.len() != f || self.coeffs.gains.len() != f {
            return Err(Error::invalid(format!(
                "rule has coefficients for {} features but the basis has {f}",
                self.coeffs.intercepts.len()
            )));
        }
        let cdim = self.control_box.dim();
        for (m, (k, g)) in self
            .coeffs
            .intercepts
            .iter()
            .zip(self.coeffs.gains.iter())
            .enumerate()
        {
            if k.len() != cdim {
                return Err(Error::invalid(format!(
                    "intercept {m} has dimension {} but controls are {cdim}-dimensional",
                    k.len()
                )));
            }
            if g.nrows() != cdim || g.ncols() != self.state_dim {
                return Err(Error::invalid(format!(
                    "gain {m} is {}×{} but must be {cdim}×{}",
                    g.nrows(),
                    g.ncols(),
                    self.state_dim
                )));
            }
            if k.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("coefficient {m} is non-finite")));
            }
        }
        Ok(())
    }

    /// Evaluates the policy: features → affine map → clamp into the box.
    pub fn eval_policy(&self, t: u64, x: &DVector<f64>) -> DVector<f64> {
        let features = self.basis.eval(t);
        self.control_box.clamp(&self.coeffs.eval_raw(&features, x))
    }

    /// Evaluates the policy returning both the raw (pre-clamp) and the
    /// clamped control; the optimizer needs both for saturation handling.
    pub fn eval_with_raw(&self, t: u64, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let features = self.basis.eval(t);
        let raw = self.coeffs.eval_raw(&features, x);
        let clamped = self.control_box.clamp(&raw);
        (raw, clamped)
    }
}

/// Least-squares split of a state trajectory into per-period components.
///
/// Given samples `(t_k, x_k)`, fits `x(t) ≈ Σ atoms` with the same basis and
/// regroups fitted energy by owning calendar period: the result has one
/// trajectory per calendar component (constant + its owned harmonics,
/// evaluated at the sample times) plus a residual. Summing the components
/// and the residual reproduces the samples.
pub fn decompose_state(
    basis: &PeriodicBasis,
    times: &[u64],
    states: &[DVector<f64>],
) -> Result<StateDecomposition> {
    if times.len() != states.len() {
        return Err(Error::invalid("times and states differ in length"));
    }
    if times.is_empty() {
        return Err(Error::invalid("cannot decompose an empty trajectory"));
    }
    let dim = states[0].len();
    let n = times.len();
    let f = basis.count();

    // Design matrix of atom values at the sample times.
    let mut design = DMatrix::zeros(n, f);
    for (r, &t) in times.iter().enumerate() {
        let feats = basis.eval(t);
        for (c, v) in feats.iter().enumerate() {
            design[(r, c)] = *v;
        }
    }
    // Solve the least-squares problem for all state coordinates at once.
    let mut rhs = DMatrix::zeros(n, dim);
    for (r, x) in states.iter().enumerate() {
        for c in 0..dim {
            rhs[(r, c)] = x[c];
        }
    }
    let svd = design.clone().svd(true, true);
    let coeffs = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::invalid(format!("decomposition solve failed: {e}")))?;

    // Regroup fitted atoms by owning calendar period.
    let periods = basis.calendar().periods();
    let owner_of = |atom: &Atom| -> usize {
        match *atom {
            // The constant belongs to the master (largest) period.
            Atom::Constant => periods.len() - 1,
            Atom::Cos { period, .. } | Atom::Sin { period, .. } => periods
                .iter()
                .position(|&p| p == period)
                .expect("atom period comes from the calendar"),
        }
    };

    let mut components =
        vec![vec![DVector::<f64>::zeros(dim); n]; periods.len()];
    for (m, atom) in basis.atoms().iter().enumerate() {
        let owner = owner_of(atom);
        for (r, &t) in times.iter().enumerate() {
            let a = atom.eval(t);
            for c in 0..dim {
                components[owner][r][c] += a * coeffs[(m, c)];
            }
        }
    }
    let mut residual = Vec::with_capacity(n);
    for (r, x) in states.iter().enumerate() {
        let mut fitted = DVector::zeros(dim);
        for comp in &components {
            fitted += &comp[r];
        }
        residual.push(x - fitted);
    }
    Ok(StateDecomposition {
        components,
        residual,
    })
}

/// Result of [`decompose_state`]: per-calendar-period trajectories plus the
/// residual; components and residual sum back to the input samples.
#[derive(Debug, Clone)]
pub struct StateDecomposition {
    /// `components[i][k]` is calendar component `i`'s share at sample `k`.
    pub components: Vec<Vec<DVector<f64>>>,
    /// Unexplained remainder at each sample.
    pub residual: Vec<DVector<f64>>,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn basis_2_6() -> PeriodicBasis {
        let cal = SeasonCalendar::new(vec![2, 6]).unwrap();
        // Period 2 allows no harmonics under the Nyquist bound (2·1 ≥ 2),
        // period 6 allows up to 2.
        PeriodicBasis::build_basis(cal, &[0, 2]).unwrap()
    }

    #[test]
    fn atom_count_is_one_plus_two_per_harmonic() {
        let b = basis_2_6();
        // constant + 2 harmonics × (cos, sin)
        assert_eq!(b.count(), 5);
        assert_eq!(b.atoms()[0], Atom::Constant);
    }

    #[test]
    fn nyquist_bound_is_enforced() {
        let cal = SeasonCalendar::new(vec![4]).unwrap();
        assert!(PeriodicBasis::build_basis(cal.clone(), &[1]).is_ok());
        assert!(PeriodicBasis::build_basis(cal, &[2]).is_err());
    }

    #[test]
    fn duplicate_harmonics_across_periods_are_dropped() {
        // Periods (4, 8): harmonic 2 of period 8 has fundamental period 4,
        // which period 4 spans, so only period 4's own harmonic remains.
        let cal = SeasonCalendar::new(vec![4, 8]).unwrap();
        let b = PeriodicBasis::build_basis(cal, &[1, 3]).unwrap();
        let dupes = b
            .atoms()
            .iter()
            .filter(|a| matches!(a, Atom::Cos { period: 8, harmonic: 2 }))
            .count();
        assert_eq!(dupes, 0, "harmonic 2 of period 8 aliases period 4");
        // constant + period-4 pair + period-8 harmonics 1 and 3 pairs.
        assert_eq!(b.count(), 1 + 2 + 4);
    }

    #[test]
    fn atoms_are_exactly_periodic() {
        let b = basis_2_6();
        for t in 0..36u64 {
            let a = b.eval(t);
            let shifted = b.eval(t + 6);
            assert_eq!(a, shifted, "features at t and t+T must be bit-identical");
        }
    }

    #[test]
    fn constant_policy_returns_clamped_intercept() {
        let b = basis_2_6();
        let boxy = ControlBox::new(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![2.0]),
        )
        .unwrap();
        let mut rule = DecisionRule::zeros(b, boxy, 1);
        rule.coeffs.intercepts[0][0] = 5.0; // clamps to 2
        let u = rule.eval_policy(3, &DVector::zeros(1));
        assert_eq!(u[0], 2.0);
        rule.coeffs.intercepts[0][0] = 1.25;
        let u = rule.eval_policy(3, &DVector::zeros(1));
        assert_eq!(u[0], 1.25);
    }

    #[test]
    fn state_feedback_enters_through_gains() {
        let b = basis_2_6();
        let boxy = ControlBox::new(
            DVector::from_vec(vec![-10.0]),
            DVector::from_vec(vec![10.0]),
        )
        .unwrap();
        let mut rule = DecisionRule::zeros(b, boxy, 2);
        rule.coeffs.intercepts[0][0] = 1.0;
        rule.coeffs.gains[0][(0, 0)] = 2.0;
        rule.coeffs.gains[0][(0, 1)] = -1.0;
        let x = DVector::from_vec(vec![3.0, 4.0]);
        // u = 1 + 2·3 − 4 = 3 (constant atom only has nonzero coefficients).
        let u = rule.eval_policy(0, &x);
        assert_abs_diff_eq!(u[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn policy_is_periodic_in_time() {
        let b = basis_2_6();
        let boxy = ControlBox::new(
            DVector::from_vec(vec![-1.0, 0.0]),
            DVector::from_vec(vec![1.0, 4.0]),
        )
        .unwrap();
        let mut rule = DecisionRule::zeros(b, boxy, 1);
        for (m, k) in rule.coeffs.intercepts.iter_mut().enumerate() {
            k[0] = 0.3 * (m as f64 + 1.0);
            k[1] = -0.2 * (m as f64);
        }
        for (m, g) in rule.coeffs.gains.iter_mut().enumerate() {
            g[(0, 0)] = 0.1 * (m as f64) - 0.2;
            g[(1, 0)] = 0.05 * (m as f64);
        }
        let x = DVector::from_vec(vec![1.7]);
        for t in 0..12u64 {
            assert_eq!(
                rule.eval_policy(t, &x),
                rule.eval_policy(t + 6, &x),
                "policy must repeat exactly each master cycle"
            );
        }
    }

    #[test]
    fn decomposition_components_sum_to_the_signal() {
        let cal = SeasonCalendar::new(vec![2, 4]).unwrap();
        let basis = PeriodicBasis::build_basis(cal, &[0, 1]).unwrap();
        // A signal exactly in the span: 3 + cos(2πt/4) − 2 sin(2πt/4).
        let times: Vec<u64> = (0..8).collect();
        let states: Vec<DVector<f64>> = times
            .iter()
            .map(|&t| {
                let ph = std::f64::consts::TAU * (t % 4) as f64 / 4.0;
                DVector::from_vec(vec![3.0 + ph.cos() - 2.0 * ph.sin()])
            })
            .collect();
        let dec = decompose_state(&basis, &times, &states).unwrap();
        for (k, x) in states.iter().enumerate() {
            let mut total = dec.residual[k].clone();
            for comp in &dec.components {
                total += &comp[k];
            }
            assert_abs_diff_eq!(total[0], x[0], epsilon = 1e-9);
            // In-span signal leaves no residual.
            assert_abs_diff_eq!(dec.residual[k][0], 0.0, epsilon = 1e-9);
        }
        // The master-period component carries the constant 3 plus the
        // period-4 harmonic; the period-2 component is empty here.
        for k in 0..times.len() {
            assert_abs_diff_eq!(dec.components[0][k][0], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn control_box_validation_and_clamping() {
        assert!(ControlBox::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![0.0])
        )
        .is_err());
        let b = ControlBox::new(
            DVector::from_vec(vec![0.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let u = b.clamp(&DVector::from_vec(vec![2.0, -3.0]));
        assert_eq!(u, DVector::from_vec(vec![1.0, -1.0]));
        let mask = b.active_mask(&DVector::from_vec(vec![2.0, 0.5]));
        assert_eq!(mask, vec![false, true]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn features_are_bounded_and_periodic(t in 0u64..100_000) {
                let cal = SeasonCalendar::new(vec![3, 12]).unwrap();
                let b = PeriodicBasis::build_basis(cal, &[1, 5]).unwrap();
                let f = b.eval(t);
                for v in &f {
                    prop_assert!(v.abs() <= 1.0 + 1e-15);
                }
                prop_assert_eq!(f, b.eval(t + 12));
            }

            #[test]
            fn clamped_controls_stay_in_the_box(
                raw0 in -100.0..100.0f64,
                raw1 in -100.0..100.0f64,
            ) {
                let b = ControlBox::new(
                    DVector::from_vec(vec![-2.0, 0.0]),
                    DVector::from_vec(vec![2.0, 5.0]),
                ).unwrap();
                let u = b.clamp(&DVector::from_vec(vec![raw0, raw1]));
                prop_assert!(u[0] >= -2.0 && u[0] <= 2.0);
                prop_assert!(u[1] >= 0.0 && u[1] <= 5.0);
            }
        }
    }
}
