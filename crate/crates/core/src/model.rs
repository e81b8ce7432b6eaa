//! Storage dynamics, stage losses, and concrete problem builders.
//!
//! A [`GenericProblem`] bundles everything a solver needs:
//!
//! * deterministic linear dynamics `x_t = A x_{t−1} + B u_{t−1} + F_{t mod T}`
//!   ([`LinearStateModel`]) — randomness enters through stage losses, not the
//!   state equation;
//! * a periodic noise model for the exogenous drivers (prices, availability);
//! * a [`StageLoss`] mapping `(t, x, ω, u)` to a scalar loss (negative
//!   revenue for profit-seeking problems);
//! * a box for the controls, soft bounds with a confidence level for the
//!   states, and a risk aggregator for the per-stage loss distribution.
//!
//! Two ready-made instantiations are provided: [`build_hydropower`] (network
//! of reservoirs selling into an elastic demand curve) and [`build_vpp`]
//! (battery + conventional + renewable portfolio trading in day-ahead and
//! real-time markets).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::ControlBox;
use crate::calendar::SeasonCalendar;
use crate::error::{Error, Result};
use crate::pamar::PamarModel;
use crate::risk::RiskAggregator;

/// Deterministic periodic linear dynamics
/// `x_t = A x_{t−1} + B u_{t−1} + F_{t mod T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStateModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    forcing: Vec<DVector<f64>>,
    calendar: SeasonCalendar,
}

impl LinearStateModel {
    /// Builds the dynamics; `forcing` may have any length dividing the master
    /// period and is cycled out to full length.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        forcing: Vec<DVector<f64>>,
        calendar: SeasonCalendar,
    ) -> Result<Self> {
        let sd = a.nrows();
        if a.ncols() != sd {
            return Err(Error::invalid("state matrix A must be square"));
        }
        if b.nrows() != sd {
            return Err(Error::invalid(format!(
                "input matrix B has {} rows but the state is {sd}-dimensional",
                b.nrows()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dynamics matrices must be finite"));
        }
        let period = calendar.master_period() as usize;
        if forcing.is_empty() || period % forcing.len() != 0 {
            return Err(Error::invalid(format!(
                "forcing has {} entries, which does not divide the master period {period}",
                forcing.len()
            )));
        }
        let forcing: Vec<DVector<f64>> = (0..period)
            .map(|i| forcing[i % forcing.len()].clone())
            .collect();
        for f in &forcing {
            if f.len() != sd {
                return Err(Error::invalid("forcing entries must match the state dimension"));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("forcing entries must be finite"));
            }
        }
        Ok(LinearStateModel {
            a,
            b,
            forcing,
            calendar,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn calendar(&self) -> &SeasonCalendar {
        &self.calendar
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Periodic forcing at a phase.
    pub fn forcing_at(&self, phase: usize) -> &DVector<f64> {
        &self.forcing[phase]
    }

    /// Advances the state to time `t` from `(x_{t−1}, u_{t−1})`.
    pub fn step_dynamics(&self, t: u64, x_prev: &DVector<f64>, u_prev: &DVector<f64>) -> DVector<f64> {
        let phase = self.calendar.phase(t);
        let mut x = self.forcing[phase].clone();
        x.gemv(1.0, &self.a, x_prev, 1.0);
        x.gemv(1.0, &self.b, u_prev, 1.0);
        x
    }
}

/// Periodic linear (inverse) demand curve: at phase `τ`, selling a quantity
/// `z` clears at price `c_t − d_τ z`, where the intercept `c_t` is the
/// realized noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandModel {
    calendar: SeasonCalendar,
    slope: Vec<f64>,
    /// Index of the noise component carrying the demand intercept.
    intercept_component: usize,
}

impl DemandModel {
    /// Builds the demand model; `slope` is cycled to the master period and
    /// must be non-negative.
    pub fn new(calendar: SeasonCalendar, slope: Vec<f64>, intercept_component: usize) -> Result<Self> {
        let period = calendar.master_period() as usize;
        if slope.is_empty() || period % slope.len() != 0 {
            return Err(Error::invalid(format!(
                "demand slope has {} entries, which does not divide the master period {period}",
                slope.len()
            )));
        }
        if slope.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid("demand slopes must be finite and non-negative"));
        }
        let slope = (0..period).map(|i| slope[i % slope.len()]).collect();
        Ok(DemandModel {
            calendar,
            slope,
            intercept_component,
        })
    }

    /// Demand slope at the phase of time `t`.
    pub fn slope_at(&self, t: u64) -> f64 {
        self.slope[self.calendar.phase(t)]
    }

    /// The demand-intercept component of a realized noise vector.
    pub fn intercept(&self, w: &DVector<f64>) -> f64 {
        w[self.intercept_component]
    }
}

/// Revenue from selling `energy` into the demand curve at time `t` with
/// realized intercept `c`: the integral of the price over the sold quantity,
/// `c·e − d_τ e²/2`.
pub fn stage_revenue(demand: &DemandModel, t: u64, c: f64, energy: f64) -> f64 {
    c * energy - 0.5 * demand.slope_at(t) * energy * energy
}

/// Total generated power for turbine releases `u` with per-turbine
/// efficiencies `a`: the inner product `aᵀu`.
pub fn total_power(efficiencies: &DVector<f64>, u: &DVector<f64>) -> f64 {
    efficiencies.dot(u)
}

/// Scalar stage loss with analytic or finite-difference gradients.
///
/// Convention: lower is better; profit-driven problems return the negative
/// of stage revenue. Gradients default to central differences so simple
/// custom losses only need `loss`, but the built-in losses override them.
pub trait StageLoss: Send + Sync {
    /// Loss incurred at time `t` in state `x` under realized noise `w` and
    /// control `u`.
    fn loss(&self, t: u64, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> f64;

    /// ∂loss/∂u.
    fn grad_u(&self, t: u64, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        central_difference(u, |v| self.loss(t, x, w, v))
    }

    /// ∂loss/∂x.
    fn grad_x(&self, t: u64, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        central_difference(x, |v| self.loss(t, v, w, u))
    }
}

fn central_difference(at: &DVector<f64>, mut f: impl FnMut(&DVector<f64>) -> f64) -> DVector<f64> {
    let mut grad = DVector::zeros(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let h = 1e-6 * (1.0 + at[i].abs());
        probe[i] = at[i] + h;
        let up = f(&probe);
        probe[i] = at[i] - h;
        let down = f(&probe);
        probe[i] = at[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Hydropower stage loss: negative revenue from selling the plant's total
/// power into the demand curve.
#[derive(Debug, Clone)]
pub struct HydroLoss {
    pub efficiencies: DVector<f64>,
    pub demand: DemandModel,
}

impl StageLoss for HydroLoss {
    fn loss(&self, t: u64, _x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = total_power(&self.efficiencies, u);
        -stage_revenue(&self.demand, t, self.demand.intercept(w), e)
    }

    fn grad_u(&self, t: u64, _x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        // d(−revenue)/du = −(c − d·e) · a
        let e = total_power(&self.efficiencies, u);
        let marginal = self.demand.intercept(w) - self.demand.slope_at(t) * e;
        -marginal * &self.efficiencies
    }

    fn grad_x(&self, _t: u64, x: &DVector<f64>, _w: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }
}

/// Control layout of the virtual power plant loss.
pub mod vpp_controls {
    /// Signed battery draw: positive discharges, negative charges.
    pub const BATTERY_DRAW: usize = 0;
    /// Conventional generation.
    pub const CONVENTIONAL: usize = 1;
    /// Offered renewable capacity cap.
    pub const RENEWABLE_CAP: usize = 2;
    /// Day-ahead market position.
    pub const DAY_AHEAD: usize = 3;
    /// Number of controls.
    pub const COUNT: usize = 4;
}

/// Noise layout of the virtual power plant loss.
pub mod vpp_noise {
    /// Available renewable production.
    pub const AVAILABILITY: usize = 0;
    /// Day-ahead price.
    pub const PRICE_DA: usize = 1;
    /// Real-time price.
    pub const PRICE_RT: usize = 2;
    /// Number of noise components.
    pub const COUNT: usize = 3;
}

/// Physical and market quantities implied by a VPP control at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct VppBalance {
    /// Renewable production actually delivered: availability clipped by the
    /// offered cap.
    pub renewable_delivered: f64,
    /// Conventional generation.
    pub conventional: f64,
    /// Battery draw (positive = discharge).
    pub battery_draw: f64,
    /// Day-ahead position.
    pub day_ahead: f64,
    /// Real-time position balancing the portfolio.
    pub real_time: f64,
    /// Net injection into the grid connection.
    pub injection: f64,
    /// Market-clearing residual
    /// `delivered + conventional + draw − day_ahead − real_time`; identically
    /// zero because the real-time position is defined as the remainder.
    pub residual: f64,
}

/// Virtual power plant stage loss: negative trading profit plus a soft line
/// penalty on the grid connection.
#[derive(Debug, Clone)]
pub struct VppLoss {
    /// Marginal cost of conventional generation.
    pub conventional_cost: f64,
    /// Capacity of the grid connection.
    pub line_limit: f64,
    /// Quadratic penalty weight on flow beyond the line limit.
    pub line_penalty: f64,
}

impl VppLoss {
    /// Resolves the stage: clips renewable delivery, balances the portfolio
    /// against the day-ahead position in the real-time market.
    pub fn balance(&self, w: &DVector<f64>, u: &DVector<f64>) -> VppBalance {
        let available = w[vpp_noise::AVAILABILITY].max(0.0);
        let delivered = available.min(u[vpp_controls::RENEWABLE_CAP]);
        let injection = delivered + u[vpp_controls::CONVENTIONAL] + u[vpp_controls::BATTERY_DRAW];
        let real_time = injection - u[vpp_controls::DAY_AHEAD];
        VppBalance {
            renewable_delivered: delivered,
            conventional: u[vpp_controls::CONVENTIONAL],
            battery_draw: u[vpp_controls::BATTERY_DRAW],
            day_ahead: u[vpp_controls::DAY_AHEAD],
            real_time,
            injection,
            residual: delivered + u[vpp_controls::CONVENTIONAL] + u[vpp_controls::BATTERY_DRAW]
                - u[vpp_controls::DAY_AHEAD]
                - real_time,
        }
    }

    fn line_excess(&self, injection: f64) -> f64 {
        (injection.abs() - self.line_limit).max(0.0)
    }
}

impl StageLoss for VppLoss {
    fn loss(&self, _t: u64, _x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let bal = self.balance(w, u);
        let profit = w[vpp_noise::PRICE_DA] * bal.day_ahead + w[vpp_noise::PRICE_RT] * bal.real_time
            - self.conventional_cost * bal.conventional;
        let excess = self.line_excess(bal.injection);
        -profit + self.line_penalty * excess * excess
    }

    fn grad_u(&self, _t: u64, _x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let bal = self.balance(w, u);
        let available = w[vpp_noise::AVAILABILITY].max(0.0);
        // Delivered renewable responds to the cap only while the cap binds.
        let d_delivered = if u[vpp_controls::RENEWABLE_CAP] < available { 1.0 } else { 0.0 };
        let d_injection = [1.0, 1.0, d_delivered, 0.0];

        let rt = w[vpp_noise::PRICE_RT];
        let da = w[vpp_noise::PRICE_DA];
        let excess = self.line_excess(bal.injection);
        let d_pen = 2.0 * self.line_penalty * excess * bal.injection.signum();

        let mut g = DVector::zeros(vpp_controls::COUNT);
        for (i, &dinj) in d_injection.iter().enumerate() {
            // profit term: rt · d(real_time)/du_i with real_time = injection − q_da
            g[i] = -(rt * dinj) + d_pen * dinj;
        }
        // day-ahead: profit gains da·1 and loses rt·1 through real_time.
        g[vpp_controls::DAY_AHEAD] += -(da - rt);
        g[vpp_controls::CONVENTIONAL] += self.conventional_cost;
        g
    }

    fn grad_x(&self, _t: u64, x: &DVector<f64>, _w: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }
}

/// Quadratic tracking loss
/// `½(x−x*)ᵀQ(x−x*) + ½(u−u*)ᵀR(u−u*) + uᵀ N w` for generic problems; the
/// optional `N` term prices controls by the realized noise.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub state_weight: DMatrix<f64>,
    pub control_weight: DMatrix<f64>,
    pub state_ref: DVector<f64>,
    pub control_ref: DVector<f64>,
    pub noise_price: Option<DMatrix<f64>>,
}

impl StageLoss for QuadraticLoss {
    fn loss(&self, _t: u64, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.state_ref;
        let du = u - &self.control_ref;
        let mut l = 0.5 * dx.dot(&(&self.state_weight * &dx)) + 0.5 * du.dot(&(&self.control_weight * &du));
        if let Some(n) = &self.noise_price {
            l += u.dot(&(n * w));
        }
        l
    }

    fn grad_u(&self, _t: u64, _x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let du = u - &self.control_ref;
        let mut g = &self.control_weight * du;
        if let Some(n) = &self.noise_price {
            g += n * w;
        }
        g
    }

    fn grad_x(&self, _t: u64, x: &DVector<f64>, _w: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        &self.state_weight * (x - &self.state_ref)
    }
}

/// Soft box bounds `l ≤ H x ≤ u` required to hold with probability
/// `≥ 1 − alpha` at every stage (`H` defaults to the identity).
#[derive(Debug, Clone, PartialEq)]
pub struct StateConstraint {
    map: Option<DMatrix<f64>>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    alpha: f64,
}

impl StateConstraint {
    /// Builds the constraint; `alpha` must lie in `(0, 0.5)`.
    pub fn new(
        map: Option<DMatrix<f64>>,
        lower: DVector<f64>,
        upper: DVector<f64>,
        alpha: f64,
    ) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid("state bounds differ in dimension"));
        }
        for i in 0..lower.len() {
            if !lower[i].is_finite() || !upper[i].is_finite() || lower[i] > upper[i] {
                return Err(Error::invalid(format!(
                    "state bounds are invalid in coordinate {i}"
                )));
            }
        }
        if let Some(h) = &map {
            if h.nrows() != lower.len() {
                return Err(Error::invalid("constraint map rows must match the bounds"));
            }
        }
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::invalid(format!(
                "confidence level alpha must lie in (0, 0.5), got {alpha}"
            )));
        }
        Ok(StateConstraint {
            map,
            lower,
            upper,
            alpha,
        })
    }

    /// Allowed violation probability.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Lower bounds on the constrained quantity.
    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    /// Upper bounds on the constrained quantity.
    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Dimension of the state the constraint applies to.
    pub fn state_dim(&self) -> usize {
        match &self.map {
            Some(h) => h.ncols(),
            None => self.lower.len(),
        }
    }

    fn mapped(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.map {
            Some(h) => h * x,
            None => x.clone(),
        }
    }

    /// Worst-component distance outside the box (zero inside).
    pub fn excess(&self, x: &DVector<f64>) -> f64 {
        let z = self.mapped(x);
        let mut worst = 0.0f64;
        for i in 0..z.len() {
            worst = worst.max(z[i] - self.upper[i]).max(self.lower[i] - z[i]);
        }
        worst
    }

    /// Whether the state violates the box at all.
    pub fn violated(&self, x: &DVector<f64>) -> bool {
        self.excess(x) > 0.0
    }

    /// Subgradient of [`StateConstraint::excess`] with respect to `x`
    /// (zero strictly inside; ties broken by the lowest coordinate).
    pub fn excess_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let z = self.mapped(x);
        let mut worst = 0.0f64;
        let mut arg: Option<(usize, f64)> = None; // (coordinate, ±1)
        for i in 0..z.len() {
            let above = z[i] - self.upper[i];
            let below = self.lower[i] - z[i];
            if above > worst {
                worst = above;
                arg = Some((i, 1.0));
            }
            if below > worst {
                worst = below;
                arg = Some((i, -1.0));
            }
        }
        let sd = self.state_dim();
        match arg {
            None => DVector::zeros(sd),
            Some((i, sign)) => match &self.map {
                None => {
                    let mut g = DVector::zeros(sd);
                    g[i] = sign;
                    g
                }
                Some(h) => sign * h.row(i).transpose(),
            },
        }
    }
}

/// A complete stochastic control problem instance.
#[derive(Clone)]
pub struct GenericProblem {
    pub dynamics: LinearStateModel,
    pub noise: PamarModel,
    pub loss: Arc<dyn StageLoss>,
    pub risk: RiskAggregator,
    pub constraint: StateConstraint,
    pub control_box: ControlBox,
    /// Short label for outputs ("hydropower", "vpp", "generic").
    pub kind: String,
}

impl fmt::Debug for GenericProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericProblem")
            .field("kind", &self.kind)
            .field("state_dim", &self.dynamics.state_dim())
            .field("control_dim", &self.dynamics.control_dim())
            .field("noise_dim", &self.noise.dim())
            .field("risk", &self.risk)
            .finish()
    }
}

impl GenericProblem {
    /// Checks cross-component consistency.
    pub fn validate(&self) -> Result<()> {
        self.risk.validate()?;
        if self.control_box.dim() != self.dynamics.control_dim() {
            return Err(Error::invalid(format!(
                "control box is {}-dimensional but dynamics take {} controls",
                self.control_box.dim(),
                self.dynamics.control_dim()
            )));
        }
        if self.constraint.state_dim() != self.dynamics.state_dim() {
            return Err(Error::invalid(format!(
                "state constraint applies to {} coordinates but the state has {}",
                self.constraint.state_dim(),
                self.dynamics.state_dim()
            )));
        }
        if self.noise.calendar() != self.dynamics.calendar() {
            return Err(Error::invalid(
                "noise model and dynamics must share one season calendar",
            ));
        }
        Ok(())
    }

    /// The shared season calendar.
    pub fn calendar(&self) -> &SeasonCalendar {
        self.dynamics.calendar()
    }

    /// Master period `T`.
    pub fn period(&self) -> u64 {
        self.calendar().master_period()
    }
}

/// Everything needed to assemble a hydropower problem.
#[derive(Debug, Clone)]
pub struct HydropowerSpec {
    pub calendar: SeasonCalendar,
    /// Carryover matrix `A` (identity for lossless storage).
    pub carryover: DMatrix<f64>,
    /// Release routing `B`: how turbine releases move water between
    /// reservoirs (a pure drain is `−I` columnwise).
    pub routing: DMatrix<f64>,
    /// Periodic natural inflow per phase (cycled).
    pub inflow: Vec<DVector<f64>>,
    /// Power produced per unit release, per turbine.
    pub efficiencies: DVector<f64>,
    /// Noise process whose component 0 is the demand intercept.
    pub demand_intercept: PamarModel,
    /// Demand slope per phase (cycled).
    pub demand_slope: Vec<f64>,
    pub storage_lower: DVector<f64>,
    pub storage_upper: DVector<f64>,
    /// Allowed probability of leaving the storage box.
    pub alpha: f64,
    pub release_lower: DVector<f64>,
    pub release_upper: DVector<f64>,
    pub risk: RiskAggregator,
}

/// Assembles a reservoir-network problem from its physical description.
pub fn build_hydropower(spec: HydropowerSpec) -> Result<GenericProblem> {
    let dynamics = LinearStateModel::new(
        spec.carryover,
        spec.routing,
        spec.inflow,
        spec.calendar.clone(),
    )?;
    if spec.efficiencies.len() != dynamics.control_dim() {
        return Err(Error::invalid(format!(
            "{} turbine efficiencies for {} release controls",
            spec.efficiencies.len(),
            dynamics.control_dim()
        )));
    }
    if spec.efficiencies.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::invalid("turbine efficiencies must be non-negative"));
    }
    if spec.demand_intercept.calendar() != &spec.calendar {
        return Err(Error::invalid(
            "demand intercept noise must use the problem calendar",
        ));
    }
    let demand = DemandModel::new(spec.calendar.clone(), spec.demand_slope, 0)?;
    let constraint = StateConstraint::new(None, spec.storage_lower, spec.storage_upper, spec.alpha)?;
    let control_box = ControlBox::new(spec.release_lower, spec.release_upper)?;
    // A demand intercept that can plausibly go negative produces negative
    // prices at low sales; allowed, but worth a note in the log.
    let sigma = spec.demand_intercept.sigma()[0];
    if let Some(fixed) = spec.demand_intercept.periodic_mean_fixed_point() {
        if fixed.iter().any(|m| m[0] - 4.0 * sigma < 0.0) {
            log::info!("demand intercept can realize negative values at ±4σ");
        }
    }
    let problem = GenericProblem {
        dynamics,
        noise: spec.demand_intercept,
        loss: Arc::new(HydroLoss {
            efficiencies: spec.efficiencies,
            demand,
        }),
        risk: spec.risk,
        constraint,
        control_box,
        kind: "hydropower".to_string(),
    };
    problem.validate()?;
    Ok(problem)
}

/// Everything needed to assemble a virtual power plant problem.
#[derive(Debug, Clone)]
pub struct VppSpec {
    pub calendar: SeasonCalendar,
    /// Noise process over (availability, day-ahead price, real-time price).
    pub noise: PamarModel,
    /// Fraction of battery energy retained per step, in (0, 1].
    pub battery_retention: f64,
    pub battery_lower: f64,
    pub battery_upper: f64,
    /// Allowed probability of leaving the battery bounds.
    pub alpha: f64,
    /// Maximum charging rate (magnitude of negative draw).
    pub charge_max: f64,
    /// Maximum discharging rate.
    pub discharge_max: f64,
    pub conventional_max: f64,
    pub conventional_cost: f64,
    pub renewable_cap_max: f64,
    pub day_ahead_lower: f64,
    pub day_ahead_upper: f64,
    pub line_limit: f64,
    pub line_penalty: f64,
    pub risk: RiskAggregator,
}

/// Assembles a battery + conventional + renewable trading problem.
pub fn build_vpp(spec: VppSpec) -> Result<GenericProblem> {
    if spec.noise.dim() != vpp_noise::COUNT {
        return Err(Error::invalid(format!(
            "vpp noise must have {} components (availability, day-ahead price, real-time price)",
            vpp_noise::COUNT
        )));
    }
    if !(spec.battery_retention > 0.0 && spec.battery_retention <= 1.0) {
        return Err(Error::invalid(format!(
            "battery retention must lie in (0, 1], got {}",
            spec.battery_retention
        )));
    }
    for (name, v) in [
        ("charge_max", spec.charge_max),
        ("discharge_max", spec.discharge_max),
        ("conventional_max", spec.conventional_max),
        ("renewable_cap_max", spec.renewable_cap_max),
        ("line_limit", spec.line_limit),
        ("line_penalty", spec.line_penalty),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("{name} must be finite and non-negative")));
        }
    }
    // Battery energy is the single dynamic state:
    // b_t = retention · b_{t−1} − draw_{t−1}.
    let mut b = DMatrix::zeros(1, vpp_controls::COUNT);
    b[(0, vpp_controls::BATTERY_DRAW)] = -1.0;
    let dynamics = LinearStateModel::new(
        DMatrix::from_element(1, 1, spec.battery_retention),
        b,
        vec![DVector::zeros(1)],
        spec.calendar.clone(),
    )?;
    if spec.noise.calendar() != &spec.calendar {
        return Err(Error::invalid("vpp noise must use the problem calendar"));
    }
    let constraint = StateConstraint::new(
        None,
        DVector::from_element(1, spec.battery_lower),
        DVector::from_element(1, spec.battery_upper),
        spec.alpha,
    )?;
    let mut lower = DVector::zeros(vpp_controls::COUNT);
    let mut upper = DVector::zeros(vpp_controls::COUNT);
    lower[vpp_controls::BATTERY_DRAW] = -spec.charge_max;
    upper[vpp_controls::BATTERY_DRAW] = spec.discharge_max;
    lower[vpp_controls::CONVENTIONAL] = 0.0;
    upper[vpp_controls::CONVENTIONAL] = spec.conventional_max;
    lower[vpp_controls::RENEWABLE_CAP] = 0.0;
    upper[vpp_controls::RENEWABLE_CAP] = spec.renewable_cap_max;
    lower[vpp_controls::DAY_AHEAD] = spec.day_ahead_lower;
    upper[vpp_controls::DAY_AHEAD] = spec.day_ahead_upper;
    let control_box = ControlBox::new(lower, upper)?;

    let problem = GenericProblem {
        dynamics,
        noise: spec.noise,
        loss: Arc::new(VppLoss {
            conventional_cost: spec.conventional_cost,
            line_limit: spec.line_limit,
            line_penalty: spec.line_penalty,
        }),
        risk: spec.risk,
        constraint,
        control_box,
        kind: "vpp".to_string(),
    };
    problem.validate()?;
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grad_matches_fd(loss: &dyn StageLoss, t: u64, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) {
        let gu = loss.grad_u(t, x, w, u);
        let fd_u = central_difference(u, |v| loss.loss(t, x, w, v));
        for i in 0..u.len() {
            assert_abs_diff_eq!(gu[i], fd_u[i], epsilon = 1e-5);
        }
        let gx = loss.grad_x(t, x, w, u);
        let fd_x = central_difference(x, |v| loss.loss(t, v, w, u));
        for i in 0..x.len() {
            assert_abs_diff_eq!(gx[i], fd_x[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn dynamics_step_combines_carryover_routing_and_forcing() {
        let cal = SeasonCalendar::single(2).unwrap();
        let m = LinearStateModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]),
            DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            vec![
                DVector::from_vec(vec![3.0, 0.0]),
                DVector::from_vec(vec![1.0, 1.0]),
            ],
            cal,
        )
        .unwrap();
        let x = DVector::from_vec(vec![10.0, 4.0]);
        let u = DVector::from_vec(vec![2.0]);
        // t = 1 → phase 1 forcing (1, 1):
        // x0' = 10 − 2 + 1 = 9; x1' = 5 + 4 + 2 + 1 = 12.
        let next = m.step_dynamics(1, &x, &u);
        assert_abs_diff_eq!(next[0], 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next[1], 12.0, epsilon = 1e-12);
    }

    #[test]
    fn stage_revenue_integrates_the_demand_curve() {
        let cal = SeasonCalendar::single(1).unwrap();
        let demand = DemandModel::new(cal, vec![1.0], 0).unwrap();
        // ∫₀⁴ (10 − z) dz = 40 − 8.
        assert_abs_diff_eq!(stage_revenue(&demand, 0, 10.0, 4.0), 32.0, epsilon = 1e-12);
        // Zero slope degenerates to linear pricing.
        let cal = SeasonCalendar::single(1).unwrap();
        let flat = DemandModel::new(cal, vec![0.0], 0).unwrap();
        assert_abs_diff_eq!(stage_revenue(&flat, 0, 10.0, 4.0), 40.0, epsilon = 1e-12);
    }

    #[test]
    fn total_power_weights_releases_by_efficiency() {
        let a = DVector::from_vec(vec![2.0, 0.5]);
        let u = DVector::from_vec(vec![3.0, 4.0]);
        assert_abs_diff_eq!(total_power(&a, &u), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn hydro_loss_gradients_match_finite_differences() {
        let cal = SeasonCalendar::single(2).unwrap();
        let demand = DemandModel::new(cal, vec![0.7, 1.1], 0).unwrap();
        let loss = HydroLoss {
            efficiencies: DVector::from_vec(vec![2.0, 0.5]),
            demand,
        };
        let x = DVector::from_vec(vec![50.0]);
        let w = DVector::from_vec(vec![9.0]);
        let u = DVector::from_vec(vec![3.0, 1.0]);
        grad_matches_fd(&loss, 1, &x, &w, &u);
    }

    #[test]
    fn vpp_balance_clears_the_market_identically() {
        let loss = VppLoss {
            conventional_cost: 20.0,
            line_limit: 10.0,
            line_penalty: 100.0,
        };
        let w = DVector::from_vec(vec![3.0, 50.0, 45.0]);
        let u = DVector::from_vec(vec![1.0, 2.0, 5.0, 4.5]);
        let bal = loss.balance(&w, &u);
        // Cap 5 exceeds availability 3 → all 3 delivered.
        assert_abs_diff_eq!(bal.renewable_delivered, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bal.injection, 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bal.real_time, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(bal.residual, 0.0, epsilon = 1e-15);
        // Negative availability is treated as zero production.
        let w_neg = DVector::from_vec(vec![-2.0, 50.0, 45.0]);
        let bal = loss.balance(&w_neg, &u);
        assert_abs_diff_eq!(bal.renewable_delivered, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn vpp_loss_prices_positions_and_penalizes_the_line() {
        let loss = VppLoss {
            conventional_cost: 20.0,
            line_limit: 4.0,
            line_penalty: 10.0,
        };
        let w = DVector::from_vec(vec![3.0, 50.0, 45.0]);
        let u = DVector::from_vec(vec![1.0, 2.0, 5.0, 4.5]);
        // injection 6, real-time 1.5, line excess 2.
        let expected = -(50.0 * 4.5 + 45.0 * 1.5 - 20.0 * 2.0) + 10.0 * 4.0;
        assert_abs_diff_eq!(loss.loss(0, &DVector::zeros(1), &w, &u), expected, epsilon = 1e-12);
    }

    #[test]
    fn vpp_gradients_match_finite_differences_away_from_kinks() {
        let loss = VppLoss {
            conventional_cost: 20.0,
            line_limit: 4.0,
            line_penalty: 10.0,
        };
        let x = DVector::zeros(1);
        for (w, u) in [
            // cap binding, line over limit
            (vec![8.0, 50.0, 45.0], vec![1.0, 2.0, 5.0, 4.5]),
            // availability binding, line under limit
            (vec![1.0, 50.0, 55.0], vec![-0.5, 1.0, 5.0, 2.0]),
        ] {
            let w = DVector::from_vec(w);
            let u = DVector::from_vec(u);
            grad_matches_fd(&loss, 0, &x, &w, &u);
        }
    }

    #[test]
    fn quadratic_loss_gradients_match_finite_differences() {
        let loss = QuadraticLoss {
            state_weight: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            control_weight: DMatrix::from_element(1, 1, 3.0),
            state_ref: DVector::from_vec(vec![1.0, -1.0]),
            control_ref: DVector::from_vec(vec![0.5]),
            noise_price: Some(DMatrix::from_row_slice(1, 1, &[2.0])),
        };
        let x = DVector::from_vec(vec![0.3, 0.9]);
        let w = DVector::from_vec(vec![1.7]);
        let u = DVector::from_vec(vec![-0.2]);
        grad_matches_fd(&loss, 0, &x, &w, &u);
    }

    #[test]
    fn state_constraint_measures_worst_component_excess() {
        let c = StateConstraint::new(
            None,
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![10.0, 5.0]),
            0.1,
        )
        .unwrap();
        assert_eq!(c.excess(&DVector::from_vec(vec![5.0, 2.0])), 0.0);
        assert!(!c.violated(&DVector::from_vec(vec![5.0, 2.0])));
        assert_abs_diff_eq!(c.excess(&DVector::from_vec(vec![12.0, -1.0])), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.excess(&DVector::from_vec(vec![5.0, -3.0])), 3.0, epsilon = 1e-15);
        // Gradient points along the worst violated coordinate.
        let g = c.excess_grad(&DVector::from_vec(vec![12.0, -1.0]));
        assert_eq!(g, DVector::from_vec(vec![1.0, 0.0]));
        let g = c.excess_grad(&DVector::from_vec(vec![5.0, -3.0]));
        assert_eq!(g, DVector::from_vec(vec![0.0, -1.0]));
        assert_eq!(c.excess_grad(&DVector::from_vec(vec![5.0, 2.0])), DVector::zeros(2));
    }

    #[test]
    fn constraint_alpha_must_be_a_small_probability() {
        let mk = |alpha| {
            StateConstraint::new(
                None,
                DVector::from_vec(vec![0.0]),
                DVector::from_vec(vec![1.0]),
                alpha,
            )
        };
        assert!(mk(0.05).is_ok());
        assert!(mk(0.0).is_err());
        assert!(mk(0.5).is_err());
        assert!(mk(-0.1).is_err());
    }

    #[test]
    fn hydropower_builder_wires_a_consistent_problem() {
        let cal = SeasonCalendar::single(4).unwrap();
        let noise = PamarModel::scalar_ar1(cal.clone(), &[10.0, 12.0, 10.0, 8.0], &[0.0], 0.0).unwrap();
        let problem = build_hydropower(HydropowerSpec {
            calendar: cal,
            carryover: DMatrix::identity(1, 1),
            routing: DMatrix::from_element(1, 1, -1.0),
            inflow: vec![DVector::from_element(1, 5.0)],
            efficiencies: DVector::from_element(1, 2.0),
            demand_intercept: noise,
            demand_slope: vec![1.0],
            storage_lower: DVector::from_element(1, 20.0),
            storage_upper: DVector::from_element(1, 80.0),
            alpha: 0.1,
            release_lower: DVector::from_element(1, 0.0),
            release_upper: DVector::from_element(1, 10.0),
            risk: RiskAggregator::Expectation,
        })
        .unwrap();
        // One step: storage 50, release 3 → 50 − 3 + 5 = 52.
        let x = problem.dynamics.step_dynamics(
            1,
            &DVector::from_element(1, 50.0),
            &DVector::from_element(1, 3.0),
        );
        assert_abs_diff_eq!(x[0], 52.0, epsilon = 1e-12);
        // Loss at c = 10, release 3 (power 6): −(10·6 − 18) = −42.
        let l = problem.loss.loss(
            0,
            &DVector::from_element(1, 50.0),
            &DVector::from_element(1, 10.0),
            &DVector::from_element(1, 3.0),
        );
        assert_abs_diff_eq!(l, -42.0, epsilon = 1e-12);
    }

    #[test]
    fn vpp_builder_wires_battery_dynamics_and_box() {
        let cal = SeasonCalendar::single(3).unwrap();
        let noise = PamarModel::independent(
            cal.clone(),
            vec![DVector::from_vec(vec![5.0, 50.0, 52.0])],
            DVector::zeros(3),
        )
        .unwrap();
        let problem = build_vpp(VppSpec {
            calendar: cal,
            noise,
            battery_retention: 0.95,
            battery_lower: 0.0,
            battery_upper: 10.0,
            alpha: 0.05,
            charge_max: 2.0,
            discharge_max: 3.0,
            conventional_max: 4.0,
            conventional_cost: 30.0,
            renewable_cap_max: 8.0,
            day_ahead_lower: -6.0,
            day_ahead_upper: 6.0,
            line_limit: 12.0,
            line_penalty: 100.0,
            risk: RiskAggregator::Expectation,
        })
        .unwrap();
        // Battery: 0.95·4 − draw 1.5 = 2.3.
        let x = problem.dynamics.step_dynamics(
            1,
            &DVector::from_element(1, 4.0),
            &DVector::from_vec(vec![1.5, 0.0, 0.0, 0.0]),
        );
        assert_abs_diff_eq!(x[0], 2.3, epsilon = 1e-12);
        assert_eq!(problem.control_box.lower[vpp_controls::BATTERY_DRAW], -2.0);
        assert_eq!(problem.control_box.upper[vpp_controls::DAY_AHEAD], 6.0);
    }
}
