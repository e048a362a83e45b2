//! Lyapunov-derived weight update laws with a dead-zone robust modification,
//! and a monitor that evaluates the Lyapunov candidate along a run.
//!
//! The continuous laws `Ẇ^h = -γ_1 ε ξ`, `Ẇ^o = -γ_2 ε ζ` are discretized with
//! explicit Euler at the sampling step. `ζ`, `ξ` are taken as the Jacobians of
//! the whole stacked error `ε` with respect to each weight block, which reduces
//! to the torque-regressor Jacobians when only the torque residual is present.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    fill_row_major, matrix_product_selector, NetworkBundle, Term, WeightJacobian,
};
use crate::plant::MotionSample;
use crate::residuals::{
    inertia_bound_error, inertia_bound_jacobian, offdiag_pairs, skew_diag_error,
    skew_offdiag_error, stack_wae, torque_error, InertiaBand, LagrangianWeights, StackLayout,
};

/// Ratio of the region III/IV boundary to the dead-zone radius.
pub const OPERATING_BAND_FACTOR: f64 = 3.0;

/// Per-block learning rates: `*_hidden` is γ_i1, `*_output` is γ_i2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub inertia_hidden: f64,
    pub inertia_output: f64,
    pub coriolis_hidden: f64,
    pub coriolis_output: f64,
    pub gravity_hidden: f64,
    pub gravity_output: f64,
}

impl LearningRates {
    pub fn uniform(rate: f64) -> Self {
        Self {
            inertia_hidden: rate,
            inertia_output: rate,
            coriolis_hidden: rate,
            coriolis_output: rate,
            gravity_hidden: rate,
            gravity_output: rate,
        }
    }

    /// `(hidden, output)` rates for a subnet.
    pub fn for_term(&self, term: Term) -> (f64, f64) {
        match term {
            Term::Inertia => (self.inertia_hidden, self.inertia_output),
            Term::Coriolis => (self.coriolis_hidden, self.coriolis_output),
            Term::Gravity => (self.gravity_hidden, self.gravity_output),
        }
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("inertia_hidden", self.inertia_hidden),
            ("inertia_output", self.inertia_output),
            ("coriolis_hidden", self.coriolis_hidden),
            ("coriolis_output", self.coriolis_output),
            ("gravity_hidden", self.gravity_hidden),
            ("gravity_output", self.gravity_output),
        ]
    }
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            inertia_hidden: 1.0,
            inertia_output: 1.0,
            coriolis_hidden: 1.0,
            coriolis_output: 1.0,
            gravity_hidden: 1.0,
            gravity_output: 1.0,
        }
    }
}

/// What happens to the weights while the filtered error is inside the ball.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RobustModification {
    /// Weights are frozen.
    #[default]
    DeadZone,
    /// Weights leak toward zero at rate `sigma`.
    Sigma { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Modified-error pole, 1/s.
    pub alpha: f64,
    /// Stability-margin factor of the dead zone.
    pub gamma: f64,
    /// Bound on the irreducible residual, in units of `ε`.
    pub nu0: f64,
    pub rates: LearningRates,
    pub lagrangian: LagrangianWeights,
    /// Exponent of the eigenvalue scale `exp(λ0/t)`, s.
    pub lambda0: f64,
    /// Sampling step, s.
    pub dt: f64,
    /// Weight-error scale Γ of the Lyapunov candidate.
    pub lyapunov_rate: f64,
    pub inertia_band: InertiaBand,
    pub robust: RobustModification,
    /// Enforce the `γ ≤ α` tuning rule. Only sweeps that deliberately explore
    /// `α < γ` turn this off.
    pub enforce_gamma_le_alpha: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            gamma: 2.0,
            nu0: 0.08,
            rates: LearningRates::default(),
            lagrangian: LagrangianWeights::default(),
            lambda0: -0.1,
            dt: 1e-3,
            lyapunov_rate: 1.0,
            inertia_band: InertiaBand { lower: 0.005, upper: 1.0 },
            robust: RobustModification::DeadZone,
            enforce_gamma_le_alpha: true,
        }
    }
}

impl HyperParams {
    /// Radius `γ ν0 / α` of the dead-zone ball.
    pub fn dead_zone_radius(&self) -> f64 {
        self.gamma * self.nu0 / self.alpha
    }
}

/// Why a hyperparameter set was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    AlphaNotPositive(f64),
    GammaNotAboveOne(f64),
    GammaAboveAlpha { gamma: f64, alpha: f64 },
    LambdaNotAboveOne { name: &'static str, value: f64 },
    StepNotPositive(f64),
    UnstableFilterStep { dt_alpha: f64 },
    NegativeRate { name: &'static str, value: f64 },
    NegativeNu0(f64),
    LyapunovRateNotPositive(f64),
    BadInertiaBand { lower: f64, upper: f64 },
    NegativeSigma(f64),
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::AlphaNotPositive(a) => write!(f, "alpha = {a} must be > 0"),
            Rejection::GammaNotAboveOne(g) => write!(f, "gamma = {g} must be > 1"),
            Rejection::GammaAboveAlpha { gamma, alpha } => {
                write!(f, "gamma = {gamma} exceeds alpha = {alpha} (need 1 < gamma <= alpha)")
            }
            Rejection::LambdaNotAboveOne { name, value } => {
                write!(f, "{name} = {value} must be > 1")
            }
            Rejection::StepNotPositive(dt) => write!(f, "dt = {dt} must be > 0"),
            Rejection::UnstableFilterStep { dt_alpha } => {
                write!(f, "dt*alpha = {dt_alpha} must be < 2")
            }
            Rejection::NegativeRate { name, value } => {
                write!(f, "learning rate {name} = {value} must be >= 0")
            }
            Rejection::NegativeNu0(v) => write!(f, "nu0 = {v} must be >= 0"),
            Rejection::LyapunovRateNotPositive(v) => write!(f, "lyapunov_rate = {v} must be > 0"),
            Rejection::BadInertiaBand { lower, upper } => {
                write!(f, "inertia band [{lower}, {upper}] must satisfy 0 <= lower <= upper")
            }
            Rejection::NegativeSigma(s) => write!(f, "sigma = {s} must be >= 0"),
        }
    }
}

/// Checks the tuning rules; returns the first violated one.
pub fn validate_hyperparams(hp: &HyperParams) -> std::result::Result<(), Rejection> {
    if !(hp.alpha > 0.0 && hp.alpha.is_finite()) {
        return Err(Rejection::AlphaNotPositive(hp.alpha));
    }
    if !(hp.gamma > 1.0 && hp.gamma.is_finite()) {
        return Err(Rejection::GammaNotAboveOne(hp.gamma));
    }
    if hp.enforce_gamma_le_alpha && hp.gamma > hp.alpha {
        return Err(Rejection::GammaAboveAlpha { gamma: hp.gamma, alpha: hp.alpha });
    }
    let lw = &hp.lagrangian;
    for (name, value) in [("lambda1", lw.lambda1), ("lambda2", lw.lambda2), ("lambda3", lw.lambda3)] {
        if !(value > 1.0 && value.is_finite()) {
            return Err(Rejection::LambdaNotAboveOne { name, value });
        }
    }
    if !(hp.dt > 0.0 && hp.dt.is_finite()) {
        return Err(Rejection::StepNotPositive(hp.dt));
    }
    if hp.dt * hp.alpha >= 2.0 {
        return Err(Rejection::UnstableFilterStep { dt_alpha: hp.dt * hp.alpha });
    }
    for (name, value) in hp.rates.named() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Rejection::NegativeRate { name, value });
        }
    }
    if !(hp.nu0 >= 0.0 && hp.nu0.is_finite()) {
        return Err(Rejection::NegativeNu0(hp.nu0));
    }
    if !(hp.lyapunov_rate > 0.0 && hp.lyapunov_rate.is_finite()) {
        return Err(Rejection::LyapunovRateNotPositive(hp.lyapunov_rate));
    }
    let band = hp.inertia_band;
    if !(band.lower >= 0.0 && band.lower <= band.upper && band.upper.is_finite()) {
        return Err(Rejection::BadInertiaBand { lower: band.lower, upper: band.upper });
    }
    if let RobustModification::Sigma { sigma } = hp.robust {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Rejection::NegativeSigma(sigma));
        }
    }
    Ok(())
}

/// `true` when adaptation runs: `‖e‖₂ ≥ γ ν0 / α`. The boundary counts as
/// active.
pub fn dead_zone_gate(e_mod: &DVector<f64>, hp: &HyperParams) -> bool {
    e_mod.norm() >= hp.dead_zone_radius()
}

/// Residual blocks at one sample, before filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub e1: DVector<f64>,
    pub e2: DVector<f64>,
    pub e3: DVector<f64>,
    pub e4: DVector<f64>,
    pub eps: DVector<f64>,
    pub band_penalty: f64,
}

/// Evaluates all residual families and the stacked error at `sample`;
/// `sample.t` must be positive.
pub fn evaluate_residuals(
    nets: &NetworkBundle,
    sample: &MotionSample,
    hp: &HyperParams,
) -> Result<Residuals> {
    let est = nets.assemble_terms(&sample.q, &sample.qdot)?;
    let rate = nets.mhat_rate(&sample.q, &sample.qdot)?;
    let e1 = torque_error(sample, &est)?;
    let e2 = skew_diag_error(&rate, &est.coriolis);
    let e3 = skew_offdiag_error(&rate, &est.coriolis);
    let (e4, band_penalty) = inertia_bound_error(&est.mass, sample.t, hp.lambda0, hp.inertia_band)?;
    let eps = stack_wae(&e1, &e2, &e3, &e4, &hp.lagrangian);
    Ok(Residuals { e1, e2, e3, e4, eps, band_penalty })
}

/// Jacobians of the stacked error `ε` with respect to each subnet's weights,
/// rows in stacked order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualJacobian {
    pub inertia: WeightJacobian,
    pub coriolis: WeightJacobian,
    pub gravity: WeightJacobian,
}

impl ResidualJacobian {
    pub fn get(&self, term: Term) -> &WeightJacobian {
        match term {
            Term::Inertia => &self.inertia,
            Term::Coriolis => &self.coriolis,
            Term::Gravity => &self.gravity,
        }
    }
}

/// Selection of the structural residuals `[e2; e3]` (unweighted) from
/// row-major `vec(A)`, for `A = Ṁ̂` (with sign +1) or `A = Ĉ` (sign -2).
fn structural_selector(n: usize, scale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut diag = DMatrix::zeros(n, n * n);
    for k in 0..n {
        diag[(k, k * n + k)] = scale;
    }
    let pairs = StackLayout::new(n).pairs();
    let mut off = DMatrix::zeros(pairs, n * n);
    for (m, (i, k)) in offdiag_pairs(n).enumerate() {
        off[(m, i * n + k)] = scale;
        off[(m, k * n + i)] = scale;
    }
    (diag, off)
}

/// `∂ε/∂θ_i` for each subnet. Torque and structural rows are analytic; the
/// inertia-bound rows chain a finite-difference derivative of `e4` with
/// respect to `M̂` through the inertia subnet.
pub fn residual_jacobian(
    nets: &NetworkBundle,
    sample: &MotionSample,
    hp: &HyperParams,
) -> Result<ResidualJacobian> {
    let n = nets.dof();
    let layout = StackLayout::new(n);
    let [o1, o2, o3, o4] = layout.offsets();
    let rows = layout.len();
    let lw = &hp.lagrangian;
    let (q, qd, qdd) = (&sample.q, &sample.qdot, &sample.qddot);

    // Maps from vec(M̂), vec(Ṁ̂), vec(Ĉ), Ĝ to ε.
    let mhat = nets.assemble_terms(q, qd)?.mass;
    let mut from_mass = DMatrix::zeros(rows, n * n);
    from_mass.rows_mut(o1, n).copy_from(&(-matrix_product_selector(qdd)));
    from_mass
        .rows_mut(o4, n)
        .copy_from(&(inertia_bound_jacobian(&mhat, sample.t, hp.lambda0)? * lw.lambda3));

    let mut from_rate = DMatrix::zeros(rows, n * n);
    let (diag, off) = structural_selector(n, 1.0);
    from_rate.rows_mut(o2, n).copy_from(&(&diag * lw.lambda1));
    from_rate.rows_mut(o3, o4 - o3).copy_from(&(&off * lw.lambda2));

    let mut from_coriolis = DMatrix::zeros(rows, n * n);
    from_coriolis.rows_mut(o1, n).copy_from(&(-matrix_product_selector(qd)));
    let (diag, off) = structural_selector(n, -2.0);
    from_coriolis.rows_mut(o2, n).copy_from(&(&diag * lw.lambda1));
    from_coriolis.rows_mut(o3, o4 - o3).copy_from(&(&off * lw.lambda2));

    let mut from_gravity = DMatrix::zeros(rows, n);
    from_gravity.rows_mut(o1, n).copy_from(&(-DMatrix::identity(n, n)));

    let jm = nets.mhat_jacobian(q)?;
    let jr = nets.mhat_rate_jacobian(q, qd)?;
    let inertia = WeightJacobian {
        output: &from_mass * &jm.output + &from_rate * &jr.output,
        hidden: &from_mass * &jm.hidden + &from_rate * &jr.hidden,
    };
    let coriolis = nets.chat_jacobian(q, qd)?.map(&from_coriolis);
    let gravity = nets.gravity.output_jacobian(q, nets.activation)?.map(&from_gravity);
    Ok(ResidualJacobian { inertia, coriolis, gravity })
}

/// One explicit-Euler step of the update laws.
///
/// With the gate closed the weights are left untouched (dead zone) or leak
/// toward zero (σ-modification).
pub fn update_step(
    nets: &NetworkBundle,
    eps: &DVector<f64>,
    jac: &ResidualJacobian,
    hp: &HyperParams,
    gate: bool,
) -> Result<NetworkBundle> {
    let mut next = nets.clone();
    if !gate {
        if let RobustModification::Sigma { sigma } = hp.robust {
            let keep = 1.0 - hp.dt * sigma;
            for t in Term::ALL {
                let w = next.subnet_mut(t);
                w.hidden *= keep;
                w.output *= keep;
            }
        }
        return Ok(next);
    }
    for t in Term::ALL {
        let (rate_h, rate_o) = hp.rates.for_term(t);
        let j = jac.get(t);
        if j.output.nrows() != eps.len() || j.hidden.nrows() != eps.len() {
            return Err(Error::Shape("residual Jacobian rows do not match the stacked error".into()));
        }
        let w = next.subnet_mut(t);
        if rate_o != 0.0 {
            let grad = j.output.tr_mul(eps);
            let mut step = DMatrix::zeros(w.output.nrows(), w.output.ncols());
            fill_row_major(&mut step, grad.as_slice());
            w.output -= step * (hp.dt * rate_o);
        }
        if rate_h != 0.0 {
            let grad = j.hidden.tr_mul(eps);
            let mut step = DMatrix::zeros(w.hidden.nrows(), w.hidden.ncols());
            fill_row_major(&mut step, grad.as_slice());
            w.hidden -= step * (hp.dt * rate_h);
        }
        if !w.is_consistent() {
            return Err(Error::NonFinite(match t {
                Term::Inertia => "inertia weights after update (learning rate too large?)",
                Term::Coriolis => "Coriolis weights after update (learning rate too large?)",
                Term::Gravity => "gravity weights after update (learning rate too large?)",
            }));
        }
    }
    Ok(next)
}

/// Operating regions of the filtered error relative to the dead zone.
///
/// With `r = ν0/α`:
/// - I: `‖e‖ < r` while the weights keep growing (over-parameterized
///   identifier; a heuristic flag, see [`LyapunovMonitor`]),
/// - II: inside the dead-zone ball `‖e‖ < γ r` (stability margin),
/// - III: `γ r ≤ ‖e‖ ≤ 3 γ r` (operating band),
/// - IV: beyond the operating band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    I,
    II,
    III,
    IV,
}

impl Region {
    pub fn code(self) -> u8 {
        match self {
            Region::I => 1,
            Region::II => 2,
            Region::III => 3,
            Region::IV => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Region::I),
            2 => Some(Region::II),
            3 => Some(Region::III),
            4 => Some(Region::IV),
            _ => None,
        }
    }
}

/// Classifies `‖e‖` into a region.
pub fn classify_region(e_norm: f64, hp: &HyperParams, over_parameterized: bool) -> Region {
    let inner = hp.nu0 / hp.alpha;
    let radius = hp.dead_zone_radius();
    if e_norm < inner && over_parameterized {
        Region::I
    } else if e_norm < radius {
        Region::II
    } else if e_norm <= OPERATING_BAND_FACTOR * radius {
        Region::III
    } else {
        Region::IV
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovReport {
    pub v: f64,
    /// `(V_k - V_{k-1}) / dt`; zero on the first report.
    pub dv_estimate: f64,
    pub in_dead_zone: bool,
    pub region: Region,
}

/// `V = ½(‖e‖² + Γ⁻¹‖θ - θ*‖²)`.
pub fn lyapunov_value(e_mod: &DVector<f64>, theta: &DVector<f64>, theta_ref: &DVector<f64>, hp: &HyperParams) -> f64 {
    0.5 * (e_mod.norm_squared() + (theta - theta_ref).norm_squared() / hp.lyapunov_rate)
}

/// Tracks the Lyapunov candidate along a run against a reference θ*.
///
/// The over-parameterization flag behind region I is heuristic: it is raised
/// when `‖e‖` has stayed below `ν0/α` for `window` consecutive steps while
/// `‖θ‖` grew over the same stretch.
#[derive(Debug, Clone)]
pub struct LyapunovMonitor {
    theta_ref: DVector<f64>,
    prev_v: Option<f64>,
    window: usize,
    streak: usize,
    streak_start_norm: f64,
}

impl LyapunovMonitor {
    pub fn new(theta_ref: DVector<f64>, window: usize) -> Self {
        Self {
            theta_ref,
            prev_v: None,
            window: window.max(1),
            streak: 0,
            streak_start_norm: 0.0,
        }
    }

    pub fn theta_ref(&self) -> &DVector<f64> {
        &self.theta_ref
    }

    pub fn report(&mut self, e_mod: &DVector<f64>, nets: &NetworkBundle, hp: &HyperParams) -> LyapunovReport {
        let theta = nets.flatten();
        let v = lyapunov_value(e_mod, &theta, &self.theta_ref, hp);
        let dv_estimate = self.prev_v.map_or(0.0, |p| (v - p) / hp.dt);
        self.prev_v = Some(v);

        let e_norm = e_mod.norm();
        let theta_norm = theta.norm();
        if e_norm < hp.nu0 / hp.alpha {
            if self.streak == 0 {
                self.streak_start_norm = theta_norm;
            }
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        let over = self.streak >= self.window && theta_norm > self.streak_start_norm;
        LyapunovReport {
            v,
            dv_estimate,
            in_dead_zone: !dead_zone_gate(e_mod, hp),
            region: classify_region(e_norm, hp, over),
        }
    }
}

/// The Lyapunov monitor as a free function over a fresh monitor state.
pub fn lyapunov_monitor(
    e_mod: &DVector<f64>,
    nets: &NetworkBundle,
    theta_ref: &DVector<f64>,
    hp: &HyperParams,
) -> LyapunovReport {
    LyapunovMonitor::new(theta_ref.clone(), 1).report(e_mod, nets, hp)
}

/// 95th percentile of `‖ε‖` samples, the calibrated residual bound ν0.
pub fn nu0_from_samples(eps_norms: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = eps_norms.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * 0.95).round() as usize;
    Some(v[idx])
}
