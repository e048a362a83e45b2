//! Control laws and the closed identification loop.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{JointFilterBank, KalmanTuning, Regressors};
use crate::learner::{
    dead_zone_gate, evaluate_residuals, residual_jacobian, update_step, validate_hyperparams,
    HyperParams, LyapunovMonitor, Region,
};
use crate::network::{fill_row_major, NetworkBundle, Term, TermsEstimate};
use crate::plant::{
    excitation_reference, forward_dynamics, integrate_step, ExcitationSpec, MotionSample, PlantModel,
    PlantState, Reference,
};
use crate::residuals::{ModifiedErrorFilter, StackLayout};

/// Above this condition number of `M̂` the inverse-dynamics controller hands
/// the step to plain PD.
pub const MAX_ESTIMATE_CONDITION: f64 = 1e6;

/// Diagonal PD gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    /// N·m/rad.
    pub kp: Vec<f64>,
    /// N·m·s/rad.
    pub kd: Vec<f64>,
}

impl PdGains {
    pub fn uniform(n: usize, kp: f64, kd: f64) -> Self {
        Self { kp: vec![kp; n], kd: vec![kd; n] }
    }

    pub fn dof(&self) -> usize {
        self.kp.len()
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        if self.kp.len() != dof || self.kd.len() != dof {
            return Err(Error::config(format!(
                "controller gains must have {dof} entries, got kp {} and kd {}",
                self.kp.len(),
                self.kd.len()
            )));
        }
        if self.kp.iter().chain(&self.kd).any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::config("controller gains must be positive"));
        }
        Ok(())
    }

    fn kp(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.kp)
    }

    fn kd(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.kd)
    }
}

/// `τ = Kp (q_ref - q)`.
pub fn proportional_controller(q: &DVector<f64>, q_ref: &DVector<f64>, kp: &DVector<f64>) -> DVector<f64> {
    (q_ref - q).component_mul(kp)
}

/// `τ = Kp e + Kd ė` with `e = q_ref - q`.
pub fn pd_controller(
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    q_ref: &DVector<f64>,
    qdot_ref: &DVector<f64>,
    gains: &PdGains,
) -> DVector<f64> {
    (q_ref - q).component_mul(&gains.kp()) + (qdot_ref - qdot).component_mul(&gains.kd())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnidcOutput {
    pub tau: DVector<f64>,
    /// PD was used because `M̂` was ill-conditioned.
    pub fallback: bool,
    pub condition: f64,
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    let s = m.clone().singular_values();
    let (lo, hi) = (s.min(), s.max());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Inverse-dynamics control `τ = M̂(q̈_d + Kd ė + Kp e) + Ĉ q̇ + Ĝ`.
pub fn nnidc_controller(
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    reference: &Reference,
    gains: &PdGains,
    est: &TermsEstimate,
) -> NnidcOutput {
    let condition = condition_number(&est.mass);
    if !(condition <= MAX_ESTIMATE_CONDITION) {
        return NnidcOutput {
            tau: pd_controller(q, qdot, &reference.q, &reference.qdot, gains),
            fallback: true,
            condition,
        };
    }
    let e = &reference.q - q;
    let edot = &reference.qdot - qdot;
    let v = &reference.qddot + edot.component_mul(&gains.kd()) + e.component_mul(&gains.kp());
    NnidcOutput {
        tau: &est.mass * v + &est.coriolis * qdot + &est.gravity,
        fallback: false,
        condition,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Proportional,
    Pd,
    Nnidc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    #[serde(flatten)]
    pub gains: PdGains,
}

/// Everything the identification loop needs besides the plant and networks.
#[derive(Debug, Clone)]
pub struct LoopSetup {
    pub reference: ExcitationSpec,
    pub hp: HyperParams,
    pub kalman: KalmanTuning,
    pub controller: ControllerSpec,
    pub duration: f64,
    /// Standard deviation of the additive position-measurement noise, rad.
    pub noise_std: f64,
    pub seed: u64,
    /// Reference weights θ* for the Lyapunov monitor; the initial weights
    /// when absent.
    pub theta_ref: Option<DVector<f64>>,
    /// Steps below `ν0/α` before the over-parameterization flag may rise.
    pub region_window: usize,
}

/// One logged step of the loop, at `t = k dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
    pub tau: DVector<f64>,
    pub q_meas: DVector<f64>,
    pub filtered: Regressors,
    pub reference: Reference,
    pub e1: DVector<f64>,
    pub e2: DVector<f64>,
    pub e3: DVector<f64>,
    pub e4: DVector<f64>,
    pub eps_norm: f64,
    pub e_mod_norm: f64,
    pub gate: bool,
    pub weights_changed: bool,
    /// Euclidean norm of the weight change applied at this step.
    pub step_size: f64,
    pub v: f64,
    pub dv: f64,
    pub region: Region,
    pub band_penalty: f64,
    /// `(‖W^h‖, ‖W^o‖)` for M, C, G.
    pub block_norms: [(f64, f64); 3],
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub initial: NetworkBundle,
    pub nets: NetworkBundle,
}

impl RunLog {
    pub fn fallback_count(&self) -> usize {
        self.records.iter().filter(|r| r.fallback).count()
    }
}

/// Step-by-step driver of the closed identification loop.
///
/// Each step integrates the plant over one sampling interval under the
/// torque chosen at the previous step, then measures, filters, learns and
/// chooses the next torque. The learning sample pairs the filtered
/// regressors with the torque that produced the measured motion.
#[derive(Debug)]
pub struct IdentificationLoop<'a> {
    plant: &'a PlantModel,
    setup: &'a LoopSetup,
    initial: NetworkBundle,
    nets: NetworkBundle,
    state: PlantState,
    filters: JointFilterBank,
    e_mod: DVector<f64>,
    filter: ModifiedErrorFilter,
    monitor: LyapunovMonitor,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    tau: DVector<f64>,
    step: usize,
    n_steps: usize,
}

impl<'a> IdentificationLoop<'a> {
    pub fn new(plant: &'a PlantModel, nets: NetworkBundle, setup: &'a LoopSetup) -> Result<Self> {
        plant.validate()?;
        nets.validate()?;
        validate_hyperparams(&setup.hp).map_err(|r| Error::config(r.to_string()))?;
        setup.kalman.validate()?;
        let n = plant.dof();
        if nets.dof() != n || setup.reference.dof() != n {
            return Err(Error::Shape(format!(
                "plant has {n} joints, networks {}, reference {}",
                nets.dof(),
                setup.reference.dof()
            )));
        }
        setup.controller.gains.validate(n)?;
        if !(setup.duration >= 0.0 && setup.duration.is_finite()) {
            return Err(Error::config("duration must be non-negative"));
        }
        if !(setup.noise_std >= 0.0 && setup.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        let dt = setup.hp.dt;
        let start = excitation_reference(0.0, &setup.reference);
        let state = PlantState::at_rest(start.q.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        rng.set_stream(1);
        let noise = (setup.noise_std > 0.0).then(|| Normal::new(0.0, setup.noise_std).expect("finite std"));
        let theta_ref = setup.theta_ref.clone().unwrap_or_else(|| nets.flatten());
        if theta_ref.len() != nets.n_params() {
            return Err(Error::Shape("theta_ref length does not match the networks".into()));
        }
        let mut this = Self {
            plant,
            setup,
            initial: nets.clone(),
            nets,
            filters: JointFilterBank::new(&state.q, &setup.kalman),
            state,
            e_mod: DVector::zeros(StackLayout::new(n).len()),
            filter: ModifiedErrorFilter::new(setup.hp.alpha, dt)?,
            monitor: LyapunovMonitor::new(theta_ref, setup.region_window),
            noise,
            rng,
            tau: DVector::zeros(n),
            step: 0,
            n_steps: (setup.duration / dt).round() as usize,
        };
        let q0 = this.measure();
        let regs = this.filters.step(&q0, 0.0);
        this.tau = this.control(0.0, &regs)?.0;
        Ok(this)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.n_steps
    }

    pub fn nets(&self) -> &NetworkBundle {
        &self.nets
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    fn measure(&mut self) -> DVector<f64> {
        let mut q = self.state.q.clone();
        if let Some(noise) = &self.noise {
            for x in q.iter_mut() {
                *x += noise.sample(&mut self.rng);
            }
        }
        q
    }

    fn control(&self, t: f64, regs: &Regressors) -> Result<(DVector<f64>, bool, Reference)> {
        let reference = excitation_reference(t, &self.setup.reference);
        let gains = &self.setup.controller.gains;
        let (tau, fallback) = match self.setup.controller.kind {
            ControllerKind::Proportional => {
                (proportional_controller(&regs.q, &reference.q, &gains.kp()), false)
            }
            ControllerKind::Pd => (pd_controller(&regs.q, &regs.qdot, &reference.q, &reference.qdot, gains), false),
            ControllerKind::Nnidc => {
                let est = self.nets.assemble_terms(&regs.q, &regs.qdot)?;
                let out = nnidc_controller(&regs.q, &regs.qdot, &reference, gains, &est);
                (out.tau, out.fallback)
            }
        };
        Ok((tau, fallback, reference))
    }

    fn divergence(&self, reason: impl std::fmt::Display) -> Error {
        let reason = reason.to_string();
        Error::Divergence {
            step: self.step,
            t: self.step as f64 * self.setup.hp.dt,
            reason,
        }
    }

    fn fail(&self, e: Error) -> Error {
        match e {
            Error::Divergence { reason, .. } => self.divergence(reason),
            other => self.divergence(other),
        }
    }

    /// Advances one sampling interval. Failures are reported as
    /// [`Error::Divergence`] carrying the offending step index.
    pub fn step(&mut self) -> Result<StepRecord> {
        let hp = &self.setup.hp;
        let dt = hp.dt;
        self.step += 1;
        let t = self.step as f64 * dt;
        let applied = self.tau.clone();
        self.state = integrate_step(self.plant, &self.state, |_, _, _| applied.clone(), dt)
            .map_err(|e| self.fail(e))?;
        self.state.t = t;

        let q_meas = self.measure();
        let regs = self.filters.step(&q_meas, dt);
        let sample = MotionSample {
            t,
            q: regs.q.clone(),
            qdot: regs.qdot.clone(),
            qddot: regs.qddot.clone(),
            tau: applied,
        };
        let res = evaluate_residuals(&self.nets, &sample, hp).map_err(|e| self.fail(e))?;
        if res.eps.iter().any(|x| !x.is_finite()) {
            return Err(self.divergence("non-finite stacked error"));
        }
        self.e_mod = self.filter.step(&self.e_mod, &res.eps);
        let gate = dead_zone_gate(&self.e_mod, hp);
        let next = if gate {
            let jac = residual_jacobian(&self.nets, &sample, hp).map_err(|e| self.fail(e))?;
            update_step(&self.nets, &res.eps, &jac, hp, gate).map_err(|e| self.fail(e))?
        } else {
            update_step(&self.nets, &res.eps, &empty_jacobian(), hp, gate)?
        };
        let weights_changed = next != self.nets;
        let step_size = if weights_changed { (next.flatten() - self.nets.flatten()).norm() } else { 0.0 };
        self.nets = next;
        let report = self.monitor.report(&self.e_mod, &self.nets, hp);

        let (tau, fallback, reference) = self.control(t, &regs).map_err(|e| self.fail(e))?;
        if tau.iter().any(|x| !x.is_finite()) {
            return Err(self.divergence("non-finite control torque"));
        }
        let qddot = forward_dynamics(self.plant, &self.state, &tau).map_err(|e| self.fail(e))?;
        self.tau = tau.clone();

        Ok(StepRecord {
            t,
            q: self.state.q.clone(),
            qdot: self.state.qdot.clone(),
            qddot,
            tau,
            q_meas,
            filtered: regs,
            reference,
            e1: res.e1,
            e2: res.e2,
            e3: res.e3,
            e4: res.e4,
            eps_norm: res.eps.norm(),
            e_mod_norm: self.e_mod.norm(),
            gate,
            weights_changed,
            step_size,
            v: report.v,
            dv: report.dv_estimate,
            region: report.region,
            band_penalty: res.band_penalty,
            block_norms: self.nets.block_norms(),
            fallback,
        })
    }

    pub fn finish(self, records: Vec<StepRecord>) -> RunLog {
        RunLog { records, initial: self.initial, nets: self.nets }
    }
}

fn empty_jacobian() -> crate::learner::ResidualJacobian {
    let empty = crate::network::WeightJacobian {
        output: DMatrix::zeros(0, 0),
        hidden: DMatrix::zeros(0, 0),
    };
    crate::learner::ResidualJacobian {
        inertia: empty.clone(),
        coriolis: empty.clone(),
        gravity: empty,
    }
}

/// Runs the closed identification loop for `setup.duration`.
pub fn run_identification_loop(plant: &PlantModel, nets: NetworkBundle, setup: &LoopSetup) -> Result<RunLog> {
    let mut lp = IdentificationLoop::new(plant, nets, setup)?;
    let mut records = Vec::with_capacity(lp.n_steps());
    while !lp.is_done() {
        records.push(lp.step()?);
    }
    Ok(lp.finish(records))
}

/// Simulates the plant under PD tracking of `reference` with exact state
/// feedback and returns the logged motion and torque at every step.
pub fn collect_dataset(
    plant: &PlantModel,
    reference: &ExcitationSpec,
    gains: &PdGains,
    duration: f64,
    dt: f64,
) -> Result<Vec<MotionSample>> {
    gains.validate(plant.dof())?;
    let start = excitation_reference(0.0, reference);
    let mut state = PlantState::new(start.q, start.qdot);
    let n_steps = (duration / dt).round() as usize;
    let mut out = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let r = excitation_reference(t, reference);
        let tau = pd_controller(&state.q, &state.qdot, &r.q, &r.qdot, gains);
        let qddot = forward_dynamics(plant, &state, &tau)?;
        out.push(MotionSample { t, q: state.q.clone(), qdot: state.qdot.clone(), qddot, tau: tau.clone() });
        state = integrate_step(plant, &state, |_, _, _| tau.clone(), dt)?;
        state.t = (k + 1) as f64 * dt;
    }
    Ok(out)
}

/// Batch least-squares fit of all output-layer weights, hidden layers held
/// fixed, to the stacked error without its inertia-bound block.
///
/// With the hidden layers fixed the torque and skew-symmetry residuals are
/// affine in the output weights, so this is a ridge regression on the rows
/// of the residual Jacobian. Samples at `t = 0` are skipped.
pub fn prefit_output_weights(
    nets: &NetworkBundle,
    samples: &[MotionSample],
    hp: &HyperParams,
    ridge: f64,
) -> Result<NetworkBundle> {
    let usable: Vec<&MotionSample> = samples.iter().filter(|s| s.t > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::config("pre-fit needs at least one sample after t = 0"));
    }
    let n = nets.dof();
    let rows = StackLayout::new(n).offsets()[3];
    let widths: Vec<usize> = Term::ALL.iter().map(|&t| nets.subnet(t).n_output_params()).collect();
    let p: usize = widths.iter().sum();
    let w0 = DVector::from_iterator(
        p,
        Term::ALL.iter().flat_map(|&t| {
            let o = &nets.subnet(t).output;
            (0..o.nrows()).flat_map(move |r| (0..o.ncols()).map(move |c| o[(r, c)]))
        }),
    );
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut atb = DVector::<f64>::zeros(p);
    let mut a = DMatrix::<f64>::zeros(rows, p);
    for s in usable {
        let res = evaluate_residuals(nets, s, hp)?;
        let jac = residual_jacobian(nets, s, hp)?;
        let mut col = 0;
        for (&t, w) in Term::ALL.iter().zip(&widths) {
            a.columns_mut(col, *w).copy_from(&jac.get(t).output.rows(0, rows));
            col += w;
        }
        let b = &a * &w0 - res.eps.rows(0, rows);
        ata += a.tr_mul(&a);
        atb += a.tr_mul(&b);
    }
    let scale = ata.diagonal().amax().max(1.0);
    for i in 0..p {
        ata[(i, i)] += ridge * scale;
    }
    let theta = ata
        .cholesky()
        .ok_or_else(|| Error::Config("pre-fit normal equations are singular; increase ridge".into()))?
        .solve(&atb);
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pre-fit solution"));
    }
    let mut fitted = nets.clone();
    let mut col = 0;
    for (&t, w) in Term::ALL.iter().zip(&widths) {
        let sub = fitted.subnet_mut(t);
        let rows = sub.output.nrows();
        let cols = sub.output.ncols();
        let mut m = DMatrix::zeros(rows, cols);
        fill_row_major(&mut m, &theta.as_slice()[col..col + w]);
        sub.output = m;
        col += w;
    }
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::LearningRates;
    use crate::network::{Activation, HiddenSizes, InitSpec};
    use crate::plant::ground_truth_terms;
    use crate::residuals::LagrangianWeights;
    use rand::Rng;

    fn rv(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0))
    }

    fn est(mass: DMatrix<f64>, coriolis: DMatrix<f64>, gravity: DVector<f64>) -> TermsEstimate {
        let n = gravity.len();
        TermsEstimate { mass, coriolis, gravity, q: DVector::zeros(n), qdot: DVector::zeros(n) }
    }

    #[test]
    fn proportional_cases() {
        let q = DVector::from_vec(vec![0.3, -0.2]);
        assert_eq!(proportional_controller(&q, &q, &DVector::from_element(2, 5.0)), DVector::zeros(2));
        let tau = proportional_controller(&DVector::zeros(2), &DVector::from_element(2, 1.0), &DVector::from_element(2, 2.0));
        assert_eq!(tau, DVector::from_element(2, 2.0));
    }

    #[test]
    fn pd_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let g = PdGains { kp: vec![3.0, 7.0], kd: vec![0.5, 1.5] };
        let z = DVector::zeros(2);
        assert_eq!(pd_controller(&z, &z, &z, &z, &g), z);
        for _ in 0..20 {
            let (q, qd, qr, qdr) = (rv(&mut r, 2), rv(&mut r, 2), rv(&mut r, 2), rv(&mut r, 2));
            let tau = pd_controller(&q, &qd, &qr, &qdr, &g);
            for i in 0..2 {
                let want = g.kp[i] * (qr[i] - q[i]) + g.kd[i] * (qdr[i] - qd[i]);
                assert!((tau[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nnidc_identity_compensation_is_pd_plus_feedforward() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let g = PdGains { kp: vec![30.0, 20.0], kd: vec![5.0, 4.0] };
        let e = est(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DVector::zeros(2));
        for _ in 0..20 {
            let (q, qd) = (rv(&mut r, 2), rv(&mut r, 2));
            let reference = Reference { q: rv(&mut r, 2), qdot: rv(&mut r, 2), qddot: rv(&mut r, 2) };
            let out = nnidc_controller(&q, &qd, &reference, &g, &e);
            let want = pd_controller(&q, &qd, &reference.q, &reference.qdot, &g) + &reference.qddot;
            assert!(!out.fallback);
            assert!((out.tau - want).amax() < 1e-12);
        }
    }

    #[test]
    fn nnidc_falls_back_on_singular_inertia() {
        let g = PdGains::uniform(2, 10.0, 1.0);
        let e = est(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), DMatrix::zeros(2, 2), DVector::zeros(2));
        let q = DVector::from_vec(vec![0.1, 0.2]);
        let reference = Reference { q: DVector::zeros(2), qdot: DVector::zeros(2), qddot: DVector::from_element(2, 9.0) };
        let out = nnidc_controller(&q, &q, &reference, &g, &e);
        assert!(out.fallback);
        assert_eq!(out.tau, pd_controller(&q, &q, &reference.q, &reference.qdot, &g));
    }

    #[test]
    fn controllers_are_pure() {
        let g = PdGains::uniform(2, 10.0, 1.0);
        let e = est(DMatrix::identity(2, 2) * 0.3, DMatrix::identity(2, 2), DVector::from_element(2, 2.0));
        let q = DVector::from_vec(vec![0.1, 0.2]);
        let reference = excitation_reference(0.4, &ExcitationSpec::default_for(2));
        let a = nnidc_controller(&q, &q, &reference, &g, &e);
        let b = nnidc_controller(&q, &q, &reference, &g, &e);
        assert_eq!(a, b);
    }

    #[test]
    fn gravity_compensation_holds_equilibrium() {
        let plant = PlantModel::two_link();
        let q = DVector::from_vec(vec![0.4, -0.3]);
        let z = DVector::zeros(2);
        let truth = ground_truth_terms(&plant, &q, &z).unwrap();
        let e = est(truth.mass, truth.coriolis, truth.gravity.clone());
        let reference = Reference { q: q.clone(), qdot: z.clone(), qddot: z.clone() };
        let g = PdGains::uniform(2, 10.0, 2.0);
        let out = nnidc_controller(&q, &z, &reference, &g, &e);
        assert!((&out.tau - &truth.gravity).amax() < 1e-15);
        let mut state = PlantState::at_rest(q.clone());
        for _ in 0..200 {
            state = integrate_step(&plant, &state, |_, _, _| out.tau.clone(), 1e-3).unwrap();
        }
        assert!((&state.q - &q).amax() < 1e-12);
    }

    fn exact_idc_error(plant: &PlantModel, gains: &PdGains, q0: DVector<f64>, dt: f64, steps: usize) -> Vec<DVector<f64>> {
        let target = DVector::zeros(plant.dof());
        let reference = Reference { q: target.clone(), qdot: target.clone(), qddot: target.clone() };
        let mut state = PlantState::at_rest(q0);
        let mut errs = vec![];
        for _ in 0..steps {
            errs.push(&reference.q - &state.q);
            state = integrate_step(
                plant,
                &state,
                |_, q, qd| {
                    let t = ground_truth_terms(plant, q, qd).unwrap();
                    nnidc_controller(q, qd, &reference, gains, &est(t.mass, t.coriolis, t.gravity)).tau
                },
                dt,
            )
            .unwrap();
        }
        errs
    }

    #[test]
    fn exact_idc_settles_at_designed_rate() {
        // Critically damped ë + 2ω ė + ω² e = 0 from rest: e(t) = e0 (1 + ωt) e^{-ωt}.
        let omega: f64 = 10.0;
        let gains = PdGains::uniform(2, omega * omega, 2.0 * omega);
        let dt = 1e-3;
        let e0 = 0.5;
        let errs = exact_idc_error(&PlantModel::two_link(), &gains, DVector::from_element(2, -e0), dt, 2000);
        let analytic = |t: f64| (1.0 + omega * t) * (-omega * t).exp();
        let settle_analytic = {
            let mut t = 0.0;
            while analytic(t) > 0.01 {
                t += 1e-5;
            }
            t
        };
        for j in 0..2 {
            let last_above = errs.iter().rposition(|e| (e[j] / e0).abs() > 0.01).unwrap();
            let settle = (last_above + 1) as f64 * dt;
            assert!((settle - settle_analytic).abs() <= 0.1 * settle_analytic, "{settle} vs {settle_analytic}");
            for (k, e) in errs.iter().enumerate() {
                assert!((e[j] / e0 - analytic(k as f64 * dt)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gravity_compensation_reduces_steady_state_error() {
        let plant = PlantModel::two_link();
        let gains = PdGains::uniform(2, 40.0, 6.0);
        let q_ref = DVector::from_vec(vec![-0.5, 0.6]);
        let reference = Reference { q: q_ref.clone(), qdot: DVector::zeros(2), qddot: DVector::zeros(2) };
        let settle = |compensate: bool| {
            let mut state = PlantState::at_rest(DVector::zeros(2));
            for _ in 0..8000 {
                state = integrate_step(
                    &plant,
                    &state,
                    |_, q, qd| {
                        if compensate {
                            let e = est(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), plant.gravity_vector(q));
                            nnidc_controller(q, qd, &reference, &gains, &e).tau
                        } else {
                            pd_controller(q, qd, &reference.q, &reference.qdot, &gains)
                        }
                    },
                    1e-3,
                )
                .unwrap();
            }
            (&q_ref - &state.q).abs()
        };
        let (pd, comp) = (settle(false), settle(true));
        for j in 0..2 {
            assert!(comp[j] < pd[j], "joint {j}: {} vs {}", comp[j], pd[j]);
        }
    }

    fn small_nets(seed: u64) -> NetworkBundle {
        NetworkBundle::initialize(
            2,
            HiddenSizes { inertia: 4, coriolis: 4, gravity: 4 },
            Activation::Tanh,
            &InitSpec { seed, scale: 0.1, inertia_diagonal: 0.5 },
            &excitation_reference(0.0, &ExcitationSpec::default_for(2)).q,
        )
        .unwrap()
    }

    fn setup(duration: f64) -> LoopSetup {
        LoopSetup {
            reference: ExcitationSpec::default_for(2),
            hp: HyperParams::default(),
            kalman: KalmanTuning::default(),
            controller: ControllerSpec { kind: ControllerKind::Pd, gains: PdGains { kp: vec![40.0, 10.0], kd: vec![4.0, 0.8] } },
            duration,
            noise_std: 0.0,
            seed: 3,
            theta_ref: None,
            region_window: 100,
        }
    }

    #[test]
    fn zero_duration_is_empty() {
        let s = setup(0.0);
        let nets = small_nets(4);
        let log = run_identification_loop(&PlantModel::two_link(), nets.clone(), &s).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(log.nets, nets);
    }

    #[test]
    fn zero_rates_match_frozen_replay() {
        let mut s = setup(0.3);
        s.hp.rates = LearningRates::uniform(0.0);
        let nets = small_nets(5);
        let plant = PlantModel::two_link();
        let log = run_identification_loop(&plant, nets.clone(), &s).unwrap();
        assert_eq!(log.nets, nets);
        for (k, r) in log.records.iter().enumerate() {
            assert!(!r.weights_changed);
            let tau_prev = if k == 0 {
                let start = excitation_reference(0.0, &s.reference);
                pd_controller(&start.q, &DVector::zeros(2), &start.q, &start.qdot, &s.controller.gains)
            } else {
                log.records[k - 1].tau.clone()
            };
            let sample = MotionSample {
                t: r.t,
                q: r.filtered.q.clone(),
                qdot: r.filtered.qdot.clone(),
                qddot: r.filtered.qddot.clone(),
                tau: tau_prev,
            };
            let replay = evaluate_residuals(&nets, &sample, &s.hp).unwrap();
            assert_eq!(replay.e1, r.e1);
        }
    }

    #[test]
    fn frozen_steps_keep_weights() {
        let mut s = setup(0.5);
        s.hp.nu0 = 5.0;
        let log = run_identification_loop(&PlantModel::two_link(), small_nets(6), &s).unwrap();
        assert!(log.records.iter().any(|r| !r.gate));
        for r in &log.records {
            if !r.gate {
                assert!(!r.weights_changed);
            }
        }
    }

    #[test]
    fn divergence_reports_step() {
        let mut s = setup(1.0);
        s.hp.rates = LearningRates::uniform(1e9);
        s.hp.nu0 = 0.0;
        match run_identification_loop(&PlantModel::two_link(), small_nets(7), &s) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|l| l.records.len())),
        }
    }

    #[test]
    fn prefit_recovers_representable_torque() {
        let plant = PlantModel::two_link();
        let truth_nets = small_nets(8);
        let reference = ExcitationSpec::default_for(2);
        let mut samples = collect_dataset(&plant, &reference, &PdGains::uniform(2, 60.0, 8.0), 3.0, 1e-3).unwrap();
        for s in samples.iter_mut() {
            s.tau = truth_nets.predicted_torque(&s.q, &s.qdot, &s.qddot).unwrap();
        }
        let mut start = truth_nets.clone();
        for t in Term::ALL {
            start.subnet_mut(t).output.fill(0.0);
        }
        let torque_only = HyperParams {
            lagrangian: LagrangianWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 },
            ..Default::default()
        };
        let fitted = prefit_output_weights(&start, &samples, &torque_only, 1e-12).unwrap();
        for s in samples.iter().skip(1).step_by(97) {
            let a = fitted.predicted_torque(&s.q, &s.qdot, &s.qddot).unwrap();
            let err = (a - &s.tau).amax() / s.tau.amax().max(1.0);
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn prefit_structural_rows_reduce_skew_residuals() {
        let plant = PlantModel::two_link();
        let reference = ExcitationSpec::default_for(2);
        let samples = collect_dataset(&plant, &reference, &PdGains { kp: vec![40.0, 10.0], kd: vec![4.0, 0.8] }, 5.0, 1e-3)
            .unwrap();
        let start = small_nets(9);
        let full = HyperParams::default();
        let torque_only = HyperParams {
            lagrangian: LagrangianWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 },
            ..full
        };
        let skew = |nets: &NetworkBundle| -> f64 {
            samples
                .iter()
                .skip(1)
                .step_by(10)
                .map(|s| {
                    let r = evaluate_residuals(nets, s, &full).unwrap();
                    r.e2.norm_squared() + r.e3.norm_squared()
                })
                .sum()
        };
        let a = prefit_output_weights(&start, &samples, &full, 1e-10).unwrap();
        let b = prefit_output_weights(&start, &samples, &torque_only, 1e-10).unwrap();
        assert!(skew(&a) < 0.5 * skew(&b), "{} vs {}", skew(&a), skew(&b));
    }
}
