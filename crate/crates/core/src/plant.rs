//! Analytic serial-manipulator plant used as ground truth for identification.
//!
//! The kinetic energy of every link is modeled as a point mass at the link's
//! center of mass plus a rotational inertia about the joint axes. The inertia
//! matrix and its partial derivatives follow from the center-of-mass
//! Jacobians, the Coriolis matrix is built from Christoffel symbols of the
//! first kind, and gravity is the gradient of the potential energy. With this
//! construction `Ṁ - 2C` is skew-symmetric for every state.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition number above which the inertia matrix is treated as singular.
pub const MAX_INERTIA_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// N revolute links moving in a vertical plane, all axes parallel and
    /// horizontal.
    Planar,
    /// Base yaw joint followed by shoulder and elbow pitch joints (3 DOF).
    Anthropomorphic,
}

/// Kinematic and inertial parameters of the simulated manipulator.
///
/// For [`Geometry::Anthropomorphic`] the first link is the vertical base
/// column: its length is the shoulder height and its inertia acts about the
/// vertical axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantModel {
    pub geometry: Geometry,
    /// Link masses, kg.
    pub masses: Vec<f64>,
    /// Link lengths, m.
    pub lengths: Vec<f64>,
    /// Distance from the proximal joint to the link center of mass, m.
    pub com_offsets: Vec<f64>,
    /// Rotational inertia of each link about its joint axis through the
    /// center of mass, kg·m².
    pub inertias: Vec<f64>,
    /// Gravitational acceleration, m/s².
    pub gravity: f64,
    /// Viscous friction per joint, N·m·s/rad.
    #[serde(default)]
    pub friction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>) -> Self {
        Self { q, qdot, t: 0.0 }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self::new(q, DVector::zeros(n))
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && all_finite(&self.q) && all_finite(&self.qdot)
    }
}

/// One sampled record of joint motion and applied torque.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
    pub tau: DVector<f64>,
}

impl MotionSample {
    pub fn dof(&self) -> usize {
        self.q.len()
    }
}

/// Inertia, Coriolis and gravity terms of the equations of motion at a state.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicTerms {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub gravity: DVector<f64>,
}

/// Center-of-mass kinematics of one link.
struct ComPoint {
    mass: f64,
    height: f64,
    /// 3 × N linear-velocity Jacobian.
    jac: DMatrix<f64>,
    /// `djac[k] = ∂jac/∂q_k`.
    djac: Vec<DMatrix<f64>>,
}

impl Default for PlantModel {
    fn default() -> Self {
        Self::two_link()
    }
}

impl PlantModel {
    /// Two-link arm in a vertical plane with uniform-rod links.
    pub fn two_link() -> Self {
        let masses = vec![1.0, 0.8];
        let lengths = vec![0.5, 0.4];
        Self {
            geometry: Geometry::Planar,
            com_offsets: lengths.iter().map(|l| 0.5 * l).collect(),
            inertias: masses
                .iter()
                .zip(&lengths)
                .map(|(m, l)| m * l * l / 12.0)
                .collect(),
            masses,
            lengths,
            gravity: 9.81,
            friction: vec![0.0; 2],
        }
    }

    /// Three-joint yaw/pitch/pitch arm with the proportions of a desktop
    /// haptic device scaled up to tabletop size.
    pub fn three_dof() -> Self {
        Self {
            geometry: Geometry::Anthropomorphic,
            masses: vec![1.2, 0.9, 0.6],
            lengths: vec![0.3, 0.45, 0.4],
            com_offsets: vec![0.15, 0.225, 0.2],
            inertias: vec![0.02, 0.9 * 0.45 * 0.45 / 12.0, 0.6 * 0.4 * 0.4 / 12.0],
            gravity: 9.81,
            friction: vec![0.0; 3],
        }
    }

    pub fn dof(&self) -> usize {
        self.masses.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n == 0 {
            return Err(Error::config("plant needs at least one link"));
        }
        if self.geometry == Geometry::Anthropomorphic && n != 3 {
            return Err(Error::config("anthropomorphic plant has exactly 3 links"));
        }
        for (name, v) in [
            ("lengths", &self.lengths),
            ("com_offsets", &self.com_offsets),
            ("inertias", &self.inertias),
        ] {
            if v.len() != n {
                return Err(Error::config(format!(
                    "plant.{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
        }
        if !self.friction.is_empty() && self.friction.len() != n {
            return Err(Error::config(format!(
                "plant.friction has {} entries, expected {n}",
                self.friction.len()
            )));
        }
        if self.masses.iter().chain(&self.lengths).any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::config("link masses and lengths must be positive"));
        }
        if self
            .com_offsets
            .iter()
            .chain(&self.inertias)
            .chain(&self.friction)
            .any(|&x| !(x >= 0.0 && x.is_finite()))
        {
            return Err(Error::config(
                "com offsets, inertias and friction must be non-negative",
            ));
        }
        if !(self.gravity >= 0.0 && self.gravity.is_finite()) {
            return Err(Error::config("gravity must be non-negative"));
        }
        Ok(())
    }

    fn friction_at(&self, i: usize) -> f64 {
        self.friction.get(i).copied().unwrap_or(0.0)
    }

    /// Constant part of the inertia matrix from link rotational inertias.
    fn rotational_inertia(&self) -> DMatrix<f64> {
        let n = self.dof();
        let mut m = DMatrix::zeros(n, n);
        match self.geometry {
            Geometry::Planar => {
                // Link i spins at q̇_0 + ... + q̇_i.
                for (i, inertia) in self.inertias.iter().enumerate() {
                    for a in 0..=i {
                        for b in 0..=i {
                            m[(a, b)] += inertia;
                        }
                    }
                }
            }
            Geometry::Anthropomorphic => {
                m[(0, 0)] += self.inertias[0];
                m[(1, 1)] += self.inertias[1];
                for a in 1..3 {
                    for b in 1..3 {
                        m[(a, b)] += self.inertias[2];
                    }
                }
            }
        }
        m
    }

    fn com_points(&self, q: &DVector<f64>) -> Vec<ComPoint> {
        match self.geometry {
            Geometry::Planar => self.planar_points(q),
            Geometry::Anthropomorphic => self.anthropomorphic_points(q),
        }
    }

    fn planar_points(&self, q: &DVector<f64>) -> Vec<ComPoint> {
        let n = self.dof();
        let chain = PlanarChain::new(q.as_slice(), &self.lengths, &self.com_offsets);
        (0..n)
            .map(|i| {
                let mut jac = DMatrix::zeros(3, n);
                let mut djac = vec![DMatrix::zeros(3, n); n];
                for k in 0..n {
                    let (dr, dz) = chain.first(i, k);
                    jac[(0, k)] = dr;
                    jac[(2, k)] = dz;
                    for (m, dj) in djac.iter_mut().enumerate() {
                        let (ddr, ddz) = chain.second(i, k, m);
                        dj[(0, k)] = ddr;
                        dj[(2, k)] = ddz;
                    }
                }
                ComPoint {
                    mass: self.masses[i],
                    height: chain.position(i).1,
                    jac,
                    djac,
                }
            })
            .collect()
    }

    fn anthropomorphic_points(&self, q: &DVector<f64>) -> Vec<ComPoint> {
        let (s1, c1) = q[0].sin_cos();
        let chain = PlanarChain::new(&q.as_slice()[1..], &self.lengths[1..], &self.com_offsets[1..]);
        let mut points = vec![ComPoint {
            mass: self.masses[0],
            height: self.com_offsets[0],
            jac: DMatrix::zeros(3, 3),
            djac: vec![DMatrix::zeros(3, 3); 3],
        }];
        for i in 0..2 {
            let (r, z) = chain.position(i);
            let mut jac = DMatrix::zeros(3, 3);
            let mut djac = vec![DMatrix::zeros(3, 3); 3];
            jac.set_column(0, &Vector3::new(-r * s1, r * c1, 0.0));
            djac[0].set_column(0, &Vector3::new(-r * c1, -r * s1, 0.0));
            for k in 0..2 {
                let (rk, zk) = chain.first(i, k);
                jac.set_column(k + 1, &Vector3::new(rk * c1, rk * s1, zk));
                let cross = Vector3::new(-rk * s1, rk * c1, 0.0);
                djac[k + 1].set_column(0, &cross);
                djac[0].set_column(k + 1, &cross);
                for m in 0..2 {
                    let (rkm, zkm) = chain.second(i, k, m);
                    djac[m + 1].set_column(k + 1, &Vector3::new(rkm * c1, rkm * s1, zkm));
                }
            }
            points.push(ComPoint {
                mass: self.masses[i + 1],
                height: self.lengths[0] + z,
                jac,
                djac,
            });
        }
        points
    }

    /// Inertia matrix `M(q)`.
    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.rotational_inertia();
        for p in self.com_points(q) {
            m += p.jac.transpose() * &p.jac * p.mass;
        }
        m
    }

    /// Partial derivatives `∂M/∂q_k`, one matrix per joint.
    pub fn mass_matrix_partials(&self, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = self.dof();
        let mut out = vec![DMatrix::zeros(n, n); n];
        for p in self.com_points(q) {
            for (k, dm) in out.iter_mut().enumerate() {
                let cross = p.djac[k].transpose() * &p.jac;
                *dm += (&cross + cross.transpose()) * p.mass;
            }
        }
        out
    }

    /// Gravity torque vector `G(q) = ∂U/∂q`.
    pub fn gravity_vector(&self, q: &DVector<f64>) -> DVector<f64> {
        let n = self.dof();
        let mut g = DVector::zeros(n);
        for p in self.com_points(q) {
            for k in 0..n {
                g[k] += p.mass * self.gravity * p.jac[(2, k)];
            }
        }
        g
    }

    pub fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        self.com_points(q)
            .iter()
            .map(|p| p.mass * self.gravity * p.height)
            .sum()
    }

    pub fn kinetic_energy(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> f64 {
        0.5 * qdot.dot(&(self.mass_matrix(q) * qdot))
    }

    pub fn total_energy(&self, state: &PlantState) -> f64 {
        self.kinetic_energy(&state.q, &state.qdot) + self.potential_energy(&state.q)
    }

    /// Coriolis/centrifugal matrix from Christoffel symbols,
    /// `C_kj = Σ_i ½(∂M_kj/∂q_i + ∂M_ki/∂q_j - ∂M_ij/∂q_k) q̇_i`.
    pub fn coriolis_matrix(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let dm = self.mass_matrix_partials(q);
        DMatrix::from_fn(n, n, |k, j| {
            (0..n)
                .map(|i| 0.5 * (dm[i][(k, j)] + dm[j][(k, i)] - dm[k][(i, j)]) * qdot[i])
                .sum()
        })
    }

    /// Tip-position Jacobian (3 × N). Kept for bookkeeping of task-space
    /// forces; identification runs entirely in joint space.
    pub fn tip_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        match self.geometry {
            Geometry::Planar => {
                let chain = PlanarChain::new(q.as_slice(), &self.lengths, &self.lengths);
                let mut jac = DMatrix::zeros(3, n);
                for k in 0..n {
                    let (dr, dz) = chain.first(n - 1, k);
                    jac[(0, k)] = dr;
                    jac[(2, k)] = dz;
                }
                jac
            }
            Geometry::Anthropomorphic => {
                let (s1, c1) = q[0].sin_cos();
                let chain =
                    PlanarChain::new(&q.as_slice()[1..], &self.lengths[1..], &self.lengths[1..]);
                let (r, _) = chain.position(1);
                let mut jac = DMatrix::zeros(3, 3);
                jac.set_column(0, &Vector3::new(-r * s1, r * c1, 0.0));
                for k in 0..2 {
                    let (rk, zk) = chain.first(1, k);
                    jac.set_column(k + 1, &Vector3::new(rk * c1, rk * s1, zk));
                }
                jac
            }
        }
    }
}

/// Planar chain of links in the (r, z) plane, angles measured from the
/// horizontal and accumulated along the chain.
struct PlanarChain<'a> {
    lengths: &'a [f64],
    com: &'a [f64],
    sin: Vec<f64>,
    cos: Vec<f64>,
}

impl<'a> PlanarChain<'a> {
    fn new(q: &[f64], lengths: &'a [f64], com: &'a [f64]) -> Self {
        let mut phi = 0.0;
        let mut sin = Vec::with_capacity(q.len());
        let mut cos = Vec::with_capacity(q.len());
        for &qi in q {
            phi += qi;
            let (s, c) = phi.sin_cos();
            sin.push(s);
            cos.push(c);
        }
        Self { lengths, com, sin, cos }
    }

    /// Segments `(length, angle index)` leading to the COM of link `i`.
    fn segments(&self, i: usize) -> impl Iterator<Item = (f64, usize)> + '_ {
        (0..i)
            .map(|j| (self.lengths[j], j))
            .chain(std::iter::once((self.com[i], i)))
    }

    fn position(&self, i: usize) -> (f64, f64) {
        self.segments(i).fold((0.0, 0.0), |(r, z), (l, j)| {
            (r + l * self.cos[j], z + l * self.sin[j])
        })
    }

    /// `∂(r, z)/∂q_k` for the COM of link `i`.
    fn first(&self, i: usize, k: usize) -> (f64, f64) {
        self.segments(i)
            .filter(|&(_, j)| j >= k)
            .fold((0.0, 0.0), |(r, z), (l, j)| {
                (r - l * self.sin[j], z + l * self.cos[j])
            })
    }

    /// `∂²(r, z)/∂q_k∂q_m` for the COM of link `i`.
    fn second(&self, i: usize, k: usize, m: usize) -> (f64, f64) {
        let lo = k.max(m);
        self.segments(i)
            .filter(|&(_, j)| j >= lo)
            .fold((0.0, 0.0), |(r, z), (l, j)| {
                (r - l * self.cos[j], z - l * self.sin[j])
            })
    }
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_input(model: &PlantModel, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<()> {
    let n = model.dof();
    if q.len() != n || qdot.len() != n {
        return Err(Error::Shape(format!(
            "state vectors have lengths {}/{}, plant has {n} joints",
            q.len(),
            qdot.len()
        )));
    }
    if !all_finite(q) || !all_finite(qdot) {
        return Err(Error::NonFinite("joint state"));
    }
    Ok(())
}

/// Ground-truth `(M, C, G)` at `(q, q̇)`.
pub fn ground_truth_terms(
    model: &PlantModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DynamicTerms> {
    check_input(model, q, qdot)?;
    Ok(DynamicTerms {
        mass: model.mass_matrix(q),
        coriolis: model.coriolis_matrix(q, qdot),
        gravity: model.gravity_vector(q),
    })
}

/// Joint accelerations `M⁻¹(τ - Cq̇ - G - Bq̇)`.
pub fn forward_dynamics(
    model: &PlantModel,
    state: &PlantState,
    tau: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_input(model, &state.q, &state.qdot)?;
    if tau.len() != model.dof() {
        return Err(Error::Shape(format!("torque has length {}", tau.len())));
    }
    if !all_finite(tau) {
        return Err(Error::NonFinite("joint torque"));
    }
    let terms = ground_truth_terms(model, &state.q, &state.qdot)?;
    let friction = DVector::from_fn(model.dof(), |i, _| model.friction_at(i) * state.qdot[i]);
    let rhs = tau - &terms.coriolis * &state.qdot - &terms.gravity - friction;

    let eig = terms.mass.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x.abs())));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > MAX_INERTIA_CONDITION {
        return Err(Error::IllConditioned { cond });
    }
    let chol = terms
        .mass
        .cholesky()
        .ok_or(Error::IllConditioned { cond })?;
    Ok(chol.solve(&rhs))
}

/// One classical fourth-order Runge-Kutta step of the joint dynamics.
///
/// `tau_fn(t, q, q̇)` is evaluated at every stage.
pub fn integrate_step<F>(
    model: &PlantModel,
    state: &PlantState,
    mut tau_fn: F,
    dt: f64,
) -> Result<PlantState>
where
    F: FnMut(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config(format!("integration step must be positive, got {dt}")));
    }
    let mut deriv = |t: f64, q: &DVector<f64>, qd: &DVector<f64>| -> Result<DVector<f64>> {
        let tau = tau_fn(t, q, qd);
        let s = PlantState { q: q.clone(), qdot: qd.clone(), t };
        forward_dynamics(model, &s, &tau)
    };
    let (t, q, v) = (state.t, &state.q, &state.qdot);
    let h = dt;

    let a1 = deriv(t, q, v)?;
    let q2 = q + v * (0.5 * h);
    let v2 = v + &a1 * (0.5 * h);
    let a2 = deriv(t + 0.5 * h, &q2, &v2)?;
    let q3 = q + &v2 * (0.5 * h);
    let v3 = v + &a2 * (0.5 * h);
    let a3 = deriv(t + 0.5 * h, &q3, &v3)?;
    let q4 = q + &v3 * h;
    let v4 = v + &a3 * h;
    let a4 = deriv(t + h, &q4, &v4)?;

    let next = PlantState {
        q: q + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0),
        qdot: v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0),
        t: t + h,
    };
    if !next.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            t: next.t,
            reason: "non-finite state after integration step".into(),
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic {
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointExcitation {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub harmonics: Vec<Harmonic>,
}

/// Per-joint sum-of-sinusoids reference.
///
/// The harmonic part fades in over `ramp_time` seconds through a quintic
/// blend, so the reference starts at rest on the offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSpec {
    /// s; zero disables the fade-in.
    #[serde(default)]
    pub ramp_time: f64,
    pub joints: Vec<JointExcitation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
}

impl ExcitationSpec {
    /// Default persistently exciting reference for `n` joints: two
    /// incommensurate tones per joint around a gravity-loaded pose.
    pub fn default_for(n: usize) -> Self {
        let joints = (0..n)
            .map(|i| {
                let k = i as f64;
                JointExcitation {
                    offset: if i == 0 { -0.6 } else { 0.4 },
                    harmonics: vec![
                        Harmonic { amplitude: 0.6, frequency: 0.22 + 0.08 * k, phase: 0.0 },
                        Harmonic { amplitude: 0.3, frequency: 0.58 + 0.12 * k, phase: 1.0 + k },
                    ],
                }
            })
            .collect();
        Self { ramp_time: 2.0, joints }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Per-joint `(min, max)` envelope of the position signal.
    pub fn envelope(&self) -> Vec<(f64, f64)> {
        self.joints
            .iter()
            .map(|j| {
                let a: f64 = j.harmonics.iter().map(|h| h.amplitude.abs()).sum();
                (j.offset - a, j.offset + a)
            })
            .collect()
    }

    /// Frequencies (Hz) injected on joint `i`.
    pub fn frequencies(&self, i: usize) -> Vec<f64> {
        self.joints[i].harmonics.iter().map(|h| h.frequency).collect()
    }
}

/// Reference position, velocity and acceleration at time `t`.
pub fn excitation_reference(t: f64, spec: &ExcitationSpec) -> Reference {
    let n = spec.dof();
    let mut r = Reference {
        q: DVector::zeros(n),
        qdot: DVector::zeros(n),
        qddot: DVector::zeros(n),
    };
    let (b, db, ddb) = fade_in(t, spec.ramp_time);
    for (i, joint) in spec.joints.iter().enumerate() {
        let (mut x, mut dx, mut ddx) = (0.0, 0.0, 0.0);
        for h in &joint.harmonics {
            let w = 2.0 * std::f64::consts::PI * h.frequency;
            let (s, c) = (w * t + h.phase).sin_cos();
            x += h.amplitude * s;
            dx += h.amplitude * w * c;
            ddx -= h.amplitude * w * w * s;
        }
        r.q[i] = joint.offset + b * x;
        r.qdot[i] = db * x + b * dx;
        r.qddot[i] = ddb * x + 2.0 * db * dx + b * ddx;
    }
    r
}

/// Quintic blend `10s³ - 15s⁴ + 6s⁵` and its first two time derivatives.
fn fade_in(t: f64, ramp: f64) -> (f64, f64, f64) {
    if !(ramp > 0.0) || t >= ramp {
        return (1.0, 0.0, 0.0);
    }
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = t / ramp;
    let b = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let db = 30.0 * s * s * (1.0 - s) * (1.0 - s) / ramp;
    let ddb = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (ramp * ramp);
    (b, db, ddb)
}
