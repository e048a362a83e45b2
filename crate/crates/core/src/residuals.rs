//! Torque residual, structural residuals on the estimated terms, the
//! weighted stacked error `ε` and its first-order filter `e`.
//!
//! Stacked layout for `N` joints:
//!
//! | block | length        | content                           |
//! |-------|---------------|-----------------------------------|
//! | e1    | N             | `τ - M̂q̈ - Ĉq̇ - Ĝ`                 |
//! | e2    | N             | `Ṁ̂_nn - 2Ĉ_nn`                    |
//! | e3    | (N²-N)/2      | `Ṁ̂_in + Ṁ̂_ni - 2(Ĉ_in + Ĉ_ni)`, i<n |
//! | e4    | N             | `|det(M̂ - λ_n I)|`                 |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TermsEstimate;
use crate::plant::MotionSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangianWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LagrangianWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.5,
            lambda2: 1.5,
            lambda3: 1.5,
        }
    }
}

impl LagrangianWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v > 1.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} violates lambda > 1")));
            }
        }
        Ok(())
    }
}

/// Block lengths of the stacked error for `n` joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackLayout {
    pub dof: usize,
}

impl StackLayout {
    pub fn new(dof: usize) -> Self {
        Self { dof }
    }

    pub fn pairs(&self) -> usize {
        (self.dof * self.dof - self.dof) / 2
    }

    pub fn len(&self) -> usize {
        3 * self.dof + self.pairs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start offsets of e1, e2, e3, e4.
    pub fn offsets(&self) -> [usize; 4] {
        let n = self.dof;
        [0, n, 2 * n, 2 * n + self.pairs()]
    }
}

/// Unordered joint pairs `(i, n)`, `i < n`, in lexicographic order.
pub fn offdiag_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |k| (i, k)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStack {
    pub e1: DVector<f64>,
    pub e2: DVector<f64>,
    pub e3: DVector<f64>,
    pub e4: DVector<f64>,
    /// Weighted stacked error `[e1; λ1 e2; λ2 e3; λ3 e4]`.
    pub eps: DVector<f64>,
    /// Filtered (modified) error, same length as `eps`.
    pub e_mod: DVector<f64>,
    /// Squared distance of `sym(M̂)`'s spectrum from the admissible band.
    /// Diagnostic only; not part of `eps`.
    pub band_penalty: f64,
}

/// `e1 = τ - M̂q̈ - Ĉq̇ - Ĝ`, row by row.
pub fn torque_error(sample: &MotionSample, est: &TermsEstimate) -> Result<DVector<f64>> {
    let n = est.dof();
    if sample.dof() != n || sample.tau.len() != n || sample.qddot.len() != n {
        return Err(Error::Shape(format!(
            "sample has {} joints, estimate has {n}",
            sample.dof()
        )));
    }
    Ok(DVector::from_fn(n, |r, _| {
        let mut e = sample.tau[r] - est.gravity[r];
        for k in 0..n {
            e -= est.mass[(r, k)] * sample.qddot[k] + est.coriolis[(r, k)] * sample.qdot[k];
        }
        e
    }))
}

/// `e2_n = (dM̂/dt)_nn - 2Ĉ_nn`.
pub fn skew_diag_error(mhat_rate: &DMatrix<f64>, chat: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(mhat_rate.nrows(), |n, _| {
        mhat_rate[(n, n)] - 2.0 * chat[(n, n)]
    })
}

/// `e3_m = (dM̂/dt)_in + (dM̂/dt)_ni - 2(Ĉ_in + Ĉ_ni)` over lexicographic
/// pairs `i < n`.
pub fn skew_offdiag_error(mhat_rate: &DMatrix<f64>, chat: &DMatrix<f64>) -> DVector<f64> {
    let n = mhat_rate.nrows();
    DVector::from_iterator(
        StackLayout::new(n).pairs(),
        offdiag_pairs(n).map(|(i, k)| {
            mhat_rate[(i, k)] + mhat_rate[(k, i)] - 2.0 * (chat[(i, k)] + chat[(k, i)])
        }),
    )
}

/// Eigenvalue band `[λ̲, λ̄]` the inertia matrix is expected to live in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InertiaBand {
    pub lower: f64,
    pub upper: f64,
}

impl InertiaBand {
    pub fn penalty(&self, eigenvalues: &[f64]) -> f64 {
        eigenvalues
            .iter()
            .map(|&l| (self.lower - l).max(0.0).powi(2) + (l - self.upper).max(0.0).powi(2))
            .sum()
    }
}

fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::Shape("inertia estimate is not square".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Eigen("inertia estimate has non-finite entries".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

fn e4_from_eigenvalues(m: &DMatrix<f64>, eig: &[f64], scale: f64) -> DVector<f64> {
    let n = m.nrows();
    DVector::from_fn(n, |k, _| {
        let shifted = m - DMatrix::identity(n, n) * (eig[k] * scale);
        shifted.determinant().abs()
    })
}

/// `exp(λ0 / t)`, the eigenvalue scale used by the inertia-bound error.
pub fn eigen_scale(t: f64, lambda0: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::config(format!("inertia-bound error needs t > 0, got {t}")));
    }
    Ok((lambda0 / t).exp())
}

/// `e4_n = |det(M̂ - λ_n I)|` with `λ_n = eig_n(sym(M̂)) · exp(λ0/t)`,
/// eigenvalues ascending. Returns `(e4, band_penalty)`.
pub fn inertia_bound_error(
    mhat: &DMatrix<f64>,
    t: f64,
    lambda0: f64,
    band: InertiaBand,
) -> Result<(DVector<f64>, f64)> {
    let scale = eigen_scale(t, lambda0)?;
    let eig = sym_eigenvalues(mhat)?;
    Ok((e4_from_eigenvalues(mhat, &eig, scale), band.penalty(&eig)))
}

/// Central-difference Jacobian of `e4` with respect to row-major `vec(M̂)`
/// (`N × N²`).
pub fn inertia_bound_jacobian(mhat: &DMatrix<f64>, t: f64, lambda0: f64) -> Result<DMatrix<f64>> {
    let scale = eigen_scale(t, lambda0)?;
    let n = mhat.nrows();
    let h = 1e-6 * mhat.amax().max(1.0);
    let mut jac = DMatrix::zeros(n, n * n);
    let mut m = mhat.clone();
    for r in 0..n {
        for c in 0..n {
            let orig = m[(r, c)];
            m[(r, c)] = orig + h;
            let hi = e4_from_eigenvalues(&m, &sym_eigenvalues(&m)?, scale);
            m[(r, c)] = orig - h;
            let lo = e4_from_eigenvalues(&m, &sym_eigenvalues(&m)?, scale);
            m[(r, c)] = orig;
            jac.set_column(r * n + c, &((hi - lo) / (2.0 * h)));
        }
    }
    Ok(jac)
}

/// `ε = [e1; λ1 e2; λ2 e3; λ3 e4]`.
pub fn stack_wae(
    e1: &DVector<f64>,
    e2: &DVector<f64>,
    e3: &DVector<f64>,
    e4: &DVector<f64>,
    lw: &LagrangianWeights,
) -> DVector<f64> {
    let parts = [(e1, 1.0), (e2, lw.lambda1), (e3, lw.lambda2), (e4, lw.lambda3)];
    let len = parts.iter().map(|(v, _)| v.len()).sum();
    DVector::from_iterator(
        len,
        parts.iter().flat_map(|(v, w)| v.iter().map(move |x| x * w)),
    )
}

/// Recovers `(e1, e2, e3, e4)` from a stacked error.
pub fn unstack_wae(
    eps: &DVector<f64>,
    dof: usize,
    lw: &LagrangianWeights,
) -> Result<[DVector<f64>; 4]> {
    let layout = StackLayout::new(dof);
    if eps.len() != layout.len() {
        return Err(Error::Shape(format!(
            "stacked error has length {}, expected {}",
            eps.len(),
            layout.len()
        )));
    }
    let [o1, o2, o3, o4] = layout.offsets();
    let take = |from: usize, to: usize, w: f64| eps.rows(from, to - from) / w;
    Ok([
        take(o1, o2, 1.0),
        take(o2, o3, lw.lambda1),
        take(o3, o4, lw.lambda2),
        take(o4, eps.len(), lw.lambda3),
    ])
}

/// Forward-Euler discretization of `α e + ė = ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModifiedErrorFilter {
    alpha: f64,
    dt: f64,
}

impl ModifiedErrorFilter {
    pub fn new(alpha: f64, dt: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        if dt * alpha >= 2.0 {
            return Err(Error::config(format!(
                "dt*alpha = {} violates the discrete stability bound dt*alpha < 2",
                dt * alpha
            )));
        }
        Ok(Self { alpha, dt })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `e' = e + dt (ε - α e)`.
    pub fn step(&self, e_mod: &DVector<f64>, eps: &DVector<f64>) -> DVector<f64> {
        e_mod + (eps - e_mod * self.alpha) * self.dt
    }
}

/// One filter step; rejects `dt·α ≥ 2`.
pub fn modified_error_step(
    e_mod: &DVector<f64>,
    eps: &DVector<f64>,
    alpha: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    Ok(ModifiedErrorFilter::new(alpha, dt)?.step(e_mod, eps))
}
