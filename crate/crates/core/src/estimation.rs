//! Per-joint constant-acceleration Kalman filters that turn noisy joint
//! position measurements into smoothed position, velocity and acceleration
//! regressors.

use nalgebra::{DVector, Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanTuning {
    /// White-jerk spectral density, rad²/s⁵.
    pub jerk_density: f64,
    /// Position measurement variance, rad².
    pub measurement_variance: f64,
    /// Initial variances of position, velocity and acceleration.
    #[serde(default = "default_initial_variance")]
    pub initial_variance: [f64; 3],
}

fn default_initial_variance() -> [f64; 3] {
    [1e-4, 1.0, 100.0]
}

impl Default for KalmanTuning {
    fn default() -> Self {
        Self {
            jerk_density: 1e3,
            measurement_variance: 1e-10,
            initial_variance: default_initial_variance(),
        }
    }
}

impl KalmanTuning {
    pub fn validate(&self) -> Result<()> {
        if !(self.jerk_density >= 0.0 && self.jerk_density.is_finite()) {
            return Err(Error::config("kalman.jerk_density must be non-negative"));
        }
        if !(self.measurement_variance >= 0.0) {
            return Err(Error::config("kalman.measurement_variance must be non-negative"));
        }
        if self.initial_variance.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("kalman.initial_variance must be non-negative"));
        }
        Ok(())
    }
}

/// Kalman filter over `[q, q̇, q̈]` for a single joint.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicKalman {
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub jerk_density: f64,
    pub measurement_variance: f64,
}

/// Constant-acceleration transition matrix.
pub fn transition(dt: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0, dt, 0.5 * dt * dt,
        0.0, 1.0, dt,
        0.0, 0.0, 1.0,
    )
}

/// Discretized white-jerk process noise for spectral density `s`.
pub fn process_noise(dt: f64, s: f64) -> Matrix3<f64> {
    let (d2, d3, d4, d5) = (dt * dt, dt.powi(3), dt.powi(4), dt.powi(5));
    Matrix3::new(
        d5 / 20.0, d4 / 8.0, d3 / 6.0,
        d4 / 8.0, d3 / 3.0, d2 / 2.0,
        d3 / 6.0, d2 / 2.0, dt,
    ) * s
}

impl KinematicKalman {
    pub fn new(q0: f64, tuning: &KalmanTuning) -> Self {
        let [pq, pv, pa] = tuning.initial_variance;
        Self {
            x: Vector3::new(q0, 0.0, 0.0),
            p: Matrix3::from_diagonal(&Vector3::new(pq, pv, pa)),
            jerk_density: tuning.jerk_density,
            measurement_variance: tuning.measurement_variance,
        }
    }

    /// Time update over `dt`.
    pub fn predict(&mut self, dt: f64) {
        if dt == 0.0 {
            return;
        }
        let f = transition(dt);
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + process_noise(dt, self.jerk_density);
        self.symmetrize();
    }

    /// Position measurement update in Joseph form.
    pub fn update(&mut self, q_meas: f64) {
        let r = self.measurement_variance;
        let s = self.p[(0, 0)] + r;
        if !r.is_finite() || !(s > 0.0) {
            return;
        }
        let k: Vector3<f64> = self.p.column(0) / s;
        self.x += k * (q_meas - self.x[0]);
        let h = RowVector3::new(1.0, 0.0, 0.0);
        let a = Matrix3::identity() - k * h;
        self.p = a * self.p * a.transpose() + k * k.transpose() * r;
        self.symmetrize();
    }

    fn symmetrize(&mut self) {
        self.p = (self.p + self.p.transpose()) * 0.5;
    }

    pub fn position(&self) -> f64 {
        self.x[0]
    }

    pub fn velocity(&self) -> f64 {
        self.x[1]
    }

    pub fn acceleration(&self) -> f64 {
        self.x[2]
    }
}

/// Smoothed regressors for all joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressors {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
}

/// Independent filters, one per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFilterBank {
    pub filters: Vec<KinematicKalman>,
}

impl JointFilterBank {
    pub fn new(q0: &DVector<f64>, tuning: &KalmanTuning) -> Self {
        Self {
            filters: q0.iter().map(|&q| KinematicKalman::new(q, tuning)).collect(),
        }
    }

    /// Predict over `dt` (skipped when zero) then update with `q_meas`.
    pub fn step(&mut self, q_meas: &DVector<f64>, dt: f64) -> Regressors {
        for (f, &z) in self.filters.iter_mut().zip(q_meas.iter()) {
            f.predict(dt);
            f.update(z);
        }
        self.regressors()
    }

    pub fn regressors(&self) -> Regressors {
        let n = self.filters.len();
        Regressors {
            q: DVector::from_fn(n, |i, _| self.filters[i].position()),
            qdot: DVector::from_fn(n, |i, _| self.filters[i].velocity()),
            qddot: DVector::from_fn(n, |i, _| self.filters[i].acceleration()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix6;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn filter(r: f64, s: f64) -> KinematicKalman {
        KinematicKalman::new(
            0.0,
            &KalmanTuning { jerk_density: s, measurement_variance: r, initial_variance: [1.0, 1.0, 1.0] },
        )
    }

    #[test]
    fn exact_model_predicts_exactly() {
        let mut f = filter(1.0, 0.0);
        f.p = Matrix3::zeros();
        f.x = Vector3::new(0.5, -1.0, 2.0);
        let dt = 0.01;
        for k in 1..=100 {
            f.predict(dt);
            let t = k as f64 * dt;
            let q = 0.5 - t + t * t;
            assert!((f.position() - q).abs() < 1e-12);
            assert!((f.velocity() - (-1.0 + 2.0 * t)).abs() < 1e-12);
        }
        assert_eq!(f.p, Matrix3::zeros());
    }

    #[test]
    fn zero_step_changes_nothing() {
        let mut f = filter(1.0, 5.0);
        f.x = Vector3::new(1.0, 2.0, 3.0);
        let before = f.clone();
        f.predict(0.0);
        assert_eq!(f, before);
    }

    #[test]
    fn process_noise_matches_van_loan() {
        // Van Loan: exp([[-A, G Gᵀ s], [0, Aᵀ]] dt) = [[·, F⁻¹Q], [0, Fᵀ]].
        let dt = 0.02;
        let s = 3.5;
        let mut a = Matrix3::zeros();
        a[(0, 1)] = 1.0;
        a[(1, 2)] = 1.0;
        let mut gq = Matrix3::zeros();
        gq[(2, 2)] = s;
        let mut block = Matrix6::zeros();
        block.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-a));
        block.fixed_view_mut::<3, 3>(0, 3).copy_from(&gq);
        block.fixed_view_mut::<3, 3>(3, 3).copy_from(&a.transpose());
        let e = (block * dt).exp();
        let ft = e.fixed_view::<3, 3>(3, 3).into_owned();
        let q = ft.transpose() * e.fixed_view::<3, 3>(0, 3);
        assert!((q - process_noise(dt, s)).amax() < 1e-10);
        assert!((ft.transpose() - transition(dt)).amax() < 1e-12);
    }

    #[test]
    fn uninformative_measurement_is_ignored() {
        let mut f = filter(f64::INFINITY, 1.0);
        f.x = Vector3::new(0.1, 0.2, 0.3);
        let before = f.clone();
        f.update(10.0);
        assert_eq!(f, before);
        let mut g = filter(1e300, 1.0);
        g.update(10.0);
        assert!(g.position().abs() < 1e-290);
    }

    #[test]
    fn perfect_measurement_is_adopted() {
        let mut f = filter(0.0, 1.0);
        f.x = Vector3::new(0.1, 0.2, 0.3);
        f.update(0.75);
        assert!((f.position() - 0.75).abs() < 1e-15);
        assert!(f.p[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn update_shrinks_position_variance_and_keeps_psd() {
        let mut f = filter(1e-4, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1e-2).unwrap();
        for k in 0..5000 {
            f.predict(1e-3);
            let before = f.p[(0, 0)];
            f.update((k as f64 * 1e-3).sin() + noise.sample(&mut rng));
            assert!(f.p[(0, 0)] <= before);
            let eig = f.p.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-15, "covariance lost PSD: {eig}");
            assert_eq!(f.p, f.p.transpose());
        }
    }

    #[test]
    fn quadratic_truth_tracked_without_bias() {
        let mut bank = JointFilterBank::new(
            &DVector::from_element(1, 0.2),
            &KalmanTuning { jerk_density: 1.0, measurement_variance: 1e-6, initial_variance: [1.0, 1.0, 1.0] },
        );
        let dt = 1e-3;
        let mut last = None;
        for k in 0..=4000 {
            let t = k as f64 * dt;
            let q = 0.2 + 0.5 * t - 0.75 * t * t;
            let r = bank.step(&DVector::from_element(1, q), if k == 0 { 0.0 } else { dt });
            last = Some((t, r));
        }
        let (t, r) = last.unwrap();
        assert!((r.qdot[0] - (0.5 - 1.5 * t)).abs() < 1e-6);
        assert!((r.qddot[0] + 1.5).abs() < 1e-4);
    }

    #[test]
    fn filtered_velocity_beats_central_difference() {
        let dt = 1e-3;
        let sigma = 1e-3;
        let tuning = KalmanTuning {
            jerk_density: 50.0,
            measurement_variance: sigma * sigma,
            initial_variance: [1e-2, 10.0, 100.0],
        };
        let mut f = KinematicKalman::new(0.0, &tuning);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, sigma).unwrap();
        let w = 2.0 * std::f64::consts::PI;
        let n = 10_000;
        let z: Vec<f64> = (0..n)
            .map(|k| (w * k as f64 * dt).sin() + noise.sample(&mut rng))
            .collect();
        let (mut kf_sq, mut cd_sq, mut count) = (0.0, 0.0, 0);
        for k in 0..n {
            if k > 0 {
                f.predict(dt);
            }
            f.update(z[k]);
            if k >= 2000 && k + 1 < n {
                let truth = w * (w * k as f64 * dt).cos();
                let cd = (z[k + 1] - z[k - 1]) / (2.0 * dt);
                kf_sq += (f.velocity() - truth).powi(2);
                cd_sq += (cd - truth).powi(2);
                count += 1;
            }
        }
        let (kf, cd) = ((kf_sq / count as f64).sqrt(), (cd_sq / count as f64).sqrt());
        assert!(kf < cd, "kalman {kf} vs central difference {cd}");
    }
}
