//! Double inverted pendulum with explicit Euler discretization.
//!
//! State `x = (theta_1, dtheta_1, theta_2, dtheta_2)`, input the joint torques,
//! output the joint angles. Gravity enters through `cos`, so `theta_1 = -pi/2`,
//! `theta_2 = 0` is the hanging rest position where zero torque holds the arm.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;
use nalgebra::{Matrix2, SMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BrunovskyStructure, FeedbackLinearizable, InputPolicy, Plant};
use crate::error::{Error, Result};

/// Physical parameters. `lc_i = l_i / 2` and `I_i = m_i l_i^2 / 12` are derived.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DoublePendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub g: f64,
    pub ts: f64,
}

impl Default for DoublePendulumParams {
    fn default() -> Self {
        Self { m1: 1.0, m2: 1.0, l1: 0.5, l2: 0.5, g: 9.81, ts: 0.1 }
    }
}

/// Hanging rest state.
pub const DOWNWARD: [f64; 4] = [-FRAC_PI_2, 0.0, 0.0, 0.0];

impl DoublePendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.m1, self.m2, self.l1, self.l2];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("pendulum masses and lengths must be positive".into()));
        }
        if !(self.ts >= 0.0) || !self.g.is_finite() {
            return Err(Error::InvalidConfig("sampling time must be >= 0 and gravity finite".into()));
        }
        Ok(())
    }

    pub fn lc1(&self) -> f64 {
        self.l1 / 2.0
    }

    pub fn lc2(&self) -> f64 {
        self.l2 / 2.0
    }

    pub fn i1(&self) -> f64 {
        self.m1 * self.l1 * self.l1 / 12.0
    }

    pub fn i2(&self) -> f64 {
        self.m2 * self.l2 * self.l2 / 12.0
    }

    /// Masses and lengths each scaled by an independent factor in `[1 - frac, 1 + frac]`.
    pub fn perturbed(&self, frac: f64, seed: u64) -> Self {
        if frac == 0.0 {
            return *self;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = || 1.0 + rng.random_range(-frac..=frac);
        Self { m1: self.m1 * f(), m2: self.m2 * f(), l1: self.l1 * f(), l2: self.l2 * f(), ..*self }
    }

    fn h(&self, theta2: f64) -> f64 {
        self.m2 * self.l1 * self.lc2() * libm::sin(theta2)
    }

    pub fn mass_matrix(&self, theta2: f64) -> Matrix2<f64> {
        let (lc1, lc2) = (self.lc1(), self.lc2());
        let c2 = libm::cos(theta2);
        let m22 = self.m2 * lc2 * lc2 + self.i2();
        let m12 = self.m2 * self.l1 * lc2 * c2 + m22;
        let m11 = self.m1 * lc1 * lc1 + self.i1() + self.m2 * (self.l1 * self.l1 + lc2 * lc2 + 2.0 * self.l1 * lc2 * c2) + self.i2();
        Matrix2::new(m11, m12, m12, m22)
    }

    pub fn coriolis(&self, theta2: f64, dtheta: Vector2<f64>) -> Matrix2<f64> {
        let h = self.h(theta2);
        Matrix2::new(-h * dtheta[1], -h * (dtheta[0] + dtheta[1]), h * dtheta[0], 0.0)
    }

    pub fn gravity(&self, theta: Vector2<f64>) -> Vector2<f64> {
        let (lc1, lc2, g) = (self.lc1(), self.lc2(), self.g);
        let c1 = libm::cos(theta[0]);
        let c12 = libm::cos(theta[0] + theta[1]);
        Vector2::new(
            self.m1 * lc1 * g * c1 + self.m2 * g * (lc2 * c12 + self.l1 * c1),
            self.m2 * lc2 * g * c12,
        )
    }

    /// Joint accelerations `Z = M^{-1}(tau - C dtheta - G)`.
    pub fn acceleration(&self, tau: Vector2<f64>, theta: Vector2<f64>, dtheta: Vector2<f64>) -> Result<Vector2<f64>> {
        let m = self.mass_matrix(theta[1]);
        let det = m.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::SingularInertia { det });
        }
        let rhs = tau - self.coriolis(theta[1], dtheta) * dtheta - self.gravity(theta);
        Ok(Vector2::new(m[(1, 1)] * rhs[0] - m[(0, 1)] * rhs[1], m[(0, 0)] * rhs[1] - m[(1, 0)] * rhs[0]) / det)
    }

    /// `Z` together with `dZ/dtau` and `dZ/d(theta_1, theta_2, dtheta_1, dtheta_2)`.
    pub fn acceleration_jacobian(
        &self,
        tau: Vector2<f64>,
        theta: Vector2<f64>,
        dtheta: Vector2<f64>,
    ) -> Result<(Vector2<f64>, Matrix2<f64>, SMatrix<f64, 2, 4>)> {
        let m = self.mass_matrix(theta[1]);
        let minv = m.try_inverse().ok_or(Error::SingularInertia { det: m.determinant() })?;
        let z = self.acceleration(tau, theta, dtheta)?;
        let (w1, w2) = (dtheta[0], dtheta[1]);
        let h = self.h(theta[1]);
        let hp = self.m2 * self.l1 * self.lc2() * libm::cos(theta[1]);
        let (lc1, lc2, g) = (self.lc1(), self.lc2(), self.g);
        let s1 = libm::sin(theta[0]);
        let s12 = libm::sin(theta[0] + theta[1]);
        // d(C dtheta + G)/d(theta_1, theta_2, dtheta_1, dtheta_2)
        let mut dq = SMatrix::<f64, 2, 4>::zeros();
        dq[(0, 0)] = -self.m1 * lc1 * g * s1 - self.m2 * g * (lc2 * s12 + self.l1 * s1);
        dq[(0, 1)] = -hp * (2.0 * w1 * w2 + w2 * w2) - self.m2 * g * lc2 * s12;
        dq[(0, 2)] = -2.0 * h * w2;
        dq[(0, 3)] = -2.0 * h * (w1 + w2);
        dq[(1, 0)] = -self.m2 * lc2 * g * s12;
        dq[(1, 1)] = hp * w1 * w1 - self.m2 * lc2 * g * s12;
        dq[(1, 2)] = 2.0 * h * w1;
        // dM/dtheta_2 Z
        let dm = Matrix2::new(-2.0 * h, -h, -h, 0.0);
        let dmz = dm * z;
        let mut rhs = -dq;
        rhs[(0, 1)] -= dmz[0];
        rhs[(1, 1)] -= dmz[1];
        Ok((z, minv, minv * rhs))
    }

    pub fn equilibrium_torque(&self, theta: Vector2<f64>) -> Vector2<f64> {
        self.gravity(theta)
    }
}

/// One explicit Euler step `x+ = x + Ts (A x + B Z)`.
pub fn step_euler_pendulum(params: &DoublePendulumParams, x: [f64; 4], tau: [f64; 2]) -> Result<[f64; 4]> {
    let theta = Vector2::new(x[0], x[2]);
    let dtheta = Vector2::new(x[1], x[3]);
    let z = params.acceleration(Vector2::new(tau[0], tau[1]), theta, dtheta)?;
    let ts = params.ts;
    Ok([x[0] + ts * x[1], x[1] + ts * z[0], x[2] + ts * x[3], x[3] + ts * z[1]])
}

/// `Xi = (x_1, x_1 + Ts x_2, x_3, x_3 + Ts x_4)`.
pub fn pendulum_xi(x: &[f64], ts: f64) -> [f64; 4] {
    [x[0], x[0] + ts * x[1], x[2], x[2] + ts * x[3]]
}

/// Angles and rates encoded by `Xi`.
pub fn angles_from_xi(xi: &[f64], ts: f64) -> (Vector2<f64>, Vector2<f64>) {
    (Vector2::new(xi[0], xi[2]), Vector2::new((xi[1] - xi[0]) / ts, (xi[3] - xi[2]) / ts))
}

/// Synthetic input `v_i = 2 xi_{2i} - xi_{2i-1} + Ts^2 Z_i` of the Brunovsky chains.
pub fn synthetic_input(params: &DoublePendulumParams, x: &[f64], tau: [f64; 2]) -> Result<[f64; 2]> {
    let xi = pendulum_xi(x, params.ts);
    let z = params.acceleration(Vector2::new(tau[0], tau[1]), Vector2::new(x[0], x[2]), Vector2::new(x[1], x[3]))?;
    let t2 = params.ts * params.ts;
    Ok([2.0 * xi[1] - xi[0] + t2 * z[0], 2.0 * xi[3] - xi[2] + t2 * z[1]])
}

#[derive(Debug, Clone)]
pub struct DoublePendulum {
    params: DoublePendulumParams,
    structure: BrunovskyStructure,
}

impl DoublePendulum {
    pub fn new(params: DoublePendulumParams) -> Result<Self> {
        params.validate()?;
        if !(params.ts > 0.0) {
            return Err(Error::InvalidConfig("pendulum plant needs a positive sampling time".into()));
        }
        Ok(Self { params, structure: BrunovskyStructure::new(vec![2, 2])? })
    }

    pub fn params(&self) -> &DoublePendulumParams {
        &self.params
    }
}

impl Plant for DoublePendulum {
    fn name(&self) -> &str {
        "double_pendulum"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn io_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(step_euler_pendulum(&self.params, [x[0], x[1], x[2], x[3]], [u[0], u[1]])?.to_vec())
    }

    fn output(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![x[0], x[2]]
    }

    fn claims_origin_equilibrium(&self) -> bool {
        false
    }

    fn rest_point(&self) -> (Vec<f64>, Vec<f64>) {
        (DOWNWARD.to_vec(), vec![0.0, 0.0])
    }

    fn hold_input(&self, x: &[f64]) -> Option<Vec<f64>> {
        if x[1] != 0.0 || x[3] != 0.0 {
            return None;
        }
        let t = self.params.equilibrium_torque(Vector2::new(x[0], x[2]));
        Some(vec![t[0], t[1]])
    }
}

impl FeedbackLinearizable for DoublePendulum {
    fn structure(&self) -> &BrunovskyStructure {
        &self.structure
    }

    fn state_from_xi(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let (th, w) = angles_from_xi(xi, self.params.ts);
        Ok(vec![th[0], w[0], th[1], w[1]])
    }

    fn xi_from_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(pendulum_xi(x, self.params.ts).to_vec())
    }

    fn phi(&self, u: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let x = self.state_from_xi(xi)?;
        Ok(synthetic_input(&self.params, &x, [u[0], u[1]])?.to_vec())
    }
}

/// Computed-torque PD tracking of a random piecewise-constant angle reference,
/// built on a (possibly inexact) model. The dither and the limit act on the
/// commanded angular acceleration so that the coupled joints stay well behaved
/// under the coarse Euler step.
#[derive(Debug, Clone)]
pub struct PdDitherPolicy {
    pub model: DoublePendulumParams,
    pub kp: f64,
    pub kd: f64,
    pub torque_limit: f64,
    /// Uniform dither on the commanded acceleration [rad/s^2].
    pub dither: f64,
    /// Bound on the commanded acceleration [rad/s^2].
    pub accel_limit: f64,
    pub hold_steps: usize,
    pub reference_bound: f64,
    reference: [f64; 2],
    rng: ChaCha8Rng,
}

impl PdDitherPolicy {
    pub fn new(model: DoublePendulumParams, seed: u64) -> Self {
        Self {
            model,
            kp: 40.0,
            kd: 8.0,
            torque_limit: 20.0,
            dither: 2.0,
            accel_limit: 15.0,
            hold_steps: 5,
            reference_bound: 1.1,
            reference: [0.0; 2],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl InputPolicy for PdDitherPolicy {
    fn input(&mut self, k: usize, x: &[f64]) -> Vec<f64> {
        if k % self.hold_steps.max(1) == 0 {
            let b = self.reference_bound;
            self.reference = [self.rng.random_range(-b..=b), self.rng.random_range(-b..=b)];
        }
        let theta = Vector2::new(x[0], x[2]);
        let dtheta = Vector2::new(x[1], x[3]);
        let mut a = Vector2::zeros();
        for i in 0..2 {
            let d = if self.dither > 0.0 { self.rng.random_range(-self.dither..=self.dither) } else { 0.0 };
            let pd = self.kp * (self.reference[i] - theta[i]) - self.kd * dtheta[i] + d;
            a[i] = pd.clamp(-self.accel_limit, self.accel_limit);
        }
        let p = &self.model;
        let tau = p.mass_matrix(theta[1]) * a + p.coriolis(theta[1], dtheta) * dtheta + p.gravity(theta);
        tau.iter().map(|t| t.clamp(-self.torque_limit, self.torque_limit)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn setpoint_torque() {
        let p = DoublePendulumParams::default();
        let t = p.equilibrium_torque(Vector2::new(PI / 6.0, PI / 3.0));
        assert!((t[0] - 6.3718).abs() < 5e-4, "{}", t[0]);
        assert!(t[1].abs() < 1e-12);
        let x = step_euler_pendulum(&p, [PI / 6.0, 0.0, PI / 3.0, 0.0], [6.3718, 0.0]).unwrap();
        let x0 = [PI / 6.0, 0.0, PI / 3.0, 0.0];
        for i in 0..4 {
            assert!((x[i] - x0[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_sampling_time_is_identity() {
        let p = DoublePendulumParams { ts: 0.0, ..Default::default() };
        let x = [0.3, -0.2, 0.1, 0.4];
        assert_eq!(step_euler_pendulum(&p, x, [1.0, -2.0]).unwrap(), x);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = DoublePendulumParams::default();
        let tau = Vector2::new(1.3, -0.7);
        let th = Vector2::new(0.4, -0.9);
        let w = Vector2::new(0.8, 1.7);
        let (_, dtau, dq) = p.acceleration_jacobian(tau, th, w).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut q = [th[0], th[1], w[0], w[1]];
            q[j] += h;
            let zp = p.acceleration(tau, Vector2::new(q[0], q[1]), Vector2::new(q[2], q[3])).unwrap();
            q[j] -= 2.0 * h;
            let zm = p.acceleration(tau, Vector2::new(q[0], q[1]), Vector2::new(q[2], q[3])).unwrap();
            for i in 0..2 {
                let fd = (zp[i] - zm[i]) / (2.0 * h);
                assert!((fd - dq[(i, j)]).abs() < 1e-5 * (1.0 + fd.abs()), "{i} {j}: {fd} vs {}", dq[(i, j)]);
            }
        }
        for j in 0..2 {
            let mut t = tau;
            t[j] += h;
            let zp = p.acceleration(t, th, w).unwrap();
            t[j] -= 2.0 * h;
            let zm = p.acceleration(t, th, w).unwrap();
            for i in 0..2 {
                assert!(((zp[i] - zm[i]) / (2.0 * h) - dtau[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downward_is_rest() {
        let plant = DoublePendulum::new(DoublePendulumParams::default()).unwrap();
        assert!(plant.hold_input(&DOWNWARD).unwrap().iter().all(|t| t.abs() < 1e-14));
        let x = plant.step(&DOWNWARD, &[0.0, 0.0]).unwrap();
        assert!(x.iter().zip(DOWNWARD.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
