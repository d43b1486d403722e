//! Jerk-driven triple integrators with first-order-hold input.
//!
//! Every joint and the path parameter follow the same scalar chain
//! `(position, velocity, acceleration)` with jerk as input, where the jerk is
//! interpolated linearly between consecutive samples `u_i` and `u_{i+1}`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub sample_time: f64,
    pub phi: Matrix3<f64>,
    pub gamma0: Vector3<f64>,
    pub gamma1: Vector3<f64>,
}

pub fn discretize_dynamics(sample_time: f64) -> Result<Discretization> {
    if !(sample_time > 0.0 && sample_time.is_finite()) {
        return Err(Error::Validation { field: "ocp.sample_time".into(), message: "must be positive".into() });
    }
    let t = sample_time;
    let t2 = t * t;
    let t3 = t2 * t;
    Ok(Discretization {
        sample_time,
        phi: Matrix3::new(1.0, t, 0.5 * t2, 0.0, 1.0, t, 0.0, 0.0, 1.0),
        gamma0: Vector3::new(t3 / 8.0, t2 / 3.0, t / 2.0),
        gamma1: Vector3::new(t3 / 24.0, t2 / 6.0, t / 2.0),
    })
}

impl Discretization {
    pub fn step(&self, x: &Vector3<f64>, u0: f64, u1: f64) -> Vector3<f64> {
        self.phi * x + self.gamma0 * u0 + self.gamma1 * u1
    }
}

/// Condensed form `x_k = Phi^k x_0 + sum_j S[k][j] u_j` over a horizon of
/// `n` steps, with inputs `u_0 .. u_n`.
#[derive(Debug, Clone)]
pub struct Condensed {
    phi_pow: Vec<Matrix3<f64>>,
    s: Vec<Vec<Vector3<f64>>>,
}

impl Condensed {
    pub fn new(d: &Discretization, n: usize) -> Self {
        let mut phi_pow = vec![Matrix3::identity()];
        let mut s = vec![vec![Vector3::zeros(); n + 1]];
        for k in 0..n {
            phi_pow.push(d.phi * phi_pow[k]);
            let mut row: Vec<Vector3<f64>> = s[k].iter().map(|c| d.phi * c).collect();
            row[k] += d.gamma0;
            row[k + 1] += d.gamma1;
            s.push(row);
        }
        Self { phi_pow, s }
    }

    pub fn horizon(&self) -> usize {
        self.s.len() - 1
    }

    /// Sensitivity of `x_k` to `u_j`.
    pub fn coeff(&self, k: usize, j: usize) -> &Vector3<f64> {
        &self.s[k][j]
    }

    /// `x_k` for the given initial state and inputs `u_0 .. u_n`.
    pub fn state(&self, k: usize, x0: &Vector3<f64>, u: &[f64]) -> Vector3<f64> {
        let mut x = self.phi_pow[k] * x0;
        for (j, uj) in u.iter().enumerate().take(k + 1) {
            x += self.s[k][j] * *uj;
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// RK4 on the continuous chain with jerk interpolated over `[0, t]`.
    fn integrate(x0: Vector3<f64>, u0: f64, u1: f64, t: f64, steps: usize) -> Vector3<f64> {
        let h = t / steps as f64;
        let f = |tau: f64, x: &Vector3<f64>| {
            let u = u0 + (u1 - u0) * tau / t;
            Vector3::new(x[1], x[2], u)
        };
        let mut x = x0;
        for i in 0..steps {
            let tau = i as f64 * h;
            let k1 = f(tau, &x);
            let k2 = f(tau + 0.5 * h, &(x + 0.5 * h * k1));
            let k3 = f(tau + 0.5 * h, &(x + 0.5 * h * k2));
            let k4 = f(tau + h, &(x + h * k3));
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        x
    }

    #[test]
    fn matrices_at_one_tenth() {
        let d = discretize_dynamics(0.1).unwrap();
        assert!((d.phi.row(0) - nalgebra::RowVector3::new(1.0, 0.1, 0.005)).norm() < 1e-15);
        assert!((d.gamma0 - Vector3::new(1.25e-4, 3.3333333333333335e-3, 0.05)).norm() < 1e-15);
        assert!((d.gamma1 - Vector3::new(4.1666666666666665e-5, 1.6666666666666668e-3, 0.05)).norm() < 1e-15);
    }

    #[test]
    fn matches_ode_integration() {
        let d = discretize_dynamics(0.1).unwrap();
        let g0 = integrate(Vector3::zeros(), 1.0, 0.0, 0.1, 1000);
        let g1 = integrate(Vector3::zeros(), 0.0, 1.0, 0.1, 1000);
        assert!((g0 - d.gamma0).amax() < 1e-9);
        assert!((g1 - d.gamma1).amax() < 1e-9);
        let x0 = Vector3::new(0.3, -0.2, 1.5);
        let x = integrate(x0, 2.0, -3.0, 0.1, 1000);
        assert!((x - d.step(&x0, 2.0, -3.0)).amax() < 1e-9);
    }

    #[test]
    fn zero_order_hold_consistency() {
        for t in [0.01, 0.1, 0.25] {
            let d = discretize_dynamics(t).unwrap();
            let zoh = Vector3::new(t * t * t / 6.0, t * t / 2.0, t);
            assert!((d.gamma0 + d.gamma1 - zoh).amax() <= 4.0 * f64::EPSILON * zoh.amax());
        }
    }

    #[test]
    fn rejects_nonpositive_sample_time() {
        assert!(discretize_dynamics(0.0).is_err());
        assert!(discretize_dynamics(-0.1).is_err());
    }

    #[test]
    fn condensed_matches_recursion() {
        let d = discretize_dynamics(0.1).unwrap();
        let c = Condensed::new(&d, 6);
        let u = [0.5, -1.0, 2.0, 0.0, 3.0, -2.5, 1.0];
        let x0 = Vector3::new(0.1, 0.2, -0.3);
        let mut x = x0;
        for k in 0..6 {
            x = d.step(&x, u[k], u[k + 1]);
            assert!((x - c.state(k + 1, &x0, &u)).amax() < 1e-13);
        }
        assert_eq!(*c.coeff(2, 5), Vector3::zeros());
    }
}
