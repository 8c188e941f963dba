//! The Lorenz convection model with σ = 10, ρ = 28, β = 8/3.

use crate::error::{LorenzError, Result};

pub const SIGMA: f64 = 10.0;
pub const RHO: f64 = 28.0;
pub const BETA: f64 = 8.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LorenzState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl LorenzState {
    pub const fn new(x1: f64, x2: f64, x3: f64) -> Self {
        Self { x1, x2, x3 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x1, self.x2, self.x3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite() && self.x3.is_finite()
    }

    /// The three equilibria: the origin and `(±√72, ±√72, 27)`.
    pub fn equilibria() -> [LorenzState; 3] {
        let c = (BETA * (RHO - 1.0)).sqrt();
        [
            LorenzState::new(0.0, 0.0, 0.0),
            LorenzState::new(c, c, RHO - 1.0),
            LorenzState::new(-c, -c, RHO - 1.0),
        ]
    }
}

/// A smooth vector field with an analytic Jacobian.
pub trait Dynamics {
    fn derivative(&self, s: &[f64; 3]) -> [f64; 3];
    fn jacobian(&self, s: &[f64; 3]) -> [[f64; 3]; 3];
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Lorenz;

impl Dynamics for Lorenz {
    fn derivative(&self, s: &[f64; 3]) -> [f64; 3] {
        [
            SIGMA * (s[1] - s[0]),
            s[0] * (RHO - s[2]) - s[1],
            s[0] * s[1] - BETA * s[2],
        ]
    }

    fn jacobian(&self, s: &[f64; 3]) -> [[f64; 3]; 3] {
        [[-SIGMA, SIGMA, 0.0], [RHO - s[2], -1.0, -s[0]], [s[1], s[0], -BETA]]
    }
}

/// `ṡ = A s`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub a: [[f64; 3]; 3],
}

impl Dynamics for Linear {
    fn derivative(&self, s: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|j| self.a[i][j] * s[j]).sum())
    }

    fn jacobian(&self, _: &[f64; 3]) -> [[f64; 3]; 3] {
        self.a
    }
}

pub fn lorenz_derivative(s: LorenzState) -> LorenzState {
    LorenzState::from_array(Lorenz.derivative(&s.to_array()))
}

pub fn lorenz_jacobian(s: LorenzState) -> [[f64; 3]; 3] {
    Lorenz.jacobian(&s.to_array())
}

fn axpy<const N: usize>(y: &[f64; N], h: f64, k: &[f64; N]) -> [f64; N] {
    std::array::from_fn(|i| y[i] + h * k[i])
}

/// One classical Runge–Kutta step of `ẏ = f(y)`.
pub fn rk4<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], y: &[f64; N], dt: f64) -> [f64; N] {
    let k1 = f(y);
    let k2 = f(&axpy(y, 0.5 * dt, &k1));
    let k3 = f(&axpy(y, 0.5 * dt, &k2));
    let k4 = f(&axpy(y, dt, &k3));
    std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// States beyond this magnitude count as blown up.
pub const BLOW_UP: f64 = 1e6;

pub fn rk4_step(s: LorenzState, dt: f64) -> Result<LorenzState> {
    if !(dt > 0.0) {
        return Err(LorenzError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let next = rk4(|y| Lorenz.derivative(y), &s.to_array(), dt);
    if next.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
        return Err(LorenzError::BlowUp { time: dt });
    }
    Ok(LorenzState::from_array(next))
}

/// `steps` RK4 steps of size `dt` under any dynamics.
pub fn integrate<D: Dynamics + ?Sized>(dynamics: &D, s: [f64; 3], dt: f64, steps: usize) -> Result<[f64; 3]> {
    let mut y = s;
    for i in 0..steps {
        y = rk4(|v| dynamics.derivative(v), &y, dt);
        if y.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(LorenzError::BlowUp {
                time: (i + 1) as f64 * dt,
            });
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_examples() {
        assert_eq!(
            lorenz_derivative(LorenzState::new(0.0, 0.0, 0.0)),
            LorenzState::new(0.0, 0.0, 0.0)
        );
        assert_eq!(
            lorenz_derivative(LorenzState::new(1.0, 0.0, 0.0)),
            LorenzState::new(-10.0, 28.0, 0.0)
        );
        let c = 72f64.sqrt();
        let d = lorenz_derivative(LorenzState::new(c, c, 27.0));
        assert!(d.x1 == 0.0 && d.x2.abs() < 1e-14 && d.x3.abs() < 1e-13, "{d:?}");
    }

    #[test]
    fn equilibria_are_fixed_points() {
        for e in LorenzState::equilibria() {
            let d = lorenz_derivative(e);
            assert!(d.x1.abs() < 1e-13 && d.x2.abs() < 1e-13 && d.x3.abs() < 1e-13);
            let next = rk4_step(e, 0.01).unwrap();
            assert!((next.x1 - e.x1).abs() < 1e-12 && (next.x3 - e.x3).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = [1.3, -2.2, 20.5];
        let j = Lorenz.jacobian(&s);
        for c in 0..3 {
            let mut hi = s;
            let mut lo = s;
            hi[c] += 1e-6;
            lo[c] -= 1e-6;
            let (fh, fl) = (Lorenz.derivative(&hi), Lorenz.derivative(&lo));
            for r in 0..3 {
                assert!(((fh[r] - fl[r]) / 2e-6 - j[r][c]).abs() < 1e-7);
            }
        }
    }

    fn run(dt: f64, t: f64) -> [f64; 3] {
        integrate(&Lorenz, [1.0, 1.0, 1.0], dt, (t / dt).round() as usize).unwrap()
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn one_step_error_shrinks_sixteenfold() {
        let s = [1.0, 1.0, 1.0];
        let dt = 0.02;
        let reference = |h: f64| integrate(&Lorenz, s, h / 100.0, 100).unwrap();
        let e1 = dist(rk4(|y| Lorenz.derivative(y), &s, dt), reference(dt));
        let e2 = dist(rk4(|y| Lorenz.derivative(y), &s, dt / 2.0), reference(dt / 2.0));
        assert!(e1 / e2 > 16.0, "{}", e1 / e2);
    }

    #[test]
    fn global_order_is_at_least_three() {
        let reference = run(1e-5, 1.0);
        let e1 = dist(run(0.01, 1.0), reference);
        let e2 = dist(run(0.005, 1.0), reference);
        assert!(e1 / e2 >= 8.0, "{}", e1 / e2);
    }

    #[test]
    fn trajectory_stays_on_bounded_attractor() {
        let mut s = LorenzState::new(1.0, 1.0, 1.0);
        let mut peak = [0.0f64; 3];
        for _ in 0..10_000 {
            s = rk4_step(s, 0.01).unwrap();
            assert!(
                s.x1.abs() <= 25.0 && s.x2.abs() <= 30.0 && (0.0..=55.0).contains(&s.x3),
                "{s:?}"
            );
            peak = [peak[0].max(s.x1.abs()), peak[1].max(s.x2.abs()), peak[2].max(s.x3)];
        }
        assert!(peak[1] > 25.0, "x₂ does leave the ±25 band: {peak:?}");
    }

    #[test]
    fn bad_steps_are_rejected() {
        assert!(rk4_step(LorenzState::new(1.0, 1.0, 1.0), 0.0).is_err());
        assert!(matches!(
            rk4_step(LorenzState::new(1e200, 1e200, 1e200), 0.01),
            Err(LorenzError::BlowUp { .. })
        ));
    }

    proptest::proptest! {
        // The flow commutes with the reflection (x₁, x₂, x₃) ↦ (−x₁, −x₂, x₃), bit for bit.
        #[test]
        fn reflection_symmetry_is_exact(x1 in -20.0..20.0f64, x2 in -25.0..25.0f64, x3 in 0.0..50.0f64) {
            let a = integrate(&Lorenz, [x1, x2, x3], 0.01, 50).unwrap();
            let b = integrate(&Lorenz, [-x1, -x2, x3], 0.01, 50).unwrap();
            proptest::prop_assert_eq!([-a[0], -a[1], a[2]], b);
        }
    }
}
