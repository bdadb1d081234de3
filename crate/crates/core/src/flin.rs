//! Input-output feedback linearization with dynamic extension.
//!
//! Thrust is promoted to a state (`p`, `ṗ`) driven by `p̈ = u_p`, which makes
//! all four inputs `ũ = (u_p, τ_φ, τ_θ, τ_ψ)` appear in the fourth derivative
//! of position:
//!
//! ```text
//! m r⁗ = O₁ Θ + O₂,    Θ = (p̈, φ̈, θ̈, ψ̈) = O₃ ũ + O₄
//! ```
//!
//! Together with the yaw channel `ψ̈ = u_ψ` this gives a square, invertible
//! system away from `p = 0` and `θ = ±π/2`. The outer loop commands `r⁗ = s`
//! with `s` a linear combination of tracking errors up to jerk, so position
//! error obeys `e⁗ + K₃e⃛ + K₄ë + K₅ė + K₆e = 0` (plus the reference snap
//! when feedforward is disabled).

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrotor::{
    check_pitch, rk4, unmix_rotors, ControlWrench, QuadParams, QuadState,
    RotorSpeeds, StateVector,
};
use crate::reference::TrajectoryPoint;

/// Decoupling is declared singular below this fraction of hover thrust.
pub const MIN_THRUST_FRACTION: f64 = 0.05;
/// Decoupling is declared singular beyond this pitch magnitude [rad].
pub const MAX_PITCH: f64 = 85.0 * std::f64::consts::PI / 180.0;

/// Vehicle state augmented with thrust and thrust rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtendedState {
    pub base: QuadState,
    /// Current thrust `p` [N]
    pub thrust: f64,
    /// Thrust rate `ṗ` [N/s]
    pub thrust_rate: f64,
}

pub type ExtendedVector = SVector<f64, 14>;

impl ExtendedState {
    /// At rest at `position`, thrust balancing gravity.
    pub fn hover(position: Vector3<f64>, params: &QuadParams) -> Self {
        Self {
            base: QuadState::at_rest(position),
            thrust: params.hover_thrust(),
            thrust_rate: 0.0,
        }
    }

    pub fn to_vector(&self) -> ExtendedVector {
        let mut v = ExtendedVector::zeros();
        v.fixed_rows_mut::<12>(0).copy_from(&self.base.to_vector());
        v[12] = self.thrust;
        v[13] = self.thrust_rate;
        v
    }

    pub fn from_vector(v: &ExtendedVector) -> Self {
        let base: StateVector = v.fixed_rows::<12>(0).into_owned();
        Self {
            base: QuadState::from_vector(&base),
            thrust: v[12],
            thrust_rate: v[13],
        }
    }

    /// Body rates expressed in inertial coordinates.
    fn omega_inertial(&self) -> Vector3<f64> {
        self.base.rotation() * self.base.omega
    }

    /// `r̈` implied by the current thrust and attitude.
    pub fn acceleration(&self, params: &QuadParams) -> Vector3<f64> {
        self.base.thrust_axis() * (self.thrust / params.mass) - Vector3::z() * params.gravity
    }

    /// `r⃛` implied by thrust rate and body rates.
    pub fn jerk(&self, params: &QuadParams) -> Vector3<f64> {
        let kb = self.base.thrust_axis();
        (kb * self.thrust_rate + self.omega_inertial().cross(&kb) * self.thrust) / params.mass
    }

    /// `(r, ṙ, r̈, r⃛)` of the plant.
    pub fn output_derivatives(&self, params: &QuadParams) -> [Vector3<f64>; 4] {
        [
            self.base.position,
            self.base.velocity,
            self.acceleration(params),
            self.jerk(params),
        ]
    }

    pub fn wrench(&self, torque: Vector3<f64>) -> ControlWrench {
        ControlWrench::new(self.thrust, torque)
    }
}

/// Yaw PD gains `(K₁, K₂)` and outer-loop gains `(K₃, K₄, K₅, K₆)` on the
/// jerk, acceleration, velocity and position errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub yaw: [f64; 2],
    pub track: [f64; 4],
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            yaw: [10.0, 35.0],
            track: [10.0, 35.0, 50.0, 35.0],
        }
    }
}

impl ControllerGains {
    pub fn new(yaw: [f64; 2], track: [f64; 4]) -> Result<Self> {
        let gains = Self { yaw, track };
        gains.validate()?;
        Ok(gains)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.yaw[0] > 0.0 && self.yaw[1] > 0.0) {
            return Err(Error::InvalidInput(format!(
                "yaw gains must be positive, got {:?}",
                self.yaw
            )));
        }
        if !is_hurwitz_quartic(self.track) {
            return Err(Error::InvalidInput(format!(
                "tracking gains {:?} do not give a Hurwitz characteristic polynomial",
                self.track
            )));
        }
        Ok(())
    }
}

/// Routh-Hurwitz test for `λ⁴ + a₁λ³ + a₂λ² + a₃λ + a₄`.
pub fn is_hurwitz_quartic(a: [f64; 4]) -> bool {
    let [a1, a2, a3, a4] = a;
    if a.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return false;
    }
    let b1 = a1 * a2 - a3;
    b1 > 0.0 && a3 * b1 - a1 * a1 * a4 > 0.0
}

/// `u_ψ = -K₁ψ̇ - K₂ψ`
pub fn yaw_control(psi: f64, psi_dot: f64, gains: &ControllerGains) -> f64 {
    -gains.yaw[0] * psi_dot - gains.yaw[1] * psi
}

/// Outer-loop command for `r⁗`. `plant` holds `(r, ṙ, r̈, r⃛)`.
pub fn outer_loop_s(
    plant: &[Vector3<f64>; 4],
    reference: &TrajectoryPoint,
    gains: &ControllerGains,
) -> Vector3<f64> {
    let [k3, k4, k5, k6] = gains.track;
    (reference.jerk - plant[3]) * k3
        + (reference.acceleration - plant[2]) * k4
        + (reference.velocity - plant[1]) * k5
        + (reference.position - plant[0]) * k6
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecouplingMatrices {
    /// Inertial frame, multiplies `Θ`.
    pub o1: SMatrix<f64, 3, 4>,
    /// Inertial frame drift term.
    pub o2: Vector3<f64>,
    pub o3: Matrix4<f64>,
    pub o4: Vector4<f64>,
    /// `[î_b ĵ₂ k̂₁]` in body coordinates; maps Euler accelerations into `ω̇`.
    pub b1_tilde: Matrix3<f64>,
    /// Velocity-product part of `ω̇`, body coordinates.
    pub b2_tilde: Vector3<f64>,
}

/// Builds `O₁..O₄`, `B̃₁` and `B̃₂` at the given extended state.
///
/// The vectors `î_b`, `ĵ₂` (pitch axis) and `k̂₁` (yaw axis) are first formed
/// in body coordinates, where `B̃₁` coincides with the Euler-rate matrix, then
/// rotated into the inertial frame for `O₁` and `O₂`.
pub fn decoupling_matrices(xs: &ExtendedState, params: &QuadParams) -> Result<DecouplingMatrices> {
    let x = &xs.base;
    check_pitch(x.euler.y)?;
    let (sf, cf) = x.euler.x.sin_cos();
    let (st, ct) = x.euler.y.sin_cos();

    let i_b = Vector3::x();
    let j2_b = Vector3::new(0.0, cf, -sf);
    let k1_b = Vector3::new(-st, ct * sf, ct * cf);
    let b1 = Matrix3::from_columns(&[i_b, j2_b, k1_b]);
    let b1_inv = b1.try_inverse().ok_or(Error::SingularAttitude { theta: x.euler.y })?;

    let rates = b1_inv * x.omega;
    let (phi_dot, theta_dot, psi_dot) = (rates.x, rates.y, rates.z);
    let b2 = k1_b.cross(&j2_b) * (theta_dot * psi_dot)
        + (k1_b * psi_dot + j2_b * theta_dot).cross(&i_b) * phi_dot;

    let rot = x.rotation();
    let kb = rot.column(2).into_owned();
    let jb = rot.column(1).into_owned();
    let j2 = rot * j2_b;
    let k1 = rot * k1_b;
    let omega = rot * x.omega;
    let b2_inertial = rot * b2;
    let p = xs.thrust;
    let p_dot = xs.thrust_rate;

    let o1 = SMatrix::<f64, 3, 4>::from_columns(&[
        kb,
        -jb * p,
        j2.cross(&kb) * p,
        k1.cross(&kb) * p,
    ]);
    let o2 = b2_inertial.cross(&kb) * p
        + omega.cross(&omega.cross(&(kb * p)))
        + omega.cross(&kb) * (2.0 * p_dot);

    let j = params.inertia();
    let rot_gain = b1_inv * params.inertia_inv();
    let mut o3 = Matrix4::zeros();
    o3[(0, 0)] = 1.0;
    o3.fixed_view_mut::<3, 3>(1, 1).copy_from(&rot_gain);
    let gyro = x.omega.cross(&(j * x.omega));
    let rot_drift = -(b1_inv * b2) - rot_gain * gyro;
    let o4 = Vector4::new(0.0, rot_drift.x, rot_drift.y, rot_drift.z);

    Ok(DecouplingMatrices {
        o1,
        o2,
        o3,
        o4,
        b1_tilde: b1,
        b2_tilde: b2,
    })
}

/// `ũ = (u_p, τ)`: thrust acceleration and body torques.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtendedInput {
    /// `p̈` [N/s²]
    pub thrust_accel: f64,
    pub torque: Vector3<f64>,
}

/// Solves for `ũ` such that the plant realises `r⁗ = s` and `ψ̈ = u_ψ`.
pub fn invert_control(
    s: &Vector3<f64>,
    u_psi: f64,
    xs: &ExtendedState,
    params: &QuadParams,
) -> Result<ExtendedInput> {
    let min_thrust = MIN_THRUST_FRACTION * params.hover_thrust();
    if !(xs.thrust >= min_thrust) {
        return Err(Error::DecouplingSingular(format!(
            "thrust {} N below {min_thrust} N",
            xs.thrust
        )));
    }
    if !(xs.base.euler.y.abs() <= MAX_PITCH) {
        return Err(Error::DecouplingSingular(format!(
            "pitch {} rad beyond {MAX_PITCH} rad",
            xs.base.euler.y
        )));
    }
    let dm = decoupling_matrices(xs, params)?;

    // Rows 0..3: translational channels, row 3: ψ̈.
    let mut map = Matrix4::zeros();
    map.fixed_view_mut::<3, 4>(0, 0).copy_from(&dm.o1);
    map[(3, 3)] = 1.0;
    let lhs = s * params.mass - dm.o2;
    let rhs = Vector4::new(lhs.x, lhs.y, lhs.z, u_psi);
    let theta = map
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::DecouplingSingular("decoupling matrix not invertible".into()))?;

    // τ = J (B̃₁ η̈ + B̃₂) + ω × Jω
    let euler_accel = Vector3::new(theta[1], theta[2], theta[3]);
    let j = params.inertia();
    let omega = xs.base.omega;
    let torque = j * (dm.b1_tilde * euler_accel + dm.b2_tilde) + omega.cross(&(j * omega));
    Ok(ExtendedInput {
        thrust_accel: theta[0],
        torque,
    })
}

/// Time derivative of the extended state under a held `ũ`.
pub fn extended_derivative(
    xs: &ExtendedState,
    input: &ExtendedInput,
    params: &QuadParams,
) -> Result<ExtendedVector> {
    let base = crate::quadrotor::state_derivative(&xs.base, &xs.wrench(input.torque), params)?;
    let mut d = ExtendedVector::zeros();
    d.fixed_rows_mut::<12>(0).copy_from(&base);
    d[12] = xs.thrust_rate;
    d[13] = input.thrust_accel;
    Ok(d)
}

/// RK4 over the extended state with `ũ` held for `dt`.
pub fn propagate(
    xs: &ExtendedState,
    input: &ExtendedInput,
    params: &QuadParams,
    dt: f64,
) -> Result<ExtendedState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let next = rk4(&xs.to_vector(), dt, |_, v| {
        extended_derivative(&ExtendedState::from_vector(v), input, params)
    })?;
    Ok(ExtendedState::from_vector(&next))
}

/// Everything one control update produces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub input: ExtendedInput,
    /// Commanded `r⁗`.
    pub s: Vector3<f64>,
    /// Wrench applied at the start of the step.
    pub wrench: ControlWrench,
    pub rotors: RotorSpeeds,
    /// `(p, ṗ)` after integrating `p̈ = u_p` over the step.
    pub next_thrust: (f64, f64),
}

/// Per-vehicle tracking controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller {
    pub params: QuadParams,
    pub gains: ControllerGains,
    /// Adds the reference snap to `s`.
    pub feedforward: bool,
}

impl Controller {
    pub fn new(params: QuadParams, gains: ControllerGains) -> Result<Self> {
        params.validate()?;
        gains.validate()?;
        Ok(Self {
            params,
            gains,
            feedforward: false,
        })
    }

    pub fn with_feedforward(mut self, on: bool) -> Self {
        self.feedforward = on;
        self
    }

    pub fn step(&self, xs: &ExtendedState, reference: &TrajectoryPoint, dt: f64) -> Result<ControlOutput> {
        controller_step(xs, reference, &self.gains, &self.params, dt, self.feedforward)
    }
}

pub fn controller_step(
    xs: &ExtendedState,
    reference: &TrajectoryPoint,
    gains: &ControllerGains,
    params: &QuadParams,
    dt: f64,
    feedforward: bool,
) -> Result<ControlOutput> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let plant = xs.output_derivatives(params);
    let mut s = outer_loop_s(&plant, reference, gains);
    if feedforward {
        s += reference.snap;
    }
    let psi_dot = xs.base.euler_rates()?.z;
    let u_psi = yaw_control(xs.base.euler.z, psi_dot, gains);
    let input = invert_control(&s, u_psi, xs, params)?;

    let wrench = xs.wrench(input.torque);
    let rotors = unmix_rotors(&wrench, params)?;
    let u_p = input.thrust_accel;
    let next_thrust = (
        xs.thrust + xs.thrust_rate * dt + 0.5 * u_p * dt * dt,
        xs.thrust_rate + u_p * dt,
    );
    Ok(ControlOutput {
        input,
        s,
        wrench,
        rotors,
        next_thrust,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> QuadParams {
        QuadParams::default()
    }

    fn random_state(rng: &mut ChaCha8Rng, p: &QuadParams) -> ExtendedState {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let position = v() * 5.0;
        let velocity = v() * 2.0;
        let euler = v() * 0.8;
        let omega = v() * 1.5;
        ExtendedState {
            base: QuadState {
                position,
                velocity,
                euler,
                omega,
            },
            thrust: p.hover_thrust() * rng.random_range(0.6..1.4),
            thrust_rate: rng.random_range(-1.0..1.0),
        }
    }

    /// `r⁗` by a central second difference of `r̈` along the plant trajectory,
    /// with `ũ` held and an independent RK4 loop in both time directions.
    fn fd_snap(xs: &ExtendedState, input: &ExtendedInput, p: &QuadParams, h: f64) -> Vector3<f64> {
        let shoot = |dt: f64| {
            let mut v = xs.to_vector();
            let substeps = 10;
            let dt = dt / substeps as f64;
            for _ in 0..substeps {
                v = rk4(&v, dt, |_, y| extended_derivative(&ExtendedState::from_vector(y), input, p)).unwrap();
            }
            ExtendedState::from_vector(&v).acceleration(p)
        };
        (shoot(h) - xs.acceleration(p) * 2.0 + shoot(-h)) / (h * h)
    }

    #[test]
    fn hurwitz_check() {
        assert!(is_hurwitz_quartic([10.0, 35.0, 50.0, 35.0]));
        assert!(is_hurwitz_quartic([10.0, 35.0, 50.0, 24.0]));
        assert!(!is_hurwitz_quartic([1.0, 1.0, 1.0, 1.0]));
        assert!(!is_hurwitz_quartic([10.0, -35.0, 50.0, 35.0]));
        assert!(ControllerGains::new([10.0, 35.0], [1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(ControllerGains::new([0.0, 35.0], [10.0, 35.0, 50.0, 35.0]).is_err());
    }

    #[test]
    fn yaw_law() {
        let g = ControllerGains::default();
        assert_eq!(yaw_control(0.0, 0.0, &g), 0.0);
        assert_eq!(yaw_control(0.2, 0.0, &g), -35.0 * 0.2);
    }

    #[test]
    fn yaw_loop_decays() {
        let g = ControllerGains::default();
        let mut z = nalgebra::Vector2::new(0.3, 0.0);
        let dt = 1e-3;
        let mut t = 0.0;
        while t < 3.0 {
            z = rk4(&z, dt, |_, y| Ok(nalgebra::Vector2::new(y[1], yaw_control(y[0], y[1], &g)))).unwrap();
            t += dt;
        }
        assert!(z[0].abs() < 1e-3);
    }

    #[test]
    fn outer_loop_cases() {
        let g = ControllerGains::default();
        let plant = [Vector3::new(1.0, 2.0, 3.0), Vector3::x(), Vector3::y(), Vector3::z()];
        let reference = TrajectoryPoint {
            position: plant[0],
            velocity: plant[1],
            acceleration: plant[2],
            jerk: plant[3],
            snap: Vector3::zeros(),
        };
        assert_eq!(outer_loop_s(&plant, &reference, &g), Vector3::zeros());
        let e = Vector3::new(0.1, -0.2, 0.3);
        let shifted = reference.translated(&e);
        assert_relative_eq!(outer_loop_s(&plant, &shifted, &g), e * 35.0, epsilon = 1e-14);
    }

    #[test]
    fn quadruple_integrator_error_dynamics() {
        // Plant r⁗ = s tracking r_d(t) = sin t; error must follow
        // e⁗ + K₃e⃛ + K₄ë + K₅ė + K₆e = r_d⁗ integrated on its own.
        let g = ControllerGains::default();
        let [k3, k4, k5, k6] = g.track;
        let reference = |t: f64| TrajectoryPoint {
            position: Vector3::new(t.sin(), 0.0, 0.0),
            velocity: Vector3::new(t.cos(), 0.0, 0.0),
            acceleration: Vector3::new(-t.sin(), 0.0, 0.0),
            jerk: Vector3::new(-t.cos(), 0.0, 0.0),
            snap: Vector3::new(t.sin(), 0.0, 0.0),
        };
        let plant_rhs = |t: f64, z: &nalgebra::Vector4<f64>| {
            let plant = [
                Vector3::new(z[0], 0.0, 0.0),
                Vector3::new(z[1], 0.0, 0.0),
                Vector3::new(z[2], 0.0, 0.0),
                Vector3::new(z[3], 0.0, 0.0),
            ];
            let s = outer_loop_s(&plant, &reference(t), &g);
            Ok(nalgebra::Vector4::new(z[1], z[2], z[3], s.x))
        };
        let error_rhs = |t: f64, e: &nalgebra::Vector4<f64>| {
            let e4 = t.sin() - k3 * e[3] - k4 * e[2] - k5 * e[1] - k6 * e[0];
            Ok(nalgebra::Vector4::new(e[1], e[2], e[3], e4))
        };
        let dt = 1e-3;
        let mut z = nalgebra::Vector4::new(0.5, 0.0, 0.0, 0.0);
        let mut e = nalgebra::Vector4::new(-0.5, 1.0, 0.0, -1.0); // r_d(0) - z(0) per level
        for k in 0..5000 {
            let t = k as f64 * dt;
            z = rk4(&z, dt, |tau, y| plant_rhs(t + tau, y)).unwrap();
            e = rk4(&e, dt, |tau, y| error_rhs(t + tau, y)).unwrap();
        }
        let t: f64 = 5.0;
        assert!((t.sin() - z[0] - e[0]).abs() < 1e-9);
    }

    #[test]
    fn hover_matrices() {
        let p = params();
        let xs = ExtendedState::hover(Vector3::new(1.0, 2.0, 3.0), &p);
        let dm = decoupling_matrices(&xs, &p).unwrap();
        assert_eq!(dm.o2, Vector3::zeros());
        assert_eq!(dm.o4, Vector4::zeros());
        assert_eq!(dm.b2_tilde, Vector3::zeros());
        assert_eq!(dm.b1_tilde, Matrix3::identity());
        let mg = p.hover_thrust();
        assert_eq!(dm.o1.column(0).into_owned(), Vector3::z());
        assert_eq!(dm.o1.column(1).into_owned(), -Vector3::y() * mg);
        assert_eq!(dm.o1.column(2).into_owned(), Vector3::x() * mg);
        assert_eq!(dm.o1.column(3).into_owned(), Vector3::zeros());
    }

    #[test]
    fn hover_inversion() {
        let p = params();
        let xs = ExtendedState::hover(Vector3::zeros(), &p);
        let u = invert_control(&Vector3::zeros(), 0.0, &xs, &p).unwrap();
        assert_eq!(u, ExtendedInput::default());
        let a = 0.7;
        let u = invert_control(&Vector3::new(0.0, 0.0, a), 0.0, &xs, &p).unwrap();
        assert_relative_eq!(u.thrust_accel, p.mass * a, max_relative = 1e-14);
        assert_eq!(u.torque, Vector3::zeros());
    }

    #[test]
    fn inversion_guards() {
        let p = params();
        let mut xs = ExtendedState::hover(Vector3::zeros(), &p);
        xs.thrust = 0.01 * p.hover_thrust();
        assert!(matches!(
            invert_control(&Vector3::zeros(), 0.0, &xs, &p),
            Err(Error::DecouplingSingular(_))
        ));
        let mut xs = ExtendedState::hover(Vector3::zeros(), &p);
        xs.base.euler.y = 86f64.to_radians();
        assert!(matches!(
            invert_control(&Vector3::zeros(), 0.0, &xs, &p),
            Err(Error::DecouplingSingular(_))
        ));
    }

    #[test]
    fn decoupling_matches_finite_differences() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xs = random_state(&mut rng, &p);
            let input = ExtendedInput {
                thrust_accel: rng.random_range(-2.0..2.0),
                torque: Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                ),
            };
            let dm = decoupling_matrices(&xs, &p).unwrap();
            let theta = dm.o3 * Vector4::new(input.thrust_accel, input.torque.x, input.torque.y, input.torque.z) + dm.o4;
            let predicted = (dm.o1 * theta + dm.o2) / p.mass;
            let fd = fd_snap(&xs, &input, &p, 1e-3);
            assert!(
                (predicted - fd).norm() <= 1e-4 * predicted.norm().max(1.0),
                "predicted {predicted:?} fd {fd:?}"
            );
        }
    }

    #[test]
    fn inversion_realises_commanded_snap() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let xs = random_state(&mut rng, &p);
            let s = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let u_psi = rng.random_range(-1.0..1.0);
            let input = invert_control(&s, u_psi, &xs, &p).unwrap();
            let fd = fd_snap(&xs, &input, &p, 1e-3);
            assert!((fd - s).norm() <= 1e-4 * s.norm().max(1.0), "s {s:?} fd {fd:?}");

            // ψ̈ realised by the torques, from the exact derivative chain.
            let dm = decoupling_matrices(&xs, &p).unwrap();
            let theta = dm.o3 * Vector4::new(input.thrust_accel, input.torque.x, input.torque.y, input.torque.z) + dm.o4;
            assert_relative_eq!(theta[3], u_psi, epsilon = 1e-9);
        }
    }

    #[test]
    fn hover_reference_gives_hover_rotors() {
        let p = params();
        let xs = ExtendedState::hover(Vector3::new(0.0, 0.0, 2.0), &p);
        let out = controller_step(&xs, &TrajectoryPoint::fixed(xs.base.position), &ControllerGains::default(), &p, 0.01, false).unwrap();
        let expected = (0.468_f64 * 9.81 / (4.0 * 2.98e-6)).sqrt();
        for w in out.rotors.0 {
            assert_relative_eq!(w, expected, max_relative = 1e-12);
        }
        assert_eq!(out.next_thrust, (p.hover_thrust(), 0.0));
    }

    #[test]
    fn step_reference_converges() {
        let p = params();
        let ctrl = Controller::new(p, ControllerGains::default()).unwrap();
        let mut xs = ExtendedState::hover(Vector3::zeros(), &p);
        let target = TrajectoryPoint::fixed(Vector3::new(0.3, -0.2, 0.25));
        let dt = 0.01;
        for _ in 0..3000 {
            let out = ctrl.step(&xs, &target, dt).unwrap();
            xs = propagate(&xs, &out.input, &p, dt).unwrap();
            assert_relative_eq!(xs.thrust, out.next_thrust.0, max_relative = 1e-12);
        }
        assert!((xs.base.position - target.position).norm() < 1e-3);
        assert!(xs.base.euler.z.abs() < 1e-6);
    }

    #[test]
    fn envelope_violation_surfaces() {
        let p = params();
        let xs = ExtendedState::hover(Vector3::zeros(), &p);
        let far = TrajectoryPoint::fixed(Vector3::new(100.0, 0.0, 0.0));
        let err = controller_step(&xs, &far, &ControllerGains::default(), &p, 0.01, false).unwrap_err();
        assert!(matches!(err, Error::InfeasibleWrench { .. }), "{err}");
    }
}
