//! Rigid-body quadcopter model.
//!
//! State is `[r, v, (φ, θ, ψ), ω]` with `r`, `v` in the inertial frame, Euler
//! angles in the 3-2-1 (yaw-pitch-roll) convention and `ω` the body angular
//! velocity expressed in body axes. Translational and rotational motion follow
//! the Newton-Euler equations
//!
//! ```text
//! r̈ = -g k̂ + (p/m) k̂_b
//! ω̇ = J⁻¹ (τ - ω × Jω)
//! (φ̇, θ̇, ψ̇) = Γ⁻¹ ω
//! ```
//!
//! and the four rotor speeds map onto thrust and torques through a constant
//! 4×4 mixing matrix acting on the squared speeds.

use nalgebra::{Matrix3, Matrix4, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pitch angles closer than this to ±π/2 are rejected.
pub const PITCH_SINGULARITY_MARGIN: f64 = 1e-6;

/// Physical constants of one vehicle. Defaults are those of a 0.468 kg
/// quadcopter with 0.225 m arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadParams {
    /// Mass [kg]
    pub mass: f64,
    /// Gravitational acceleration [m/s²]
    pub gravity: f64,
    /// Rotor arm length [m]
    pub arm_length: f64,
    /// Principal moments of inertia [kg·m²]
    pub jx: f64,
    pub jy: f64,
    pub jz: f64,
    /// Rotor thrust coefficient [N·s²]
    pub thrust_coeff: f64,
    /// Rotor drag-torque coefficient [N·m·s²]
    pub drag_coeff: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.468,
            gravity: 9.81,
            arm_length: 0.225,
            jx: 4.856e-3,
            jy: 4.856e-3,
            jz: 8.801e-3,
            thrust_coeff: 2.98e-6,
            drag_coeff: 1.14e-7,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("arm_length", self.arm_length),
            ("jx", self.jx),
            ("jy", self.jy),
            ("jz", self.jz),
            ("thrust_coeff", self.thrust_coeff),
            ("drag_coeff", self.drag_coeff),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be strictly positive, got {value}"
                )));
            }
        }
        Ok(())
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(self.jx, self.jy, self.jz))
    }

    pub fn inertia_inv(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(1.0 / self.jx, 1.0 / self.jy, 1.0 / self.jz))
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    /// Speed at which each rotor spins when the vehicle hovers.
    pub fn hover_rotor_speed(&self) -> f64 {
        (self.hover_thrust() / (4.0 * self.thrust_coeff)).sqrt()
    }

    /// Maps squared rotor speeds to `(p, τ_φ, τ_θ, τ_ψ)`.
    pub fn mixing_matrix(&self) -> Matrix4<f64> {
        let b = self.thrust_coeff;
        let bl = b * self.arm_length;
        let k = self.drag_coeff;
        Matrix4::new(
            b, b, b, b, //
            0.0, -bl, 0.0, bl, //
            -bl, 0.0, bl, 0.0, //
            -k, k, -k, k,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Roll, pitch, yaw [rad]
    pub euler: Vector3<f64>,
    /// Body angular velocity [rad/s]
    pub omega: Vector3<f64>,
}

pub type StateVector = SVector<f64, 12>;

impl QuadState {
    /// Level, at rest, at `position`.
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            ..Default::default()
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        v.fixed_rows_mut::<3>(6).copy_from(&self.euler);
        v.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            position: v.fixed_rows::<3>(0).into_owned(),
            velocity: v.fixed_rows::<3>(3).into_owned(),
            euler: v.fixed_rows::<3>(6).into_owned(),
            omega: v.fixed_rows::<3>(9).into_owned(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(&self.euler)
    }

    /// Body z axis in inertial coordinates.
    pub fn thrust_axis(&self) -> Vector3<f64> {
        self.rotation().column(2).into_owned()
    }

    /// Euler-angle rates `(φ̇, θ̇, ψ̇)` corresponding to the body rates.
    pub fn euler_rates(&self) -> Result<Vector3<f64>> {
        check_pitch(self.euler.y)?;
        let gamma = euler_rate_matrix(self.euler.x, self.euler.y);
        gamma
            .lu()
            .solve(&self.omega)
            .ok_or(Error::SingularAttitude { theta: self.euler.y })
    }
}

/// Total thrust and body torques.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlWrench {
    /// Total thrust [N]
    pub thrust: f64,
    /// `(τ_φ, τ_θ, τ_ψ)` [N·m]
    pub torque: Vector3<f64>,
}

impl ControlWrench {
    pub fn new(thrust: f64, torque: Vector3<f64>) -> Self {
        Self { thrust, torque }
    }

    pub fn hover(params: &QuadParams) -> Self {
        Self::new(params.hover_thrust(), Vector3::zeros())
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.torque.x, self.torque.y, self.torque.z)
    }
}

/// Angular speeds of rotors 1..4 [rad/s].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RotorSpeeds(pub [f64; 4]);

impl RotorSpeeds {
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// 3-2-1 Euler rotation, body to inertial.
pub fn rotation_matrix(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sf, cf) = euler.x.sin_cos();
    let (st, ct) = euler.y.sin_cos();
    let (sp, cp) = euler.z.sin_cos();
    Matrix3::new(
        ct * cp,
        st * cp * sf - sp * cf,
        st * cp * cf + sp * sf,
        ct * sp,
        st * sp * sf + cp * cf,
        st * sp * cf - cp * sf,
        -st,
        ct * sf,
        ct * cf,
    )
}

/// Γ such that `ω = Γ (φ̇, θ̇, ψ̇)`. Its determinant is `cos θ`.
pub fn euler_rate_matrix(phi: f64, theta: f64) -> Matrix3<f64> {
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Matrix3::new(
        1.0, 0.0, -st, //
        0.0, cf, ct * sf, //
        0.0, -sf, cf * ct,
    )
}

pub(crate) fn check_pitch(theta: f64) -> Result<()> {
    if !theta.is_finite() || theta.abs() >= std::f64::consts::FRAC_PI_2 - PITCH_SINGULARITY_MARGIN {
        return Err(Error::SingularAttitude { theta });
    }
    Ok(())
}

pub fn mix_rotors(speeds: &RotorSpeeds, params: &QuadParams) -> Result<ControlWrench> {
    if let Some(w) = speeds.0.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "rotor speeds must be nonnegative, got {w}"
        )));
    }
    let squared = Vector4::from_iterator(speeds.0.iter().map(|w| w * w));
    let u = params.mixing_matrix() * squared;
    Ok(ControlWrench::new(u[0], Vector3::new(u[1], u[2], u[3])))
}

/// Inverts the mixing map. The nonnegative root is taken for every rotor.
pub fn unmix_rotors(wrench: &ControlWrench, params: &QuadParams) -> Result<RotorSpeeds> {
    let b = params.thrust_coeff;
    let bl = b * params.arm_length;
    let k = params.drag_coeff;

    let sum = wrench.thrust / b;
    let roll = wrench.torque.x / bl;
    let pitch = wrench.torque.y / bl;
    let yaw = wrench.torque.z / k;

    let even = 0.5 * (sum + yaw); // ω₂² + ω₄²
    let odd = 0.5 * (sum - yaw); // ω₁² + ω₃²
    let squared = [
        0.5 * (odd - pitch),
        0.5 * (even - roll),
        0.5 * (odd + pitch),
        0.5 * (even + roll),
    ];

    // Round-off from the analytic inverse can leave exact zeros slightly negative.
    let floor = -1e-9 * sum.abs().max(1.0);
    if squared.iter().any(|w| !(*w >= floor)) {
        return Err(Error::InfeasibleWrench { squared });
    }
    Ok(RotorSpeeds(squared.map(|w| w.max(0.0).sqrt())))
}

/// Time derivative of the 12-state under a constant wrench.
pub fn state_derivative(
    x: &QuadState,
    u: &ControlWrench,
    params: &QuadParams,
) -> Result<StateVector> {
    let euler_rates = x.euler_rates()?;
    let accel = x.thrust_axis() * (u.thrust / params.mass) - Vector3::z() * params.gravity;
    let j = params.inertia();
    let omega_dot = params.inertia_inv() * (u.torque - x.omega.cross(&(j * x.omega)));

    let mut d = StateVector::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&x.velocity);
    d.fixed_rows_mut::<3>(3).copy_from(&accel);
    d.fixed_rows_mut::<3>(6).copy_from(&euler_rates);
    d.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(d)
}

/// Classic fixed-step RK4 over an arbitrary fixed-size state.
pub(crate) fn rk4<const D: usize, F>(x: &SVector<f64, D>, dt: f64, f: F) -> Result<SVector<f64, D>>
where
    F: Fn(f64, &SVector<f64, D>) -> Result<SVector<f64, D>>,
{
    let k1 = f(0.0, x)?;
    let k2 = f(0.5 * dt, &(x + k1 * (0.5 * dt)))?;
    let k3 = f(0.5 * dt, &(x + k2 * (0.5 * dt)))?;
    let k4 = f(dt, &(x + k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

/// Advances the state by `dt` holding the wrench constant.
pub fn integrate_step(
    x: &QuadState,
    u: &ControlWrench,
    params: &QuadParams,
    dt: f64,
) -> Result<QuadState> {
    integrate_step_with(x, params, dt, |_| *u)
}

/// Advances the state by `dt` with a wrench that may vary inside the step;
/// `wrench_at` receives the time elapsed since the start of the step.
pub fn integrate_step_with<W>(x: &QuadState, params: &QuadParams, dt: f64, wrench_at: W) -> Result<QuadState>
where
    W: Fn(f64) -> ControlWrench,
{
    check_dt(dt)?;
    let next = rk4(&x.to_vector(), dt, |tau, v| {
        state_derivative(&QuadState::from_vector(v), &wrench_at(tau), params)
    })?;
    Ok(QuadState::from_vector(&next))
}
