//! Single-spacecraft attitude model in Modified Rodrigues Parameters.
//!
//! Kinematics `σ̇ = P(σ) ω` and Euler dynamics `J ω̇ = -ω × Jω + τ`, the change
//! of coordinates to `(σ, σ̇)` and the feedback-linearizing inner loop that
//! turns every craft into a per-axis double integrator `σ̈ = v`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::mat::skew;

/// Principal angles at or beyond `2π - SINGULARITY_MARGIN` are rejected.
pub const SINGULARITY_MARGIN: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttitudeError {
    #[error("MRP has non-finite components")]
    NonFinite,
    #[error("principal angle {angle:.4} rad is within {SINGULARITY_MARGIN} rad of the 2π MRP singularity")]
    NearSingularity { angle: f64 },
    #[error("inertia matrix is not symmetric positive definite")]
    InvalidInertia,
}

/// Modified Rodrigues Parameters `σ = n̂ tan(Φ/4)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mrp(Vector3<f64>);

impl Mrp {
    pub fn new(sigma: Vector3<f64>) -> Result<Self, AttitudeError> {
        if sigma.iter().all(|x| x.is_finite()) {
            Ok(Self(sigma))
        } else {
            Err(AttitudeError::NonFinite)
        }
    }

    pub fn identity() -> Self {
        Self(Vector3::zeros())
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    /// Principal rotation angle `Φ = 4 atan(‖σ‖)`, in `[0, 2π)`.
    pub fn principal_angle(&self) -> f64 {
        4.0 * self.0.norm().atan()
    }

    /// Fails once the attitude is close enough to `Φ = 2π` that the set would
    /// need a shadow switch, which this model does not perform.
    pub fn check_singularity(&self) -> Result<(), AttitudeError> {
        let angle = self.principal_angle();
        if angle >= 2.0 * PI - SINGULARITY_MARGIN {
            Err(AttitudeError::NearSingularity { angle })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyParams {
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
}

impl RigidBodyParams {
    pub fn new(inertia: Matrix3<f64>) -> Result<Self, AttitudeError> {
        if !inertia.iter().all(|x| x.is_finite()) {
            return Err(AttitudeError::InvalidInertia);
        }
        let asym = (inertia - inertia.transpose()).amax();
        if asym > 1e-9 * inertia.amax().max(1.0) {
            return Err(AttitudeError::InvalidInertia);
        }
        let chol = inertia.cholesky().ok_or(AttitudeError::InvalidInertia)?;
        Ok(Self {
            inertia,
            inertia_inv: chol.inverse(),
        })
    }

    /// `j · I₃`.
    pub fn scalar(j: f64) -> Result<Self, AttitudeError> {
        Self::new(Matrix3::identity() * j)
    }

    pub fn inertia(&self) -> &Matrix3<f64> {
        &self.inertia
    }

    pub fn inertia_inv(&self) -> &Matrix3<f64> {
        &self.inertia_inv
    }
}

/// Physical state: attitude and body-frame angular velocity (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacecraftState {
    pub sigma: Mrp,
    pub omega: Vector3<f64>,
}

/// Linearized coordinates `(σ₁, σ₂) = (σ, σ̇)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedState {
    pub sigma1: Mrp,
    pub sigma2: Vector3<f64>,
}

/// `P(σ) = ¼ (2[σ̃] + 2σσᵀ + (1 - σᵀσ) I)`.
pub fn kinematics_matrix(sigma: &Mrp) -> Matrix3<f64> {
    let s = sigma.0;
    let ss = s.dot(&s);
    (skew(&s) * 2.0 + s * s.transpose() * 2.0 + Matrix3::identity() * (1.0 - ss)) * 0.25
}

/// `P(σ)⁻¹ = 16 / (1 + σᵀσ)² · P(σ)ᵀ`.
pub fn kinematics_inverse(sigma: &Mrp) -> Matrix3<f64> {
    let ss = sigma.0.dot(&sigma.0);
    let p = kinematics_matrix(sigma);
    let closed = p.transpose() * (16.0 / ((1.0 + ss) * (1.0 + ss)));
    if closed.iter().all(|x| x.is_finite()) {
        closed
    } else {
        // Only reachable for astronomically large ‖σ‖.
        p.try_inverse().unwrap_or(closed)
    }
}

/// Time derivative of `P(σ)` along `σ̇`.
pub fn kinematics_rate(sigma: &Mrp, sigma_dot: &Vector3<f64>) -> Matrix3<f64> {
    let s = sigma.0;
    let d = sigma_dot;
    (skew(d) * 2.0 + (d * s.transpose() + s * d.transpose()) * 2.0
        - Matrix3::identity() * (2.0 * s.dot(d)))
        * 0.25
}

/// Euler's equation `ω̇ = J⁻¹(-ω × Jω + τ)`.
pub fn euler_dynamics(
    state: &SpacecraftState,
    torque: &Vector3<f64>,
    params: &RigidBodyParams,
) -> Vector3<f64> {
    let w = state.omega;
    params.inertia_inv * (-w.cross(&(params.inertia * w)) + torque)
}

/// `(σ̇, ω̇)` of the physical state under an applied torque.
pub fn state_derivative(
    state: &SpacecraftState,
    torque: &Vector3<f64>,
    params: &RigidBodyParams,
) -> (Vector3<f64>, Vector3<f64>) {
    let sigma_dot = kinematics_matrix(&state.sigma) * state.omega;
    (sigma_dot, euler_dynamics(state, torque, params))
}

pub fn to_linearized(state: &SpacecraftState) -> LinearizedState {
    LinearizedState {
        sigma1: state.sigma,
        sigma2: kinematics_matrix(&state.sigma) * state.omega,
    }
}

pub fn from_linearized(lin: &LinearizedState) -> SpacecraftState {
    SpacecraftState {
        sigma: lin.sigma1,
        omega: kinematics_inverse(&lin.sigma1) * lin.sigma2,
    }
}

/// Output of the inner feedback-linearization loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizingControl {
    /// Generalized input `u = C(σ, σ̇) σ̇ + M(σ) v`.
    pub u: Vector3<f64>,
    /// Body torque `τ = P(σ) u`.
    pub torque: Vector3<f64>,
}

/// Inertia-like matrix `M(σ) = P⁻¹ J P⁻¹`.
pub fn mass_matrix(sigma: &Mrp, params: &RigidBodyParams) -> Matrix3<f64> {
    let p_inv = kinematics_inverse(sigma);
    p_inv * params.inertia * p_inv
}

/// Velocity-coupling matrix `C(σ, σ̇) = P⁻¹(-J P⁻¹ Ṗ P⁻¹ + [ω̃] J P⁻¹)` with
/// `ω = P⁻¹ σ̇`.
pub fn coriolis_matrix(lin: &LinearizedState, params: &RigidBodyParams) -> Matrix3<f64> {
    let p_inv = kinematics_inverse(&lin.sigma1);
    let p_dot = kinematics_rate(&lin.sigma1, &lin.sigma2);
    let omega = p_inv * lin.sigma2;
    let j = params.inertia;
    p_inv * (-(j * p_inv * p_dot * p_inv) + skew(&omega) * j * p_inv)
}

/// Control that makes the attitude obey `σ̈ = v` exactly.
pub fn feedback_linearize(
    lin: &LinearizedState,
    v: &Vector3<f64>,
    params: &RigidBodyParams,
) -> LinearizingControl {
    let u = coriolis_matrix(lin, params) * lin.sigma2 + mass_matrix(&lin.sigma1, params) * v;
    let torque = kinematics_matrix(&lin.sigma1) * u;
    LinearizingControl { u, torque }
}
