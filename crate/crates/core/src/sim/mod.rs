//! Fixed-step simulation of the formation with per-edge delayed feedback.
//!
//! Two pipelines share the same integrator and history machinery:
//! [`simulate`] integrates the physical `(σ, ω)` dynamics of every craft with
//! the feedback-linearizing inner loop, and [`simulate_linear`] integrates the
//! stacked linear retarded system directly from the closed-loop matrices.

mod delay;
mod history;
mod integrator;

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector3};
use thiserror::Error;

pub use delay::{DelayKind, DelayProfile};
pub use history::HistoryBuffer;
pub use integrator::{DelaySystem, Interpolation, Rk4Dde};

use crate::attitude::{
    feedback_linearize, kinematics_inverse, kinematics_matrix, kinematics_rate, state_derivative,
    AttitudeError, LinearizedState, Mrp, RigidBodyParams, SpacecraftState,
};
use crate::controller::{
    consensus_error, control_input, ClosedLoopMatrices, ConsensusErrorOperator, ControllerError,
    DelayGains, StackedState,
};
use crate::scenario::Scenario;
use crate::topology::EdgeKey;

/// Any state component beyond this magnitude ends the run as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid delay profile: {0}")]
    BadProfile(String),
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("final time must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("history lookup at {s} is newer than the latest sample {latest}")]
    FutureLookup { s: f64, latest: f64 },
    #[error("history lookup at {s} is older than the retained window (oldest {oldest})")]
    Evicted { s: f64, oldest: f64 },
    #[error("history sample at {t} does not advance past {latest}")]
    NonMonotonic { t: f64, latest: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("delay profile missing for edge {0}->{1}")]
    MissingDelay(usize, usize),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Attitude(#[from] AttitudeError),
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Completed,
    /// A state component exceeded [`DIVERGENCE_THRESHOLD`] or became non-finite.
    Diverged { t: f64, max_abs: f64 },
    /// A craft approached the `Φ = 2π` MRP singularity.
    MrpSingularity { t: f64, craft: usize, angle: f64 },
}

impl Termination {
    pub fn is_completed(&self) -> bool {
        matches!(self, Termination::Completed)
    }

    pub fn describe(&self) -> String {
        match self {
            Termination::Completed => "completed".into(),
            Termination::Diverged { t, max_abs } => {
                format!("diverged at t={t} (max |state| = {max_abs:e})")
            }
            Termination::MrpSingularity { t, craft, angle } => format!(
                "craft {} reached principal angle {angle:.4} rad at t={t}; MRP shadow switching is not supported",
                craft + 1
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CraftSample {
    pub sigma: Vector3<f64>,
    pub sigma_dot: Vector3<f64>,
    pub omega: Vector3<f64>,
    /// Applied body torque; absent for the linear pipeline.
    pub torque: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub crafts: Vec<CraftSample>,
    pub consensus_error: f64,
}

/// Sampled trajectory on the uniform grid `t_k = k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub dt: f64,
    pub n_craft: usize,
    pub rows: Vec<TraceRow>,
    pub termination: Termination,
}

impl Trace {
    pub fn initial_error(&self) -> f64 {
        self.rows.first().map_or(0.0, |r| r.consensus_error)
    }

    pub fn final_error(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.consensus_error)
    }

    pub fn final_time(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.t)
    }

    /// First time the consensus error drops below `ratio × initial` and stays
    /// there for the rest of the trace.
    pub fn settling_time(&self, ratio: f64) -> Option<f64> {
        let threshold = ratio * self.initial_error();
        let last_above = self.rows.iter().rposition(|r| r.consensus_error >= threshold);
        match last_above {
            None => self.rows.first().map(|r| r.t),
            Some(i) if i + 1 < self.rows.len() => Some(self.rows[i + 1].t),
            Some(_) => None,
        }
    }

    /// Sup-norm distance between the `(σ, σ̇)` histories of two traces over
    /// their common prefix.
    pub fn max_linearized_difference(&self, other: &Trace) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .flat_map(|(a, b)| a.crafts.iter().zip(&b.crafts))
            .map(|(a, b)| (a.sigma - b.sigma).amax().max((a.sigma_dot - b.sigma_dot).amax()))
            .fold(0.0, f64::max)
    }
}

fn step_count(dt: f64, t_final: f64) -> Result<usize, SimError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SimError::BadStep(dt));
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(SimError::BadHorizon(t_final));
    }
    Ok((t_final / dt).round() as usize)
}

fn max_abs(x: &DVector<f64>) -> f64 {
    x.iter().fold(0.0, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY })
}

fn lag_order(
    gains: &DelayGains,
    delays: &BTreeMap<EdgeKey, DelayProfile>,
) -> Result<Vec<(EdgeKey, DelayProfile)>, SimError> {
    gains
        .edges()
        .map(|e| {
            delays
                .get(&e)
                .map(|p| (e, *p))
                .ok_or(SimError::MissingDelay(e.0, e.1))
        })
        .collect()
}

/// The nonlinear formation: per craft `[σ; ω]`, observable `[x₁; x₂]`.
struct FormationSystem {
    bodies: Vec<RigidBodyParams>,
    gains: DelayGains,
    gamma: f64,
    lags: Vec<(EdgeKey, DelayProfile)>,
}

impl FormationSystem {
    fn n(&self) -> usize {
        self.bodies.len()
    }

    fn craft(x: &DVector<f64>, i: usize) -> (Vector3<f64>, Vector3<f64>) {
        (
            x.fixed_rows::<3>(6 * i).into_owned(),
            x.fixed_rows::<3>(6 * i + 3).into_owned(),
        )
    }

    fn pack(states: &[SpacecraftState]) -> DVector<f64> {
        let mut x = DVector::zeros(6 * states.len());
        for (i, s) in states.iter().enumerate() {
            x.fixed_rows_mut::<3>(6 * i).copy_from(s.sigma.vector());
            x.fixed_rows_mut::<3>(6 * i + 3).copy_from(&s.omega);
        }
        x
    }

    fn stacked(&self, x: &DVector<f64>) -> StackedState {
        let n = self.n();
        let mut out = StackedState::zeros(n);
        for i in 0..n {
            let (sigma, omega) = Self::craft(x, i);
            let p = kinematics_matrix(&Mrp::new(sigma).unwrap_or_else(|_| Mrp::identity()));
            out.x1.fixed_rows_mut::<3>(3 * i).copy_from(&sigma);
            out.x2.fixed_rows_mut::<3>(3 * i).copy_from(&(p * omega));
        }
        out
    }

    /// Outer-loop input `v` for every craft and the resulting torques.
    fn control(
        &self,
        x: &DVector<f64>,
        delayed: &[DVector<f64>],
    ) -> Result<(StackedState, Vec<Vector3<f64>>), SimError> {
        let current = self.stacked(x);
        let past: BTreeMap<EdgeKey, StackedState> = self
            .lags
            .iter()
            .zip(delayed)
            .map(|((e, _), y)| (*e, StackedState::from_vector(y)))
            .collect();
        let u = control_input(&current, &past, self.gamma, &self.gains)?;
        let torques = (0..self.n())
            .map(|i| {
                let lin = LinearizedState {
                    sigma1: Mrp::new(current.sigma(i))?,
                    sigma2: current.sigma_dot(i),
                };
                let v = u.fixed_rows::<3>(3 * i).into_owned();
                Ok(feedback_linearize(&lin, &v, &self.bodies[i]).torque)
            })
            .collect::<Result<Vec<_>, AttitudeError>>()?;
        Ok((current, torques))
    }
}

impl DelaySystem for FormationSystem {
    fn state_dim(&self) -> usize {
        6 * self.n()
    }

    fn lag_count(&self) -> usize {
        self.lags.len()
    }

    fn lag(&self, index: usize, t: f64) -> f64 {
        self.lags[index].1.delay_at(t)
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        self.stacked(x).to_vector()
    }

    fn output_rate(&self, x: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut rate = DVector::zeros(6 * n);
        for i in 0..n {
            let (sigma, omega) = Self::craft(x, i);
            let (sigma_dot, omega_dot) = Self::craft(dx, i);
            let mrp = Mrp::new(sigma).unwrap_or_else(|_| Mrp::identity());
            let accel = kinematics_rate(&mrp, &sigma_dot) * omega + kinematics_matrix(&mrp) * omega_dot;
            rate.fixed_rows_mut::<3>(3 * i).copy_from(&sigma_dot);
            rate.fixed_rows_mut::<3>(3 * n + 3 * i).copy_from(&accel);
        }
        rate
    }

    fn derivative(
        &self,
        _t: f64,
        x: &DVector<f64>,
        delayed: &[DVector<f64>],
    ) -> Result<DVector<f64>, SimError> {
        let (_, torques) = self.control(x, delayed)?;
        let mut dx = DVector::zeros(x.len());
        for (i, (tau, body)) in torques.iter().zip(&self.bodies).enumerate() {
            let (sigma, omega) = Self::craft(x, i);
            let state = SpacecraftState {
                sigma: Mrp::new(sigma)?,
                omega,
            };
            let (sigma_dot, omega_dot) = state_derivative(&state, tau, body);
            dx.fixed_rows_mut::<3>(6 * i).copy_from(&sigma_dot);
            dx.fixed_rows_mut::<3>(6 * i + 3).copy_from(&omega_dot);
        }
        Ok(dx)
    }
}

/// Integrates the full nonlinear formation described by `scenario`.
///
/// Divergence and the MRP singularity are not errors: the trace is truncated
/// and [`Trace::termination`] records what happened.
pub fn simulate(scenario: &Scenario) -> Result<Trace, SimError> {
    let n = scenario.crafts.len();
    let steps = step_count(scenario.dt, scenario.t_final)?;
    let gains = DelayGains::from_laplacian(scenario.topology.laplacian());
    let delays: BTreeMap<EdgeKey, DelayProfile> =
        scenario.delays.iter().map(|e| (e.key(), e.profile)).collect();
    let system = FormationSystem {
        bodies: scenario.crafts.iter().map(|c| c.params).collect(),
        lags: lag_order(&gains, &delays)?,
        gains,
        gamma: scenario.gamma,
    };
    let initial: Vec<SpacecraftState> = scenario.crafts.iter().map(|c| c.initial).collect();
    let retention = scenario.max_delay() + 2.0 * scenario.dt;
    let mut integ = Rk4Dde::new(&system, 0.0, FormationSystem::pack(&initial), scenario.dt, retention)?;
    let e_op = ConsensusErrorOperator::new(n);

    let mut rows = Vec::with_capacity(steps + 1);
    let mut termination = Termination::Completed;
    loop {
        let t = integ.time();
        let x = integ.state().clone();
        let torques = integ
            .delayed_at(t, &x)
            .and_then(|d| system.control(&x, &d))
            .map(|(_, tau)| tau)
            .ok();
        let stacked = system.stacked(&x);
        let (_, err) = consensus_error(&stacked, &e_op)?;
        let crafts = (0..n)
            .map(|i| {
                let (sigma, omega) = FormationSystem::craft(&x, i);
                CraftSample {
                    sigma,
                    sigma_dot: stacked.sigma_dot(i),
                    omega,
                    torque: torques.as_ref().map(|tau| tau[i]),
                }
            })
            .collect();
        rows.push(TraceRow {
            t,
            crafts,
            consensus_error: err,
        });

        let worst = max_abs(&x);
        if worst > DIVERGENCE_THRESHOLD {
            termination = Termination::Diverged { t, max_abs: worst };
            break;
        }
        if let Some((craft, angle)) = (0..n).find_map(|i| {
            let (sigma, _) = FormationSystem::craft(&x, i);
            match Mrp::new(sigma).and_then(|m| m.check_singularity()) {
                Err(AttitudeError::NearSingularity { angle }) => Some((i, angle)),
                _ => None,
            }
        }) {
            termination = Termination::MrpSingularity { t, craft, angle };
            break;
        }
        if integ.steps() == steps {
            break;
        }
        integ.step()?;
    }
    Ok(Trace {
        dt: scenario.dt,
        n_craft: n,
        rows,
        termination,
    })
}

/// Linear retarded system `ẋ = A₀x + Σ ᶦʲA x(t - τᵢⱼ)`.
struct LinearSystem<'a> {
    cl: &'a ClosedLoopMatrices,
    lags: Vec<(EdgeKey, DelayProfile)>,
}

impl DelaySystem for LinearSystem<'_> {
    fn state_dim(&self) -> usize {
        self.cl.a0.nrows()
    }

    fn lag_count(&self) -> usize {
        self.lags.len()
    }

    fn lag(&self, index: usize, t: f64) -> f64 {
        self.lags[index].1.delay_at(t)
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn output_rate(&self, _x: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64> {
        dx.clone()
    }

    fn derivative(
        &self,
        _t: f64,
        x: &DVector<f64>,
        delayed: &[DVector<f64>],
    ) -> Result<DVector<f64>, SimError> {
        let mut dx = &self.cl.a0 * x;
        for ((e, _), y) in self.lags.iter().zip(delayed) {
            dx += &self.cl.aij[e] * y;
        }
        Ok(dx)
    }
}

/// Integrates the linear closed loop directly, without the attitude layer.
/// Angular velocities in the trace are recovered as `ω = P(σ)⁻¹σ̇`; torques are
/// not available.
pub fn simulate_linear(
    closed_loop: &ClosedLoopMatrices,
    delays: &BTreeMap<EdgeKey, DelayProfile>,
    x0: &StackedState,
    dt: f64,
    t_final: f64,
) -> Result<Trace, SimError> {
    let n = closed_loop.n_agents();
    if x0.n_agents() != n {
        return Err(SimError::Dimension(format!(
            "initial state has {} agents, closed loop has {n}",
            x0.n_agents()
        )));
    }
    let steps = step_count(dt, t_final)?;
    let system = LinearSystem {
        cl: closed_loop,
        lags: lag_order(&closed_loop.gains, delays)?,
    };
    let max_delay = system.lags.iter().map(|(_, p)| p.h()).fold(0.0, f64::max);
    let mut integ = Rk4Dde::new(&system, 0.0, x0.to_vector(), dt, max_delay + 2.0 * dt)?;
    let e_op = ConsensusErrorOperator::new(n);

    let mut rows = Vec::with_capacity(steps + 1);
    let mut termination = Termination::Completed;
    loop {
        let t = integ.time();
        let x = StackedState::from_vector(integ.state());
        let (_, err) = consensus_error(&x, &e_op)?;
        let crafts = (0..n)
            .map(|i| {
                let sigma = x.sigma(i);
                let sigma_dot = x.sigma_dot(i);
                let omega = Mrp::new(sigma)
                    .map(|m| kinematics_inverse(&m) * sigma_dot)
                    .unwrap_or_else(|_| Vector3::repeat(f64::NAN));
                CraftSample {
                    sigma,
                    sigma_dot,
                    omega,
                    torque: None,
                }
            })
            .collect();
        rows.push(TraceRow {
            t,
            crafts,
            consensus_error: err,
        });
        let worst = max_abs(integ.state());
        if worst > DIVERGENCE_THRESHOLD {
            termination = Termination::Diverged { t, max_abs: worst };
            break;
        }
        if integ.steps() == steps {
            break;
        }
        integ.step()?;
    }
    Ok(Trace {
        dt,
        n_craft: n,
        rows,
        termination,
    })
}

/// Scalar test equation `ẋ(t) = -x(t - 1)` with `x(s) = 1` for `s ≤ 0`.
pub struct ScalarDelayEquation;

impl DelaySystem for ScalarDelayEquation {
    fn state_dim(&self) -> usize {
        1
    }

    fn lag_count(&self) -> usize {
        1
    }

    fn lag(&self, _index: usize, _t: f64) -> f64 {
        1.0
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn output_rate(&self, _x: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64> {
        dx.clone()
    }

    fn derivative(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        delayed: &[DVector<f64>],
    ) -> Result<DVector<f64>, SimError> {
        Ok(-&delayed[0])
    }
}

/// Solves the scalar test equation on `[0, t_final]`; returns `(t, x)` pairs.
pub fn calibrate_dde(dt: f64, t_final: f64) -> Result<Vec<(f64, f64)>, SimError> {
    calibrate_dde_with(dt, t_final, Interpolation::default())
}

pub fn calibrate_dde_with(
    dt: f64,
    t_final: f64,
    interpolation: Interpolation,
) -> Result<Vec<(f64, f64)>, SimError> {
    let steps = step_count(dt, t_final)?;
    let mut integ = Rk4Dde::new(&ScalarDelayEquation, 0.0, DVector::from_element(1, 1.0), dt, 1.0 + 2.0 * dt)?
        .with_interpolation(interpolation);
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, 1.0));
    for _ in 0..steps {
        integ.step()?;
        out.push((integ.time(), integ.state()[0]));
    }
    Ok(out)
}

/// Exact solution of the scalar test equation, built piecewise by the method
/// of steps: on `[k-1, k]`, `x` is the integral of `-x(t-1)` from the previous
/// piece.
pub fn scalar_reference(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    // Coefficients of x on [k-1, k] as a polynomial in (t - (k-1)).
    let mut piece: Vec<f64> = vec![1.0];
    let mut k = 0usize;
    loop {
        // Next piece: x_{k+1}(u) = x_k(1) - ∫₀ᵘ x_k(r) dr, u ∈ [0, 1].
        let end: f64 = piece.iter().sum();
        let mut next = vec![end];
        next.extend(piece.iter().enumerate().map(|(p, c)| -c / (p as f64 + 1.0)));
        piece = next;
        k += 1;
        if t <= k as f64 {
            let u = t - (k - 1) as f64;
            return piece.iter().rev().fold(0.0, |acc, c| acc * u + c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_reference_values() {
        assert_eq!(scalar_reference(1.0), 0.0);
        assert!((scalar_reference(2.0) + 0.5).abs() < 1e-15);
        assert!((scalar_reference(0.5) - 0.5).abs() < 1e-15);
        // x on [1, 2] is -(2t - t²/2 - 3/2).
        let t = 1.3;
        assert!((scalar_reference(t) + (2.0 * t - t * t / 2.0 - 1.5)).abs() < 1e-14);
    }

    #[test]
    fn calibration_hits_method_of_steps_values() {
        let out = calibrate_dde(0.01, 2.0).unwrap();
        assert!(out[100].1.abs() < 1e-6);
        assert!((out[200].1 + 0.5).abs() < 1e-6);
        assert_eq!(out[200].0, 2.0);
    }

    fn calibration_error(dt: f64, interpolation: Interpolation, t_end: f64) -> f64 {
        let coarse = calibrate_dde_with(dt, t_end, interpolation).unwrap();
        let fine = calibrate_dde_with(dt / 16.0, t_end, interpolation).unwrap();
        (coarse.last().unwrap().1 - fine.last().unwrap().1).abs()
    }

    #[test]
    fn rk4_is_fourth_order_with_hermite_history() {
        let e1 = calibration_error(0.1, Interpolation::Hermite, 8.0);
        let e2 = calibration_error(0.05, Interpolation::Hermite, 8.0);
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn linear_history_is_second_order() {
        let ratio = calibration_error(0.1, Interpolation::Linear, 8.0)
            / calibration_error(0.05, Interpolation::Linear, 8.0);
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn bad_step_rejected() {
        assert_eq!(calibrate_dde(0.0, 1.0), Err(SimError::BadStep(0.0)));
        assert_eq!(calibrate_dde(0.1, -1.0), Err(SimError::BadHorizon(-1.0)));
    }

    #[test]
    fn settling_time_requires_staying_below() {
        let row = |t: f64, e: f64| TraceRow {
            t,
            crafts: vec![],
            consensus_error: e,
        };
        let trace = Trace {
            dt: 1.0,
            n_craft: 0,
            rows: vec![row(0.0, 1.0), row(1.0, 1e-4), row(2.0, 0.5), row(3.0, 1e-4), row(4.0, 1e-5)],
            termination: Termination::Completed,
        };
        assert_eq!(trace.settling_time(1e-3), Some(3.0));
        assert_eq!(trace.settling_time(1e-6), None);
    }
}
