use nalgebra::DVector;

use super::history::HistoryBuffer;
use super::SimError;

/// A retarded system `ẋ(t) = f(t, x(t), y(t - τ₁(t)), ..., y(t - τₘ(t)))`
/// where `y = g(x)` is the quantity other agents observe with delay.
pub trait DelaySystem {
    fn state_dim(&self) -> usize;

    fn lag_count(&self) -> usize;

    /// Current value of delay `index`.
    fn lag(&self, index: usize, t: f64) -> f64;

    /// Delayed observable `y = g(x)`.
    fn output(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `ẏ = Dg(x) ẋ`, used for Hermite interpolation of the history.
    fn output_rate(&self, x: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64>;

    fn derivative(
        &self,
        t: f64,
        x: &DVector<f64>,
        delayed: &[DVector<f64>],
    ) -> Result<DVector<f64>, SimError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    Linear,
    /// Cubic Hermite on brackets with known rates; keeps RK4 at fourth order.
    #[default]
    Hermite,
}

/// Fixed-step classical Runge–Kutta for retarded systems.
///
/// Delayed arguments at stage times are read from the history buffer. When a
/// stage asks for a point newer than the last accepted step (delays shorter
/// than `dt`), the value is interpolated between that step and the stage's
/// own trial state.
pub struct Rk4Dde<'a, S: DelaySystem> {
    system: &'a S,
    t0: f64,
    dt: f64,
    steps: usize,
    x: DVector<f64>,
    history: HistoryBuffer,
    interpolation: Interpolation,
}

impl<'a, S: DelaySystem> Rk4Dde<'a, S> {
    pub fn new(
        system: &'a S,
        t0: f64,
        x0: DVector<f64>,
        dt: f64,
        retention: f64,
    ) -> Result<Self, SimError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SimError::BadStep(dt));
        }
        if x0.len() != system.state_dim() {
            return Err(SimError::Dimension(format!(
                "initial state has {} entries, system expects {}",
                x0.len(),
                system.state_dim()
            )));
        }
        let history = HistoryBuffer::new(t0, system.output(&x0), retention);
        Ok(Self {
            system,
            t0,
            dt,
            steps: 0,
            x: x0,
            history,
            interpolation: Interpolation::default(),
        })
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    /// `t0 + k·dt`, computed from the step count to avoid drift.
    pub fn time(&self) -> f64 {
        self.t0 + self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    /// Delayed observables seen by a stage evaluated at `(t, x)`.
    pub fn delayed_at(&self, t: f64, x: &DVector<f64>) -> Result<Vec<DVector<f64>>, SimError> {
        let latest = self.history.latest_time();
        let mut stage_output = None;
        (0..self.system.lag_count())
            .map(|k| {
                let s = t - self.system.lag(k, t);
                if s <= latest {
                    match self.interpolation {
                        Interpolation::Linear => self.history.lookup(s),
                        Interpolation::Hermite => self.history.lookup_hermite(s),
                    }
                } else {
                    let y = stage_output.get_or_insert_with(|| self.system.output(x));
                    let w = (s - latest) / (t - latest);
                    Ok(self.history.latest() * (1.0 - w) + &*y * w)
                }
            })
            .collect()
    }

    fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, SimError> {
        let delayed = self.delayed_at(t, x)?;
        self.system.derivative(t, x, &delayed)
    }

    pub fn step(&mut self) -> Result<(), SimError> {
        let dt = self.dt;
        let t = self.time();
        let k1 = self.eval(t, &self.x)?;
        let rate = self.system.output_rate(&self.x, &k1);
        self.history.set_latest_rate(rate);
        let half = t + 0.5 * dt;
        let k2 = self.eval(half, &(&self.x + &k1 * (0.5 * dt)))?;
        let k3 = self.eval(half, &(&self.x + &k2 * (0.5 * dt)))?;
        let k4 = self.eval(t + dt, &(&self.x + &k3 * dt))?;
        self.x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        self.steps += 1;
        let t_new = self.time();
        let y = self.system.output(&self.x);
        self.history.push(t_new, y)
    }
}
