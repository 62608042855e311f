use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayKind {
    /// `τ(t) = h`.
    Constant,
    /// `τ(t) = (h/2)(1 + sin(2dt/h))`, which spans `[0, h]` with `|τ̇| ≤ d`.
    Sinusoidal,
}

/// Time-varying delay with bounds `0 ≤ τ(t) ≤ h` and `|τ̇(t)| ≤ d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayProfile {
    kind: DelayKind,
    h: f64,
    d: f64,
}

impl DelayProfile {
    pub fn new(kind: DelayKind, h: f64, d: f64) -> Result<Self, SimError> {
        if !(h.is_finite() && h >= 0.0) {
            return Err(SimError::BadProfile(format!("delay bound h = {h} must be finite and non-negative")));
        }
        if !(d.is_finite() && d >= 0.0) {
            return Err(SimError::BadProfile(format!("rate bound d = {d} must be finite and non-negative")));
        }
        Ok(Self { kind, h, d })
    }

    pub fn constant(h: f64) -> Result<Self, SimError> {
        Self::new(DelayKind::Constant, h, 0.0)
    }

    pub fn sinusoidal(h: f64, d: f64) -> Result<Self, SimError> {
        Self::new(DelayKind::Sinusoidal, h, d)
    }

    pub fn kind(&self) -> DelayKind {
        self.kind
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn delay_at(&self, t: f64) -> f64 {
        match self.kind {
            DelayKind::Constant => self.h,
            DelayKind::Sinusoidal if self.h == 0.0 => 0.0,
            DelayKind::Sinusoidal => {
                let tau = 0.5 * self.h * (1.0 + (2.0 * self.d * t / self.h).sin());
                tau.clamp(0.0, self.h)
            }
        }
    }
}
