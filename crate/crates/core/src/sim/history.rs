use std::collections::VecDeque;

use nalgebra::DVector;

use super::SimError;

#[derive(Debug, Clone)]
struct Sample {
    t: f64,
    y: DVector<f64>,
    rate: Option<DVector<f64>>,
}

/// Past trajectory samples, kept back to `latest - retention`.
///
/// The trajectory before the first sample is the first sample itself
/// (constant pre-history).
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    origin: f64,
    initial: DVector<f64>,
    samples: VecDeque<Sample>,
    retention: f64,
}

impl HistoryBuffer {
    pub fn new(t0: f64, y0: DVector<f64>, retention: f64) -> Self {
        let mut samples = VecDeque::new();
        samples.push_back(Sample {
            t: t0,
            y: y0.clone(),
            rate: None,
        });
        Self {
            origin: t0,
            initial: y0,
            samples,
            retention: retention.max(0.0),
        }
    }

    /// Time of the initial sample; earlier lookups return the initial value.
    pub fn start_time(&self) -> f64 {
        self.origin
    }

    fn first_time(&self) -> f64 {
        self.samples.front().map(|s| s.t).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn latest_time(&self) -> f64 {
        self.samples.back().map(|s| s.t).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn latest(&self) -> &DVector<f64> {
        &self.samples.back().expect("history is never empty").y
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, t: f64, y: DVector<f64>) -> Result<(), SimError> {
        let latest = self.latest_time();
        if t.is_nan() || t <= latest {
            return Err(SimError::NonMonotonic { t, latest });
        }
        self.samples.push_back(Sample { t, y, rate: None });
        // Keep one sample at or before the retention boundary so that lookups
        // exactly at `latest - retention` still have a bracket.
        let horizon = t - self.retention;
        while self.samples.len() > 2 && self.samples[1].t <= horizon {
            self.samples.pop_front();
        }
        Ok(())
    }

    /// Attaches the time derivative of the most recent sample, enabling cubic
    /// Hermite interpolation on the brackets that touch it.
    pub fn set_latest_rate(&mut self, rate: DVector<f64>) {
        if let Some(last) = self.samples.back_mut() {
            last.rate = Some(rate);
        }
    }

    fn bracket(&self, s: f64) -> Result<Bracket<'_>, SimError> {
        let latest = self.latest_time();
        if s > latest {
            return Err(SimError::FutureLookup { s, latest });
        }
        if self.samples.len() == 1 || s == latest {
            return Ok(Bracket::Exact(self.latest()));
        }
        let first = self.first_time();
        if s < first {
            return Err(SimError::Evicted { s, oldest: first });
        }
        // First index with t > s; s < latest so it exists and is ≥ 1.
        let hi = self.samples.partition_point(|x| x.t <= s);
        let a = &self.samples[hi - 1];
        let b = &self.samples[hi];
        if a.t == s {
            return Ok(Bracket::Exact(&a.y));
        }
        Ok(Bracket::Between(a, b))
    }

    /// Linear interpolation between the bracketing samples.
    pub fn lookup(&self, s: f64) -> Result<DVector<f64>, SimError> {
        if s < self.origin {
            return Ok(self.initial.clone());
        }
        match self.bracket(s)? {
            Bracket::Exact(y) => Ok(y.clone()),
            Bracket::Between(a, b) => Ok(linear(a, b, s)),
        }
    }

    /// Cubic Hermite interpolation where both bracket rates are known, linear
    /// otherwise.
    pub fn lookup_hermite(&self, s: f64) -> Result<DVector<f64>, SimError> {
        if s < self.origin {
            return Ok(self.initial.clone());
        }
        match self.bracket(s)? {
            Bracket::Exact(y) => Ok(y.clone()),
            Bracket::Between(a, b) => match (&a.rate, &b.rate) {
                (Some(da), Some(db)) => {
                    let h = b.t - a.t;
                    let u = (s - a.t) / h;
                    let u2 = u * u;
                    let u3 = u2 * u;
                    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
                    let h10 = u3 - 2.0 * u2 + u;
                    let h01 = -2.0 * u3 + 3.0 * u2;
                    let h11 = u3 - u2;
                    Ok(&a.y * h00 + da * (h * h10) + &b.y * h01 + db * (h * h11))
                }
                _ => Ok(linear(a, b, s)),
            },
        }
    }
}

enum Bracket<'a> {
    Exact(&'a DVector<f64>),
    Between(&'a Sample, &'a Sample),
}

fn linear(a: &Sample, b: &Sample, s: f64) -> DVector<f64> {
    let w = (s - a.t) / (b.t - a.t);
    &a.y * (1.0 - w) + &b.y * w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(2, x)
    }

    fn filled() -> HistoryBuffer {
        let mut h = HistoryBuffer::new(0.0, v(1.0), 10.0);
        h.push(0.5, v(2.0)).unwrap();
        h.push(1.0, v(4.0)).unwrap();
        h
    }

    #[test]
    fn grid_points_return_samples() {
        let h = filled();
        assert_eq!(h.lookup(0.5).unwrap(), v(2.0));
        assert_eq!(h.lookup(1.0).unwrap(), v(4.0));
        assert_eq!(h.lookup(0.0).unwrap(), v(1.0));
    }

    #[test]
    fn midpoint_is_average() {
        let h = filled();
        assert_eq!(h.lookup(0.75).unwrap(), v(3.0));
        assert_eq!(h.lookup(0.25).unwrap(), v(1.5));
    }

    #[test]
    fn pre_history_is_initial_state() {
        let h = filled();
        assert_eq!(h.lookup(-0.1).unwrap(), v(1.0));
        assert_eq!(h.lookup(-100.0).unwrap(), v(1.0));
    }

    #[test]
    fn future_lookup_fails() {
        let h = filled();
        assert!(matches!(h.lookup(1.01), Err(SimError::FutureLookup { .. })));
    }

    #[test]
    fn pushes_must_advance() {
        let mut h = filled();
        assert!(matches!(h.push(1.0, v(0.0)), Err(SimError::NonMonotonic { .. })));
    }

    #[test]
    fn eviction_keeps_retention_window() {
        let mut h = HistoryBuffer::new(0.0, v(0.0), 1.0);
        for k in 1..=100 {
            h.push(k as f64 / 10.0, v(k as f64)).unwrap();
        }
        assert!(h.len() <= 12);
        assert_eq!(h.lookup(9.0).unwrap(), v(90.0));
        assert!(matches!(h.lookup(5.0), Err(SimError::Evicted { .. })));
        // Pre-history stays available after eviction.
        assert_eq!(h.lookup(-1.0).unwrap(), v(0.0));
    }

    #[test]
    fn hermite_is_exact_on_cubics() {
        let f = |t: f64| t * t * t - 2.0 * t + 0.5;
        let df = |t: f64| 3.0 * t * t - 2.0;
        let mut h = HistoryBuffer::new(0.0, DVector::from_element(1, f(0.0)), 10.0);
        h.set_latest_rate(DVector::from_element(1, df(0.0)));
        h.push(0.4, DVector::from_element(1, f(0.4))).unwrap();
        h.set_latest_rate(DVector::from_element(1, df(0.4)));
        for s in [0.05, 0.2, 0.33] {
            assert!((h.lookup_hermite(s).unwrap()[0] - f(s)).abs() < 1e-14);
        }
        // Without a rate on the newest sample, fall back to linear.
        h.push(0.8, DVector::from_element(1, f(0.8))).unwrap();
        let mid = h.lookup_hermite(0.6).unwrap()[0];
        assert!((mid - 0.5 * (f(0.4) + f(0.8))).abs() < 1e-14);
    }
}
