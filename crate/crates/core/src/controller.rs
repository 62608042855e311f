//! The delayed consensus law and the stacked closed-loop matrices.
//!
//! Stacked vectors follow the per-axis layout: agent `i` occupies coordinates
//! `3i..3i+3` of both `x₁` (attitudes) and `x₂` (attitude rates).

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector3};
use thiserror::Error;

use crate::attitude::{to_linearized, LinearizedState, Mrp, SpacecraftState};
use crate::mat::{kron_i3, Mat};
use crate::topology::{build_delay_gain_matrices, EdgeKey, Laplacian};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("damping gain must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("no delayed state supplied for edge {0}->{1}")]
    MissingDelayed(usize, usize),
    #[error("delayed state supplied for unknown edge {0}->{1}")]
    UnexpectedDelayed(usize, usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `x = [x₁; x₂]` for N agents.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
}

impl StackedState {
    pub fn zeros(n: usize) -> Self {
        Self {
            x1: DVector::zeros(3 * n),
            x2: DVector::zeros(3 * n),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.x1.len() / 3
    }

    pub fn from_linearized(states: &[LinearizedState]) -> Self {
        let mut out = Self::zeros(states.len());
        for (i, s) in states.iter().enumerate() {
            out.x1.fixed_rows_mut::<3>(3 * i).copy_from(s.sigma1.vector());
            out.x2.fixed_rows_mut::<3>(3 * i).copy_from(&s.sigma2);
        }
        out
    }

    pub fn from_physical(states: &[SpacecraftState]) -> Self {
        let lin: Vec<LinearizedState> = states.iter().map(to_linearized).collect();
        Self::from_linearized(&lin)
    }

    /// `[x₁; x₂]` as one 6N vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let n3 = self.x1.len();
        let mut v = DVector::zeros(2 * n3);
        v.rows_mut(0, n3).copy_from(&self.x1);
        v.rows_mut(n3, n3).copy_from(&self.x2);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n3 = v.len() / 2;
        Self {
            x1: v.rows(0, n3).into_owned(),
            x2: v.rows(n3, n3).into_owned(),
        }
    }

    pub fn sigma(&self, agent: usize) -> Vector3<f64> {
        self.x1.fixed_rows::<3>(3 * agent).into_owned()
    }

    pub fn sigma_dot(&self, agent: usize) -> Vector3<f64> {
        self.x2.fixed_rows::<3>(3 * agent).into_owned()
    }

    /// Agent `i` in linearized coordinates. Fails only on non-finite input.
    pub fn agent(&self, agent: usize) -> Option<LinearizedState> {
        Some(LinearizedState {
            sigma1: Mrp::new(self.sigma(agent)).ok()?,
            sigma2: self.sigma_dot(agent),
        })
    }
}

/// Per-edge delayed-gain matrices `ᶦʲK` in canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayGains {
    n: usize,
    k: BTreeMap<EdgeKey, Mat>,
}

impl DelayGains {
    pub fn from_laplacian(laplacian: &Laplacian) -> Self {
        Self {
            n: laplacian.n(),
            k: build_delay_gain_matrices(laplacian),
        }
    }

    pub fn new(n: usize, k: BTreeMap<EdgeKey, Mat>) -> Result<Self, ControllerError> {
        if let Some(((i, j), _)) = k.iter().find(|(_, m)| m.shape() != (n, n)) {
            return Err(ControllerError::Dimension(format!(
                "K for edge {i}->{j} is not {n}x{n}"
            )));
        }
        Ok(Self { n, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = EdgeKey> + '_ {
        self.k.keys().copied()
    }

    pub fn matrices(&self) -> &BTreeMap<EdgeKey, Mat> {
        &self.k
    }
}

/// Delayed consensus law
/// `u = -x₁ - γx₂ - Σ (ᶦʲK⊗I₃) x₁(t-τᵢⱼ) - γ Σ (ᶦʲK⊗I₃) x₂(t-τᵢⱼ)`.
pub fn control_input(
    current: &StackedState,
    delayed: &BTreeMap<EdgeKey, StackedState>,
    gamma: f64,
    gains: &DelayGains,
) -> Result<DVector<f64>, ControllerError> {
    let n3 = 3 * gains.n;
    if current.x1.len() != n3 || current.x2.len() != n3 {
        return Err(ControllerError::Dimension(format!(
            "state has {} coordinates, expected {n3}",
            current.x1.len()
        )));
    }
    if let Some(&(i, j)) = delayed.keys().find(|e| !gains.k.contains_key(e)) {
        return Err(ControllerError::UnexpectedDelayed(i, j));
    }
    let mut u = -&current.x1 - &current.x2 * gamma;
    for (&(i, j), k) in &gains.k {
        let past = delayed
            .get(&(i, j))
            .ok_or(ControllerError::MissingDelayed(i, j))?;
        if past.x1.len() != n3 || past.x2.len() != n3 {
            return Err(ControllerError::Dimension(format!(
                "delayed state for {i}->{j} has {} coordinates",
                past.x1.len()
            )));
        }
        // K is sparse (one entry per edge in practice); skip the ⊗I₃ product.
        for r in 0..gains.n {
            for c in 0..gains.n {
                let kv = k[(r, c)];
                if kv == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    u[3 * r + a] -= kv * (past.x1[3 * c + a] + gamma * past.x2[3 * c + a]);
                }
            }
        }
    }
    Ok(u)
}

/// Matrices of `ẋ = A₀x + Σ ᶦʲA x(t - τᵢⱼ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopMatrices {
    pub gamma: f64,
    pub a0: Mat,
    pub aij: BTreeMap<EdgeKey, Mat>,
    pub a_gamma: Mat,
    pub gains: DelayGains,
}

impl ClosedLoopMatrices {
    pub fn n_agents(&self) -> usize {
        self.gains.n
    }
}

fn two_by_two(tl: &Mat, tr: &Mat, bl: &Mat, br: &Mat) -> Mat {
    let n = tl.nrows();
    let mut out = Mat::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(tl);
    out.view_mut((0, n), (n, n)).copy_from(tr);
    out.view_mut((n, 0), (n, n)).copy_from(bl);
    out.view_mut((n, n), (n, n)).copy_from(br);
    out
}

/// Expands an `[[a, b], [c, d]]` pattern of N×N blocks into the 6N×6N stacked
/// layout `[x₁; x₂]`, where each block is Kronecker-expanded by 3.
fn stacked(tl: &Mat, tr: &Mat, bl: &Mat, br: &Mat) -> Mat {
    two_by_two(&kron_i3(tl), &kron_i3(tr), &kron_i3(bl), &kron_i3(br))
}

pub fn assemble_closed_loop(
    laplacian: &Laplacian,
    gamma: f64,
) -> Result<ClosedLoopMatrices, ControllerError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(ControllerError::BadGamma(gamma));
    }
    let n = laplacian.n();
    let z = Mat::zeros(n, n);
    let id = Mat::identity(n, n);
    let a0 = stacked(&z, &id, &(-&id), &(-&id * gamma));
    let gains = DelayGains::from_laplacian(laplacian);
    let aij: BTreeMap<EdgeKey, Mat> = gains
        .k
        .iter()
        .map(|(e, k)| (*e, stacked(&z, &z, &(-k), &(-k * gamma))))
        .collect();
    let mut adjacency = -laplacian.matrix().clone();
    adjacency.fill_diagonal(0.0);
    let a_gamma = stacked(&z, &z, &adjacency, &(&adjacency * gamma));
    Ok(ClosedLoopMatrices {
        gamma,
        a0,
        aij,
        a_gamma,
        gains,
    })
}

/// `E = blockdiag([𝟙 -I_{N-1}], [𝟙 -I_{N-1}]) ⊗ I₃`, of size 6(N-1)×6N.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusErrorOperator {
    e: Mat,
}

impl ConsensusErrorOperator {
    pub fn new(n: usize) -> Self {
        let m = n.saturating_sub(1);
        let mut diff = Mat::zeros(m, n);
        for r in 0..m {
            diff[(r, 0)] = 1.0;
            diff[(r, r + 1)] = -1.0;
        }
        let d3 = kron_i3(&diff);
        let mut e = Mat::zeros(6 * m, 6 * n);
        e.view_mut((0, 0), (3 * m, 3 * n)).copy_from(&d3);
        e.view_mut((3 * m, 3 * n), (3 * m, 3 * n)).copy_from(&d3);
        Self { e }
    }

    pub fn matrix(&self) -> &Mat {
        &self.e
    }
}

/// `y = E[x₁; x₂]` and `‖y‖₂`.
pub fn consensus_error(
    x: &StackedState,
    e: &ConsensusErrorOperator,
) -> Result<(DVector<f64>, f64), ControllerError> {
    let v = x.to_vector();
    if e.e.ncols() != v.len() {
        return Err(ControllerError::Dimension(format!(
            "E has {} columns, state has {}",
            e.e.ncols(),
            v.len()
        )));
    }
    let y = &e.e * v;
    let norm = y.norm();
    Ok((y, norm))
}
