//! Directed communication graphs.
//!
//! Edge `i → j` means craft `i`'s state is sent to craft `j`. The adjacency
//! matrix is row-stochastic with `a[j][i] > 0` for each edge, so receivers own
//! rows, and the Laplacian is `L = I - 𝒜`. Agent indices are zero-based.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::mat::Mat;
use crate::sim::DelayProfile;

/// Tolerance on Laplacian row sums and receiver weight sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Ordered pair `(from, to)`. `BTreeMap` keys of this type give the canonical
/// lexicographic edge order used for every block layout.
pub type EdgeKey = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("agent count must be positive")]
    Empty,
    #[error("edge {from}->{to} references an agent outside 0..{n}")]
    OutOfRange { from: usize, to: usize, n: usize },
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("duplicate edge {0}->{1}")]
    Duplicate(usize, usize),
    #[error("agent {0} has no in-neighbor")]
    NoInNeighbor(usize),
    #[error("weights into agent {agent} sum to {sum}, expected 1")]
    WeightSum { agent: usize, sum: f64 },
    #[error("edge weight {0} must be positive and finite")]
    BadWeight(f64),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("not a Laplacian: {0}")]
    NotLaplacian(String),
}

/// Validated Laplacian: square, finite, non-positive off-diagonal, zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian(Mat);

impl Laplacian {
    pub fn from_matrix(m: Mat) -> Result<Self, TopologyError> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(TopologyError::NotLaplacian(format!(
                "shape {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !m.iter().all(|x| x.is_finite()) {
            return Err(TopologyError::NotLaplacian("non-finite entry".into()));
        }
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if r != c && m[(r, c)] > 0.0 {
                    return Err(TopologyError::NotLaplacian(format!(
                        "positive off-diagonal entry at ({r}, {c})"
                    )));
                }
            }
            let sum: f64 = m.row(r).iter().sum();
            if sum.abs() > ROW_SUM_TOL {
                return Err(TopologyError::NotLaplacian(format!("row {r} sums to {sum}")));
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Communication edges `i → j`, one per nonzero `l[j][i]`, in canonical order.
    pub fn edges(&self) -> Vec<EdgeKey> {
        let n = self.n();
        let mut out = Vec::new();
        for from in 0..n {
            for to in 0..n {
                if from != to && self.0[(to, from)] != 0.0 {
                    out.push((from, to));
                }
            }
        }
        out
    }

    pub fn has_rooted_spanning_tree(&self) -> bool {
        let adj = out_neighbors(self.n(), &self.edges());
        (0..self.n()).any(|root| reachable_from(root, &adj).iter().all(|r| *r))
    }

    pub fn is_strongly_connected(&self) -> bool {
        let n = self.n();
        let edges = self.edges();
        let fwd = out_neighbors(n, &edges);
        let reversed: Vec<EdgeKey> = edges.iter().map(|&(a, b)| (b, a)).collect();
        let bwd = out_neighbors(n, &reversed);
        reachable_from(0, &fwd).iter().all(|r| *r) && reachable_from(0, &bwd).iter().all(|r| *r)
    }
}

fn out_neighbors(n: usize, edges: &[EdgeKey]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(from, to) in edges {
        adj[from].push(to);
    }
    adj
}

fn reachable_from(root: usize, adj: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Receiver weights for [`Topology::build`].
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    /// `1 / in-degree` on every incoming edge.
    Uniform,
    /// One weight per edge, in the order the edges were given.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    edges: Vec<Edge>,
    adjacency: Mat,
    laplacian: Laplacian,
}

impl Topology {
    /// Builds a simulation topology. Every agent needs at least one in-neighbor
    /// and incoming weights summing to one, so that the unit self-feedback of
    /// the delayed law matches the unit Laplacian diagonal.
    pub fn build(n: usize, edges: &[EdgeKey], weights: Weights) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let mut seen = BTreeMap::new();
        for &(from, to) in edges {
            if from >= n || to >= n {
                return Err(TopologyError::OutOfRange { from, to, n });
            }
            if from == to {
                return Err(TopologyError::SelfLoop(from));
            }
            if seen.insert((from, to), ()).is_some() {
                return Err(TopologyError::Duplicate(from, to));
            }
        }
        let mut in_degree = vec![0usize; n];
        for &(_, to) in edges {
            in_degree[to] += 1;
        }
        // A lone agent has no neighbors to agree with; its Laplacian is [0].
        if n > 1 {
            if let Some(agent) = in_degree.iter().position(|&d| d == 0) {
                return Err(TopologyError::NoInNeighbor(agent));
            }
        }
        let w: Vec<f64> = match weights {
            Weights::Uniform => edges.iter().map(|&(_, to)| 1.0 / in_degree[to] as f64).collect(),
            Weights::Explicit(w) => {
                if w.len() != edges.len() {
                    return Err(TopologyError::WeightCount {
                        expected: edges.len(),
                        got: w.len(),
                    });
                }
                if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                    return Err(TopologyError::BadWeight(*bad));
                }
                w
            }
        };
        let mut adjacency = Mat::zeros(n, n);
        let mut out_edges = Vec::with_capacity(edges.len());
        for (&(from, to), &weight) in edges.iter().zip(&w) {
            adjacency[(to, from)] = weight;
            out_edges.push(Edge { from, to, weight });
        }
        if n > 1 {
            for agent in 0..n {
                let sum: f64 = adjacency.row(agent).iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(TopologyError::WeightSum { agent, sum });
                }
            }
        }
        out_edges.sort_by_key(|e| (e.from, e.to));
        let mut lap = -adjacency.clone();
        if n > 1 {
            for i in 0..n {
                lap[(i, i)] = 1.0;
            }
        }
        // Force exact zero row sums so that L·𝟙 = 0 holds bitwise.
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| lap[(i, j)]).sum();
            lap[(i, i)] = -off;
        }
        let laplacian = Laplacian::from_matrix(lap)?;
        Ok(Self {
            n,
            edges: out_edges,
            adjacency,
            laplacian,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges in canonical `(from, to)` order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_keys(&self) -> Vec<EdgeKey> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    pub fn adjacency(&self) -> &Mat {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &Laplacian {
        &self.laplacian
    }

    pub fn has_rooted_spanning_tree(&self) -> bool {
        self.laplacian.has_rooted_spanning_tree()
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.laplacian.is_strongly_connected()
    }
}

/// A communication link with its delay bounds `0 ≤ τ ≤ h`, `|τ̇| ≤ d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayedEdge {
    pub from: usize,
    pub to: usize,
    pub profile: DelayProfile,
}

impl DelayedEdge {
    pub fn key(&self) -> EdgeKey {
        (self.from, self.to)
    }

    pub fn h(&self) -> f64 {
        self.profile.h()
    }

    pub fn d(&self) -> f64 {
        self.profile.d()
    }
}

/// Per-edge delayed-gain matrices `ᶦʲK` (n×n, before the ⊗I₃ expansion).
///
/// For edge `i → j` the only nonzero entry sits at row `j`, column `i` and
/// equals `l[j][i]`. Summing over all edges recovers the off-diagonal part of
/// the Laplacian.
pub fn build_delay_gain_matrices(laplacian: &Laplacian) -> BTreeMap<EdgeKey, Mat> {
    let n = laplacian.n();
    laplacian
        .edges()
        .into_iter()
        .map(|(from, to)| {
            let mut k = Mat::zeros(n, n);
            k[(to, from)] = laplacian.matrix()[(to, from)];
            ((from, to), k)
        })
        .collect()
}
