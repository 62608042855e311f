//! Lyapunov–Krasovskii LMI matrices for the delayed closed loop, and
//! definiteness checks of user-supplied candidate matrices.
//!
//! Block layout follows the canonical edge order: the extended state is
//! `X = [x(t); x(t - τ_e₁); ...; x(t - τ_e_K)]`, each block of size 6N.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::controller::{ClosedLoopMatrices, ConsensusErrorOperator};
use crate::mat::{self, is_negative_definite, symmetrize, Mat, MatError, SYMMETRY_TOL};
use crate::topology::{DelayedEdge, EdgeKey};

/// Margin used by the definiteness verdicts.
pub const DEFINITENESS_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("E needs at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("edge {0}->{1}: {2}")]
    BadEdge(usize, usize, String),
    #[error("candidate {which} for edge {from}->{to}: {reason}")]
    BadCandidate {
        which: char,
        from: usize,
        to: usize,
        reason: String,
    },
    #[error("sum of h_ij S_ij is singular")]
    SingularDelayWeight,
    #[error("candidate file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Mat(#[from] MatError),
}

/// `E = blockdiag([𝟙 -I], [𝟙 -I]) ⊗ I₃`.
pub fn build_e(n: usize) -> Result<Mat, LmiError> {
    if n < 2 {
        return Err(LmiError::TooFewAgents(n));
    }
    Ok(ConsensusErrorOperator::new(n).matrix().clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeDelay {
    pub key: EdgeKey,
    pub h: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    pub n: usize,
    pub a0: Mat,
    /// Delayed-term matrices in canonical edge order.
    pub aij: Vec<Mat>,
    pub e: Mat,
    pub edges: Vec<EdgeDelay>,
}

impl LmiProblem {
    pub fn new(closed_loop: &ClosedLoopMatrices, delays: &[DelayedEdge]) -> Result<Self, LmiError> {
        let n = closed_loop.n_agents();
        let e = build_e(n)?;
        let by_key: BTreeMap<EdgeKey, &DelayedEdge> = delays.iter().map(|d| (d.key(), d)).collect();
        let mut edges = Vec::new();
        let mut aij = Vec::new();
        for (key, a) in &closed_loop.aij {
            let de = by_key
                .get(key)
                .ok_or_else(|| LmiError::BadEdge(key.0, key.1, "no delay bounds given".into()))?;
            let (h, d) = (de.h(), de.d());
            if !(h.is_finite() && h > 0.0) {
                return Err(LmiError::BadEdge(key.0, key.1, format!("h must be positive, got {h}")));
            }
            if !(d.is_finite() && d >= 0.0) {
                return Err(LmiError::BadEdge(key.0, key.1, format!("d must be non-negative, got {d}")));
            }
            edges.push(EdgeDelay { key: *key, h, d });
            aij.push(a.clone());
        }
        if let Some(extra) = delays.iter().find(|d| !closed_loop.aij.contains_key(&d.key())) {
            return Err(LmiError::BadEdge(extra.from, extra.to, "not an edge of the topology".into()));
        }
        Ok(Self {
            n,
            a0: closed_loop.a0.clone(),
            aij,
            e,
            edges,
        })
    }

    /// Size of `Q_ij` and `S_ij`, `6(N-1)`.
    pub fn reduced_dim(&self) -> usize {
        self.e.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.e.ncols()
    }

    /// Number of blocks in the extended state.
    pub fn blocks(&self) -> usize {
        self.edges.len() + 1
    }
}

/// `Q_ij` and `S_ij` for each edge, keyed canonically.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiCandidate {
    pub q: BTreeMap<EdgeKey, Mat>,
    pub s: BTreeMap<EdgeKey, Mat>,
}

impl LmiCandidate {
    pub fn identity(problem: &LmiProblem, scale: f64) -> Self {
        let m = problem.reduced_dim();
        let id = Mat::identity(m, m) * scale;
        let all = || problem.edges.iter().map(|e| (e.key, id.clone())).collect();
        Self { q: all(), s: all() }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let f = |m: &BTreeMap<EdgeKey, Mat>| m.iter().map(|(k, v)| (*k, v * alpha)).collect();
        Self {
            q: f(&self.q),
            s: f(&self.s),
        }
    }

    pub fn validate(&self, problem: &LmiProblem) -> Result<(), LmiError> {
        let m = problem.reduced_dim();
        for (which, set) in [('Q', &self.q), ('S', &self.s)] {
            let bad = |key: EdgeKey, reason: String| LmiError::BadCandidate {
                which,
                from: key.0,
                to: key.1,
                reason,
            };
            for e in &problem.edges {
                let mat = set.get(&e.key).ok_or_else(|| bad(e.key, "missing".into()))?;
                if mat.shape() != (m, m) {
                    return Err(bad(e.key, format!("expected {m}x{m}, got {}x{}", mat.nrows(), mat.ncols())));
                }
                mat::check_symmetric(mat, SYMMETRY_TOL).map_err(|err| bad(e.key, err.to_string()))?;
                if !mat::is_positive_definite(mat, 0.0)? {
                    return Err(bad(e.key, "not positive definite".into()));
                }
            }
            if let Some(k) = set.keys().find(|k| !problem.edges.iter().any(|e| e.key == **k)) {
                return Err(bad(*k, "not an edge of the problem".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrices {
    pub psi1: Mat,
    pub psi2: Mat,
    pub psi3: Mat,
    pub omega: Mat,
}

impl PsiMatrices {
    /// `Ψ₁ + Ψ₂ + Ω`, the matrix of the derivative bound.
    pub fn combined(&self) -> Mat {
        &self.psi1 + &self.psi2 + &self.omega
    }
}

fn set_block(out: &mut Mat, bi: usize, bj: usize, size: usize, b: &Mat) {
    let mut v = out.view_mut((bi * size, bj * size), (b.nrows(), b.ncols()));
    v += b;
}

/// Discrete Jensen bound: `(Σwᵢ)·Σwᵢ xᵢᵀPxᵢ ≥ (Σwᵢxᵢ)ᵀP(Σwᵢxᵢ)` for
/// positive weights. Returns `(lhs, rhs)`.
pub fn jensen_sums(p: &Mat, weights: &[f64], samples: &[nalgebra::DVector<f64>]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    let quad: f64 = weights
        .iter()
        .zip(samples)
        .map(|(w, x)| w * (x.transpose() * p * x)[(0, 0)])
        .sum();
    let mut integral = nalgebra::DVector::zeros(p.nrows());
    for (w, x) in weights.iter().zip(samples) {
        integral += x * *w;
    }
    (total * quad, (integral.transpose() * p * &integral)[(0, 0)])
}

/// `A - C D⁻¹ B` for `M = [[A, C], [B, D]]` with `A` the leading `k×k` block.
pub fn schur_complement(m: &Mat, k: usize) -> Result<Mat, LmiError> {
    let n = m.nrows();
    let a = m.view((0, 0), (k, k)).into_owned();
    let c = m.view((0, k), (k, n - k)).into_owned();
    let b = m.view((k, 0), (n - k, k)).into_owned();
    let d = m.view((k, k), (n - k, n - k)).into_owned();
    let dinv_b = mat::solve(&d, &b)?;
    Ok(a - c * dinv_b)
}

pub fn build_psi_matrices(problem: &LmiProblem, candidate: &LmiCandidate) -> Result<PsiMatrices, LmiError> {
    candidate.validate(problem)?;
    let e = &problem.e;
    let et = e.transpose();
    let ete = &et * e;
    let sz = problem.state_dim();
    let m = problem.reduced_dim();
    let nb = problem.blocks();
    let dim = sz * nb;

    let mut psi1 = Mat::zeros(dim, dim);
    set_block(&mut psi1, 0, 0, sz, &(&ete * &problem.a0 + problem.a0.transpose() * &ete));
    for (k, a) in problem.aij.iter().enumerate() {
        let b = &ete * a;
        set_block(&mut psi1, 0, k + 1, sz, &b);
        set_block(&mut psi1, k + 1, 0, sz, &b.transpose());
    }

    let mut psi2 = Mat::zeros(dim, dim);
    let mut jensen = Mat::zeros(dim, dim);
    let mut s_h = Mat::zeros(m, m);
    for (k, edge) in problem.edges.iter().enumerate() {
        let eqe = &et * &candidate.q[&edge.key] * e;
        set_block(&mut psi2, 0, 0, sz, &eqe);
        set_block(&mut psi2, k + 1, k + 1, sz, &(-eqe));

        let s = &candidate.s[&edge.key];
        s_h += s * edge.h;
        let c = (1.0 - edge.d) / edge.h;
        let ese = &et * s * e * c;
        set_block(&mut jensen, 0, 0, sz, &(-&ese));
        set_block(&mut jensen, 0, k + 1, sz, &ese);
        set_block(&mut jensen, k + 1, 0, sz, &ese);
        set_block(&mut jensen, k + 1, k + 1, sz, &(-&ese));
    }

    // W maps X to the derivative of y = Ex.
    let mut w = Mat::zeros(m, dim);
    w.view_mut((0, 0), (m, sz)).copy_from(&(e * &problem.a0));
    for (k, a) in problem.aij.iter().enumerate() {
        w.view_mut((0, (k + 1) * sz), (m, sz)).copy_from(&(e * a));
    }
    let omega = &jensen + w.transpose() * &s_h * &w;

    let s_h_inv = mat::inverse(&s_h).map_err(|_| LmiError::SingularDelayWeight)?;
    let mut psi3 = Mat::zeros(dim + m, dim + m);
    psi3.view_mut((0, 0), (dim, dim)).copy_from(&jensen);
    psi3.view_mut((0, dim), (dim, m)).copy_from(&w.transpose());
    psi3.view_mut((dim, 0), (m, dim)).copy_from(&w);
    psi3.view_mut((dim, dim), (m, m)).copy_from(&(-s_h_inv));

    Ok(PsiMatrices {
        psi1: symmetrize(&psi1),
        psi2: symmetrize(&psi2),
        psi3: symmetrize(&psi3),
        omega: symmetrize(&omega),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub negative_definite: bool,
    pub max_eigenvalue: f64,
    pub min_eigenvalue: f64,
}

fn verdict(m: &Mat) -> Result<Verdict, LmiError> {
    let (min, max) = mat::symmetric_extremes(m, SYMMETRY_TOL)?;
    Ok(Verdict {
        negative_definite: is_negative_definite(m, DEFINITENESS_TOL)?,
        max_eigenvalue: max,
        min_eigenvalue: min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmiReport {
    pub psi1: Verdict,
    pub psi2: Verdict,
    pub psi3: Verdict,
    pub omega: Verdict,
    pub combined: Verdict,
}

impl LmiReport {
    pub fn psi1_nd(&self) -> bool {
        self.psi1.negative_definite
    }

    pub fn psi2_nd(&self) -> bool {
        self.psi2.negative_definite
    }

    pub fn psi3_nd(&self) -> bool {
        self.psi3.negative_definite
    }

    pub fn combined_nd(&self) -> bool {
        self.combined.negative_definite
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in [
            ("psi1", &self.psi1),
            ("psi2", &self.psi2),
            ("psi3", &self.psi3),
            ("omega", &self.omega),
            ("combined", &self.combined),
        ] {
            out.push_str(&format!(
                "{name:<9}negative_definite={:<5} max_eig={:.6e} min_eig={:.6e}\n",
                v.negative_definite, v.max_eigenvalue, v.min_eigenvalue
            ));
        }
        out
    }
}

pub fn verify_candidate(problem: &LmiProblem, candidate: &LmiCandidate) -> Result<LmiReport, LmiError> {
    let psi = build_psi_matrices(problem, candidate)?;
    Ok(LmiReport {
        psi1: verdict(&psi.psi1)?,
        psi2: verdict(&psi.psi2)?,
        psi3: verdict(&psi.psi3)?,
        omega: verdict(&psi.omega)?,
        combined: verdict(&psi.combined())?,
    })
}

/// Parses a candidate file.
///
/// ```text
/// # comment
/// [Q 1 2]
/// identity 2.5
/// [S 1 2]
/// 1 0 0 ...
/// ```
///
/// Section headers name the matrix and a one-based edge. A section holds
/// either whitespace-separated rows or `identity [scale]`.
pub fn parse_candidate(text: &str, dim: usize) -> Result<LmiCandidate, LmiError> {
    let mut q = BTreeMap::new();
    let mut s = BTreeMap::new();
    let mut current: Option<(char, EdgeKey, usize, Vec<f64>)> = None;

    fn finish(
        cur: Option<(char, EdgeKey, usize, Vec<f64>)>,
        dim: usize,
        q: &mut BTreeMap<EdgeKey, Mat>,
        s: &mut BTreeMap<EdgeKey, Mat>,
    ) -> Result<(), LmiError> {
        let Some((which, key, line, data)) = cur else {
            return Ok(());
        };
        if data.len() != dim * dim {
            return Err(LmiError::Parse {
                line,
                reason: format!("section has {} entries, expected {}", data.len(), dim * dim),
            });
        }
        let m = Mat::from_row_slice(dim, dim, &data);
        let target = if which == 'Q' { q } else { s };
        if target.insert(key, m).is_some() {
            return Err(LmiError::Parse {
                line,
                reason: format!("duplicate section [{which} {} {}]", key.0 + 1, key.1 + 1),
            });
        }
        Ok(())
    }

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| LmiError::Parse { line: line_no, reason };
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            let (which, from, to) = match parts.as_slice() {
                [w, f, t] => (*w, *f, *t),
                _ => return Err(err(format!("expected [Q|S from to], got [{header}]"))),
            };
            let which = match which {
                "Q" | "q" => 'Q',
                "S" | "s" => 'S',
                other => return Err(err(format!("unknown matrix {other:?}"))),
            };
            let index = |v: &str| -> Result<usize, LmiError> {
                match v.parse::<usize>() {
                    Ok(k) if k >= 1 => Ok(k - 1),
                    _ => Err(err(format!("bad agent index {v:?}"))),
                }
            };
            finish(current.take(), dim, &mut q, &mut s)?;
            current = Some((which, (index(from)?, index(to)?), line_no, Vec::new()));
            continue;
        }
        let Some((_, _, _, data)) = current.as_mut() else {
            return Err(err("data before the first section header".into()));
        };
        if let Some(rest) = line.strip_prefix("identity") {
            if !data.is_empty() {
                return Err(err("identity must be the only entry of a section".into()));
            }
            let scale = match rest.trim() {
                "" => 1.0,
                v => v.parse::<f64>().map_err(|_| err(format!("bad scale {v:?}")))?,
            };
            data.extend(Mat::identity(dim, dim).iter().map(|x| x * scale));
            continue;
        }
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| err(format!("bad number {tok:?}")))?);
        }
    }
    finish(current, dim, &mut q, &mut s)?;
    Ok(LmiCandidate { q, s })
}

/// Plain-text dump of the problem data, for inspection.
pub fn describe_problem(problem: &LmiProblem) -> String {
    let mut out = format!(
        "agents {}\nreduced_dim {}\nextended_dim {}\nedges {}\n",
        problem.n,
        problem.reduced_dim(),
        problem.state_dim() * problem.blocks(),
        problem.edges.len()
    );
    for (k, e) in problem.edges.iter().enumerate() {
        out.push_str(&format!(
            "block {} edge {}->{} h {} d {}\n",
            k + 1,
            e.key.0 + 1,
            e.key.1 + 1,
            e.h,
            e.d
        ));
    }
    let dump = |name: &str, m: &Mat| {
        let mut s = format!("[{name} {}x{}]\n", m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    };
    out.push_str(&dump("E", &problem.e));
    out.push_str(&dump("A0", &problem.a0));
    for (e, a) in problem.edges.iter().zip(&problem.aij) {
        out.push_str(&dump(&format!("A {} {}", e.key.0 + 1, e.key.1 + 1), a));
    }
    out
}
