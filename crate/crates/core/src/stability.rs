//! Frequency-domain stability criteria: the lower bound on γ, the closed-loop
//! spectrum of the undelayed system, and the small-gain delay bound.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Complex;
use thiserror::Error;

use crate::mat::{eigenvalues, ComplexEigenSet, MatError};
use crate::topology::Laplacian;

/// Laplacian eigenvalues with modulus below this are consensus modes.
pub const ZERO_MODE_TOL: f64 = 1e-9;
/// `|Im μ|` below this takes the real-axis branch of the γ bound.
pub const REAL_AXIS_TOL: f64 = 1e-12;
/// Closed-loop roots closer than this are pooled into one resolvent term.
pub const CLUSTER_TOL: f64 = 1e-6;
/// Relative slack of the large-ω self-check.
pub const ASYMPTOTIC_SLACK: f64 = 1e-3;
/// Relative gap above which a reference value is flagged.
pub const REFERENCE_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("graph has no rooted spanning tree")]
    NoSpanningTree,
    #[error("Laplacian eigenvalue {0} has positive real part in -L")]
    UnstableMode(Complex<f64>),
    #[error("graph has no nonzero Laplacian modes")]
    NoModes,
    #[error("gamma must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("gamma {gamma} does not exceed the lower bound {bound}")]
    GammaBelowBound { gamma: f64, bound: f64 },
    #[error("bad frequency grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Mat(#[from] MatError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaContribution {
    pub mu_re: f64,
    pub mu_im: f64,
    pub candidate: f64,
}

impl GammaContribution {
    pub fn mu(&self) -> Complex<f64> {
        Complex::new(self.mu_re, self.mu_im)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaBoundReport {
    pub bound: f64,
    /// One entry per nonzero eigenvalue of `-L`.
    pub contributions: Vec<GammaContribution>,
}

/// Eigenvalues of `-L`, split into consensus modes and the rest.
fn laplacian_modes(laplacian: &Laplacian) -> Result<(usize, Vec<Complex<f64>>), StabilityError> {
    if !laplacian.has_rooted_spanning_tree() {
        return Err(StabilityError::NoSpanningTree);
    }
    let mu = eigenvalues(&(-laplacian.matrix()))?;
    let mut zeros = 0;
    let mut rest = Vec::new();
    for &m in mu.values() {
        if m.norm() < ZERO_MODE_TOL {
            zeros += 1;
        } else {
            rest.push(m);
        }
    }
    Ok((zeros, rest))
}

/// Candidate bound contributed by one eigenvalue `μ` of `-L`.
pub fn gamma_candidate(mu: Complex<f64>) -> f64 {
    let modulus = mu.norm();
    if mu.im.abs() < REAL_AXIS_TOL {
        return (2.0 / modulus).sqrt();
    }
    // Conjugate members give the same value because of |Im μ|.
    let angle = FRAC_PI_2 - (-mu.re / mu.im.abs()).atan();
    (2.0 / (modulus * angle.cos())).sqrt()
}

pub fn gamma_lower_bound(laplacian: &Laplacian) -> Result<GammaBoundReport, StabilityError> {
    let (_, modes) = laplacian_modes(laplacian)?;
    if modes.is_empty() {
        return Err(StabilityError::NoModes);
    }
    if let Some(bad) = modes.iter().find(|m| m.re > ZERO_MODE_TOL) {
        return Err(StabilityError::UnstableMode(*bad));
    }
    let contributions: Vec<GammaContribution> = modes
        .iter()
        .map(|&mu| GammaContribution {
            mu_re: mu.re,
            mu_im: mu.im,
            candidate: gamma_candidate(mu),
        })
        .collect();
    let bound = contributions.iter().map(|c| c.candidate).fold(0.0, f64::max);
    Ok(GammaBoundReport {
        bound,
        contributions,
    })
}

/// Both roots of `λ² - γμλ - μ = 0`.
pub fn closed_loop_roots(mu: Complex<f64>, gamma: f64) -> [Complex<f64>; 2] {
    let b = mu * gamma;
    let disc = (b * b + mu * 4.0).sqrt();
    [(b + disc) * 0.5, (b - disc) * 0.5]
}

/// Spectrum of `A₀ + A_γ`: two roots per Laplacian eigenvalue, each with
/// multiplicity 3 from the Kronecker expansion. Matches the assembled matrices
/// when every agent has an in-neighbor (unit Laplacian diagonal).
pub fn closed_loop_eigenvalues(
    laplacian: &Laplacian,
    gamma: f64,
) -> Result<ComplexEigenSet, StabilityError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(StabilityError::BadGamma(gamma));
    }
    let mu = eigenvalues(&(-laplacian.matrix()))?;
    let mut out = Vec::with_capacity(6 * mu.len());
    for &m in mu.values() {
        for lambda in closed_loop_roots(m, gamma) {
            out.extend(std::iter::repeat_n(lambda, 3));
        }
    }
    Ok(ComplexEigenSet::new(out, 1e-7))
}

/// A distinct closed-loop root and the size of its cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootCluster {
    pub re: f64,
    pub im: f64,
    pub multiplicity: usize,
}

impl RootCluster {
    pub fn lambda(&self) -> Complex<f64> {
        Complex::new(self.re, self.im)
    }

    /// `Σ_{k=1..p} |jω - λ|^{-k}`.
    pub fn resolvent_sum(&self, omega: f64) -> f64 {
        let r = 1.0 / (Complex::new(0.0, omega) - self.lambda()).norm();
        let mut term = 1.0;
        (0..self.multiplicity)
            .map(|_| {
                term *= r;
                term
            })
            .sum()
    }
}

/// Groups the roots of every nonzero mode; each ± branch stands alone unless
/// the two coincide.
pub fn root_clusters(modes: &[Complex<f64>], gamma: f64) -> Vec<RootCluster> {
    let mut clusters: Vec<(Complex<f64>, usize)> = Vec::new();
    for &mu in modes {
        for lambda in closed_loop_roots(mu, gamma) {
            match clusters
                .iter_mut()
                .find(|(c, _)| (*c - lambda).norm() <= CLUSTER_TOL * c.norm().max(1.0))
            {
                Some((c, p)) => {
                    *c = (*c * (*p as f64) + lambda) / (*p as f64 + 1.0);
                    *p += 1;
                }
                None => clusters.push((lambda, 1)),
            }
        }
    }
    clusters.sort_by(|a, b| a.0.re.total_cmp(&b.0.re).then(a.0.im.total_cmp(&b.0.im)));
    clusters
        .into_iter()
        .map(|(c, p)| RootCluster {
            re: c.re,
            im: c.im,
            multiplicity: p,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    /// Golden-section search inside every grid-local minimum.
    pub refine: bool,
}

impl Default for OmegaGrid {
    fn default() -> Self {
        Self {
            min: 1e-3,
            max: 1e3,
            points: 20_000,
            refine: true,
        }
    }
}

impl OmegaGrid {
    pub fn validate(&self) -> Result<(), StabilityError> {
        if !(self.min.is_finite() && self.min > 0.0) {
            return Err(StabilityError::BadGrid(format!("omega min {} must be positive", self.min)));
        }
        if !(self.max.is_finite() && self.max > self.min) {
            return Err(StabilityError::BadGrid(format!(
                "omega max {} must exceed min {}",
                self.max, self.min
            )));
        }
        if self.points < 2 {
            return Err(StabilityError::BadGrid("at least two points are needed".into()));
        }
        Ok(())
    }

    /// Log-spaced frequencies, endpoints included.
    pub fn frequencies(&self) -> Vec<f64> {
        let (a, b) = (self.min.ln(), self.max.ln());
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|k| match k {
                0 => self.min,
                k if k == self.points - 1 => self.max,
                k => (a + (b - a) * k as f64 / last).exp(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayBoundReport {
    pub gamma: f64,
    pub tau0_bound: f64,
    pub argmin_omega: f64,
    pub grid: OmegaGrid,
    pub omegas: Vec<f64>,
    pub values: Vec<f64>,
    pub clusters: Vec<RootCluster>,
    /// `1/(1+γ)`, the large-ω limit of the bound.
    pub asymptotic_limit: f64,
    pub asymptotic_ok: bool,
    pub reference: Option<f64>,
    pub reference_gap: Option<f64>,
    pub reference_mismatch: bool,
}

impl DelayBoundReport {
    pub fn with_reference(mut self, reference: Option<f64>) -> Self {
        self.reference = reference;
        self.reference_gap = reference.map(|r| self.tau0_bound - r);
        self.reference_mismatch = reference
            .map(|r| ((self.tau0_bound - r) / r).abs() > REFERENCE_TOL)
            .unwrap_or(false);
        self
    }
}

/// `τ₀(ω) = 1 / (ω (1+γ) max_c Σ_k |jω - λ_c|^{-k})`.
pub fn tau0_at(omega: f64, gamma: f64, clusters: &[RootCluster]) -> f64 {
    let worst = clusters
        .iter()
        .map(|c| c.resolvent_sum(omega))
        .fold(0.0, f64::max);
    1.0 / (omega * (1.0 + gamma) * worst)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    // Searches in ln ω so brackets spanning decades behave.
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut la, mut lb) = (a.ln(), b.ln());
    let mut lc = lb - g * (lb - la);
    let mut ld = la + g * (lb - la);
    let mut fc = f(lc.exp());
    let mut fd = f(ld.exp());
    for _ in 0..200 {
        if (lb - la).abs() < 1e-13 {
            break;
        }
        if fc < fd {
            lb = ld;
            ld = lc;
            fd = fc;
            lc = lb - g * (lb - la);
            fc = f(lc.exp());
        } else {
            la = lc;
            lc = ld;
            fc = fd;
            ld = la + g * (lb - la);
            fd = f(ld.exp());
        }
    }
    a = la.exp();
    b = lb.exp();
    let w = (a * b).sqrt();
    let fw = f(w);
    [(lc.exp(), fc), (ld.exp(), fd), (w, fw)]
        .into_iter()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty")
}

pub fn small_gain_delay_bound(
    laplacian: &Laplacian,
    gamma: f64,
    grid: &OmegaGrid,
) -> Result<DelayBoundReport, StabilityError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(StabilityError::BadGamma(gamma));
    }
    grid.validate()?;
    let lemma = gamma_lower_bound(laplacian)?;
    if gamma <= lemma.bound {
        return Err(StabilityError::GammaBelowBound {
            gamma,
            bound: lemma.bound,
        });
    }
    let (_, modes) = laplacian_modes(laplacian)?;
    let clusters = root_clusters(&modes, gamma);
    let f = |w: f64| tau0_at(w, gamma, &clusters);

    let omegas = grid.frequencies();
    let values: Vec<f64> = omegas.iter().map(|&w| f(w)).collect();
    let (mut best_i, mut best) = (0, values[0]);
    for (i, &v) in values.iter().enumerate() {
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let mut argmin = omegas[best_i];
    if grid.refine {
        let last = values.len() - 1;
        for i in 1..last {
            if values[i] <= values[i - 1] && values[i] <= values[i + 1] {
                let (w, v) = golden_section(f, omegas[i - 1], omegas[i + 1]);
                if v < best {
                    best = v;
                    argmin = w;
                }
            }
        }
    }
    let asymptotic_limit = 1.0 / (1.0 + gamma);
    Ok(DelayBoundReport {
        gamma,
        tau0_bound: best,
        argmin_omega: argmin,
        grid: *grid,
        omegas,
        values,
        clusters,
        asymptotic_limit,
        asymptotic_ok: best <= asymptotic_limit * (1.0 + ASYMPTOTIC_SLACK),
        reference: None,
        reference_gap: None,
        reference_mismatch: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::assemble_closed_loop;
    use crate::mat::Mat;
    use crate::topology::{Topology, Weights};
    use proptest::prelude::*;

    fn formation4() -> Laplacian {
        Topology::build(4, &[(0, 1), (1, 2), (2, 0), (1, 3)], Weights::Uniform)
            .unwrap()
            .laplacian()
            .clone()
    }

    fn single_edge() -> Laplacian {
        Laplacian::from_matrix(Mat::from_row_slice(2, 2, &[0.0, 0.0, -1.0, 1.0])).unwrap()
    }

    fn ring3() -> Laplacian {
        Topology::build(3, &[(0, 1), (1, 2), (2, 0)], Weights::Uniform)
            .unwrap()
            .laplacian()
            .clone()
    }

    fn pair() -> Laplacian {
        Topology::build(2, &[(0, 1), (1, 0)], Weights::Uniform)
            .unwrap()
            .laplacian()
            .clone()
    }

    /// Uniform weights where agents without in-neighbors keep a zero row.
    fn leader_laplacian(n: usize, edges: &[(usize, usize)]) -> Laplacian {
        let mut m = Mat::zeros(n, n);
        for to in 0..n {
            let from: Vec<usize> = edges.iter().filter(|e| e.1 == to).map(|e| e.0).collect();
            for &f in &from {
                m[(to, f)] = -1.0 / from.len() as f64;
            }
            if !from.is_empty() {
                m[(to, to)] = 1.0;
            }
        }
        Laplacian::from_matrix(m).unwrap()
    }

    fn test_topologies() -> Vec<Laplacian> {
        let mut out = vec![formation4(), single_edge(), ring3(), pair()];
        out.push(leader_laplacian(4, &[(0, 1), (0, 2), (0, 3)]));
        out.push(leader_laplacian(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 3)]));
        let dense = Topology::build(
            4,
            &[(0, 1), (1, 0), (1, 2), (2, 3), (3, 1), (0, 3), (3, 2)],
            Weights::Uniform,
        )
        .unwrap();
        out.push(dense.laplacian().clone());
        out
    }

    #[test]
    fn formation_gamma_bound() {
        let r = gamma_lower_bound(&formation4()).unwrap();
        assert!((r.bound - 2f64.sqrt()).abs() < 5e-4, "{}", r.bound);
        assert_eq!(r.contributions.len(), 3);
        let complex: Vec<f64> = r
            .contributions
            .iter()
            .filter(|c| c.mu_im.abs() > 1e-6)
            .map(|c| c.candidate)
            .collect();
        assert_eq!(complex.len(), 2);
        for c in complex {
            assert!((c - 1.1547).abs() < 1e-4, "{c}");
        }
    }

    #[test]
    fn small_gamma_bound_examples() {
        assert!((gamma_lower_bound(&pair()).unwrap().bound - 1.0).abs() < 1e-12);
        assert!((gamma_lower_bound(&ring3()).unwrap().bound - 2.0 / 3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn gamma_candidate_matches_real_part_form() {
        // cos(π/2 - atan(-Re/|Im|)) = -Re/|μ|, so the candidate is √(2/(-Re μ)).
        for l in test_topologies() {
            for c in gamma_lower_bound(&l).unwrap().contributions {
                let oracle = (2.0 / -c.mu_re).sqrt();
                assert!((c.candidate - oracle).abs() < 1e-9 * oracle, "{c:?}");
            }
        }
    }

    #[test]
    fn gamma_bound_requires_spanning_tree() {
        let m = Mat::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
        let l = Laplacian::from_matrix(m).unwrap();
        assert_eq!(gamma_lower_bound(&l), Err(StabilityError::NoSpanningTree));
    }

    #[test]
    fn doubling_weights_scales_candidates() {
        for l in test_topologies() {
            let doubled = Laplacian::from_matrix(l.matrix() * 2.0).unwrap();
            let mut a: Vec<f64> = gamma_lower_bound(&l).unwrap().contributions.iter().map(|c| c.candidate).collect();
            let mut b: Vec<f64> = gamma_lower_bound(&doubled).unwrap().contributions.iter().map(|c| c.candidate).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            for (x, y) in a.iter().zip(&b) {
                assert!((x / y - 2f64.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn roots_for_unit_mode() {
        let [a, b] = closed_loop_roots(Complex::new(-1.0, 0.0), 5.0);
        let s = 21f64.sqrt();
        assert!((a.re - (-5.0 + s) / 2.0).abs() < 1e-12 && a.im.abs() < 1e-12);
        assert!((b.re - (-5.0 - s) / 2.0).abs() < 1e-12 && b.im.abs() < 1e-12);
        let [z1, z2] = closed_loop_roots(Complex::new(0.0, 0.0), 5.0);
        assert_eq!((z1.norm(), z2.norm()), (0.0, 0.0));
    }

    #[test]
    fn root_identity_and_direct_spectrum() {
        // A₀ applies unit self-feedback, so the formula describes A₀ + A_γ only
        // for unit-diagonal Laplacians.
        for l in test_topologies().into_iter().filter(|l| (0..l.n()).all(|i| l.matrix()[(i, i)] == 1.0)) {
            let mu = eigenvalues(&(-l.matrix())).unwrap();
            for gamma in [0.5, 2.0, 5.0] {
                for &m in mu.values() {
                    for lambda in closed_loop_roots(m, gamma) {
                        let r = lambda * lambda - m * lambda * gamma - m;
                        assert!(r.norm() < 1e-9, "{r}");
                    }
                }
                let formula = closed_loop_eigenvalues(&l, gamma).unwrap();
                let cl = assemble_closed_loop(&l, gamma).unwrap();
                let direct = eigenvalues(&(&cl.a0 + &cl.a_gamma)).unwrap();
                let gap = formula.max_matching_distance(&direct).unwrap();
                assert!(gap < 1e-7, "gamma {gamma}: {gap}");
            }
        }
    }

    #[test]
    fn stable_roots_above_bound() {
        for l in test_topologies() {
            let bound = gamma_lower_bound(&l).unwrap().bound;
            let (_, modes) = laplacian_modes(&l).unwrap();
            for gamma in [bound * 1.01, bound * 2.0, bound * 10.0] {
                for c in root_clusters(&modes, gamma) {
                    assert!(c.re < 0.0, "{c:?} at gamma {gamma}");
                }
            }
        }
    }

    /// Independent evaluation of the same expression on a dense linear grid
    /// around the known minimum, without clustering or refinement.
    fn single_edge_oracle(gamma: f64) -> f64 {
        // μ = -1 gives the double root λ = -1 when γ = 2.
        let lambda = Complex::new(-1.0, 0.0);
        let mut best = f64::INFINITY;
        let n = 2_000_000;
        for k in 1..=n {
            let w = 0.5 + 2.5 * k as f64 / n as f64;
            let r = 1.0 / (Complex::new(0.0, w) - lambda).norm();
            let v = 1.0 / (w * (1.0 + gamma) * (r + r * r));
            best = best.min(v);
        }
        best
    }

    #[test]
    fn single_edge_matches_dense_oracle() {
        let l = single_edge();
        let r = small_gain_delay_bound(&l, 2.0, &OmegaGrid::default()).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].multiplicity, 2);
        let oracle = single_edge_oracle(2.0);
        assert!((r.tau0_bound - oracle).abs() < 1e-9, "{} vs {oracle}", r.tau0_bound);
        assert!((r.tau0_bound - 0.25660).abs() < 1e-5);
        assert!((r.argmin_omega - 3f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn formation_delay_bound() {
        let r = small_gain_delay_bound(&formation4(), 5.0, &OmegaGrid::default())
            .unwrap()
            .with_reference(Some(9.6346));
        assert!((r.tau0_bound - 0.14330).abs() < 1e-4, "{}", r.tau0_bound);
        assert!(r.asymptotic_ok);
        assert!(r.reference_mismatch);
        assert_eq!(r.omegas.len(), 20_000);
        assert!((r.values.last().unwrap() - 1.0 / 6.0).abs() < 1e-3);
        assert!(r.values.iter().all(|v| *v >= r.tau0_bound));
    }

    #[test]
    fn delay_bound_rejects_low_gamma() {
        let err = small_gain_delay_bound(&formation4(), 1.0, &OmegaGrid::default()).unwrap_err();
        assert!(matches!(err, StabilityError::GammaBelowBound { .. }));
    }

    #[test]
    fn bad_grids() {
        let l = formation4();
        for g in [
            OmegaGrid { min: 0.0, ..OmegaGrid::default() },
            OmegaGrid { max: 1e-4, ..OmegaGrid::default() },
            OmegaGrid { points: 1, ..OmegaGrid::default() },
        ] {
            assert!(matches!(small_gain_delay_bound(&l, 5.0, &g), Err(StabilityError::BadGrid(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn refinement_never_increases_infimum(points in 50usize..400, gamma in 1.5f64..8.0, refine in any::<bool>()) {
            let l = formation4();
            let coarse = OmegaGrid { points, refine, ..OmegaGrid::default() };
            // 2n - 1 log-spaced points contain the n-point grid.
            let fine = OmegaGrid { points: 2 * points - 1, ..coarse };
            let a = small_gain_delay_bound(&l, gamma, &coarse).unwrap().tau0_bound;
            let b = small_gain_delay_bound(&l, gamma, &fine).unwrap().tau0_bound;
            prop_assert!(b <= a * (1.0 + 1e-12), "{} > {}", b, a);
        }
    }
}
