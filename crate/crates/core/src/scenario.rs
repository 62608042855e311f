//! Scenario configuration files.
//!
//! Scenarios are JSON documents tagged with `"schema": "spacecraft-consensus/v1"`.
//! Agent indices in the file are one-based; everything in memory is zero-based.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use thiserror::Error;

use crate::attitude::{AttitudeError, Mrp, RigidBodyParams, SpacecraftState};
use crate::sim::{DelayKind, DelayProfile, SimError};
use crate::topology::{DelayedEdge, Topology, TopologyError, Weights};

pub const SCHEMA: &str = "spacecraft-consensus/v1";

/// The four-craft formation with uniform weights, γ = 5.
pub const FORMATION4_JSON: &str = include_str!("../scenarios/formation4.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed scenario JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0} required")]
    Missing(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawInertia {
    Scalar(f64),
    Matrix([[f64; 3]; 3]),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCraft {
    inertia: Option<RawInertia>,
    sigma0: Option<[f64; 3]>,
    omega0: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: Option<usize>,
    to: Option<usize>,
    h: Option<f64>,
    d: Option<f64>,
    profile: Option<DelayKind>,
    weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValues {
    pub gamma_bound: Option<f64>,
    pub delay_bound: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema: Option<String>,
    name: Option<String>,
    gamma: Option<f64>,
    dt: Option<f64>,
    t_final: Option<f64>,
    spacecraft: Option<Vec<RawCraft>>,
    edges: Option<Vec<RawEdge>>,
    output_dir: Option<PathBuf>,
    reference: Option<ReferenceValues>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CraftSpec {
    pub params: RigidBodyParams,
    pub initial: SpacecraftState,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub crafts: Vec<CraftSpec>,
    pub topology: Topology,
    /// One entry per topology edge, in canonical order.
    pub delays: Vec<DelayedEdge>,
    pub gamma: f64,
    pub dt: f64,
    pub t_final: f64,
    pub output_dir: Option<PathBuf>,
    /// Published values to compare the analysis against, if any.
    pub reference: Option<ReferenceValues>,
}

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_T_FINAL: f64 = 200.0;

fn positive(field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = serde_json::from_str(text)?;
        Self::validate(raw)
    }

    /// The bundled four-craft scenario.
    pub fn formation4() -> Self {
        Self::from_json_str(FORMATION4_JSON).expect("bundled scenario is valid")
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self, ScenarioError> {
        positive("gamma", gamma)?;
        Ok(Self {
            gamma,
            ..self.clone()
        })
    }

    pub fn max_delay(&self) -> f64 {
        self.delays.iter().map(|e| e.h()).fold(0.0, f64::max)
    }

    fn validate(raw: RawScenario) -> Result<Self, ScenarioError> {
        match raw.schema.as_deref() {
            None => return Err(ScenarioError::Missing("schema".into())),
            Some(SCHEMA) => {}
            Some(other) => {
                return Err(invalid("schema", format!("unsupported schema {other:?}, expected {SCHEMA:?}")))
            }
        }
        let gamma = positive("gamma", raw.gamma.ok_or(ScenarioError::Missing("gamma".into()))?)?;
        let dt = positive("dt", raw.dt.unwrap_or(DEFAULT_DT))?;
        let t_final = positive("t_final", raw.t_final.unwrap_or(DEFAULT_T_FINAL))?;

        let raw_crafts = raw.spacecraft.ok_or(ScenarioError::Missing("spacecraft".into()))?;
        if raw_crafts.is_empty() {
            return Err(invalid("spacecraft", "at least one spacecraft is needed"));
        }
        let crafts = raw_crafts
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let field = |f: &str| format!("spacecraft[{i}].{f}");
                let inertia = match c.inertia.ok_or_else(|| ScenarioError::Missing(field("inertia")))? {
                    RawInertia::Scalar(j) => Matrix3::identity() * j,
                    RawInertia::Matrix(rows) => Matrix3::from_fn(|r, k| rows[r][k]),
                };
                let params = RigidBodyParams::new(inertia)
                    .map_err(|_| invalid(field("inertia"), "must be symmetric positive definite"))?;
                let s = c.sigma0.ok_or_else(|| ScenarioError::Missing(field("sigma0")))?;
                let w = c.omega0.ok_or_else(|| ScenarioError::Missing(field("omega0")))?;
                let sigma = Mrp::new(Vector3::from(s)).map_err(|e| invalid(field("sigma0"), e.to_string()))?;
                sigma.check_singularity().map_err(|e: AttitudeError| invalid(field("sigma0"), e.to_string()))?;
                if !w.iter().all(|x| x.is_finite()) {
                    return Err(invalid(field("omega0"), "must be finite"));
                }
                Ok(CraftSpec {
                    params,
                    initial: SpacecraftState {
                        sigma,
                        omega: Vector3::from(w),
                    },
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let n = crafts.len();

        let raw_edges = raw.edges.unwrap_or_default();
        let mut keys = Vec::with_capacity(raw_edges.len());
        let mut weights = Vec::with_capacity(raw_edges.len());
        let mut profiles = Vec::with_capacity(raw_edges.len());
        for (k, e) in raw_edges.iter().enumerate() {
            let field = |f: &str| format!("edges[{k}].{f}");
            let index = |f: &str, v: Option<usize>| -> Result<usize, ScenarioError> {
                let v = v.ok_or_else(|| ScenarioError::Missing(field(f)))?;
                if v == 0 || v > n {
                    return Err(invalid(field(f), format!("agent index {v} outside 1..={n}")));
                }
                Ok(v - 1)
            };
            let from = index("from", e.from)?;
            let to = index("to", e.to)?;
            let h = e.h.ok_or_else(|| ScenarioError::Missing(field("h")))?;
            let d = e.d.unwrap_or(0.0);
            let kind = e.profile.unwrap_or(DelayKind::Sinusoidal);
            let profile = DelayProfile::new(kind, h, d).map_err(|err: SimError| invalid(field("h"), err.to_string()))?;
            keys.push((from, to));
            weights.push(e.weight);
            profiles.push(DelayedEdge { from, to, profile });
        }
        let weights = if weights.iter().all(Option::is_none) {
            Weights::Uniform
        } else if let Some(k) = weights.iter().position(Option::is_none) {
            return Err(invalid(
                format!("edges[{k}].weight"),
                "either every edge or no edge sets a weight",
            ));
        } else {
            Weights::Explicit(weights.into_iter().flatten().collect())
        };
        let topology = Topology::build(n, &keys, weights)?;
        profiles.sort_by_key(|e| e.key());

        let max_h = profiles.iter().map(|e| e.h()).fold(0.0, f64::max);
        if t_final <= max_h {
            return Err(invalid(
                "t_final",
                format!("must exceed the largest delay bound {max_h}"),
            ));
        }
        Ok(Self {
            name: raw.name.unwrap_or_else(|| "scenario".into()),
            crafts,
            topology,
            delays: profiles,
            gamma,
            dt,
            t_final,
            output_dir: raw.output_dir,
            reference: raw.reference,
        })
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    fn base() -> Value {
        serde_json::from_str(FORMATION4_JSON).unwrap()
    }

    fn parse(v: &Value) -> Result<Scenario, ScenarioError> {
        Scenario::from_json_str(&v.to_string())
    }

    #[test]
    fn bundled_scenario_matches_tables() {
        let s = Scenario::formation4();
        assert_eq!(s.gamma, 5.0);
        assert_eq!(s.dt, 0.01);
        assert_eq!(s.t_final, 200.0);
        let inertias: Vec<f64> = s.crafts.iter().map(|c| c.params.inertia()[(0, 0)]).collect();
        assert_eq!(inertias, vec![20.0, 30.0, 40.0, 50.0]);
        let sigmas: Vec<f64> = s.crafts.iter().map(|c| c.initial.sigma.vector().x).collect();
        assert_eq!(sigmas, vec![0.8, 0.4, -0.6, -0.8]);
        let omegas: Vec<f64> = s.crafts.iter().map(|c| c.initial.omega.y).collect();
        assert_eq!(omegas, vec![0.06849, 0.0, -0.09615, 0.06849]);
        let delays: Vec<(usize, usize, f64, f64)> =
            s.delays.iter().map(|e| (e.from, e.to, e.h(), e.d())).collect();
        // Canonical order: 1→2, 2→3, 2→4, 3→1.
        assert_eq!(
            delays,
            vec![(0, 1, 5.0, 1.0), (1, 2, 6.0, 2.0), (1, 3, 5.0, 1.0), (2, 0, 7.0, 0.5)]
        );
        assert!(s.delays.iter().all(|e| e.profile.kind() == DelayKind::Sinusoidal));
        assert_eq!(s.max_delay(), 7.0);
        assert_eq!(
            s.reference,
            Some(ReferenceValues {
                gamma_bound: Some(1.414),
                delay_bound: Some(9.6346)
            })
        );
    }

    #[test]
    fn missing_gamma() {
        let mut v = base();
        v.as_object_mut().unwrap().remove("gamma");
        let err = parse(&v).unwrap_err();
        assert_eq!(err.to_string(), "gamma required");
    }

    #[test]
    fn non_positive_dt() {
        for dt in [0.0, -0.01] {
            let mut v = base();
            v["dt"] = json!(dt);
            let err = parse(&v).unwrap_err();
            assert!(err.to_string().starts_with("dt:"), "{err}");
        }
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut v = base();
        v["spacecraft"][2].as_object_mut().unwrap().remove("omega0");
        assert_eq!(parse(&v).unwrap_err().to_string(), "spacecraft[2].omega0 required");

        let mut v = base();
        v["edges"][1]["to"] = json!(9);
        assert!(parse(&v).unwrap_err().to_string().starts_with("edges[1].to:"));

        let mut v = base();
        v["t_final"] = json!(6.0);
        assert!(parse(&v).unwrap_err().to_string().starts_with("t_final:"));

        let mut v = base();
        v["schema"] = json!("other/v9");
        assert!(parse(&v).unwrap_err().to_string().starts_with("schema:"));

        let mut v = base();
        v["spacecraft"][0]["inertia"] = json!(-3.0);
        assert!(parse(&v).unwrap_err().to_string().starts_with("spacecraft[0].inertia:"));

        let mut v = base();
        v["gama"] = json!(5.0);
        assert!(matches!(parse(&v), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn topology_failures_propagate() {
        let mut v = base();
        // Drop 3→1: craft 1 loses its only in-neighbor.
        v["edges"].as_array_mut().unwrap().remove(2);
        assert!(matches!(
            parse(&v),
            Err(ScenarioError::Topology(TopologyError::NoInNeighbor(0)))
        ));
    }

    #[test]
    fn matrix_inertia_and_weights() {
        let mut v = base();
        v["spacecraft"][0]["inertia"] = json!([[20.0, 1.0, 0.0], [1.0, 25.0, 0.0], [0.0, 0.0, 30.0]]);
        let s = parse(&v).unwrap();
        assert_eq!(s.crafts[0].params.inertia()[(0, 1)], 1.0);

        let mut v = base();
        v["edges"][0]["weight"] = json!(1.0);
        assert!(parse(&v).unwrap_err().to_string().contains("weight"));
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, FORMATION4_JSON).unwrap();
        assert_eq!(load_scenario(&path).unwrap(), Scenario::formation4());
        assert!(matches!(
            load_scenario(&dir.path().join("missing.json")),
            Err(ScenarioError::Io { .. })
        ));
    }
}
