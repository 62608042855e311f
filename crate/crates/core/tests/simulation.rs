use nalgebra::Vector3;

use spacecraft_consensus::scenario::Scenario;
use spacecraft_consensus::sim::simulate;

fn single_craft(gamma: f64, sigma0: f64, omega0: f64) -> Scenario {
    let json = format!(
        r#"{{
            "schema": "spacecraft-consensus/v1",
            "name": "solo",
            "gamma": {gamma},
            "dt": 0.01,
            "t_final": 20.0,
            "spacecraft": [{{ "inertia": 25.0, "sigma0": [{sigma0}, 0.0, 0.0], "omega0": [{omega0}, 0.0, 0.0] }}]
        }}"#
    );
    Scenario::from_json_str(&json).unwrap()
}

/// A lone craft sees only its self-feedback, so each axis follows
/// σ̈ + γσ̇ + σ = 0.
#[test]
fn single_craft_is_a_damped_oscillator() {
    let gamma: f64 = 0.5;
    let (s0, w0) = (0.3, 0.1);
    // Rotation about a single axis: P = (1 + σ²)/4 on that axis.
    let d0 = w0 * (1.0 + s0 * s0) / 4.0;
    let wd = (1.0 - gamma * gamma / 4.0).sqrt();
    let a = -gamma / 2.0;
    let exact = |t: f64| {
        let c = s0;
        let s = (d0 - a * s0) / wd;
        (a * t).exp() * (c * (wd * t).cos() + s * (wd * t).sin())
    };
    let trace = simulate(&single_craft(gamma, s0, w0)).unwrap();
    assert!(trace.termination.is_completed());
    let worst = trace
        .rows
        .iter()
        .map(|r| (r.crafts[0].sigma.x - exact(r.t)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
    for r in &trace.rows {
        assert_eq!(r.crafts[0].sigma.y, 0.0);
        assert_eq!(r.consensus_error, 0.0);
    }
}

#[test]
fn consensus_state_is_an_equilibrium() {
    let mut s = Scenario::formation4();
    let common = Vector3::new(0.2, -0.1, 0.35);
    for c in &mut s.crafts {
        c.initial.sigma = spacecraft_consensus::attitude::Mrp::new(common).unwrap();
        c.initial.omega = Vector3::zeros();
    }
    s.t_final = 30.0;
    let trace = simulate(&s).unwrap();
    for r in &trace.rows {
        assert!(r.consensus_error < 1e-12, "{} at {}", r.consensus_error, r.t);
        for c in &r.crafts {
            assert!((c.sigma - common).amax() < 1e-12);
        }
    }
}

/// With σ parallel to ω the kinematics reduce to σ̇ = ω(1 + σᵀσ)/4.
#[test]
fn initial_consensus_error_matches_hand_value() {
    let sigma = [0.8, 0.4, -0.6, -0.8];
    let omega = [0.06849, 0.0, -0.09615, 0.06849];
    let rate: Vec<f64> = sigma
        .iter()
        .zip(&omega)
        .map(|(s, w)| w * (1.0 + 3.0 * s * s) / 4.0)
        .collect();
    let sq: f64 = (1..4)
        .map(|r| 3.0 * ((sigma[0] - sigma[r]).powi(2) + (rate[0] - rate[r]).powi(2)))
        .sum();
    let trace = {
        let mut s = Scenario::formation4();
        s.t_final = 8.0;
        simulate(&s).unwrap()
    };
    assert!((trace.initial_error() - sq.sqrt()).abs() < 1e-12);
    assert!((trace.initial_error() - 3.751999).abs() < 1e-6);
}

#[test]
fn repeated_runs_are_identical() {
    let mut s = Scenario::formation4();
    s.t_final = 40.0;
    assert_eq!(simulate(&s).unwrap(), simulate(&s).unwrap());
}

#[test]
fn low_gain_error_grows() {
    let s = Scenario::formation4().with_gamma(0.1).unwrap();
    let trace = simulate(&s).unwrap();
    assert!(!trace.termination.is_completed());
    assert!(trace.final_error() > trace.initial_error());
}
