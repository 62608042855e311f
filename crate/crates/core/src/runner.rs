//! Scenario runs: simulation, analysis, and the files they leave behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::controller::{assemble_closed_loop, ControllerError};
use crate::lmi::{describe_problem, LmiError, LmiProblem};
use crate::plot::{Chart, Scale, Series};
use crate::scenario::Scenario;
use crate::sim::{simulate, CraftSample, SimError, Termination, Trace, TraceRow};
use crate::stability::{
    gamma_lower_bound, small_gain_delay_bound, DelayBoundReport, GammaBoundReport, OmegaGrid, StabilityError,
};

/// Consensus is declared when the final error is below this fraction of the
/// initial error.
pub const CONSENSUS_RATIO: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Analyze,
    Both,
}

impl Mode {
    fn simulates(self) -> bool {
        matches!(self, Mode::Simulate | Mode::Both)
    }

    fn analyzes(self) -> bool {
        matches!(self, Mode::Analyze | Mode::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSummary {
    pub initial_error: f64,
    pub final_error: f64,
    pub final_time: f64,
    pub time_to_threshold: Option<f64>,
    pub consensus_achieved: bool,
    pub diverged: bool,
    pub termination: Termination,
}

impl SimulationSummary {
    pub fn from_trace(trace: &Trace) -> Self {
        let initial_error = trace.initial_error();
        let final_error = trace.final_error();
        Self {
            initial_error,
            final_error,
            final_time: trace.final_time(),
            time_to_threshold: trace.settling_time(CONSENSUS_RATIO),
            consensus_achieved: final_error < CONSENSUS_RATIO * initial_error,
            diverged: matches!(trace.termination, Termination::Diverged { .. }) || final_error > initial_error,
            termination: trace.termination,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub gamma_bound: GammaBoundReport,
    /// The delay bound needs γ above the γ bound; otherwise this holds the reason.
    pub delay_bound: Result<DelayBoundReport, StabilityError>,
    pub lmi_problem: LmiProblem,
}

/// Everything a run produced; serialized by [`write_artifacts`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub gamma: f64,
    pub trace: Option<Trace>,
    pub simulation: Option<SimulationSummary>,
    pub analysis: Option<AnalysisSummary>,
}

impl RunReport {
    pub fn consensus_achieved(&self) -> bool {
        self.simulation.as_ref().is_some_and(|s| s.consensus_achieved)
    }

    pub fn diverged(&self) -> bool {
        self.simulation.as_ref().is_some_and(|s| s.diverged)
    }

    pub fn final_error(&self) -> Option<f64> {
        self.simulation.as_ref().map(|s| s.final_error)
    }

    pub fn time_to_threshold(&self) -> Option<f64> {
        self.simulation.as_ref().and_then(|s| s.time_to_threshold)
    }

    pub fn gamma_bound(&self) -> Option<f64> {
        self.analysis.as_ref().map(|a| a.gamma_bound.bound)
    }

    pub fn delay_bound(&self) -> Option<f64> {
        self.analysis
            .as_ref()
            .and_then(|a| a.delay_bound.as_ref().ok())
            .map(|d| d.tau0_bound)
    }
}

pub fn analyze(scenario: &Scenario, grid: &OmegaGrid) -> Result<AnalysisSummary, RunError> {
    let laplacian = scenario.topology.laplacian();
    let gamma_bound = gamma_lower_bound(laplacian)?;
    let reference = scenario.reference.and_then(|r| r.delay_bound);
    let delay_bound = match small_gain_delay_bound(laplacian, scenario.gamma, grid) {
        Ok(r) => Ok(r.with_reference(reference)),
        Err(e @ StabilityError::GammaBelowBound { .. }) => Err(e),
        Err(e) => return Err(e.into()),
    };
    let cl = assemble_closed_loop(laplacian, scenario.gamma)?;
    let lmi_problem = LmiProblem::new(&cl, &scenario.delays)?;
    Ok(AnalysisSummary {
        gamma_bound,
        delay_bound,
        lmi_problem,
    })
}

/// Runs the requested parts of a scenario. Divergent dynamics are a valid
/// outcome, reported through [`SimulationSummary::diverged`].
pub fn run(scenario: &Scenario, mode: Mode, grid: &OmegaGrid) -> Result<RunReport, RunError> {
    let trace = if mode.simulates() {
        Some(simulate(scenario)?)
    } else {
        None
    };
    let simulation = trace.as_ref().map(SimulationSummary::from_trace);
    let analysis = if mode.analyzes() {
        Some(analyze(scenario, grid)?)
    } else {
        None
    };
    Ok(RunReport {
        scenario: scenario.name.clone(),
        gamma: scenario.gamma,
        trace,
        simulation,
        analysis,
    })
}

const COMPONENTS: [(&str, usize); 4] = [("sigma", 0), ("sigma_dot", 1), ("omega", 2), ("tau", 3)];
const AXES: [&str; 3] = ["x", "y", "z"];

fn component(c: &CraftSample, which: usize) -> Option<Vector3<f64>> {
    match which {
        0 => Some(c.sigma),
        1 => Some(c.sigma_dot),
        2 => Some(c.omega),
        _ => c.torque,
    }
}

pub fn trace_header(n_craft: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for i in 1..=n_craft {
        for (name, _) in COMPONENTS {
            for a in AXES {
                h.push(format!("craft{i}_{name}_{a}"));
            }
        }
    }
    h.push("consensus_error".into());
    h
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Full trace as CSV. Numbers use the shortest representation that parses
/// back to the same `f64`; missing torques are empty fields.
pub fn trace_csv(trace: &Trace) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(trace_header(trace.n_craft))?;
    for row in &trace.rows {
        let mut rec = vec![format!("{}", row.t)];
        for c in &row.crafts {
            for (_, k) in COMPONENTS {
                let v = component(c, k);
                for a in 0..3 {
                    rec.push(fmt_opt(v.map(|v| v[a])));
                }
            }
        }
        rec.push(format!("{}", row.consensus_error));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Trace(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RunError::Trace(e.to_string()))
}

/// Parses [`trace_csv`] output back into rows.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>, RunError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let cols = headers.len();
    if cols < 2 || (cols - 2) % 12 != 0 {
        return Err(RunError::Trace(format!("{cols} columns do not fit t + 12 per craft + error")));
    }
    let n = (cols - 2) / 12;
    if headers.iter().collect::<Vec<_>>() != trace_header(n) {
        return Err(RunError::Trace("unexpected column names".into()));
    }
    let num = |s: &str| -> Result<f64, RunError> {
        s.parse::<f64>().map_err(|_| RunError::Trace(format!("bad number {s:?}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t = num(&rec[0])?;
        let mut crafts = Vec::with_capacity(n);
        for i in 0..n {
            let mut parts = [Vector3::zeros(); 4];
            let mut torque_present = true;
            for (k, part) in parts.iter_mut().enumerate() {
                for a in 0..3 {
                    let field = &rec[1 + 12 * i + 3 * k + a];
                    if k == 3 && field.is_empty() {
                        torque_present = false;
                        continue;
                    }
                    part[a] = num(field)?;
                }
            }
            crafts.push(CraftSample {
                sigma: parts[0],
                sigma_dot: parts[1],
                omega: parts[2],
                torque: torque_present.then_some(parts[3]),
            });
        }
        rows.push(TraceRow {
            t,
            crafts,
            consensus_error: num(&rec[cols - 1])?,
        });
    }
    Ok(rows)
}

/// `(file stem, title, component index, y label)` for the per-figure slices.
const FIGURES: [(&str, &str, usize, &str); 4] = [
    ("attitudes", "Attitudes (MRP)", 0, "sigma"),
    ("attitude_rates", "Attitude rates", 1, "d sigma / dt  [1/s]"),
    ("angular_velocities", "Angular velocities", 2, "omega  [rad/s]"),
    ("torques", "Control torques", 3, "tau  [N m]"),
];

fn figure_csv(trace: &Trace, which: usize, name: &str) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    for i in 1..=trace.n_craft {
        for a in AXES {
            header.push(format!("craft{i}_{name}_{a}"));
        }
    }
    w.write_record(&header)?;
    for row in &trace.rows {
        let mut rec = vec![format!("{}", row.t)];
        for c in &row.crafts {
            let v = component(c, which);
            for a in 0..3 {
                rec.push(fmt_opt(v.map(|v| v[a])));
            }
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Trace(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RunError::Trace(e.to_string()))
}

fn figure_svg(trace: &Trace, which: usize, title: &str, y_label: &str) -> String {
    let mut series = Vec::new();
    for i in 0..trace.n_craft {
        for (a, axis) in AXES.iter().enumerate() {
            let points = trace
                .rows
                .iter()
                .filter_map(|r| component(&r.crafts[i], which).map(|v| (r.t, v[a])))
                .collect();
            series.push(Series {
                label: format!("craft {} {axis}", i + 1),
                points,
            });
        }
    }
    Chart {
        title,
        x_label: "t  [s]",
        y_label,
        x_scale: Scale::Linear,
        series: &series,
    }
    .to_svg()
}

fn error_svg(trace: &Trace) -> String {
    let series = [Series {
        label: "||E x||".into(),
        points: trace.rows.iter().map(|r| (r.t, r.consensus_error)).collect(),
    }];
    Chart {
        title: "Consensus error",
        x_label: "t  [s]",
        y_label: "||E x||",
        x_scale: Scale::Linear,
        series: &series,
    }
    .to_svg()
}

fn curve_svg(d: &DelayBoundReport) -> String {
    let series = [Series {
        label: "tau0(omega)".into(),
        points: d.omegas.iter().copied().zip(d.values.iter().copied()).collect(),
    }];
    Chart {
        title: "Small-gain delay bound",
        x_label: "omega  [rad/s]",
        y_label: "tau0  [s]",
        x_scale: Scale::Log,
        series: &series,
    }
    .to_svg()
}

fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key}={value}");
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

fn termination_kv(out: &mut String, t: &Termination) {
    match t {
        Termination::Completed => kv(out, "termination", "completed"),
        Termination::Diverged { t, max_abs } => {
            kv(out, "termination", "diverged");
            kv(out, "termination_time", t);
            kv(out, "termination_max_abs", max_abs);
        }
        Termination::MrpSingularity { t, craft, angle } => {
            kv(out, "termination", "mrp_singularity");
            kv(out, "termination_time", t);
            kv(out, "termination_craft", craft + 1);
            kv(out, "termination_angle", angle);
        }
    }
}

pub fn simulation_kv(report: &RunReport, s: &SimulationSummary) -> String {
    let mut out = String::new();
    kv(&mut out, "scenario", &report.scenario);
    kv(&mut out, "gamma", report.gamma);
    kv(&mut out, "consensus_achieved", s.consensus_achieved);
    kv(&mut out, "diverged", s.diverged);
    kv(&mut out, "initial_error", s.initial_error);
    kv(&mut out, "final_error", s.final_error);
    kv(&mut out, "final_time", s.final_time);
    kv(&mut out, "error_ratio", s.final_error / s.initial_error);
    kv(&mut out, "time_to_threshold", opt(s.time_to_threshold));
    termination_kv(&mut out, &s.termination);
    out
}

pub fn simulation_text(report: &RunReport, s: &SimulationSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario            {}", report.scenario);
    let _ = writeln!(out, "gamma               {}", report.gamma);
    let _ = writeln!(out, "termination         {}", s.termination.describe());
    let _ = writeln!(out, "simulated until     {:.2} s", s.final_time);
    let _ = writeln!(out, "initial error       {:.6e}", s.initial_error);
    let _ = writeln!(out, "final error         {:.6e}", s.final_error);
    let _ = writeln!(out, "final / initial     {:.3e}", s.final_error / s.initial_error);
    let _ = writeln!(
        out,
        "time to {CONSENSUS_RATIO:e} ratio  {}",
        s.time_to_threshold.map(|t| format!("{t:.2} s")).unwrap_or_else(|| "not reached".into())
    );
    let _ = writeln!(out, "consensus achieved  {}", s.consensus_achieved);
    let _ = writeln!(out, "diverged            {}", s.diverged);
    out
}

pub fn analysis_kv(report: &RunReport, a: &AnalysisSummary) -> String {
    let mut out = String::new();
    kv(&mut out, "scenario", &report.scenario);
    kv(&mut out, "gamma", report.gamma);
    kv(&mut out, "gamma_bound", a.gamma_bound.bound);
    kv(&mut out, "gamma_above_bound", report.gamma > a.gamma_bound.bound);
    for (k, c) in a.gamma_bound.contributions.iter().enumerate() {
        kv(&mut out, &format!("gamma_mode{}_mu", k + 1), format!("{}{:+}i", c.mu_re, c.mu_im));
        kv(&mut out, &format!("gamma_mode{}_candidate", k + 1), c.candidate);
    }
    match &a.delay_bound {
        Ok(d) => {
            kv(&mut out, "delay_bound", d.tau0_bound);
            kv(&mut out, "delay_bound_omega", d.argmin_omega);
            kv(&mut out, "delay_bound_asymptotic_limit", d.asymptotic_limit);
            kv(&mut out, "delay_bound_asymptotic_ok", d.asymptotic_ok);
            kv(&mut out, "delay_bound_reference", opt(d.reference));
            kv(&mut out, "delay_bound_reference_gap", opt(d.reference_gap));
            kv(&mut out, "delay_bound_reference_mismatch", d.reference_mismatch);
            kv(&mut out, "omega_min", d.grid.min);
            kv(&mut out, "omega_max", d.grid.max);
            kv(&mut out, "omega_points", d.grid.points);
            kv(&mut out, "omega_refine", d.grid.refine);
        }
        Err(e) => {
            kv(&mut out, "delay_bound", "none");
            kv(&mut out, "delay_bound_error", e);
        }
    }
    kv(&mut out, "lmi_reduced_dim", a.lmi_problem.reduced_dim());
    kv(&mut out, "lmi_blocks", a.lmi_problem.blocks());
    out
}

pub fn analysis_text(report: &RunReport, a: &AnalysisSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario {}  gamma {}", report.scenario, report.gamma);
    let _ = writeln!(out);
    let _ = writeln!(out, "gamma lower bound   {:.6}", a.gamma_bound.bound);
    for c in &a.gamma_bound.contributions {
        let _ = writeln!(
            out,
            "  mu = {:>9.5} {:+.5}i   candidate {:.6}",
            c.mu_re, c.mu_im, c.candidate
        );
    }
    let _ = writeln!(out);
    match &a.delay_bound {
        Ok(d) => {
            let _ = writeln!(out, "small-gain delay bound");
            let _ = writeln!(
                out,
                "  grid                {} log-spaced points on [{}, {}] rad/s, refine {}",
                d.grid.points, d.grid.min, d.grid.max, d.grid.refine
            );
            for c in &d.clusters {
                let _ = writeln!(out, "  root {:>9.5} {:+.5}i  multiplicity {}", c.re, c.im, c.multiplicity);
            }
            let _ = writeln!(out, "  infimum             {:.6} s at omega = {:.6} rad/s", d.tau0_bound, d.argmin_omega);
            let _ = writeln!(
                out,
                "  large-omega limit   {:.6} s; infimum <= limit*(1+1e-3): {}",
                d.asymptotic_limit,
                if d.asymptotic_ok { "pass" } else { "FAIL" }
            );
            if let Some(r) = d.reference {
                let _ = writeln!(
                    out,
                    "  reference value     {r} s; computed - reference = {:.6} s{}",
                    d.tau0_bound - r,
                    if d.reference_mismatch { "  (mismatch)" } else { "" }
                );
            }
        }
        Err(e) => {
            let _ = writeln!(out, "small-gain delay bound not evaluated: {e}");
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "LMI problem: Q, S blocks {}x{}, extended state of {} blocks (see lmi_problem.txt)",
        a.lmi_problem.reduced_dim(),
        a.lmi_problem.reduced_dim(),
        a.lmi_problem.blocks()
    );
    out
}

fn delay_curve_csv(d: &DelayBoundReport) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["omega", "tau0"])?;
    for (o, v) in d.omegas.iter().zip(&d.values) {
        w.write_record([format!("{o}"), format!("{v}")])?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Trace(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RunError::Trace(e.to_string()))
}

/// Writes every artifact of `report` under `dir` and returns the paths in
/// the order written.
pub fn write_artifacts(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    if let (Some(trace), Some(s)) = (&report.trace, &report.simulation) {
        files.insert("trace.csv".into(), trace_csv(trace)?);
        for (stem, title, which, y_label) in FIGURES {
            let name = COMPONENTS[which].0;
            files.insert(format!("{stem}.csv"), figure_csv(trace, which, name)?);
            files.insert(format!("{stem}.svg"), figure_svg(trace, which, title, y_label));
        }
        files.insert("consensus_error.svg".into(), error_svg(trace));
        files.insert("report.txt".into(), simulation_text(report, s));
        files.insert("report.kv".into(), simulation_kv(report, s));
    }
    if let Some(a) = &report.analysis {
        files.insert("analysis.txt".into(), analysis_text(report, a));
        files.insert("analysis.kv".into(), analysis_kv(report, a));
        files.insert("lmi_problem.txt".into(), describe_problem(&a.lmi_problem));
        if let Ok(d) = &a.delay_bound {
            files.insert("delay_bound_curve.csv".into(), delay_curve_csv(d)?);
            files.insert("delay_bound_curve.svg".into(), curve_svg(d));
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(gamma: f64, t_final: f64) -> Scenario {
        let mut s = Scenario::formation4().with_gamma(gamma).unwrap();
        s.t_final = t_final;
        s
    }

    fn coarse() -> OmegaGrid {
        OmegaGrid {
            points: 2000,
            ..OmegaGrid::default()
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let report = run(&short(5.0, 8.0), Mode::Simulate, &coarse()).unwrap();
        let trace = report.trace.as_ref().unwrap();
        let text = trace_csv(trace).unwrap();
        let rows = parse_trace_csv(&text).unwrap();
        assert_eq!(rows, trace.rows);
        assert_eq!(text.lines().count(), trace.rows.len() + 1);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 4 * 12);
    }

    #[test]
    fn missing_torques_round_trip() {
        let mut trace = run(&short(5.0, 8.0), Mode::Simulate, &coarse()).unwrap().trace.unwrap();
        trace.rows.truncate(3);
        for r in &mut trace.rows {
            r.crafts[1].torque = None;
        }
        let rows = parse_trace_csv(&trace_csv(&trace).unwrap()).unwrap();
        assert_eq!(rows, trace.rows);
    }

    #[test]
    fn parse_rejects_bad_headers() {
        assert!(parse_trace_csv("t,a,b\n1,2,3\n").is_err());
        let mut header = trace_header(1);
        header[3] = "oops".into();
        assert!(parse_trace_csv(&(header.join(",") + "\n")).is_err());
    }

    #[test]
    fn artifacts_are_written_and_reproducible() {
        let s = short(5.0, 10.0);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let first = write_artifacts(&run(&s, Mode::Both, &coarse()).unwrap(), a.path()).unwrap();
        write_artifacts(&run(&s, Mode::Both, &coarse()).unwrap(), b.path()).unwrap();
        let names: Vec<String> = first
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        for expected in [
            "trace.csv",
            "attitudes.csv",
            "attitude_rates.csv",
            "angular_velocities.csv",
            "torques.csv",
            "attitudes.svg",
            "report.txt",
            "report.kv",
            "analysis.txt",
            "analysis.kv",
            "lmi_problem.txt",
            "delay_bound_curve.csv",
        ] {
            assert!(names.iter().any(|n| n == expected), "{expected} missing");
        }
        for name in &names {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between runs");
        }
        let kv = fs::read_to_string(a.path().join("analysis.kv")).unwrap();
        assert!(kv.contains("delay_bound_reference=9.6346"));
        assert!(kv.contains("delay_bound_asymptotic_ok=true"));
    }

    #[test]
    fn analysis_below_gamma_bound_still_reports() {
        let report = run(&short(0.1, 10.0), Mode::Analyze, &coarse()).unwrap();
        let a = report.analysis.as_ref().unwrap();
        assert!(matches!(a.delay_bound, Err(StabilityError::GammaBelowBound { .. })));
        assert!(analysis_kv(&report, a).contains("gamma_above_bound=false"));
        assert!(report.trace.is_none());
        assert!(!report.consensus_achieved());
    }
}
