use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spacecraft_consensus::controller::assemble_closed_loop;
use spacecraft_consensus::lmi::{parse_candidate, verify_candidate, LmiProblem};
use spacecraft_consensus::runner::{self, Mode, RunReport};
use spacecraft_consensus::scenario::{load_scenario, Scenario};
use spacecraft_consensus::sim::{calibrate_dde, scalar_reference};
use spacecraft_consensus::stability::OmegaGrid;

#[derive(Parser)]
#[command(name = "spacecraft-consensus", version, about = "Delayed attitude consensus for spacecraft formations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the nonlinear formation and write traces, plots and a report.
    Simulate(SimulateArgs),
    /// Evaluate the gamma bound, the small-gain delay bound and the LMI data.
    Analyze(AnalyzeArgs),
    /// Check candidate Q_ij, S_ij matrices against the LMI conditions.
    VerifyLmi(VerifyArgs),
    /// Integrate x'(t) = -x(t-1) and compare with the method-of-steps solution.
    CalibrateDde(CalibrateArgs),
    /// Simulate, analyze, or both.
    Run(RunArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario files; several may be given.
    #[arg(long, required = true, num_args = 1..)]
    config: Vec<PathBuf>,
    /// Output directory. With several scenarios, each gets a subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenarios run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the scenario's gamma.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Clone, Copy)]
struct GridArgs {
    #[arg(long, default_value_t = OmegaGrid::default().min)]
    omega_min: f64,
    #[arg(long, default_value_t = OmegaGrid::default().max)]
    omega_max: f64,
    #[arg(long, default_value_t = OmegaGrid::default().points)]
    omega_points: usize,
    /// Skip the local refinement around grid minima.
    #[arg(long)]
    no_refine: bool,
}

impl GridArgs {
    fn grid(&self) -> OmegaGrid {
        OmegaGrid {
            min: self.omega_min,
            max: self.omega_max,
            points: self.omega_points,
            refine: !self.no_refine,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    gamma: Option<f64>,
    /// Also write analysis.txt, analysis.kv and the bound curve here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Candidate matrix file with [Q i j] / [S i j] sections.
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 3.0)]
    t_final: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Simulate,
    Analyze,
    Both,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simulate => Mode::Simulate,
            ModeArg::Analyze => Mode::Analyze,
            ModeArg::Both => Mode::Both,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    grid: GridArgs,
}

fn load(path: &Path, gamma: Option<f64>) -> Result<Scenario> {
    let s = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
    match gamma {
        Some(g) => Ok(s.with_gamma(g)?),
        None => Ok(s),
    }
}

fn output_dir(explicit: Option<&Path>, scenario: &Scenario) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name))
}

fn summary_line(report: &RunReport, dir: &Path) -> String {
    let s = report.simulation.as_ref().expect("simulation ran");
    format!(
        "{}: {}, error {:.3e} -> {:.3e}, consensus {}, diverged {}, artifacts in {}",
        report.scenario,
        s.termination.describe(),
        s.initial_error,
        s.final_error,
        s.consensus_achieved,
        s.diverged,
        dir.display()
    )
}

fn simulate_one(path: &Path, out: Option<&Path>, gamma: Option<f64>) -> Result<String> {
    let scenario = load(path, gamma)?;
    let report = runner::run(&scenario, Mode::Simulate, &OmegaGrid::default())?;
    let dir = output_dir(out, &scenario);
    runner::write_artifacts(&report, &dir)?;
    Ok(summary_line(&report, &dir))
}

fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    if args.config.len() == 1 {
        println!("{}", simulate_one(&args.config[0], args.out.as_deref(), args.gamma)?);
        return Ok(());
    }
    let base = args.out.clone();
    let dirs: Vec<Option<PathBuf>> = args
        .config
        .iter()
        .map(|p| {
            base.as_ref().map(|b| {
                b.join(p.file_stem().map(|s| s.to_owned()).unwrap_or_else(|| "scenario".into()))
            })
        })
        .collect();
    let mut results: Vec<Option<Result<String>>> = (0..args.config.len()).map(|_| None).collect();
    for chunk in (0..args.config.len()).collect::<Vec<_>>().chunks(args.jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let (path, dir) = (&args.config[i], &dirs[i]);
                    (i, scope.spawn(move || simulate_one(path, dir.as_deref(), args.gamma)))
                })
                .collect();
            for (i, h) in handles {
                results[i] = Some(h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("worker panicked"))));
            }
        });
    }
    let mut failed = 0;
    for (path, r) in args.config.iter().zip(results) {
        match r.expect("every scenario ran") {
            Ok(line) => println!("{line}"),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e:#}", path.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} scenario(s) failed");
    }
    Ok(())
}

fn analyze_cmd(args: AnalyzeArgs) -> Result<()> {
    let scenario = load(&args.config, args.gamma)?;
    let report = runner::run(&scenario, Mode::Analyze, &args.grid.grid())?;
    let analysis = report.analysis.as_ref().expect("analysis ran");
    print!("{}", runner::analysis_text(&report, analysis));
    if let Some(dir) = &args.out {
        runner::write_artifacts(&report, dir)?;
    }
    Ok(())
}

fn verify_cmd(args: VerifyArgs) -> Result<()> {
    let scenario = load(&args.config, None)?;
    let cl = assemble_closed_loop(scenario.topology.laplacian(), scenario.gamma)?;
    let problem = LmiProblem::new(&cl, &scenario.delays)?;
    let text = std::fs::read_to_string(&args.candidate)
        .with_context(|| format!("reading {}", args.candidate.display()))?;
    let candidate = parse_candidate(&text, problem.reduced_dim())?;
    let report = verify_candidate(&problem, &candidate)?;
    let body = report.to_text();
    print!("{body}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("lmi_report.txt"), &body)?;
    }
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let samples = calibrate_dde(args.dt, args.t_final)?;
    println!("{:>8} {:>22} {:>22} {:>12}", "t", "x", "reference", "error");
    let stride = ((0.25 / args.dt).round() as usize).max(1);
    let mut worst: f64 = 0.0;
    for (k, &(t, x)) in samples.iter().enumerate() {
        let r = scalar_reference(t);
        worst = worst.max((x - r).abs());
        if k % stride == 0 || k + 1 == samples.len() {
            println!("{t:>8.3} {x:>22.15} {r:>22.15} {:>12.3e}", (x - r).abs());
        }
    }
    println!("max |error| = {worst:.3e}");
    Ok(())
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let scenario = load(&args.config, args.gamma)?;
    let mode: Mode = args.mode.into();
    let report = runner::run(&scenario, mode, &args.grid.grid())?;
    let dir = output_dir(args.out.as_deref(), &scenario);
    runner::write_artifacts(&report, &dir)?;
    if report.simulation.is_some() {
        println!("{}", summary_line(&report, &dir));
    }
    if let Some(a) = &report.analysis {
        print!("{}", runner::analysis_text(&report, a));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::VerifyLmi(a) => verify_cmd(a),
        Command::CalibrateDde(a) => calibrate_cmd(a),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
