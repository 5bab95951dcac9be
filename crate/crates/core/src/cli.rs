//! The `qflow` command line.
//!
//! Exit status: 0 on success, 1 for usage, config and I/O errors, 2 for
//! numerical failures, whose class is printed on standard error. Runs that
//! end in a numerical failure still write what they produced.

use std::ffi::OsString;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bubbles::{
    bubble_fit, bubble_mass, detect_concentration, discarded_tail_mass, quantization_report, rescale,
    sample_bubble_on_torus, superpose, Bubble, ConcentrationSite,
};
use crate::elliptic::{continuation, newton_solve};
use crate::energy::{conformal_volume, energy, total_curvature, ProblemData};
use crate::error::{Error, Result};
use crate::flow::{self, FlowOutcome};
use crate::grid::{integrate, ScalarField, TorusGrid};
use crate::io::config::{load_config_for, GreenRoute, InitialKind, Mode, RunConfig};
use crate::io::csv::{branch_csv, trajectory_csv};
use crate::io::field::{encode_field, load_field, write_atomic};
use crate::io::manifest::Manifest;
use crate::operators::{default_fit_window, green_field, green_log_fit, green_log_fit_local, GREEN_LOG_SLOPE};
use crate::synth::smooth_random_field;

#[derive(Parser, Debug)]
#[command(name = "qflow", version, about = "Q-curvature equation and flow on the flat 4-torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the gradient flow; writes trajectory.csv and final.qfld.
    Flow(RunArgs),
    /// Newton solve of the stationary equation; writes solution.qfld.
    Solve(RunArgs),
    /// Solve along a list of total curvatures; writes branch.csv.
    Continuation(RunArgs),
    /// Detect and fit concentration in a stored field; writes sites.csv.
    Analyze(RunArgs),
    /// Synthesize a superposition of bubbles; writes bubble.qfld.
    Bubble(RunArgs),
    /// Fit the logarithmic singularity of the Green function; writes green.csv.
    Green(RunArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override one config entry, e.g. `--set flow.t_end=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// What a finished run reports: a numerical failure class, if any.
struct Finished {
    failure: Option<(&'static str, String)>,
}

impl Finished {
    fn ok() -> Self {
        Self { failure: None }
    }

    fn failed(class: &'static str, detail: String) -> Self {
        Self { failure: Some((class, detail)) }
    }
}

/// Output directory plus the manifest and log being assembled.
struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
    log: String,
}

impl Outputs {
    fn new(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.output)?;
        let mut log = String::new();
        for line in &cfg.defaults_log {
            eprintln!("{line}");
            log.push_str(line);
            log.push('\n');
        }
        Ok(Self { dir: cfg.output.clone(), manifest: Manifest::default(), log })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.manifest.record(name, bytes);
        Ok(())
    }

    fn field(&mut self, name: &str, field: &ScalarField) -> Result<()> {
        self.write(name, &encode_field(field))
    }

    /// A summary line for stdout, the log and the manifest.
    fn note(&mut self, line: String) {
        println!("{line}");
        self.log.push_str(&line);
        self.log.push('\n');
        self.manifest.note(line);
    }

    fn finish(self, cfg: &RunConfig) -> Result<()> {
        write_atomic(&self.dir.join("run.log"), self.log.as_bytes())?;
        self.manifest.write(cfg, &self.dir)
    }
}

fn problem_data(cfg: &RunConfig, grid: TorusGrid) -> Result<ProblemData> {
    Ok(ProblemData::new(cfg.problem()?.build(grid)?))
}

fn initial_field(cfg: &RunConfig, grid: TorusGrid) -> Result<ScalarField> {
    let init = cfg.initial();
    match init.kind {
        InitialKind::Zero => Ok(ScalarField::zeros(grid)),
        InitialKind::Random => Ok(smooth_random_field(grid, cfg.seed, init.max_mode, init.amplitude)),
        InitialKind::File => {
            let path = init.path.as_ref().ok_or_else(|| Error::Config("initial.path is required".into()))?;
            let u = load_field(path)?;
            if *u.grid() != grid {
                return Err(Error::Config(format!("initial field {} is on a different grid", path.display())));
            }
            Ok(u)
        }
    }
}

fn run_flow(cfg: &RunConfig, out: &mut Outputs) -> Result<Finished> {
    let grid = cfg.grid()?;
    let p = problem_data(cfg, grid)?;
    let u0 = initial_field(cfg, grid)?;
    let traj = flow::run(u0, p, &cfg.flow().options())?;
    out.write("trajectory.csv", trajectory_csv(&traj.rows).as_bytes())?;
    out.field("final.qfld", &traj.final_state.u)?;
    let l = &traj.ledger;
    let drop = traj.energy_drop();
    out.note(format!("outcome: {}", traj.outcome));
    out.note(format!("t: {:.16e}", traj.final_state.t));
    out.note(format!("accepted_steps: {}", l.accepted_steps));
    out.note(format!("rejected_steps: {}", l.rejected_steps));
    out.note(format!("energy_increases: {}", l.energy_increases));
    out.note(format!("initial_energy: {:.16e}", l.initial_energy));
    out.note(format!("final_energy: {:.16e}", traj.final_state.energy()));
    out.note(format!("energy_drop: {drop:.16e}"));
    out.note(format!("dissipation: {:.16e}", l.dissipation));
    out.note(format!("relative_drift_rate: {:.6e}", traj.relative_drift_rate()));
    out.note(format!("residual: {:.6e}", traj.final_state.residual_norm()));
    Ok(match traj.outcome {
        FlowOutcome::ReachedTEnd | FlowOutcome::ConvergedToSteady => Finished::ok(),
        other => Finished::failed(other.as_str(), format!("flow stopped at t = {:.6e}", traj.final_state.t)),
    })
}

fn run_solve(cfg: &RunConfig, out: &mut Outputs) -> Result<Finished> {
    let grid = cfg.grid()?;
    let p = problem_data(cfg, grid)?;
    let u0 = initial_field(cfg, grid)?;
    let s = cfg.solve();
    let sol = newton_solve(&p, &u0, s.tol, s.max_iter)?;
    let mut table = String::from("iteration,residual\n");
    for (i, r) in sol.history.iter().enumerate() {
        writeln!(table, "{i},{r:.16e}").expect("writing to a String");
    }
    out.write("newton.csv", table.as_bytes())?;
    out.field("solution.qfld", &sol.u)?;
    out.note(format!("converged: {}", sol.converged));
    out.note(format!("iterations: {}", sol.iterations));
    out.note(format!("residual: {:.6e}", sol.residual_norm));
    out.note(format!("energy: {:.16e}", energy(&sol.u, &p)?.total));
    out.note(format!("max_u: {:.16e}", sol.u.max()));
    Ok(if sol.converged {
        Finished::ok()
    } else {
        Finished::failed("newton_nonconvergence", format!("residual {:.3e} after {} steps", sol.residual_norm, sol.iterations))
    })
}

fn run_continuation(cfg: &RunConfig, out: &mut Outputs) -> Result<Finished> {
    let grid = cfg.grid()?;
    let f = cfg.problem()?.build(grid)?;
    let total = integrate(&f);
    if !(total > 0.0) {
        return Err(Error::Config(format!("continuation needs a datum with positive integral, got {total}")));
    }
    let shape = f.map(|v| v / total);
    let c = cfg.continuation();
    let branch = continuation(&shape, &c.k_list, c.tol, c.max_iter)?;
    out.write("branch.csv", branch_csv(&branch)?.as_bytes())?;
    for (i, sol) in branch.solutions.iter().enumerate() {
        out.field(&format!("branch_{i:03}.qfld"), &sol.u)?;
    }
    out.note(format!("solved: {} of {}", branch.solutions.len(), c.k_list.len()));
    for (k, m) in branch.k_values.iter().zip(&branch.max_u_trace) {
        out.note(format!("k = {k}: max_u = {m:.16e}"));
    }
    Ok(match branch.truncated_at {
        None => Finished::ok(),
        Some(k) => Finished::failed("continuation_truncated", format!("no solution reached at k = {k}")),
    })
}

fn fit_site(
    u: &ScalarField,
    site: &ConcentrationSite,
    k: f64,
    half_width: f64,
    points: usize,
) -> Option<(f64, f64, f64, f64, bool)> {
    let lambda = site.bubble_scale()?;
    let r = 1.0 / lambda;
    let hw = half_width.min(0.25 * u.grid().period() / r);
    let rs = rescale(u, &site.center, r, hw, points).ok()?;
    let fit = bubble_fit(&rs, k).ok()?;
    Some((lambda, fit.lambda_fit / r, fit.l2_error, fit.sup_error, fit.accepted()))
}

fn run_analyze(cfg: &RunConfig, out: &mut Outputs) -> Result<Finished> {
    let grid = cfg.grid()?;
    let a = cfg.analyze();
    let u = load_field(&a.input)?;
    if *u.grid() != grid {
        return Err(Error::Config(format!("field {} is not on the configured grid", a.input.display())));
    }
    let k = total_curvature(&cfg.problem()?.build(grid)?);
    let sites = match a.rho {
        None => {
            let report = quantization_report(&u, k)?;
            out.note(format!("rho: {:.16e}", report.rho));
            out.note(format!("quanta: {}", report.quanta()));
            out.note(format!("concentrated_mass: {:.16e}", report.concentrated_mass));
            out.note(format!("diffuse_mass: {:.16e}", report.diffuse_mass));
            out.note(format!("accounting_defect: {:.6e}", report.accounting_defect()));
            report.sites
        }
        Some(rho) => detect_concentration(&u, k, rho)?,
    };
    let mut table = String::from(
        "site,x0,x1,x2,x3,radius,mass,plateau_radius,plateau_mass,plateau_found,quantum_ratio,\
         concentrated,quantized,lambda_estimate,lambda_fit,fit_l2,fit_sup,fit_accepted\n",
    );
    for (i, s) in sites.iter().enumerate() {
        let fit = if a.fit && s.concentrated { fit_site(&u, s, k, a.fit_half_width, a.fit_points) } else { None };
        let (le, lf, l2, sup, acc) = fit.unwrap_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN, false));
        writeln!(
            table,
            "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e},{},{},{le:.16e},{lf:.16e},{l2:.16e},{sup:.16e},{acc}",
            s.center[0],
            s.center[1],
            s.center[2],
            s.center[3],
            s.radius,
            s.mass,
            s.plateau_radius,
            s.plateau_mass,
            s.plateau_found,
            s.quantum_ratio,
            s.concentrated,
            s.quantized(),
        )
        .expect("writing to a String");
        if s.concentrated {
            out.note(format!(
                "site {i}: center {:?}, quantum_ratio {:.6}, lambda_fit {lf:.6e}, fit_l2 {l2:.3e}",
                s.center, s.quantum_ratio
            ));
        }
    }
    out.write("sites.csv", table.as_bytes())?;
    out.note(format!("sites: {}", sites.len()));
    Ok(Finished::ok())
}

fn run_bubble(cfg: &RunConfig, out: &mut Outputs) -> Result<Finished> {
    let grid = cfg.grid()?;
    let k = total_curvature(&cfg.problem()?.build(grid)?);
    let b = cfg.bubble();
    let mut parts = Vec::new();
    let mut table = String::from("bubble,lambda,x0,x1,x2,x3,total_mass,discarded_tail\n");
    let mut expected = 0.0;
    for (i, (&lambda, c)) in b.lambda.iter().zip(&b.centers).enumerate() {
        let bubble = Bubble::new([0.0; 4], lambda, k)?;
        parts.push(sample_bubble_on_torus(&bubble, grid, c)?);
        let kept = bubble_mass(&bubble, f64::INFINITY);
        let tail = discarded_tail_mass(&bubble, grid.period());
        expected += kept - tail;
        writeln!(
            table,
            "{i},{lambda:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{kept:.16e},{tail:.16e}",
            c[0], c[1], c[2], c[3]
        )
        .expect("writing to a String");
    }
    let u = superpose(&parts)?;
    out.write("bubbles.csv", table.as_bytes())?;
    out.field("bubble.qfld", &u)?;
    out.note(format!("k: {k:.16e}"));
    out.note(format!("sampled_volume: {:.16e}", conformal_volume(&u)?));
    out.note(format!("closed_form_volume_within_quarter_period: {expected:.16e}"));
    Ok(Finished::ok())
}

fn run_green(cfg: &RunConfig, out: &mut Outputs) -> Result<Finished> {
    let grid = cfg.grid()?;
    let g = cfg.green();
    let (d_min, d_max) = default_fit_window(&grid);
    let (r_min, r_max) = (g.r_min.unwrap_or(d_min), g.r_max.unwrap_or(d_max));
    let fit = match g.route {
        GreenRoute::Field => {
            let sample = green_field(&grid, &[0.0; 4]);
            out.field("green.qfld", &sample.field)?;
            green_log_fit(&sample, r_min, r_max)?
        }
        GreenRoute::Local => green_log_fit_local(&grid, r_min, r_max)?,
    };
    let rel = (fit.slope / GREEN_LOG_SLOPE - 1.0).abs();
    let table = format!(
        "n,r_min,r_max,slope,expected_slope,relative_error,regular_estimate,residual,points\n\
         {},{r_min:.16e},{r_max:.16e},{:.16e},{:.16e},{rel:.16e},{:.16e},{:.16e},{}\n",
        grid.n(),
        fit.slope,
        GREEN_LOG_SLOPE,
        fit.regular_estimate,
        fit.residual,
        fit.points
    );
    out.write("green.csv", table.as_bytes())?;
    out.note(format!("slope: {:.16e}", fit.slope));
    out.note(format!("expected: {:.16e} (-1/(8 pi^2) = {:.16e})", GREEN_LOG_SLOPE, -1.0 / (8.0 * PI * PI)));
    out.note(format!("relative_error: {rel:.6e}"));
    Ok(Finished::ok())
}

fn run_mode(mode: Mode, args: &RunArgs) -> Result<Finished> {
    let cfg = load_config_for(&args.config, Some(mode), &args.set)?;
    let mut out = Outputs::new(&cfg)?;
    let finished = match mode {
        Mode::Flow => run_flow(&cfg, &mut out),
        Mode::Solve => run_solve(&cfg, &mut out),
        Mode::Continuation => run_continuation(&cfg, &mut out),
        Mode::Analyze => run_analyze(&cfg, &mut out),
        Mode::Bubble => run_bubble(&cfg, &mut out),
        Mode::Green => run_green(&cfg, &mut out),
    };
    match finished {
        Ok(f) => {
            if let Some((class, detail)) = &f.failure {
                out.note(format!("failure: {class}: {detail}"));
            }
            out.finish(&cfg)?;
            Ok(f)
        }
        Err(e) => {
            out.note(format!("failure: {}: {e}", e.class()));
            out.finish(&cfg)?;
            Err(e)
        }
    }
}

fn selftest() -> i32 {
    let results = crate::selftest::run_all();
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("selftest: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        0
    } else {
        2
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (mode, args) = match &cli.command {
        Command::Selftest => return selftest(),
        Command::Flow(a) => (Mode::Flow, a),
        Command::Solve(a) => (Mode::Solve, a),
        Command::Continuation(a) => (Mode::Continuation, a),
        Command::Analyze(a) => (Mode::Analyze, a),
        Command::Bubble(a) => (Mode::Bubble, a),
        Command::Green(a) => (Mode::Green, a),
    };
    match run_mode(mode, args) {
        Ok(Finished { failure: None }) => 0,
        Ok(Finished { failure: Some((class, detail)) }) => {
            eprintln!("numerical failure: {class}: {detail}");
            2
        }
        Err(e) if e.is_numerical() => {
            eprintln!("numerical failure: {}: {e}", e.class());
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
