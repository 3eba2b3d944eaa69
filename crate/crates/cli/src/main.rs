//! Command-line front end: config ingestion, subcommand dispatch, report and
//! CSV emission.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure,
//! 4 verification failure.

mod runspec;
mod verify;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use dobsim::analysis::compute_metrics;
use dobsim::simulator::{simulate_closed_loop, simulate_nominal, sweep_tau, Trajectory};
use dobsim::synthesis::{design_gains, estimate_saturation_levels, SectorDisk, SynthesisReport};

use runspec::RunSpec;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Verification(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Verification(m) => write!(f, "verification failure: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<dobsim::Error> for CliError {
    fn from(e: dobsim::Error) -> Self {
        CliError::Numerical(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "dobsim",
    about = "Design, simulate, and verify a disturbance-observer-based output feedback controller",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run specification (JSON); builtin satellite defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override the spec's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the controller timescale.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gain design procedure and write a synthesis report.
    Synthesize,
    /// Simulate the uncertain closed loop and write trajectory CSVs.
    Simulate,
    /// Simulate the nominal loop only.
    Nominal,
    /// Run the closed loop across a list of timescales.
    Sweep,
    /// Run the numerical verification checks.
    Verify,
    /// Write a ready-made satellite run specification.
    ExampleSatellite,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dobsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let spec = load_spec(cli)?;
    fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::Config(format!("cannot create output directory: {e}")))?;
    match cli.command {
        Command::Synthesize => cmd_synthesize(cli, &spec),
        Command::Simulate => cmd_simulate(cli, &spec),
        Command::Nominal => cmd_nominal(cli, &spec),
        Command::Sweep => cmd_sweep(cli, &spec),
        Command::Verify => verify::cmd_verify(cli, &spec),
        Command::ExampleSatellite => cmd_example_satellite(cli, &spec),
    }
}

fn load_spec(cli: &Cli) -> Result<RunSpec, CliError> {
    let mut spec = match &cli.config {
        None => RunSpec::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunSpec::from_json(&text)?
        }
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn say(cli: &Cli, msg: &str) {
    if !cli.quiet {
        println!("{msg}");
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    let mut buf = std::io::BufWriter::new(file);
    traj.write_csv(&mut buf)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn cmd_example_satellite(cli: &Cli, spec: &RunSpec) -> Result<(), CliError> {
    let path = cli.out.join("spec.json");
    write_file(&path, &spec.to_json())?;
    say(cli, &format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_synthesize(cli: &Cli, spec: &RunSpec) -> Result<(), CliError> {
    let disk = SectorDisk::new(spec.synthesis.mu)
        .map_err(|e| CliError::Config(format!("synthesis.mu: {e}")))?;
    let grid = spec.synthesis.grid();
    let channels = spec.synthesis.channel_designs()?;
    let (_gains, reports) = design_gains(&channels, &disk, &grid, spec.synthesis.a1_safety)?;

    let saturation = if spec.saturation_inputs_available() {
        let (plant, nominal, params) = spec.build_plant()?;
        match spec.saturation_inputs(&params)? {
            None => None,
            Some(inp) => Some(estimate_saturation_levels(
                &plant,
                &nominal,
                &inp.samples,
                &inp.state_box,
                inp.l_z,
                inp.delta_w,
                inp.delta_1,
                inp.lipschitz_f,
                &inp.opts,
            )?),
        }
    } else {
        None
    };

    let report = SynthesisReport::from_parts(spec.synthesis.mu, grid, reports, saturation);
    let path = cli.out.join("synthesis.txt");
    write_file(&path, &report.to_text())?;
    say(cli, &format!("wrote {}", path.display()));
    for c in &report.channels {
        say(
            cli,
            &format!(
                "channel {}: a1 = {} ({}), disk clearance {:.3e}, SPR margin {:.3e}",
                c.channel + 1,
                c.a1,
                if c.searched { "searched" } else { "given" },
                c.nyquist.min_distance,
                c.spr.min_re
            ),
        );
    }
    if !report.pass {
        let failing: Vec<String> = report
            .channels
            .iter()
            .filter(|c| !c.pass())
            .map(|c| format!("channel {}", c.channel + 1))
            .collect();
        return Err(CliError::Numerical(format!(
            "gain certification failed for {}",
            failing.join(", ")
        )));
    }
    say(cli, "synthesis: pass");
    Ok(())
}

fn cmd_simulate(cli: &Cli, spec: &RunSpec) -> Result<(), CliError> {
    let (plant, nominal, _) = spec.build_plant()?;
    let params = spec.build_controller(cli.tau)?;
    let cfg = spec.build_sim_config(cli.tau)?;

    let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg)?;
    write_trajectory(&cli.out.join("trajectory.csv"), &traj)?;

    let (nominal_traj, metrics) = if traj.aborted.is_none() {
        let nom = simulate_nominal(&plant, &nominal, &cfg)?;
        let m = compute_metrics(
            &traj,
            Some(&nom),
            spec.sim.t_ss_frac * cfg.t_end,
            spec.sim.settle_threshold,
        )?;
        (Some(nom), m)
    } else {
        let m = compute_metrics(
            &traj,
            None,
            spec.sim.t_ss_frac * cfg.t_end,
            spec.sim.settle_threshold,
        )?;
        (None, m)
    };
    if let Some(nom) = &nominal_traj {
        write_trajectory(&cli.out.join("nominal.csv"), nom)?;
    }

    let mut text = String::from("schema = dobsim.metrics.v1\n");
    text.push_str(&format!("tau = {}\n", cfg.tau));
    text.push_str(&format!("step = {}\n", cfg.step));
    text.push_str(&format!("t_end = {}\n", cfg.t_end));
    text.push_str(&format!("samples = {}\n", traj.len()));
    text.push_str(&format!("ultimate_bound = {}\n", metrics.ultimate_bound));
    text.push_str(&format!(
        "recovery_error = {}\n",
        metrics
            .recovery_error
            .map(|v| v.to_string())
            .unwrap_or_else(|| "none".into())
    ));
    text.push_str(&format!("effort_l1 = {}\n", metrics.effort_l1));
    text.push_str(&format!("effort_l2 = {}\n", metrics.effort_l2));
    text.push_str(&format!("settled = {}\n", metrics.settled));
    text.push_str(&format!("aborted = {}\n", traj.aborted.is_some()));
    if let Some(a) = traj.aborted {
        text.push_str(&format!("aborted_t = {}\naborted_norm = {}\n", a.t, a.norm));
    }
    write_file(&cli.out.join("metrics.txt"), &text)?;
    say(
        cli,
        &format!(
            "simulated {} samples; ultimate bound {:.3e}",
            traj.len(),
            metrics.ultimate_bound
        ),
    );

    if let Some(a) = traj.aborted {
        return Err(CliError::Numerical(format!(
            "simulation diverged at t = {} (state norm {:.3e})",
            a.t, a.norm
        )));
    }
    Ok(())
}

fn cmd_nominal(cli: &Cli, spec: &RunSpec) -> Result<(), CliError> {
    let (plant, nominal, _) = spec.build_plant()?;
    let cfg = spec.build_sim_config(cli.tau)?;
    let traj = simulate_nominal(&plant, &nominal, &cfg)?;
    write_trajectory(&cli.out.join("nominal.csv"), &traj)?;
    let metrics = compute_metrics(
        &traj,
        None,
        spec.sim.t_ss_frac * cfg.t_end,
        spec.sim.settle_threshold,
    )?;
    let mut text = String::from("schema = dobsim.metrics.v1\n");
    text.push_str(&format!("t_end = {}\n", cfg.t_end));
    text.push_str(&format!("ultimate_bound = {}\n", metrics.ultimate_bound));
    text.push_str(&format!("effort_l1 = {}\n", metrics.effort_l1));
    text.push_str(&format!("settled = {}\n", metrics.settled));
    text.push_str(&format!("aborted = {}\n", traj.aborted.is_some()));
    write_file(&cli.out.join("metrics.txt"), &text)?;
    say(cli, &format!("nominal run: {} samples", traj.len()));
    if let Some(a) = traj.aborted {
        return Err(CliError::Numerical(format!(
            "nominal simulation diverged at t = {} (state norm {:.3e})",
            a.t, a.norm
        )));
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, spec: &RunSpec) -> Result<(), CliError> {
    let (plant, nominal, _) = spec.build_plant()?;
    let params = spec.build_controller(cli.tau)?;
    let cfg = spec.build_sim_config(cli.tau)?;
    let report = sweep_tau(
        &plant,
        &nominal,
        &params,
        &cfg,
        &spec.sweep.taus,
        spec.sim.t_ss_frac,
        spec.sim.settle_threshold,
    )?;
    let path = cli.out.join("sweep.csv");
    write_file(&path, &report.to_csv())?;
    say(cli, &format!("wrote {}", path.display()));
    for e in &report.entries {
        say(
            cli,
            &format!(
                "tau = {}: {}",
                e.tau,
                match (&e.error, e.aborted) {
                    (Some(err), _) => format!("error: {err}"),
                    (None, true) => "diverged".into(),
                    (None, false) => format!(
                        "ultimate {:.3e}, recovery {:.3e}",
                        e.metrics
                            .as_ref()
                            .map(|m| m.ultimate_bound)
                            .unwrap_or(f64::NAN),
                        e.metrics
                            .as_ref()
                            .and_then(|m| m.recovery_error)
                            .unwrap_or(f64::NAN)
                    ),
                }
            ),
        );
    }
    let ok = report
        .entries
        .iter()
        .any(|e| e.error.is_none() && !e.aborted);
    if !ok {
        return Err(CliError::Numerical("every sweep run failed".into()));
    }
    Ok(())
}

pub(crate) fn region_samples(
    lo: &[f64],
    hi: &[f64],
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<DVector<f64>>, CliError> {
    if lo.len() != hi.len() {
        return Err(CliError::Config(
            "verify region lo/hi lengths differ".into(),
        ));
    }
    Ok((0..n)
        .map(|_| {
            DVector::from_fn(lo.len(), |i, _| {
                if hi[i] > lo[i] {
                    rng.random_range(lo[i]..hi[i])
                } else {
                    lo[i]
                }
            })
        })
        .collect())
}
