//! `entroflow` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 I/O or malformed JSON,
//! 3 at least one certificate row failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use entroflow::experiment::{self, BoundsTarget, ExperimentConfig, Mode, TauSchedule};
use entroflow::generators::{self, InstanceSpec};
use entroflow::{io, Error};

#[derive(Parser, Debug)]
#[command(name = "entroflow", version, about = "Kakade flows, natural policy gradients and their convergence certificates on finite MDPs")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Shared {
    /// MDP instance in the JSON schema {n_states, n_actions, gamma, mu, reward, transition}.
    #[arg(long, global = true)]
    mdp: Option<PathBuf>,
    /// Generator spec as JSON, e.g. '{"kind":"garnet","n_states":8,"n_actions":4,"branching":3,"gamma":0.9}'.
    #[arg(long, global = true)]
    generator: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// ODE / solver tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    gamma_override: Option<f64>,
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an instance and write it as JSON.
    Gen(GenArgs),
    /// Optimal and entropy-regularized solutions.
    Solve {
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Integrate the Kakade gradient flow.
    Flow(FlowArgs),
    /// Integrate a σ-family gradient flow.
    SigmaFlow {
        #[arg(long)]
        sigma: Option<f64>,
        #[command(flatten)]
        grid: FlowArgs,
        /// Fit window `lo,hi` for the log-log rate fit.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        fit_window: Option<Vec<f64>>,
    },
    /// Unregularized natural policy gradient.
    Npg {
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Entropy-regularized natural policy gradient (uniform reference).
    NpgReg {
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Certify convergence bounds and write a report.
    Bounds {
        #[arg(long, value_enum)]
        mode: Option<BoundsArg>,
        #[command(flatten)]
        grid: FlowArgs,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Regularized NPG over a grid of (seed, η, k, τ) cells.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_enum)]
        tau_schedule: Option<ScheduleArg>,
    },
}

#[derive(Args, Debug)]
struct FlowArgs {
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
    /// Explicit time grid (comma separated, increasing).
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    /// Skip the central-path distance column.
    #[arg(long)]
    no_central_path: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    gamma: Option<f64>,
    /// Reward of (s1, a1) for the two-cycle.
    #[arg(long)]
    reward: Option<f64>,
    /// Arm rewards for a bandit.
    #[arg(long, value_delimiter = ',')]
    rewards: Option<Vec<f64>>,
    #[arg(long)]
    n_states: Option<usize>,
    #[arg(long)]
    n_actions: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Fig1Twocycle,
    Bandit,
    Garnet,
    Chain,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BoundsArg {
    Flow,
    Npg,
    NpgReg,
    Regularization,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Fixed,
    OverallRate,
}

/// Writes to stdout, ignoring a closed pipe (e.g. `| head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn gen_spec(args: &GenArgs) -> Result<InstanceSpec, Error> {
    let need = |v: Option<usize>, name: &str| v.ok_or_else(|| usage(format!("--{name} is required")));
    let gamma = || args.gamma.ok_or_else(|| usage("--gamma is required"));
    Ok(match args.kind {
        KindArg::Fig1Twocycle => InstanceSpec::Fig1Twocycle {
            gamma: gamma()?,
            reward: args.reward.unwrap_or(1.0),
            mu: None,
        },
        KindArg::Bandit => InstanceSpec::Bandit {
            rewards: args.rewards.clone().ok_or_else(|| usage("--rewards is required"))?,
        },
        KindArg::Garnet => InstanceSpec::Garnet {
            n_states: need(args.n_states, "n-states")?,
            n_actions: need(args.n_actions, "n-actions")?,
            branching: need(args.branching, "branching")?,
            gamma: gamma()?,
        },
        KindArg::Chain => InstanceSpec::Chain { n_states: need(args.n_states, "n-states")?, gamma: gamma()? },
    })
}

fn run_gen(shared: &Shared, args: &GenArgs) -> Result<(), Error> {
    let spec = gen_spec(args)?;
    if matches!(spec, InstanceSpec::Garnet { .. }) && shared.seed.is_none() {
        return Err(usage("--seed is required for random generators"));
    }
    let mut mdp = generators::generate_instance(&spec, shared.seed.unwrap_or(0))?;
    if let Some(g) = shared.gamma_override {
        mdp = mdp.with_gamma(g)?;
    }
    match &shared.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("mdp.json");
            io::write_mdp(&path, &mdp)?;
            emit(&path.display().to_string());
        }
        None => emit(&serde_json::to_string_pretty(&mdp.to_raw())?),
    }
    Ok(())
}

fn flow_overrides(c: &mut ExperimentConfig, g: &FlowArgs) {
    c.t_max = g.t_max;
    c.n_points = g.n_points;
    c.t_grid = g.t_grid.clone();
    if g.no_central_path {
        c.central_path = Some(false);
    }
}

/// Flags as a config layer: unset flags stay `None` and keep the file's values.
fn flag_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let s = &cli.shared;
    let mut c = ExperimentConfig {
        mdp_path: s.mdp.clone(),
        generator: s.generator.as_deref().map(serde_json::from_str).transpose()?,
        seed: s.seed,
        out: s.out.clone(),
        tol: s.tol,
        gamma_override: s.gamma_override,
        ..Default::default()
    };
    match &cli.command {
        Command::Gen(_) => unreachable!("handled separately"),
        Command::Solve { tau } => {
            c.mode = Some(Mode::Solve);
            c.tau = *tau;
        }
        Command::Flow(g) => {
            c.mode = Some(Mode::Flow);
            flow_overrides(&mut c, g);
        }
        Command::SigmaFlow { sigma, grid, fit_window } => {
            c.mode = Some(Mode::SigmaFlow);
            c.sigma = *sigma;
            flow_overrides(&mut c, grid);
            c.fit_window = fit_window.as_ref().map(|w| (w[0], w[1]));
        }
        Command::Npg { eta, k_max } => {
            c.mode = Some(Mode::Npg);
            c.eta = *eta;
            c.k_max = *k_max;
        }
        Command::NpgReg { eta, tau, k_max } => {
            c.mode = Some(Mode::NpgReg);
            c.eta = *eta;
            c.tau = *tau;
            c.k_max = *k_max;
        }
        Command::Bounds { mode, grid, eta, tau, k_max, taus } => {
            c.mode = Some(Mode::Bounds);
            c.bounds_target = mode.map(|m| match m {
                BoundsArg::Flow => BoundsTarget::Flow,
                BoundsArg::Npg => BoundsTarget::Npg,
                BoundsArg::NpgReg => BoundsTarget::NpgReg,
                BoundsArg::Regularization => BoundsTarget::Regularization,
            });
            flow_overrides(&mut c, grid);
            c.eta = *eta;
            c.tau = *tau;
            c.k_max = *k_max;
            c.taus = taus.clone();
        }
        Command::Sweep { etas, k_grid, taus, seeds, tau_schedule } => {
            c.mode = Some(Mode::Sweep);
            c.etas = etas.clone();
            c.k_grid = k_grid.clone();
            c.taus = taus.clone();
            c.seeds = seeds.clone();
            c.tau_schedule = tau_schedule.map(|s| match s {
                ScheduleArg::Fixed => TauSchedule::Fixed,
                ScheduleArg::OverallRate => TauSchedule::OverallRate,
            });
        }
    }
    Ok(c)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    if let Command::Gen(args) = &cli.command {
        run_gen(&cli.shared, args)?;
        return Ok(0);
    }
    let flags = flag_config(cli)?;
    let config = match &cli.shared.config {
        Some(path) => ExperimentConfig::from_json_file(path)?.overridden_by(flags),
        None => flags,
    };
    let outcome = experiment::run_experiment(&config)?;
    emit(&serde_json::to_string_pretty(&outcome)?);
    Ok(if outcome.certificate_failed() { 3 } else { 0 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
