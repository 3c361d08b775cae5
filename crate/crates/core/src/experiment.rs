//! Experiment configuration and dispatch: every CLI mode ends up in [`run_experiment`].

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bounds::{self, BoundConstants, BoundReport, Verdict};
use crate::error::{Error, Result};
use crate::flow::{self, FlowReference};
use crate::generators::{self, InstanceSpec};
use crate::io;
use crate::mdp::{self, MdpInstance, Policy};
use crate::npg;
use crate::regularized::{self, SigmaRegularizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Solve,
    Flow,
    SigmaFlow,
    Npg,
    NpgReg,
    Bounds,
    Sweep,
}

/// What `bounds` mode certifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundsTarget {
    Flow,
    Npg,
    NpgReg,
    Regularization,
}

/// How `sweep` picks `τ` for a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSchedule {
    /// Every value of `taus`.
    Fixed,
    /// `τ = √(2Δ/(ηk))`.
    OverallRate,
}

/// Every field is optional so that a JSON file and command-line flags can be layered with
/// [`ExperimentConfig::overridden_by`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub mdp_path: Option<PathBuf>,
    pub generator: Option<InstanceSpec>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub gamma_override: Option<f64>,
    pub out: Option<PathBuf>,
    /// ODE and solver tolerance.
    pub tol: Option<f64>,
    pub tau: Option<f64>,
    pub taus: Option<Vec<f64>>,
    pub tau_schedule: Option<TauSchedule>,
    pub eta: Option<f64>,
    pub etas: Option<Vec<f64>>,
    pub sigma: Option<f64>,
    pub t_max: Option<f64>,
    pub t_grid: Option<Vec<f64>>,
    pub n_points: Option<usize>,
    pub k_max: Option<usize>,
    pub k_grid: Option<Vec<usize>>,
    pub fit_window: Option<(f64, f64)>,
    pub central_path: Option<bool>,
    pub bounds_target: Option<BoundsTarget>,
    /// Initial policy; uniform when absent.
    pub pi0: Option<Vec<Vec<f64>>>,
}

macro_rules! layer {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Fields set in `top` replace those of `self`.
    pub fn overridden_by(mut self, top: ExperimentConfig) -> Self {
        layer!(self, top; mode, mdp_path, generator, seed, seeds, gamma_override, out, tol, tau,
            taus, tau_schedule, eta, etas, sigma, t_max, t_grid, n_points, k_max, k_grid,
            fit_window, central_path, bounds_target, pi0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.mode.is_none() {
            return usage("no mode given");
        }
        match (&self.mdp_path, &self.generator) {
            (None, None) => return usage("an MDP path or a generator spec is required"),
            (Some(_), Some(_)) => return usage("give either an MDP path or a generator, not both"),
            _ => {}
        }
        if matches!(self.generator, Some(InstanceSpec::Garnet { .. }))
            && self.seed.is_none()
            && self.seeds.is_none()
        {
            return usage("a seed is required for random generators");
        }
        if let Some(tol) = self.tol {
            if !(tol > 0.0) {
                return usage("tolerance must be positive");
            }
        }
        if let Some(g) = &self.t_grid {
            if g.is_empty() || g[0] < 0.0 || g.windows(2).any(|w| !(w[1] > w[0])) {
                return usage("t grid must be nonnegative and strictly increasing");
            }
        }
        if let Some(g) = &self.k_grid {
            if g.is_empty() || g.windows(2).any(|w| w[1] <= w[0]) {
                return usage("k grid must be strictly increasing");
            }
        }
        for (name, grid) in [("taus", &self.taus), ("etas", &self.etas)] {
            if let Some(g) = grid {
                if g.iter().any(|&x| !(x > 0.0)) {
                    return usage(&format!("{name} must be positive"));
                }
            }
        }
        Ok(())
    }

    fn tol(&self) -> f64 {
        self.tol.unwrap_or(1e-10)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("entroflow_out"))
    }

    fn require<T: Copy>(value: Option<T>, name: &str) -> Result<T> {
        value.ok_or_else(|| Error::InvalidParameter(format!("parameter `{name}` is required")))
    }

    pub fn load_mdp(&self) -> Result<MdpInstance> {
        self.load_mdp_seeded(self.seed.unwrap_or(0))
    }

    fn load_mdp_seeded(&self, seed: u64) -> Result<MdpInstance> {
        let mdp = match (&self.mdp_path, &self.generator) {
            (Some(p), _) => io::read_mdp(p)?,
            (None, Some(spec)) => generators::generate_instance(spec, seed)?,
            (None, None) => {
                return Err(Error::InvalidParameter("no MDP source".into()));
            }
        };
        match self.gamma_override {
            Some(g) => mdp.with_gamma(g),
            None => Ok(mdp),
        }
    }

    fn initial_policy(&self, mdp: &MdpInstance) -> Result<Policy> {
        match &self.pi0 {
            None => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions())),
            Some(rows) => {
                let na = rows.first().map_or(0, |r| r.len());
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                let probs = Array2::from_shape_vec((rows.len(), na), flat)
                    .map_err(|e| Error::Dimension(format!("pi0: {e}")))?;
                Policy::new(probs)
            }
        }
    }

    fn time_grid(&self, default_t_max: f64) -> Result<Vec<f64>> {
        if let Some(g) = &self.t_grid {
            return Ok(g.clone());
        }
        let t_max = self.t_max.unwrap_or(default_t_max);
        let n = self.n_points.unwrap_or(200);
        let geometric = flow::geometric_grid(1e-2, t_max, n / 2)?;
        let linear: Vec<f64> =
            (0..n - n / 2).map(|i| t_max * (i + 1) as f64 / (n - n / 2) as f64).collect();
        Ok(flow::merge_grids(&[&geometric, &linear]))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentOutcome {
    pub mode: Mode,
    /// `None` when the mode certifies nothing.
    pub verdict: Option<Verdict>,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

impl ExperimentOutcome {
    pub fn certificate_failed(&self) -> bool {
        self.verdict == Some(Verdict::Fail)
    }
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn report(&mut self, stem: &str, report: &BoundReport) -> Result<()> {
        io::write_report(&self.dir, stem, report)?;
        self.written.push(self.dir.join(format!("{stem}.json")));
        self.written.push(self.dir.join(format!("{stem}_rows.csv")));
        Ok(())
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mode = config.mode.unwrap();
    let mut art = Artifacts::new(config.out_dir())?;
    let (verdict, summary) = match mode {
        Mode::Solve => run_solve(config, &mut art)?,
        Mode::Flow => run_flow(config, &mut art)?,
        Mode::SigmaFlow => run_sigma_flow(config, &mut art)?,
        Mode::Npg => run_npg(config, &mut art)?,
        Mode::NpgReg => run_npg_reg(config, &mut art)?,
        Mode::Bounds => run_bounds(config, &mut art)?,
        Mode::Sweep => run_sweep(config, &mut art)?,
    };
    Ok(ExperimentOutcome { mode, verdict, artifacts: art.written, summary })
}

type ModeResult = Result<(Option<Verdict>, serde_json::Value)>;

fn rows_of(p: &Policy) -> Vec<Vec<f64>> {
    p.probs().outer_iter().map(|r| r.to_vec()).collect()
}

fn run_solve(config: &ExperimentConfig, art: &mut Artifacts) -> ModeResult {
    let mdp = config.load_mdp()?;
    let pi0 = config.initial_policy(&mdp)?;
    let reference = FlowReference::new(&mdp, &pi0)?;
    let opt = &reference.opt;
    let mut summary = json!({
        "r_star": opt.r_star,
        "delta": opt.delta.finite().ok(),
        "v_star": opt.bundle.v.to_vec(),
        "optimal_actions": (0..mdp.n_states())
            .map(|s| (0..mdp.n_actions()).filter(|&a| opt.optimal_actions.contains(s, a)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "max_entropy_optimal_policy": rows_of(&reference.pi_star),
    });
    if let Some(tau) = config.tau {
        let tol = config.tol.unwrap_or_else(|| regularized::default_soft_tol(&mdp, tau));
        let sol = regularized::solve_entropy_regularized(&mdp, &pi0, tau, tol)?;
        summary["tau"] = json!(tau);
        summary["policy"] = json!(rows_of(&sol.pi_star_tau));
        summary["v_tau"] = json!(sol.v_tau.to_vec());
        summary["q_tau"] = json!(sol.q_tau.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        summary["residual"] = json!(sol.residual);
        summary["iterations"] = json!(sol.iterations);
        summary["reward"] = json!(mdp::reward_of(&mdp, &sol.pi_star_tau)?);
    }
    io::write_json(&art.path("solve.json"), &summary)?;
    Ok((None, summary))
}

fn flow_setup(config: &ExperimentConfig) -> Result<(MdpInstance, Policy, BoundConstants, FlowReference)> {
    let mdp = config.load_mdp()?;
    let pi0 = config.initial_policy(&mdp)?;
    let (consts, reference) = BoundConstants::for_instance(&mdp, &pi0)?;
    Ok((mdp, pi0, consts, reference))
}

fn default_horizon(consts: &BoundConstants) -> f64 {
    (40.0 / consts.delta).min(1e6)
}

fn run_flow(config: &ExperimentConfig, art: &mut Artifacts) -> ModeResult {
    let (mdp, pi0, consts, reference) = flow_setup(config)?;
    let grid = config.time_grid(default_horizon(&consts))?;
    let mut traj = flow::integrate_kakade_flow_with(&mdp, &reference, &pi0, &grid, config.tol())?;
    if config.central_path.unwrap_or(true) {
        flow::annotate_central_path(&mut traj, &mdp, &pi0, 1e-13)?;
    }
    io::write_csv_file(&art.path("flow.csv"), |w| io::write_flow_csv(w, &mdp, &traj, Some(&consts)))?;
    let mut report = bounds::certify_flow(&mdp, &reference, &consts, &pi0, &traj)?;
    report.fitted_exponent = bounds::flow_rate_fit(&consts, &traj).ok();
    art.report("flow_report", &report)?;
    let summary = json!({
        "delta": consts.delta,
        "t_final": traj.times.last(),
        "final_gap": traj.diagnostics.last().map(|d| d.reward_gap),
        "fitted_exponent": report.fitted_exponent,
        "verdict": report.verdict,
    });
    Ok((Some(report.verdict), summary))
}

fn run_sigma_flow(config: &ExperimentConfig, art: &mut Artifacts) -> ModeResult {
    let sigma = ExperimentConfig::require(config.sigma, "sigma")?;
    let reg = SigmaRegularizer::new(sigma)?;
    let (mdp, pi0, consts, reference) = flow_setup(config)?;
    let grid = config.time_grid(100.0)?;
    let traj = flow::integrate_sigma_flow(&mdp, &reg, &pi0, &grid, config.tol())?;
    io::write_csv_file(&art.path("sigma_flow.csv"), |w| io::write_flow_csv(w, &mdp, &traj, None))?;

    let mut report = BoundReport::new(Some(consts.clone()), bounds::cert_tol(&mdp));
    let dpsi = regularized::sigma_potential_eval(&reg, &mdp, &reference.opt.greedy, &pi0).ok();
    for (&t, pi) in traj.times.iter().zip(&traj.policies) {
        if t < 1.0 {
            continue;
        }
        let (up, lo) = bounds::sigma_entry_bounds(&reg, &consts, &reference.opt, &pi0, dpsi, t)?;
        let mut hi_margin = f64::NEG_INFINITY;
        let mut lo_margin = f64::INFINITY;
        for ((p, u), l) in pi.probs().iter().zip(up.iter()).zip(lo.iter()) {
            // An infinite upper bound marks an entry where it does not apply.
            if u.is_finite() {
                hi_margin = hi_margin.max(p - u);
            }
            lo_margin = lo_margin.min(p - l);
        }
        if hi_margin.is_finite() {
            report.push("sigma_entry_upper_margin", t, hi_margin, None, Some(0.0));
        }
        report.push("sigma_entry_lower_margin", t, lo_margin, Some(0.0), None);
    }
    let window = config.fit_window.unwrap_or((10.0, *grid.last().unwrap()));
    report.fitted_exponent = bounds::sigma_rate_fit(&traj, sigma, window).ok();
    art.report("sigma_flow_report", &report)?;
    let summary = json!({
        "sigma": sigma,
        "expected_exponent": -1.0 / (sigma - 1.0),
        "fitted_exponent": report.fitted_exponent,
        "verdict": report.verdict,
    });
    Ok((Some(report.verdict), summary))
}

fn run_npg(config: &ExperimentConfig, art: &mut Artifacts) -> ModeResult {
    let eta = ExperimentConfig::require(config.eta, "eta")?;
    let k_max = config.k_max.unwrap_or(200);
    let (mdp, pi0, consts, reference) = flow_setup(config)?;
    let run = npg::npg_run_unregularized_with(&mdp, &reference.opt, &pi0, eta, k_max)?;
    let consts = consts.with_npg(eta);
    io::write_csv_file(&art.path("npg.csv"), |w| io::write_npg_csv(w, &mdp, &run, Some(&consts)))?;
    let mut report = bounds::certify_npg(&mdp, &reference.opt, &consts, &pi0, &run)?;
    report.fitted_exponent = bounds::npg_rate_fit(&consts, &run).ok();
    art.report("npg_report", &report)?;
    let summary = json!({
        "eta": eta,
        "k_max": k_max,
        "final_gap": run.diagnostics.last().map(|d| d.reward_gap),
        "fitted_exponent": report.fitted_exponent,
        "verdict": report.verdict,
    });
    Ok((Some(report.verdict), summary))
}

fn run_npg_reg(config: &ExperimentConfig, art: &mut Artifacts) -> ModeResult {
    let eta = ExperimentConfig::require(config.eta, "eta")?;
    let tau = ExperimentConfig::require(config.tau, "tau")?;
    let k_max = config.k_max.unwrap_or(200);
    let (mdp, pi0, consts, _) = flow_setup(config)?;
    let run = npg::npg_run_regularized_from(&mdp, &pi0, eta, tau, k_max)?;
    let report = bounds::certify_regularized_npg(&mdp, &consts, &run)?;
    let consts = report.constants.clone().unwrap_or(consts);
    io::write_csv_file(&art.path("npg_reg.csv"), |w| io::write_npg_csv(w, &mdp, &run, Some(&consts)))?;
    art.report("npg_reg_report", &report)?;
    let summary = json!({
        "eta": eta,
        "tau": tau,
        "k_max": k_max,
        "c_cen": consts.c_cen,
        "final_gap": run.diagnostics.last().map(|d| d.reward_gap),
        "verdict": report.verdict,
    });
    Ok((Some(report.verdict), summary))
}

fn run_bounds(config: &ExperimentConfig, art: &mut Artifacts) -> ModeResult {
    match config.bounds_target.unwrap_or(BoundsTarget::Flow) {
        BoundsTarget::Flow => {
            let (mdp, pi0, consts, reference) = flow_setup(config)?;
            let grid = config.time_grid(default_horizon(&consts))?;
            let traj = flow::integrate_kakade_flow_with(&mdp, &reference, &pi0, &grid, config.tol())?;
            let mut report = bounds::certify_flow(&mdp, &reference, &consts, &pi0, &traj)?;
            report.fitted_exponent = bounds::flow_rate_fit(&consts, &traj).ok();
            art.report("bounds_report", &report)?;
            Ok((Some(report.verdict), summary_of(&report)))
        }
        BoundsTarget::Npg => {
            let eta = ExperimentConfig::require(config.eta, "eta")?;
            let (mdp, pi0, consts, reference) = flow_setup(config)?;
            let run = npg::npg_run_unregularized_with(
                &mdp,
                &reference.opt,
                &pi0,
                eta,
                config.k_max.unwrap_or(200),
            )?;
            let consts = consts.with_npg(eta);
            let mut report = bounds::certify_npg(&mdp, &reference.opt, &consts, &pi0, &run)?;
            report.fitted_exponent = bounds::npg_rate_fit(&consts, &run).ok();
            art.report("bounds_report", &report)?;
            Ok((Some(report.verdict), summary_of(&report)))
        }
        BoundsTarget::NpgReg => {
            let eta = ExperimentConfig::require(config.eta, "eta")?;
            let tau = ExperimentConfig::require(config.tau, "tau")?;
            let (mdp, pi0, consts, _) = flow_setup(config)?;
            let run =
                npg::npg_run_regularized_from(&mdp, &pi0, eta, tau, config.k_max.unwrap_or(200))?;
            let report = bounds::certify_regularized_npg(&mdp, &consts, &run)?;
            art.report("bounds_report", &report)?;
            Ok((Some(report.verdict), summary_of(&report)))
        }
        BoundsTarget::Regularization => {
            let mdp = config.load_mdp()?;
            let pi0 = config.initial_policy(&mdp)?;
            let taus = config
                .taus
                .clone()
                .unwrap_or_else(|| (0..=10).map(|i| 0.5f64.powi(i)).collect());
            let res = bounds::prop23_check(&mdp, &pi0, &taus, 1e-13)?;
            art.report("bounds_report", &res.report)?;
            let mut summary = summary_of(&res.report);
            summary["tau_crossover"] = json!(res.tau_crossover);
            Ok((Some(res.report.verdict), summary))
        }
    }
}

fn summary_of(report: &BoundReport) -> serde_json::Value {
    json!({
        "rows": report.rows.len(),
        "failures": report.failures().count(),
        "fitted_exponent": report.fitted_exponent,
        "verdict": report.verdict,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub seed: u64,
    pub eta: f64,
    pub k: usize,
    pub tau: f64,
    pub final_gap: f64,
    /// Overall error bound for the final iterate, when `τ ≤ 1`.
    pub bound: Option<f64>,
    pub pass: bool,
}

/// Regularized NPG over the grid `seeds × etas × k_grid (× taus)`; cells run in parallel
/// and are reported in grid order.
fn run_sweep(config: &ExperimentConfig, art: &mut Artifacts) -> ModeResult {
    let etas = config.etas.clone().or(config.eta.map(|e| vec![e])).unwrap_or_else(|| vec![0.5, 1.0]);
    let ks = config.k_grid.clone().unwrap_or_else(|| (4..=10).map(|p| 1usize << p).collect());
    let seeds = config.seeds.clone().unwrap_or_else(|| vec![config.seed.unwrap_or(0)]);
    let schedule = config.tau_schedule.unwrap_or(if config.taus.is_some() || config.tau.is_some() {
        TauSchedule::Fixed
    } else {
        TauSchedule::OverallRate
    });
    let taus = config.taus.clone().or(config.tau.map(|t| vec![t])).unwrap_or_default();
    if schedule == TauSchedule::Fixed && taus.is_empty() {
        return Err(Error::InvalidParameter("fixed τ schedule needs `taus`".into()));
    }

    let mut cells = Vec::new();
    for &seed in &seeds {
        for &eta in &etas {
            for &k in &ks {
                match schedule {
                    TauSchedule::OverallRate => cells.push((seed, eta, k, None)),
                    TauSchedule::Fixed => cells.extend(taus.iter().map(|&t| (seed, eta, k, Some(t)))),
                }
            }
        }
    }
    let results: Vec<SweepCell> = cells
        .par_iter()
        .map(|&(seed, eta, k, tau)| sweep_cell(config, seed, eta, k, tau))
        .collect::<Result<_>>()?;

    io::write_csv_file(&art.path("sweep.csv"), |w| {
        use std::io::Write;
        writeln!(w, "seed,eta,k,tau,final_gap,bound,pass")?;
        for c in &results {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.seed,
                io::fmt_float(c.eta),
                c.k,
                io::fmt_float(c.tau),
                io::fmt_float(c.final_gap),
                io::fmt_float(c.bound.unwrap_or(f64::NAN)),
                c.pass
            )?;
        }
        Ok(())
    })?;
    let failures = results.iter().filter(|c| !c.pass).count();
    let verdict = if failures == 0 { Verdict::Pass } else { Verdict::Fail };
    let summary = json!({ "cells": results.len(), "failures": failures, "verdict": verdict });
    io::write_json(&art.path("sweep.json"), &json!({ "summary": summary, "cells": results }))?;
    Ok((Some(verdict), summary))
}

fn sweep_cell(config: &ExperimentConfig, seed: u64, eta: f64, k: usize, tau: Option<f64>) -> Result<SweepCell> {
    let mdp = config.load_mdp_seeded(seed)?;
    let pi0 = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let (consts, _) = BoundConstants::for_instance(&mdp, &pi0)?;
    let tau = tau.unwrap_or_else(|| (2.0 * consts.delta / (eta * k as f64)).sqrt());
    let run = npg::npg_run_regularized(&mdp, eta, tau, k + 1)?;
    let report = bounds::certify_regularized_npg(&mdp, &consts, &run)?;
    let bound = report
        .rows
        .iter()
        .rev()
        .find(|r| r.check == "overall_error")
        .and_then(|r| r.upper);
    Ok(SweepCell {
        seed,
        eta,
        k,
        tau,
        final_gap: run.diagnostics.last().unwrap().reward_gap,
        bound,
        pass: report.passed(),
    })
}
