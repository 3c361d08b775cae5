//! Kakade gradient flow and σ-family gradient flows of the reward.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::geometry;
use crate::mdp::{self, MdpInstance, OptimalStructure, Policy};
use crate::ode::{self, OdeOptions, OdeSystem};
use crate::regularized::{self, SigmaRegularizer};

/// Entries of σ-flow policies are never allowed below this floor.
pub const SIGMA_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowDiagnostics {
    pub reward: f64,
    pub reward_gap: f64,
    /// `D_K(π*, π_t)` with `π*` the maximum-entropy optimal policy.
    pub dk_to_pistar: f64,
    /// `D_K(π*_{1/t}, π_t)`, filled in by [`annotate_central_path`].
    pub dk_to_central_path: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub policies: Vec<Policy>,
    pub diagnostics: Vec<FlowDiagnostics>,
}

/// Optimal structure and maximum-entropy optimal policy, shared by the diagnostics.
#[derive(Clone, Debug)]
pub struct FlowReference {
    pub opt: OptimalStructure,
    pub pi_star: Policy,
}

impl FlowReference {
    pub fn new(mdp: &MdpInstance, pi0: &Policy) -> Result<Self> {
        let opt = mdp::optimal_structure(mdp, mdp::default_tie_tol(mdp))?;
        let pi_star = regularized::max_entropy_optimal_policy_with(mdp, &opt, pi0)?;
        Ok(Self { opt, pi_star })
    }

    pub fn diagnostics(&self, mdp: &MdpInstance, pi: &Policy) -> Result<FlowDiagnostics> {
        let occ = geometry::occupancy_of(mdp, pi)?;
        let reward = (&occ.nu * mdp.reward()).sum();
        let reward_gap = self.opt.reward_gap_from_occupancy(mdp, &occ.nu);
        let dk_to_pistar = geometry::kakade_divergence(mdp, &self.pi_star, pi)?;
        Ok(FlowDiagnostics { reward, reward_gap, dk_to_pistar, dk_to_central_path: None })
    }
}

/// `[0, t_first, t_first·ρ, …, t_last]` with `n_points` geometric points after zero.
pub fn geometric_grid(t_first: f64, t_last: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(t_first > 0.0 && t_last > t_first) || n_points < 2 {
        return Err(Error::InvalidParameter(format!(
            "geometric grid needs 0 < t_first < t_last and n >= 2 (got {t_first}, {t_last}, {n_points})"
        )));
    }
    let ratio = (t_last / t_first).powf(1.0 / (n_points - 1) as f64);
    let mut grid = vec![0.0];
    grid.extend((0..n_points).map(|k| {
        if k + 1 == n_points {
            t_last
        } else {
            t_first * ratio.powi(k as i32)
        }
    }));
    Ok(grid)
}

/// Sorted union of grids with duplicates (within 1e-12 relative) removed.
pub fn merge_grids(grids: &[&[f64]]) -> Vec<f64> {
    let mut all: Vec<f64> = grids.iter().flat_map(|g| g.iter().copied()).collect();
    all.sort_by(|a, b| a.total_cmp(b));
    all.dedup_by(|b, a| (*b - *a).abs() <= 1e-12 * a.abs().max(1.0));
    all
}

fn validate_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() || t_grid[0] < 0.0 || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "time grid must be nonnegative and strictly increasing".into(),
        ));
    }
    Ok(())
}

struct KakadeLogits<'a> {
    mdp: &'a MdpInstance,
    shape: (usize, usize),
}

impl OdeSystem for KakadeLogits<'_> {
    fn rhs(&self, _t: f64, z: &Array1<f64>) -> Result<Array1<f64>> {
        let logits = Array2::from_shape_vec(self.shape, z.to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let pi = Policy::from_logits(&logits);
        let adv = mdp::evaluate_policy(self.mdp, &pi)?.adv;
        let scale = 1.0 / (1.0 - self.mdp.gamma());
        Ok(Array1::from_iter(adv.iter().map(|a| a * scale)))
    }
}

/// Policies of the Kakade flow `∂_t π = (1−γ)^{-1} A^π ⊙ π` at the grid times, computed in
/// logit coordinates `ż = (1−γ)^{-1} A^{softmax z}`.
pub fn kakade_flow_policies(
    mdp: &MdpInstance,
    pi0: &Policy,
    t_grid: &[f64],
    ode_tol: f64,
) -> Result<Vec<Policy>> {
    pi0.check_shape(mdp)?;
    pi0.require_interior()?;
    validate_grid(t_grid)?;
    let shape = pi0.probs().dim();
    let z0 = Array1::from_iter(pi0.log_probs().iter().copied());
    let sys = KakadeLogits { mdp, shape };
    let (times, offset) = with_origin(t_grid);
    let (states, _) = ode::integrate(&sys, &z0, &times, &OdeOptions::with_tol(ode_tol))?;
    states[offset..]
        .iter()
        .map(|z| {
            let logits = Array2::from_shape_vec(shape, z.to_vec())
                .map_err(|e| Error::Dimension(e.to_string()))?;
            Ok(Policy::from_logits(&logits))
        })
        .collect()
}

/// Prepends `t = 0` when the grid does not start there; returns the index of the first
/// requested time.
fn with_origin(t_grid: &[f64]) -> (Vec<f64>, usize) {
    if t_grid[0] == 0.0 {
        (t_grid.to_vec(), 0)
    } else {
        let mut times = vec![0.0];
        times.extend_from_slice(t_grid);
        (times, 1)
    }
}

pub fn integrate_kakade_flow(
    mdp: &MdpInstance,
    pi0: &Policy,
    t_grid: &[f64],
    ode_tol: f64,
) -> Result<FlowTrajectory> {
    let reference = FlowReference::new(mdp, pi0)?;
    integrate_kakade_flow_with(mdp, &reference, pi0, t_grid, ode_tol)
}

pub fn integrate_kakade_flow_with(
    mdp: &MdpInstance,
    reference: &FlowReference,
    pi0: &Policy,
    t_grid: &[f64],
    ode_tol: f64,
) -> Result<FlowTrajectory> {
    let policies = kakade_flow_policies(mdp, pi0, t_grid, ode_tol)?;
    let diagnostics = policies
        .iter()
        .map(|p| reference.diagnostics(mdp, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowTrajectory { times: t_grid.to_vec(), policies, diagnostics })
}

/// Fills `dk_to_central_path` with `D_K(π*_{1/t}, π_t)` for every `t > 0`.
pub fn annotate_central_path(
    traj: &mut FlowTrajectory,
    mdp: &MdpInstance,
    pi0: &Policy,
    solver_tol: f64,
) -> Result<()> {
    for (i, &t) in traj.times.iter().enumerate() {
        if t <= 0.0 {
            traj.diagnostics[i].dk_to_central_path = Some(0.0);
            continue;
        }
        let sol = regularized::solve_entropy_regularized(mdp, pi0, 1.0 / t, solver_tol)?;
        let dk = geometry::kakade_divergence(mdp, &sol.pi_star_tau, &traj.policies[i])?;
        traj.diagnostics[i].dk_to_central_path = Some(dk);
    }
    Ok(())
}

/// `max_s KL(π_t^{flow}(·|s), π*_{1/t}(·|s))`.
pub fn central_path_check(
    mdp: &MdpInstance,
    pi0: &Policy,
    t: f64,
    ode_tol: f64,
    solver_tol: f64,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("central path time must be positive, got {t}")));
    }
    let flow = kakade_flow_policies(mdp, pi0, &[0.0, t], ode_tol)?.pop().unwrap();
    let sol = regularized::solve_entropy_regularized(mdp, pi0, 1.0 / t, solver_tol)?;
    let kl = geometry::per_state_kl(&flow, &sol.pi_star_tau)?;
    Ok(kl.iter().fold(0.0f64, |m, &x| m.max(x)))
}

#[derive(Clone, Debug)]
pub struct ImplicitBias {
    /// `D_K(π*, π_{t_final})`.
    pub dk_to_limit: f64,
    /// Upper convergence bound for the policies at `t_final`, when applicable.
    pub bound: Option<f64>,
    pub limit: Policy,
    pub flow_point: Policy,
}

pub fn implicit_bias_check(
    mdp: &MdpInstance,
    pi0: &Policy,
    t_final: f64,
    ode_tol: f64,
) -> Result<ImplicitBias> {
    let reference = FlowReference::new(mdp, pi0)?;
    reference.opt.delta.finite()?;
    let flow_point = kakade_flow_policies(mdp, pi0, &[0.0, t_final], ode_tol)?.pop().unwrap();
    let dk_to_limit = geometry::kakade_divergence(mdp, &reference.pi_star, &flow_point)?;
    let consts = crate::bounds::BoundConstants::compute(mdp, &reference.opt, pi0, &reference.pi_star)?;
    let bound = if t_final >= 1.0 { crate::bounds::thm44_bounds(&consts, t_final)?.0 } else { None };
    Ok(ImplicitBias { dk_to_limit, bound, limit: reference.pi_star, flow_point })
}

struct SigmaField<'a> {
    mdp: &'a MdpInstance,
    sigma: f64,
    shape: (usize, usize),
}

impl OdeSystem for SigmaField<'_> {
    fn rhs(&self, _t: f64, y: &Array1<f64>) -> Result<Array1<f64>> {
        let probs = Array2::from_shape_vec(self.shape, y.to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let pi = Policy::from_raw(probs.mapv(|p| p.max(SIGMA_FLOOR)));
        let adv = mdp::evaluate_policy(self.mdp, &pi)?.adv;
        let scale = 1.0 / (1.0 - self.mdp.gamma());
        let (ns, na) = self.shape;
        let mut out = Array1::zeros(ns * na);
        for s in 0..ns {
            let w: Vec<f64> = (0..na).map(|a| pi.probs()[[s, a]].powf(self.sigma)).collect();
            let total: f64 = w.iter().sum();
            let lambda: f64 = (0..na).map(|a| w[a] * adv[[s, a]]).sum::<f64>() / total;
            for a in 0..na {
                out[s * na + a] = scale * w[a] * (adv[[s, a]] - lambda);
            }
        }
        Ok(out)
    }

    fn admissible(&self, y: &Array1<f64>) -> bool {
        y.iter().all(|&p| p > 0.0)
    }

    fn correct(&self, y: &mut Array1<f64>) {
        let na = self.shape.1;
        for row in y.as_slice_mut().unwrap().chunks_mut(na) {
            for p in row.iter_mut() {
                *p = p.max(SIGMA_FLOOR);
            }
            let total: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= total;
            }
        }
    }
}

/// Gradient flow of `R` for the metric induced by `h''(x) = x^{−σ}`:
/// `∂_t π(a|s) = (1−γ)^{-1} π(a|s)^σ (A^π(s,a) − λ_s)`, where
/// `λ_s = Σ_a π^σ A^π / Σ_a π^σ` keeps the field tangent to the simplex.
pub fn sigma_flow_policies(
    mdp: &MdpInstance,
    reg: &SigmaRegularizer,
    pi0: &Policy,
    t_grid: &[f64],
    ode_tol: f64,
) -> Result<Vec<Policy>> {
    pi0.check_shape(mdp)?;
    pi0.require_interior()?;
    validate_grid(t_grid)?;
    let shape = pi0.probs().dim();
    let sys = SigmaField { mdp, sigma: reg.sigma(), shape };
    let y0 = Array1::from_iter(pi0.probs().iter().copied());
    let (times, offset) = with_origin(t_grid);
    let (states, _) = ode::integrate(&sys, &y0, &times, &OdeOptions::with_tol(ode_tol))?;
    states[offset..]
        .iter()
        .map(|y| {
            let probs = Array2::from_shape_vec(shape, y.to_vec())
                .map_err(|e| Error::Dimension(e.to_string()))?;
            Policy::new(probs)
        })
        .collect()
}

pub fn integrate_sigma_flow(
    mdp: &MdpInstance,
    reg: &SigmaRegularizer,
    pi0: &Policy,
    t_grid: &[f64],
    ode_tol: f64,
) -> Result<FlowTrajectory> {
    let reference = FlowReference::new(mdp, pi0)?;
    let policies = sigma_flow_policies(mdp, reg, pi0, t_grid, ode_tol)?;
    let diagnostics = policies
        .iter()
        .map(|p| reference.diagnostics(mdp, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowTrajectory { times: t_grid.to_vec(), policies, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;
    use ndarray::array;

    #[test]
    fn constant_reward_is_stationary() {
        let mdp = generators::garnet(4, 3, 2, 0.8, 2).unwrap();
        let mdp = mdp.with_reward(Array2::from_elem((4, 3), 0.7)).unwrap();
        let pi0 = Policy::new(array![
            [0.2, 0.3, 0.5],
            [0.6, 0.2, 0.2],
            [0.1, 0.1, 0.8],
            [0.3, 0.3, 0.4]
        ])
        .unwrap();
        let pols = kakade_flow_policies(&mdp, &pi0, &[0.0, 1.0, 10.0], 1e-10).unwrap();
        for p in &pols {
            for (a, b) in p.probs().iter().zip(pi0.probs().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let reg = SigmaRegularizer::new(2.0).unwrap();
        let pols = sigma_flow_policies(&mdp, &reg, &pi0, &[0.0, 5.0], 1e-10).unwrap();
        for (a, b) in pols[1].probs().iter().zip(pi0.probs().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bandit_flow_is_gibbs() {
        let mdp = generators::bandit(&[1.0, 0.5, 0.0]).unwrap();
        let pols =
            kakade_flow_policies(&mdp, &Policy::uniform(1, 3), &[0.0, 0.5, 3.0], 1e-12).unwrap();
        for (p, t) in pols.iter().zip([0.0, 0.5, 3.0]) {
            let w = [t, 0.5 * t, 0.0].map(|x: f64| x.exp());
            let z: f64 = w.iter().sum();
            for (a, wi) in p.row(0).iter().zip(w) {
                assert!((a - wi / z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn grids() {
        let g = geometric_grid(0.1, 100.0, 4).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 0.0);
        assert!((g[2] - 1.0).abs() < 1e-12 && g[4] == 100.0);
        let m = merge_grids(&[&g, &[1.0, 2.0]]);
        assert_eq!(m.len(), 6);
        assert!(geometric_grid(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn sigma2_short_time_matches_frozen_oracle() {
        // For small t, x' ≈ α x² with α the projected advantage at t = 0.
        let mdp = generators::bandit(&[1.0, 0.5, 0.0]).unwrap();
        let reg = SigmaRegularizer::new(2.0).unwrap();
        let pi0 = Policy::uniform(1, 3);
        let t = 0.01;
        let pols = sigma_flow_policies(&mdp, &reg, &pi0, &[0.0, t], 1e-12).unwrap();
        let adv = [0.5, 0.0, -0.5];
        for a in 0..3 {
            let x0 = 1.0 / 3.0;
            let x = 1.0 / (1.0 / x0 - adv[a] * t);
            assert!((pols[1].probs()[[0, a]] - x).abs() < 1e-4);
        }
    }
}
