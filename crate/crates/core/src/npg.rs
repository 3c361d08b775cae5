//! Tabular softmax natural policy gradient, with and without entropy regularization.
//!
//! Iterates are propagated in log space so that long runs do not underflow.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::geometry;
use crate::mdp::{self, MdpInstance, OptimalStructure, Policy};
use crate::regularized;

#[derive(Clone, Debug, PartialEq)]
pub struct NpgDiagnostics {
    pub k: usize,
    pub reward: f64,
    pub reward_gap: f64,
    /// `min_s Z_k(s)` of the step leaving iterate `k` (unregularized runs).
    pub min_z: Option<f64>,
    /// `‖Q*_τ − Q_τ^{π_k}‖∞` in unnormalized units (regularized runs).
    pub q_dist_tau: Option<f64>,
    /// `‖log π*_τ − log π_k‖∞` (regularized runs).
    pub logpi_dist_tau: Option<f64>,
    /// `R(π_{k+1}) − R(π_k)`.
    pub progress_lhs: Option<f64>,
    /// `(1−γ)/η Σ_s μ(s) log Z_k(s)`.
    pub progress_rhs: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct NpgRun {
    pub eta: f64,
    pub tau: f64,
    pub iterates: Vec<Policy>,
    /// `log π_k`, exact even where `π_k` underflows.
    pub log_iterates: Vec<Array2<f64>>,
    /// `log Z_k(s)` per step (unregularized runs; empty otherwise).
    pub log_z: Vec<Array1<f64>>,
    pub diagnostics: Vec<NpgDiagnostics>,
}

fn log_softmax_rows(mut x: Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut lse = Array1::zeros(x.nrows());
    for (s, mut row) in x.outer_iter_mut().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let l = m + sum.ln();
        row.mapv_inplace(|v| v - l);
        lse[s] = l;
    }
    (x, lse)
}

fn policy_from_log(log_pi: &Array2<f64>) -> Policy {
    Policy::from_unnormalized(log_pi.mapv(f64::exp))
}

/// One unregularized step in log space; returns `(log π_{k+1}, log Z_k)`.
fn npg_step_log(
    mdp: &MdpInstance,
    log_pi: &Array2<f64>,
    pi: &Policy,
    eta: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let adv = mdp::evaluate_policy(mdp, pi)?.adv;
    let scale = eta / (1.0 - mdp.gamma());
    let shifted = log_pi + &(adv * scale);
    Ok(log_softmax_rows(shifted))
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParameter(format!("stepsize must be positive, got {eta}")));
    }
    Ok(())
}

/// `π_{k+1}(a|s) = π_k(a|s) exp(η A^{π_k}(s,a)/(1−γ)) / Z_k(s)`; returns the next policy and `Z_k`.
pub fn npg_step(mdp: &MdpInstance, pi: &Policy, eta: f64) -> Result<(Policy, Array1<f64>)> {
    check_eta(eta)?;
    pi.check_shape(mdp)?;
    pi.require_interior()?;
    let (log_next, log_z) = npg_step_log(mdp, &pi.log_probs(), pi, eta)?;
    Ok((policy_from_log(&log_next), log_z.mapv(f64::exp)))
}

pub fn npg_run_unregularized(
    mdp: &MdpInstance,
    pi0: &Policy,
    eta: f64,
    k_max: usize,
) -> Result<NpgRun> {
    let opt = mdp::optimal_structure(mdp, mdp::default_tie_tol(mdp))?;
    npg_run_unregularized_with(mdp, &opt, pi0, eta, k_max)
}

pub fn npg_run_unregularized_with(
    mdp: &MdpInstance,
    opt: &OptimalStructure,
    pi0: &Policy,
    eta: f64,
    k_max: usize,
) -> Result<NpgRun> {
    check_eta(eta)?;
    pi0.check_shape(mdp)?;
    pi0.require_interior()?;
    let g = mdp.gamma();
    let mut log_pi = pi0.log_probs();
    let mut pi = pi0.clone();
    let mut iterates = vec![pi.clone()];
    let mut log_iterates = vec![log_pi.clone()];
    let mut log_zs = Vec::with_capacity(k_max);
    let mut diagnostics = Vec::with_capacity(k_max + 1);
    let occ = geometry::occupancy_of(mdp, &pi)?;
    let mut reward = (&occ.nu * mdp.reward()).sum();
    let mut gap = opt.reward_gap_from_occupancy(mdp, &occ.nu);

    for k in 0..=k_max {
        let mut row = NpgDiagnostics {
            k,
            reward,
            reward_gap: gap,
            min_z: None,
            q_dist_tau: None,
            logpi_dist_tau: None,
            progress_lhs: None,
            progress_rhs: None,
        };
        if k < k_max {
            let (log_next, log_z) = npg_step_log(mdp, &log_pi, &pi, eta)?;
            let next = policy_from_log(&log_next);
            let occ = geometry::occupancy_of(mdp, &next)?;
            let next_reward = (&occ.nu * mdp.reward()).sum();
            row.min_z = Some(log_z.fold(f64::INFINITY, |m, &l| m.min(l)).exp());
            row.progress_lhs = Some(next_reward - reward);
            row.progress_rhs = Some((1.0 - g) / eta * mdp.mu().dot(&log_z));
            reward = next_reward;
            gap = opt.reward_gap_from_occupancy(mdp, &occ.nu);
            log_pi = log_next;
            pi = next;
            iterates.push(pi.clone());
            log_iterates.push(log_pi.clone());
            log_zs.push(log_z);
        }
        diagnostics.push(row);
    }
    Ok(NpgRun { eta, tau: 0.0, iterates, log_iterates, log_z: log_zs, diagnostics })
}

/// Largest admissible stepsize `(1−γ)/τ` for the regularized update.
pub fn max_regularized_eta(mdp: &MdpInstance, tau: f64) -> f64 {
    (1.0 - mdp.gamma()) / tau
}

fn check_regularized(mdp: &MdpInstance, eta: f64, tau: f64) -> Result<()> {
    check_eta(eta)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let max = max_regularized_eta(mdp, tau);
    if eta > max * (1.0 + 1e-12) {
        return Err(Error::StepsizeTooLarge { eta, max });
    }
    Ok(())
}

/// Regularized Q-function in unnormalized units, `Q_τ^π / (1−γ)`, against the uniform reference.
pub fn regularized_q_unnormalized(mdp: &MdpInstance, pi: &Policy, tau: f64) -> Result<Array2<f64>> {
    let unif = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let vb = regularized::regularized_values(mdp, pi, &unif, tau)?;
    Ok(vb.q / (1.0 - mdp.gamma()))
}

fn regularized_step_log(
    mdp: &MdpInstance,
    log_pi: &Array2<f64>,
    pi: &Policy,
    eta: f64,
    tau: f64,
) -> Result<Array2<f64>> {
    let g = mdp.gamma();
    let q = regularized_q_unnormalized(mdp, pi, tau)?;
    let keep = 1.0 - eta * tau / (1.0 - g);
    let logits = log_pi * keep + &(q * (eta / (1.0 - g)));
    Ok(log_softmax_rows(logits).0)
}

/// `π_{k+1} ∝ π_k^{1−ητ/(1−γ)} exp(η Q_τ^{π_k} / (1−γ))` with `Q_τ` the unnormalized
/// regularized Q-function for the uniform reference.
pub fn npg_step_regularized(mdp: &MdpInstance, pi: &Policy, eta: f64, tau: f64) -> Result<Policy> {
    check_regularized(mdp, eta, tau)?;
    pi.check_shape(mdp)?;
    pi.require_interior()?;
    let log_next = regularized_step_log(mdp, &pi.log_probs(), pi, eta, tau)?;
    Ok(policy_from_log(&log_next))
}

/// Regularized NPG from the uniform policy.
pub fn npg_run_regularized(mdp: &MdpInstance, eta: f64, tau: f64, k_max: usize) -> Result<NpgRun> {
    let unif = Policy::uniform(mdp.n_states(), mdp.n_actions());
    npg_run_regularized_from(mdp, &unif, eta, tau, k_max)
}

pub fn npg_run_regularized_from(
    mdp: &MdpInstance,
    pi_init: &Policy,
    eta: f64,
    tau: f64,
    k_max: usize,
) -> Result<NpgRun> {
    check_regularized(mdp, eta, tau)?;
    pi_init.check_shape(mdp)?;
    pi_init.require_interior()?;
    let opt = mdp::optimal_structure(mdp, mdp::default_tie_tol(mdp))?;
    let unif = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let sol = regularized::solve_entropy_regularized(
        mdp,
        &unif,
        tau,
        regularized::default_soft_tol(mdp, tau).min(1e-13),
    )?;
    let log_star = sol.pi_star_tau.log_probs();
    let q_star = regularized_q_unnormalized(mdp, &sol.pi_star_tau, tau)?;
    let sup = |a: &Array2<f64>, b: &Array2<f64>| {
        a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };

    let mut log_pi = pi_init.log_probs();
    let mut pi = pi_init.clone();
    let mut iterates = Vec::with_capacity(k_max + 1);
    let mut log_iterates = Vec::with_capacity(k_max + 1);
    let mut diagnostics = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let occ = geometry::occupancy_of(mdp, &pi)?;
        let q = regularized_q_unnormalized(mdp, &pi, tau)?;
        diagnostics.push(NpgDiagnostics {
            k,
            reward: (&occ.nu * mdp.reward()).sum(),
            reward_gap: opt.reward_gap_from_occupancy(mdp, &occ.nu),
            min_z: None,
            q_dist_tau: Some(sup(&q_star, &q)),
            logpi_dist_tau: Some(sup(&log_star, &log_pi)),
            progress_lhs: None,
            progress_rhs: None,
        });
        iterates.push(pi.clone());
        log_iterates.push(log_pi.clone());
        if k < k_max {
            log_pi = regularized_step_log(mdp, &log_pi, &pi, eta, tau)?;
            pi = policy_from_log(&log_pi);
        }
    }
    Ok(NpgRun { eta, tau, iterates, log_iterates, log_z: Vec::new(), diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;
    use ndarray::array;

    #[test]
    fn constant_reward_fixed_point() {
        let mdp = generators::garnet(3, 2, 2, 0.6, 4).unwrap();
        let mdp = mdp.with_reward(Array2::from_elem((3, 2), 0.25)).unwrap();
        let pi = Policy::new(array![[0.3, 0.7], [0.5, 0.5], [0.9, 0.1]]).unwrap();
        let (next, z) = npg_step(&mdp, &pi, 1.0).unwrap();
        for (a, b) in next.probs().iter().zip(pi.probs().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(z.iter().all(|&x| (x - 1.0).abs() < 1e-14));
    }

    #[test]
    fn bandit3_step() {
        let mdp = generators::bandit(&[1.0, 0.5, 0.0]).unwrap();
        let (next, _) = npg_step(&mdp, &Policy::uniform(1, 3), 1.0).unwrap();
        for (p, e) in next.row(0).iter().zip([0.50647, 0.30721, 0.18632]) {
            assert!((p - e).abs() < 2e-5);
        }
    }

    #[test]
    fn regularized_fixed_point() {
        let mdp = generators::garnet(4, 3, 2, 0.7, 8).unwrap();
        let tau = 0.2;
        let unif = Policy::uniform(4, 3);
        let sol = regularized::solve_entropy_regularized(&mdp, &unif, tau, 1e-14).unwrap();
        let eta = 0.5 * max_regularized_eta(&mdp, tau);
        let next = npg_step_regularized(&mdp, &sol.pi_star_tau, eta, tau).unwrap();
        for (a, b) in next.probs().iter().zip(sol.pi_star_tau.probs().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stepsize_violation_rejected() {
        let mdp = generators::bandit(&[1.0, 0.0]).unwrap();
        let err = npg_step_regularized(&mdp, &Policy::uniform(1, 2), 11.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::StepsizeTooLarge { .. }));
    }

    #[test]
    fn full_step_is_soft_policy_iteration() {
        let mdp = generators::garnet(3, 3, 2, 0.5, 12).unwrap();
        let tau = 0.5;
        let pi = Policy::new(array![[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [0.1, 0.1, 0.8]]).unwrap();
        let next = npg_step_regularized(&mdp, &pi, max_regularized_eta(&mdp, tau), tau).unwrap();
        let q = regularized_q_unnormalized(&mdp, &pi, tau).unwrap();
        let expect = Policy::from_logits(&(q / tau));
        for (a, b) in next.probs().iter().zip(expect.probs().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_tau_recovers_unregularized_step() {
        // Per-step units: the limit step is `npg_step` with stepsize η/(1−γ).
        let mdp = generators::garnet(3, 3, 2, 0.6, 5).unwrap();
        let pi = Policy::new(array![[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [0.1, 0.1, 0.8]]).unwrap();
        let eta = 0.7;
        let reg = npg_step_regularized(&mdp, &pi, eta, 1e-8).unwrap();
        let (plain, _) = npg_step(&mdp, &pi, eta / (1.0 - mdp.gamma())).unwrap();
        for (a, b) in reg.probs().iter().zip(plain.probs().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
