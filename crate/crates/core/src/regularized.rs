//! Regularized optimal policies: the entropy-regularized optimum, the maximum-entropy
//! optimal policy, and Bregman divergences of the σ-family of potentials.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::geometry;
use crate::mdp::{self, MdpInstance, OptimalStructure, Policy, ValueBundle};
use crate::soft;

const MAX_SOFT_ITERATIONS: usize = 1_000_000;

#[derive(Clone, Debug)]
pub struct RegularizedSolution {
    pub tau: f64,
    pub pi_star_tau: Policy,
    pub v_tau: Array1<f64>,
    pub q_tau: Array2<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Default stop tolerance `1e-12·max(τ, 1)·(1+‖r‖∞)`.
pub fn default_soft_tol(mdp: &MdpInstance, tau: f64) -> f64 {
    1e-12 * tau.max(1.0) * (1.0 + mdp.reward_sup())
}

/// `argmax_π R(π) − τ D_K(π, π0)` by soft value iteration.
pub fn solve_entropy_regularized(
    mdp: &MdpInstance,
    pi0: &Policy,
    tau: f64,
    tol: f64,
) -> Result<RegularizedSolution> {
    pi0.require_interior()?;
    let sol = soft::soft_value_iteration(mdp, pi0, None, tau, 1.0, tol, MAX_SOFT_ITERATIONS)?;
    Ok(RegularizedSolution {
        tau,
        pi_star_tau: sol.policy,
        v_tau: sol.v,
        q_tau: sol.q,
        residual: sol.residual,
        iterations: sol.iterations,
    })
}

/// `R_τ(π) = R(π) − τ D_K(π, π0)`.
pub fn evaluate_regularized_reward(
    mdp: &MdpInstance,
    pi: &Policy,
    pi0: &Policy,
    tau: f64,
) -> Result<f64> {
    let r = mdp::reward_of(mdp, pi)?;
    if tau == 0.0 {
        return Ok(r);
    }
    Ok(r - tau * geometry::kakade_divergence(mdp, pi, pi0)?)
}

/// Regularized values of a policy: `V = (1−γ)(r_π − τ KL(π_s, π0_s)) + γ P̄_π V`,
/// `Q = (1−γ) r + γ P V`.
pub fn regularized_values(
    mdp: &MdpInstance,
    pi: &Policy,
    pi0: &Policy,
    tau: f64,
) -> Result<ValueBundle> {
    let kl = geometry::per_state_kl(pi, pi0)?;
    mdp::evaluate_with_penalty(mdp, pi, &(kl * tau))
}

/// `argmin { D_K(π, π0) : π optimal }`, the projection of `pi0` onto the optimal faces.
pub fn max_entropy_optimal_policy(mdp: &MdpInstance, pi0: &Policy) -> Result<Policy> {
    let opt = mdp::optimal_structure(mdp, mdp::default_tie_tol(mdp))?;
    max_entropy_optimal_policy_with(mdp, &opt, pi0)
}

/// As [`max_entropy_optimal_policy`] with a precomputed optimal structure.
pub fn max_entropy_optimal_policy_with(
    mdp: &MdpInstance,
    opt: &OptimalStructure,
    pi0: &Policy,
) -> Result<Policy> {
    let pi = geometry::kakade_projection(mdp, pi0, &opt.optimal_actions)?;
    let r = mdp::reward_of(mdp, &pi)?;
    let tol = 1e-9 * (1.0 + mdp.reward_sup());
    if (r - opt.r_star).abs() > tol {
        return Err(Error::NotApplicable(format!(
            "projected policy is not optimal: R = {r}, R* = {}",
            opt.r_star
        )));
    }
    Ok(pi)
}

/// Separable potential `ψ(μ) = Σ_a h(μ(a))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Potential {
    /// `h(x) = x log x`, whose Bregman divergence is the KL divergence.
    Entropy,
    Sigma(SigmaRegularizer),
}

/// Member of the family with `h''(x) = x^{−σ}`, `σ > 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaRegularizer {
    sigma: f64,
}

impl SigmaRegularizer {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 1.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must lie in (1, inf), got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `h(x)`: `−log x` for σ = 2, `x^{2−σ}/((2−σ)(1−σ))` otherwise. May be `+∞` at 0.
    pub fn h(&self, x: f64) -> f64 {
        let s = self.sigma;
        if s == 2.0 {
            -x.ln()
        } else {
            x.powf(2.0 - s) / ((2.0 - s) * (1.0 - s))
        }
    }

    /// `h'(x) = x^{1−σ}/(1−σ)`.
    pub fn h_prime(&self, x: f64) -> f64 {
        x.powf(1.0 - self.sigma) / (1.0 - self.sigma)
    }

    pub fn h_second(&self, x: f64) -> f64 {
        x.powf(-self.sigma)
    }
}

impl Potential {
    fn h(&self, x: f64) -> f64 {
        match self {
            Self::Entropy => {
                if x > 0.0 {
                    x * x.ln()
                } else {
                    0.0
                }
            }
            Self::Sigma(reg) => reg.h(x),
        }
    }

    fn h_prime(&self, x: f64) -> f64 {
        match self {
            Self::Entropy => x.ln() + 1.0,
            Self::Sigma(reg) => reg.h_prime(x),
        }
    }

    /// Whether `h` stays finite at the boundary point 0.
    fn finite_at_zero(&self) -> bool {
        match self {
            Self::Entropy => true,
            Self::Sigma(reg) => reg.sigma < 2.0,
        }
    }

    /// Per-state Bregman divergence `Σ_a h(p) − h(q) − h'(q)(p − q)`.
    pub fn bregman(&self, p: &[f64], q: &[f64], state: usize) -> Result<f64> {
        let mut acc = 0.0;
        for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
            if !(qa > 0.0) || (pa <= 0.0 && !self.finite_at_zero()) {
                return Err(Error::InfiniteDivergence { state, action: a });
            }
            let hp = if pa > 0.0 { self.h(pa) } else { self.h(0.0) };
            acc += hp - self.h(qa) - self.h_prime(qa) * (pa - qa);
        }
        Ok(acc)
    }
}

/// `D_Ψ(π, π0) = Σ_s d^π(s) D_ψ(π(·|s), π0(·|s))` for an arbitrary separable potential.
pub fn potential_divergence(
    potential: Potential,
    mdp: &MdpInstance,
    pi: &Policy,
    pi0: &Policy,
) -> Result<f64> {
    let occ = geometry::occupancy_of(mdp, pi)?;
    let mut acc = 0.0;
    for s in 0..mdp.n_states() {
        if occ.d[s] <= 0.0 {
            continue;
        }
        let p = pi.row(s).to_vec();
        let q = pi0.row(s).to_vec();
        acc += occ.d[s] * potential.bregman(&p, &q, s)?;
    }
    Ok(acc)
}

/// `D_Ψ(π, π0)` for the σ-family potential.
pub fn sigma_potential_eval(
    reg: &SigmaRegularizer,
    mdp: &MdpInstance,
    pi: &Policy,
    pi0: &Policy,
) -> Result<f64> {
    potential_divergence(Potential::Sigma(*reg), mdp, pi, pi0)
}
