//! Soft (log-sum-exp) value iteration, optionally restricted to per-state action faces.
//!
//! With the normalized reward, `R_τ(π) = R(π) − τ D_K(π, π0)` has the regularized
//! Bellman fixed point
//! `V(s) = (1−γ)τ · log Σ_{a∈F_s} π0(a|s) exp(Q(s,a) / ((1−γ)τ))`,
//! `Q = (1−γ) r + γ P V`, and optimizer `π(a|s) ∝ π0(a|s) exp(Q(s,a)/((1−γ)τ))` on `F_s`.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::mdp::{ActionFaces, MdpInstance, Policy};

#[derive(Clone, Debug)]
pub struct SoftSolution {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    pub policy: Policy,
    pub residual: f64,
    pub iterations: usize,
}

/// Runs the soft optimality operator to a sup-norm residual of `tol`.
///
/// `reward_scale` multiplies the MDP reward (0 gives the pure divergence problem).
/// The iteration also stops once the residual reaches the roundoff floor of the iterate.
pub fn soft_value_iteration(
    mdp: &MdpInstance,
    pi0: &Policy,
    faces: Option<&ActionFaces>,
    tau: f64,
    reward_scale: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SoftSolution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    pi0.check_shape(mdp)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let in_face = |s: usize, a: usize| faces.is_none_or(|f| f.contains(s, a));
    for s in 0..ns {
        if !(0..na).any(|a| in_face(s, a)) {
            return Err(Error::EmptyFace(s));
        }
        if (0..na).any(|a| in_face(s, a) && !(pi0.probs()[[s, a]] > 0.0)) {
            return Err(Error::ReferenceVanishesOnFace(s));
        }
    }

    let g = mdp.gamma();
    let temp = (1.0 - g) * tau;
    let reward = mdp.reward() * reward_scale;
    let log_pi0 = pi0.probs().mapv(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
    let q_of = |v: &Array1<f64>| -> Array2<f64> {
        let next = mdp.expected_next(v);
        Array2::from_shape_fn((ns, na), |ix| (1.0 - g) * reward[ix] + g * next[ix])
    };
    let backup = |q: &Array2<f64>| -> Array1<f64> {
        Array1::from_iter((0..ns).map(|s| {
            let m = (0..na)
                .filter(|&a| in_face(s, a))
                .map(|a| log_pi0[[s, a]] + q[[s, a]] / temp)
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..na)
                .filter(|&a| in_face(s, a))
                .map(|a| (log_pi0[[s, a]] + q[[s, a]] / temp - m).exp())
                .sum();
            temp * (m + sum.ln())
        }))
    };

    let mut v = Array1::<f64>::zeros(ns);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = backup(&q_of(&v));
        residual = next
            .iter()
            .zip(v.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        iterations += 1;
        let floor = 64.0 * f64::EPSILON * (1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        if residual <= tol || residual <= floor {
            break;
        }
    }
    if residual > tol && iterations >= max_iter {
        return Err(Error::MaxIterations { iterations, residual });
    }

    let q = q_of(&v);
    let mut probs = Array2::zeros((ns, na));
    for s in 0..ns {
        let m = (0..na)
            .filter(|&a| in_face(s, a))
            .map(|a| log_pi0[[s, a]] + q[[s, a]] / temp)
            .fold(f64::NEG_INFINITY, f64::max);
        for a in (0..na).filter(|&a| in_face(s, a)) {
            probs[[s, a]] = (log_pi0[[s, a]] + q[[s, a]] / temp - m).exp();
        }
    }
    Ok(SoftSolution { v, q, policy: Policy::from_unnormalized(probs), residual, iterations })
}
