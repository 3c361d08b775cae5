//! Test-side oracles that do not go through the library's linear solvers.

#![allow(dead_code)]

use entroflow::{MdpInstance, Policy};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random interior policy with softmax-of-normal-ish logits, entries bounded away from 0.
pub fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> Policy {
    let logits = Array2::from_shape_fn((ns, na), |_| 2.0 * (rng.gen::<f64>() - 0.5));
    Policy::from_logits(&logits)
}

/// Row-centered random direction with entries of order one.
pub fn random_tangent(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> Array2<f64> {
    let mut w = Array2::from_shape_fn((ns, na), |_| rng.gen::<f64>() - 0.5);
    for mut row in w.outer_iter_mut() {
        let m = row.mean().unwrap();
        row.mapv_inplace(|x| x - m);
    }
    w
}

/// State values by fixed-point iteration of `V ← (1−γ) r_π + γ P_π V`.
pub fn values_by_iteration(mdp: &MdpInstance, pi: &Array2<f64>) -> Array1<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let g = mdp.gamma();
    let p = mdp.transition();
    let r = mdp.reward();
    let mut v = Array1::<f64>::zeros(ns);
    for _ in 0..100_000 {
        let mut next = Array1::zeros(ns);
        for s in 0..ns {
            let mut acc = 0.0;
            for a in 0..na {
                let ev: f64 = (0..ns).map(|n| p[[s, a, n]] * v[n]).sum();
                acc += pi[[s, a]] * ((1.0 - g) * r[[s, a]] + g * ev);
            }
            next[s] = acc;
        }
        let diff = (&next - &v).fold(0.0f64, |m, &x| m.max(x.abs()));
        v = next;
        if diff < 1e-16 {
            break;
        }
    }
    v
}

pub fn reward_by_iteration(mdp: &MdpInstance, pi: &Array2<f64>) -> f64 {
    mdp.mu().dot(&values_by_iteration(mdp, pi))
}

/// Discounted state distribution by iterating `d ← (1−γ)μ + γ P_πᵀ d`.
pub fn state_distribution_by_iteration(mdp: &MdpInstance, pi: &Array2<f64>) -> Array1<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let g = mdp.gamma();
    let p = mdp.transition();
    let mut d = mdp.mu().clone();
    for _ in 0..100_000 {
        let mut next = mdp.mu() * (1.0 - g);
        for s in 0..ns {
            for a in 0..na {
                for n in 0..ns {
                    next[n] += g * d[s] * pi[[s, a]] * p[[s, a, n]];
                }
            }
        }
        let diff = (&next - &d).fold(0.0f64, |m, &x| m.max(x.abs()));
        d = next;
        if diff < 1e-17 {
            break;
        }
    }
    d
}

/// `Σ p log(p/q)` with `0 log 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| x * (x / y).ln())
        .sum()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
