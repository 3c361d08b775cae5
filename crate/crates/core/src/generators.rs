//! Instance generators: the two-state two-action cycle, bandits, chains and Garnets.

use ndarray::{Array1, Array2, Array3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::MdpInstance;

/// Generator specification, as accepted by the CLI and experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InstanceSpec {
    Fig1Twocycle {
        gamma: f64,
        #[serde(default = "one")]
        reward: f64,
        #[serde(default)]
        mu: Option<Vec<f64>>,
    },
    Bandit {
        rewards: Vec<f64>,
    },
    Garnet {
        n_states: usize,
        n_actions: usize,
        branching: usize,
        gamma: f64,
    },
    Chain {
        n_states: usize,
        gamma: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// Builds the instance described by `spec`; `seed` only matters for Garnets.
pub fn generate_instance(spec: &InstanceSpec, seed: u64) -> Result<MdpInstance> {
    match spec {
        InstanceSpec::Fig1Twocycle { gamma, reward, mu } => {
            fig1_twocycle(*gamma, *reward, mu.as_ref().map(|m| Array1::from(m.clone())))
        }
        InstanceSpec::Bandit { rewards } => bandit(rewards),
        InstanceSpec::Garnet { n_states, n_actions, branching, gamma } => {
            garnet(*n_states, *n_actions, *branching, *gamma, seed)
        }
        InstanceSpec::Chain { n_states, gamma } => chain(*n_states, *gamma),
    }
}

/// Two states, two deterministic actions: `a1` moves to `s1`, `a2` moves to `s2`, from
/// either state. Reward `r(s1, a1) = reward`, zero elsewhere; `μ` defaults to uniform.
pub fn fig1_twocycle(gamma: f64, reward: f64, mu: Option<Array1<f64>>) -> Result<MdpInstance> {
    let mut p = Array3::zeros((2, 2, 2));
    for s in 0..2 {
        p[[s, 0, 0]] = 1.0;
        p[[s, 1, 1]] = 1.0;
    }
    let mut r = Array2::zeros((2, 2));
    r[[0, 0]] = reward;
    MdpInstance::new(p, r, gamma, mu.unwrap_or_else(|| Array1::from_elem(2, 0.5)))
}

/// Single-state instance with `γ = 0` and the given per-action rewards.
pub fn bandit(rewards: &[f64]) -> Result<MdpInstance> {
    if rewards.is_empty() {
        return Err(Error::InvalidParameter("bandit needs at least one arm".into()));
    }
    let na = rewards.len();
    let r = Array2::from_shape_vec((1, na), rewards.to_vec())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    MdpInstance::new(Array3::ones((1, na, 1)), r, 0.0, Array1::ones(1))
}

/// Deterministic chain: action 0 steps left, action 1 steps right. Reward 1 for pushing
/// right at the last state and 0.1 for pushing left at the first; uniform `μ`.
pub fn chain(n_states: usize, gamma: f64) -> Result<MdpInstance> {
    if n_states < 2 {
        return Err(Error::InvalidParameter("chain needs at least two states".into()));
    }
    let mut p = Array3::zeros((n_states, 2, n_states));
    for s in 0..n_states {
        p[[s, 0, s.saturating_sub(1)]] = 1.0;
        p[[s, 1, (s + 1).min(n_states - 1)]] = 1.0;
    }
    let mut r = Array2::zeros((n_states, 2));
    r[[0, 0]] = 0.1;
    r[[n_states - 1, 1]] = 1.0;
    MdpInstance::new(p, r, gamma, Array1::from_elem(n_states, 1.0 / n_states as f64))
}

/// Random sparse MDP: each `(s, a)` reaches `branching` distinct states with weights from
/// a uniform random partition of `[0, 1]`; rewards are `U[0, 1]`; `μ` is uniform.
pub fn garnet(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    gamma: f64,
    seed: u64,
) -> Result<MdpInstance> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidParameter("garnet needs states and actions".into()));
    }
    if branching == 0 || branching > n_states {
        return Err(Error::InvalidParameter(format!(
            "branching factor must lie in 1..={n_states}, got {branching}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let targets = index::sample(&mut rng, n_states, branching).into_vec();
            let mut cuts: Vec<f64> = (0..branching - 1).map(|_| rng.gen::<f64>()).collect();
            cuts.sort_by(|x, y| x.total_cmp(y));
            cuts.push(1.0);
            let mut prev = 0.0;
            for (&target, &cut) in targets.iter().zip(&cuts) {
                p[[s, a, target]] = cut - prev;
                prev = cut;
            }
        }
    }
    let r = Array2::from_shape_fn((n_states, n_actions), |_| rng.gen::<f64>());
    MdpInstance::new(p, r, gamma, Array1::from_elem(n_states, 1.0 / n_states as f64))
}
