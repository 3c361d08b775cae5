//! Finite discounted MDPs, exact policy evaluation and the optimal value structure.
//!
//! Rewards follow the (1−γ)-normalized convention throughout: `R(π) = (1−γ) E[Σ γ^t r]`,
//! so value functions live on the same scale as `r`.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::linalg;

const STOCHASTIC_TOL: f64 = 1e-12;

/// JSON interchange form, `transition` indexed `[s][a][s']`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RawMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub mu: Vec<f64>,
    pub reward: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
}

/// A validated finite MDP. Construct through [`validate_mdp`] or [`MdpInstance::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct MdpInstance {
    transition: Array3<f64>,
    reward: Array2<f64>,
    gamma: f64,
    mu: Array1<f64>,
}

impl MdpInstance {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        gamma: f64,
        mu: Array1<f64>,
    ) -> Result<Self> {
        let (s, a, s2) = transition.dim();
        if s == 0 || a == 0 {
            return Err(Error::Dimension("need at least one state and one action".into()));
        }
        if s2 != s {
            return Err(Error::Dimension(format!("transition is {s}x{a}x{s2}")));
        }
        if reward.dim() != (s, a) {
            return Err(Error::Dimension(format!(
                "reward is {:?}, expected ({s}, {a})",
                reward.dim()
            )));
        }
        if mu.len() != s {
            return Err(Error::Dimension(format!("mu has {} entries, expected {s}", mu.len())));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Discount(gamma));
        }
        for ((st, ac), r) in reward.indexed_iter() {
            if !r.is_finite() {
                return Err(Error::NonFiniteReward { state: st, action: ac });
            }
        }
        for st in 0..s {
            for ac in 0..a {
                let mut sum = 0.0;
                for nx in 0..s {
                    let p = transition[[st, ac, nx]];
                    if !(p >= 0.0) {
                        return Err(Error::NegativeProbability {
                            state: st,
                            action: ac,
                            next: nx,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::KernelRowNotStochastic { state: st, action: ac, sum });
                }
            }
        }
        if mu.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InitialDistribution("negative entry".into()));
        }
        let total = mu.sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InitialDistribution(format!("sums to {total}")));
        }
        Ok(Self { transition, reward, gamma, mu })
    }

    pub fn n_states(&self) -> usize {
        self.reward.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.reward.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    /// `P(s'|s,a)` indexed `[s, a, s']`.
    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    /// `‖r‖∞`.
    pub fn reward_sup(&self) -> f64 {
        self.reward.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.transition.clone(), self.reward.clone(), gamma, self.mu.clone())
    }

    pub fn with_mu(&self, mu: Array1<f64>) -> Result<Self> {
        Self::new(self.transition.clone(), self.reward.clone(), self.gamma, mu)
    }

    pub fn with_reward(&self, reward: Array2<f64>) -> Result<Self> {
        Self::new(self.transition.clone(), reward, self.gamma, self.mu.clone())
    }

    /// State-to-state kernel `P̄_π(s'|s) = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_kernel(&self, pi: &Policy) -> Array2<f64> {
        let (s, a) = (self.n_states(), self.n_actions());
        let mut k = Array2::zeros((s, s));
        for st in 0..s {
            for ac in 0..a {
                let w = pi.probs[[st, ac]];
                if w == 0.0 {
                    continue;
                }
                for nx in 0..s {
                    k[[st, nx]] += w * self.transition[[st, ac, nx]];
                }
            }
        }
        k
    }

    /// `Σ_{s'} P(s'|s,a) v(s')` for every `(s, a)`.
    pub fn expected_next(&self, v: &Array1<f64>) -> Array2<f64> {
        let (s, a) = (self.n_states(), self.n_actions());
        Array2::from_shape_fn((s, a), |(st, ac)| {
            (0..s).map(|nx| self.transition[[st, ac, nx]] * v[nx]).sum()
        })
    }

    /// `Q(s,a) = (1−γ) r(s,a) + γ Σ P(s'|s,a) v(s')`.
    pub fn q_from_values(&self, v: &Array1<f64>) -> Array2<f64> {
        let g = self.gamma;
        let next = self.expected_next(v);
        Array2::from_shape_fn(self.reward.dim(), |ix| (1.0 - g) * self.reward[ix] + g * next[ix])
    }

    pub fn to_raw(&self) -> RawMdp {
        let (s, a) = (self.n_states(), self.n_actions());
        RawMdp {
            n_states: s,
            n_actions: a,
            gamma: self.gamma,
            mu: self.mu.to_vec(),
            reward: self.reward.outer_iter().map(|r| r.to_vec()).collect(),
            transition: (0..s)
                .map(|st| {
                    (0..a)
                        .map(|ac| (0..s).map(|nx| self.transition[[st, ac, nx]]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

/// Checks the raw instance against every invariant and returns the validated MDP.
pub fn validate_mdp(raw: &RawMdp) -> Result<MdpInstance> {
    let (s, a) = (raw.n_states, raw.n_actions);
    if raw.reward.len() != s || raw.reward.iter().any(|row| row.len() != a) {
        return Err(Error::Dimension(format!("reward must be {s}x{a}")));
    }
    if raw.transition.len() != s
        || raw
            .transition
            .iter()
            .any(|row| row.len() != a || row.iter().any(|p| p.len() != s))
    {
        return Err(Error::Dimension(format!("transition must be {s}x{a}x{s}")));
    }
    let reward = Array2::from_shape_fn((s, a), |(i, j)| raw.reward[i][j]);
    let transition = Array3::from_shape_fn((s, a, s), |(i, j, k)| raw.transition[i][j][k]);
    MdpInstance::new(transition, reward, raw.gamma, Array1::from(raw.mu.clone()))
}

/// Row-stochastic matrix `π(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    probs: Array2<f64>,
}

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidPolicy("empty matrix".into()));
        }
        for (s, row) in probs.outer_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidPolicy(format!("negative or non-finite entry in state {s}")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Self { probs }
    }

    /// Per-state softmax of `logits`, computed with a max shift.
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
            row.mapv_inplace(|z| (z - m).exp());
            let total = row.sum();
            row.mapv_inplace(|p| p / total);
        }
        Self { probs }
    }

    /// Row normalization of a nonnegative matrix; used by update rules whose output is
    /// stochastic up to roundoff.
    pub(crate) fn from_unnormalized(mut weights: Array2<f64>) -> Self {
        for mut row in weights.outer_iter_mut() {
            let total = row.sum();
            row.mapv_inplace(|p| p / total);
        }
        Self { probs: weights }
    }

    /// Wraps a matrix without any checks; for intermediate ODE stages.
    pub(crate) fn from_raw(probs: Array2<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn into_probs(self) -> Array2<f64> {
        self.probs
    }

    pub fn row(&self, s: usize) -> ArrayView1<'_, f64> {
        self.probs.row(s)
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn is_interior(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    pub fn log_probs(&self) -> Array2<f64> {
        self.probs.mapv(f64::ln)
    }

    pub(crate) fn check_shape(&self, mdp: &MdpInstance) -> Result<()> {
        if self.probs.dim() != (mdp.n_states(), mdp.n_actions()) {
            return Err(Error::Dimension(format!(
                "policy is {:?}, MDP is ({}, {})",
                self.probs.dim(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    pub(crate) fn require_interior(&self) -> Result<()> {
        if !self.is_interior() {
            return Err(Error::InvalidPolicy("policy must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Per-state action subsets (faces of the simplex).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionFaces {
    mask: Vec<Vec<bool>>,
}

impl ActionFaces {
    pub fn new(mask: Vec<Vec<bool>>) -> Result<Self> {
        let width = mask.first().map(Vec::len).unwrap_or(0);
        for (s, row) in mask.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Dimension("ragged face mask".into()));
            }
            if !row.iter().any(|&b| b) {
                return Err(Error::EmptyFace(s));
            }
        }
        Ok(Self { mask })
    }

    pub fn full(n_states: usize, n_actions: usize) -> Self {
        Self { mask: vec![vec![true; n_actions]; n_states] }
    }

    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.mask[s][a]
    }

    pub fn state(&self, s: usize) -> &[bool] {
        &self.mask[s]
    }

    pub fn count(&self, s: usize) -> usize {
        self.mask[s].iter().filter(|&&b| b).count()
    }

    pub fn n_states(&self) -> usize {
        self.mask.len()
    }

    /// True when `pi` puts no mass outside the faces.
    pub fn supports(&self, pi: &Policy) -> bool {
        pi.probs()
            .indexed_iter()
            .all(|((s, a), &p)| p == 0.0 || self.mask[s][a])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueBundle {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    pub adv: Array2<f64>,
}

impl ValueBundle {
    pub(crate) fn from_vq(v: Array1<f64>, q: Array2<f64>) -> Self {
        let mut adv = q.clone();
        for (s, mut row) in adv.outer_iter_mut().enumerate() {
            row.mapv_inplace(|x| x - v[s]);
        }
        Self { v, q, adv }
    }
}

/// Minimal suboptimality `Δ` of a suboptimal action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SuboptimalityGap {
    Finite(f64),
    /// Every action is optimal in every state.
    Infinite,
}

impl SuboptimalityGap {
    pub fn finite(self) -> Result<f64> {
        match self {
            Self::Finite(d) => Ok(d),
            Self::Infinite => Err(Error::InfiniteGap),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimalStructure {
    /// Optimal `V*`, `Q*`, `A*`; `A*` is exactly zero on optimal actions.
    pub bundle: ValueBundle,
    pub optimal_actions: ActionFaces,
    pub delta: SuboptimalityGap,
    pub r_star: f64,
    /// A deterministic optimal policy (lowest-index optimal action).
    pub greedy: Policy,
}

impl OptimalStructure {
    /// `R* − R(π) = −(1−γ)^{-1} Σ_{a∉A*_s} ν^π(s,a) A*(s,a)`, evaluated without cancellation.
    pub fn reward_gap(&self, mdp: &MdpInstance, pi: &Policy) -> Result<f64> {
        let occ = geometry::occupancy_of(mdp, pi)?;
        Ok(self.reward_gap_from_occupancy(mdp, &occ.nu))
    }

    pub fn reward_gap_from_occupancy(&self, mdp: &MdpInstance, nu: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for ((s, a), &n) in nu.indexed_iter() {
            if !self.optimal_actions.contains(s, a) {
                acc -= n * self.bundle.adv[[s, a]];
            }
        }
        acc / (1.0 - mdp.gamma())
    }

    /// `Σ_{a∉A*_s} π(a|s)` per state.
    pub fn off_optimal_mass(&self, pi: &Policy) -> Array1<f64> {
        Array1::from_iter((0..pi.n_states()).map(|s| {
            (0..pi.n_actions())
                .filter(|&a| !self.optimal_actions.contains(s, a))
                .map(|a| pi.probs()[[s, a]])
                .sum::<f64>()
        }))
    }
}

/// `V^π`, `Q^π`, `A^π` by a direct LU solve of `(I − γP̄_π) V = (1−γ) r_π`.
pub fn evaluate_policy(mdp: &MdpInstance, pi: &Policy) -> Result<ValueBundle> {
    let zero = Array1::zeros(mdp.n_states());
    evaluate_with_penalty(mdp, pi, &zero)
}

/// Policy evaluation with an additional per-state cost `c(s)` subtracted from the
/// expected reward: `V = (1−γ)(r_π − c) + γ P̄_π V`, `Q = (1−γ) r + γ P V`.
pub(crate) fn evaluate_with_penalty(
    mdp: &MdpInstance,
    pi: &Policy,
    penalty: &Array1<f64>,
) -> Result<ValueBundle> {
    pi.check_shape(mdp)?;
    let g = mdp.gamma();
    let s = mdp.n_states();
    let kernel = mdp.state_kernel(pi);
    let mut m = Array2::<f64>::eye(s);
    m.scaled_add(-g, &kernel);
    let r_pi = (pi.probs() * mdp.reward()).sum_axis(Axis(1));
    let rhs = (&r_pi - penalty) * (1.0 - g);
    let v = linalg::solve(&m, &rhs)?;
    let q = mdp.q_from_values(&v);
    Ok(ValueBundle::from_vq(v, q))
}

/// `R(π) = Σ_{s,a} r(s,a) ν^π(s,a)`.
pub fn reward_of(mdp: &MdpInstance, pi: &Policy) -> Result<f64> {
    let occ = geometry::occupancy_of(mdp, pi)?;
    Ok((&occ.nu * mdp.reward()).sum())
}

pub fn default_tie_tol(mdp: &MdpInstance) -> f64 {
    1e-9 * (1.0 + mdp.reward_sup())
}

/// Optimal values by value iteration to a `1e-13·(1+‖r‖∞)` residual, polished by exact
/// evaluation of the greedy policy until the greedy choice is stable.
pub fn optimal_structure(mdp: &MdpInstance, tie_tol: f64) -> Result<OptimalStructure> {
    let (s, a) = (mdp.n_states(), mdp.n_actions());
    let vi_tol = 1e-13 * (1.0 + mdp.reward_sup());
    let mut v = Array1::<f64>::zeros(s);
    let max_iter = 50_000_000 / (s * a * s).max(1);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter.max(10_000) {
        let q = mdp.q_from_values(&v);
        let next = q.map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
        residual = (&next - &v).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        v = next;
        if residual <= vi_tol {
            break;
        }
    }
    if residual > vi_tol {
        return Err(Error::MaxIterations { iterations: max_iter, residual });
    }

    let greedy_of = |v: &Array1<f64>| -> Vec<usize> {
        let q = mdp.q_from_values(v);
        q.outer_iter()
            .map(|row| {
                let best = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let scale = tie_tol.max(f64::EPSILON * best.abs());
                row.iter().position(|&x| x >= best - scale).unwrap_or(0)
            })
            .collect()
    };
    let mut actions = greedy_of(&v);
    for _ in 0..100 {
        let greedy = Policy::deterministic(&actions, a);
        let exact = evaluate_policy(mdp, &greedy)?;
        let next_actions = greedy_of(&exact.v);
        let q = mdp.q_from_values(&exact.v);
        // Accept the exact values only if the greedy policy is optimal for them.
        let improves = q.outer_iter().enumerate().any(|(st, row)| {
            row.iter().any(|&x| x > exact.v[st] + tie_tol)
        });
        v = exact.v;
        if next_actions == actions || !improves {
            break;
        }
        actions = next_actions;
    }

    let q = mdp.q_from_values(&v);
    let mut bundle = ValueBundle::from_vq(v, q);
    let mut mask = vec![vec![false; a]; s];
    let mut worst = f64::NEG_INFINITY;
    for st in 0..s {
        for ac in 0..a {
            if bundle.adv[[st, ac]] >= -tie_tol {
                mask[st][ac] = true;
                bundle.adv[[st, ac]] = 0.0;
            } else {
                worst = worst.max(bundle.adv[[st, ac]]);
            }
        }
    }
    // Q* is made consistent with the snapped advantages on optimal actions.
    for st in 0..s {
        for ac in 0..a {
            if mask[st][ac] {
                bundle.q[[st, ac]] = bundle.v[st];
            }
        }
    }
    let delta = if worst.is_finite() {
        SuboptimalityGap::Finite(-worst / (1.0 - mdp.gamma()))
    } else {
        SuboptimalityGap::Infinite
    };
    let optimal_actions = ActionFaces::new(mask)?;
    let greedy_actions: Vec<usize> = (0..s)
        .map(|st| (0..a).find(|&ac| optimal_actions.contains(st, ac)).unwrap_or(0))
        .collect();
    let r_star = mdp.mu().dot(&bundle.v);
    Ok(OptimalStructure {
        bundle,
        optimal_actions,
        delta,
        r_star,
        greedy: Policy::deterministic(&greedy_actions, a),
    })
}

/// Both sides of `R(π1) − R(π2) = (1−γ)^{-1} ⟨ν^{π1}, A^{π2}⟩`.
pub fn performance_difference(mdp: &MdpInstance, pi1: &Policy, pi2: &Policy) -> Result<(f64, f64)> {
    let lhs = reward_of(mdp, pi1)? - reward_of(mdp, pi2)?;
    let occ1 = geometry::occupancy_of(mdp, pi1)?;
    let adv2 = evaluate_policy(mdp, pi2)?.adv;
    let rhs = (&occ1.nu * &adv2).sum() / (1.0 - mdp.gamma());
    Ok((lhs, rhs))
}
