//! Occupancy measures, the Kakade divergence and metric, conditioning, and
//! information projections onto faces.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{self, ActionFaces, MdpInstance, Policy};
use crate::soft;

/// Discounted state distribution `d^π` and state-action distribution `ν^π`.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    pub d: Array1<f64>,
    pub nu: Array2<f64>,
}

impl Occupancy {
    /// Builds an occupancy from a state-action matrix, with `d` the row sums.
    pub fn from_nu(nu: Array2<f64>) -> Self {
        let d = nu.sum_axis(Axis(1));
        Self { d, nu }
    }

    /// `ℓ_s(ν) = Σ_a ν(s,a) − γ Σ_{s',a'} P(s|s',a') ν(s',a') − (1−γ) μ(s)` for every `s`.
    pub fn polytope_residuals(&self, mdp: &MdpInstance) -> Array1<f64> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let p = mdp.transition();
        let g = mdp.gamma();
        let mut res = Array1::zeros(ns);
        for s in 0..ns {
            let inflow: f64 = (0..ns)
                .flat_map(|s2| (0..na).map(move |a2| (s2, a2)))
                .map(|(s2, a2)| p[[s2, a2, s]] * self.nu[[s2, a2]])
                .sum();
            res[s] = self.nu.row(s).sum() - g * inflow - (1.0 - g) * mdp.mu()[s];
        }
        res
    }
}

/// A tangent vector of the policy polytope: each row sums to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentField {
    w: Array2<f64>,
}

impl TangentField {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        for (s, row) in w.outer_iter().enumerate() {
            let sum = row.sum();
            let scale = row.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            if sum.abs() > 1e-12 * scale {
                return Err(Error::InvalidParameter(format!(
                    "tangent field row {s} sums to {sum:e}"
                )));
            }
        }
        Ok(Self { w })
    }

    /// Projects an arbitrary matrix onto the tangent space by removing row means.
    pub fn centered(mut w: Array2<f64>) -> Self {
        for mut row in w.outer_iter_mut() {
            let mean = row.mean().unwrap_or(0.0);
            row.mapv_inplace(|x| x - mean);
        }
        Self { w }
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { w: Array2::zeros((n_states, n_actions)) }
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.w
    }
}

/// Solves `d = (1−γ)μ + γ P̄_π^T d` and forms `ν(s,a) = d(s) π(a|s)`.
pub fn occupancy_of(mdp: &MdpInstance, pi: &Policy) -> Result<Occupancy> {
    occupancy_from(mdp, pi, mdp.mu())
}

/// Occupancy for an explicit initial distribution (e.g. a point mass `δ_s`).
pub fn occupancy_from(mdp: &MdpInstance, pi: &Policy, mu: &Array1<f64>) -> Result<Occupancy> {
    pi.check_shape(mdp)?;
    let g = mdp.gamma();
    let n = mdp.n_states();
    let kernel = mdp.state_kernel(pi);
    let mut m = Array2::<f64>::eye(n);
    m.scaled_add(-g, &kernel);
    let rhs = mu * (1.0 - g);
    let d = linalg::solve_transposed(&m, &rhs)?;
    let nu = Array2::from_shape_fn(pi.probs().dim(), |(s, a)| d[s] * pi.probs()[[s, a]]);
    Ok(Occupancy { d, nu })
}

/// `KL(p, q)` with `0·log(0/x) = 0`; `state` labels the error when `q` misses mass of `p`.
fn kl_row(p: ArrayView1<f64>, q: ArrayView1<f64>, state: usize) -> Result<f64> {
    let mut acc = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q.iter()).enumerate() {
        if pa > 0.0 {
            if qa <= 0.0 {
                return Err(Error::InfiniteDivergence { state, action: a });
            }
            acc += pa * (pa / qa).ln();
        }
    }
    Ok(acc)
}

/// Plain KL divergence between two nonnegative vectors of equal length.
pub fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension("kl: length mismatch".into()));
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::InfiniteDivergence { state: i, action: 0 });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// `KL(π1(·|s), π2(·|s))` for every state.
pub fn per_state_kl(pi1: &Policy, pi2: &Policy) -> Result<Array1<f64>> {
    if pi1.probs().dim() != pi2.probs().dim() {
        return Err(Error::Dimension("policies differ in shape".into()));
    }
    let mut out = Array1::zeros(pi1.n_states());
    for s in 0..pi1.n_states() {
        out[s] = kl_row(pi1.row(s), pi2.row(s), s)?;
    }
    Ok(out)
}

/// `D_K(π1, π2) = Σ_s d^{π1}(s) KL(π1(·|s), π2(·|s))`.
pub fn kakade_divergence(mdp: &MdpInstance, pi1: &Policy, pi2: &Policy) -> Result<f64> {
    let occ = occupancy_of(mdp, pi1)?;
    kakade_divergence_weighted(&occ.d, pi1, pi2)
}

/// Kakade divergence with a precomputed state distribution `d` of `pi1`.
pub fn kakade_divergence_weighted(d: &Array1<f64>, pi1: &Policy, pi2: &Policy) -> Result<f64> {
    let mut acc = 0.0;
    for s in 0..pi1.n_states() {
        if d[s] > 0.0 {
            acc += d[s] * kl_row(pi1.row(s), pi2.row(s), s)?;
        }
    }
    Ok(acc)
}

/// Kakade divergence for the point mass `δ_s` as initial distribution, for every `s`.
pub fn kakade_divergence_per_start(
    mdp: &MdpInstance,
    pi1: &Policy,
    pi2: &Policy,
) -> Result<Array1<f64>> {
    let n = mdp.n_states();
    let kl = per_state_kl(pi1, pi2)?;
    let mut out = Array1::zeros(n);
    for s in 0..n {
        let mut delta = Array1::zeros(n);
        delta[s] = 1.0;
        let occ = occupancy_from(mdp, pi1, &delta)?;
        out[s] = occ.d.dot(&kl);
    }
    Ok(out)
}

/// Conditional relative entropy `D_{A|S}(ν1, ν2) = Σ ν1(s,a) log(ν1(a|s)/ν2(a|s))`.
pub fn conditional_kl(nu1: &Occupancy, nu2: &Occupancy) -> Result<f64> {
    if nu1.nu.dim() != nu2.nu.dim() {
        return Err(Error::Dimension("occupancies differ in shape".into()));
    }
    let mut acc = 0.0;
    for ((s, a), &v1) in nu1.nu.indexed_iter() {
        if v1 <= 0.0 {
            continue;
        }
        let v2 = nu2.nu[[s, a]];
        if v2 <= 0.0 || nu2.d[s] <= 0.0 {
            return Err(Error::InfiniteDivergence { state: s, action: a });
        }
        acc += v1 * ((v1 / nu1.d[s]) / (v2 / nu2.d[s])).ln();
    }
    Ok(acc)
}

/// Checks that the uniform policy visits every state with positive probability.
pub fn check_state_exploration(mdp: &MdpInstance) -> Result<()> {
    let occ = occupancy_of(mdp, &Policy::uniform(mdp.n_states(), mdp.n_actions()))?;
    match occ.d.iter().position(|&d| d <= 0.0) {
        Some(s) => Err(Error::StateExploration(s)),
        None => Ok(()),
    }
}

/// Kakade metric `⟨w1, w2⟩_π = Σ_s d^π(s) Σ_a w1(s,a) w2(s,a) / π(a|s)`.
pub fn kakade_inner(
    mdp: &MdpInstance,
    pi: &Policy,
    w1: &TangentField,
    w2: &TangentField,
) -> Result<f64> {
    pi.require_interior()?;
    let occ = occupancy_of(mdp, pi)?;
    Ok(kakade_inner_weighted(&occ.d, pi, w1, w2))
}

pub(crate) fn kakade_inner_weighted(
    d: &Array1<f64>,
    pi: &Policy,
    w1: &TangentField,
    w2: &TangentField,
) -> f64 {
    let p = pi.probs();
    let mut acc = 0.0;
    for s in 0..p.nrows() {
        let row: f64 = (0..p.ncols())
            .map(|a| w1.w[[s, a]] * w2.w[[s, a]] / p[[s, a]])
            .sum();
        acc += d[s] * row;
    }
    acc
}

/// Riemannian gradient of `R` under the Kakade metric: `(1−γ)^{-1} A^π(s,a) π(a|s)`.
pub fn kakade_gradient(mdp: &MdpInstance, pi: &Policy) -> Result<TangentField> {
    pi.require_interior()?;
    let adv = mdp::evaluate_policy(mdp, pi)?.adv;
    let scale = 1.0 / (1.0 - mdp.gamma());
    let mut g = &adv * pi.probs() * scale;
    // Centering holds analytically; remove the roundoff so the field is exactly tangent.
    for mut row in g.outer_iter_mut() {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|x| x - mean);
    }
    Ok(TangentField { w: g })
}

/// Inverse of the ν-map: `π(a|s) = ν(s,a)/Σ_a' ν(s,a')`, uniform rows where the mass vanishes.
pub fn condition(nu: &Array2<f64>) -> Result<Policy> {
    if nu.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidParameter("condition: negative entry".into()));
    }
    let na = nu.ncols();
    let mut probs = nu.clone();
    for mut row in probs.outer_iter_mut() {
        let total = row.sum();
        if total > 0.0 {
            row.mapv_inplace(|x| x / total);
        } else {
            row.fill(1.0 / na as f64);
        }
    }
    Ok(Policy::from_unnormalized(probs))
}

/// KL projection of `reference` onto the face spanned by `face`; returns the projection
/// and `−log Σ_{a∈face} ref(a)`.
pub fn face_information_projection(
    reference: ArrayView1<f64>,
    face: &[bool],
) -> Result<(Array1<f64>, f64)> {
    if reference.len() != face.len() {
        return Err(Error::Dimension("face mask length differs from reference".into()));
    }
    if !face.iter().any(|&b| b) {
        return Err(Error::EmptyFace(0));
    }
    if face.iter().zip(reference.iter()).any(|(&f, &r)| f && !(r > 0.0)) {
        return Err(Error::ReferenceVanishesOnFace(0));
    }
    let mass: f64 = reference
        .iter()
        .zip(face)
        .filter(|(_, &f)| f)
        .map(|(r, _)| r)
        .sum();
    let proj = Array1::from_iter(
        reference
            .iter()
            .zip(face)
            .map(|(&r, &f)| if f { r / mass } else { 0.0 }),
    );
    Ok((proj, -mass.ln()))
}

/// `argmin { D_K(π, π0) : supp π(·|s) ⊆ faces_s }`, computed as the entropy-regularized
/// optimum (τ = 1) of the zero-reward MDP restricted to the faces.
pub fn kakade_projection(mdp: &MdpInstance, pi0: &Policy, faces: &ActionFaces) -> Result<Policy> {
    pi0.check_shape(mdp)?;
    pi0.require_interior()?;
    if faces.n_states() != mdp.n_states() {
        return Err(Error::Dimension("faces do not match the state space".into()));
    }
    let tol = 1e-15;
    let sol = soft::soft_value_iteration(mdp, pi0, Some(faces), 1.0, 0.0, tol, 1_000_000)?;
    Ok(sol.policy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PythagorasGap {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Compares `D_K(π, π0)` with `D_K(π, π̂) + D_K(π̂, π0)` for the Kakade projection `π̂`.
pub fn pythagoras_check(
    mdp: &MdpInstance,
    pi0: &Policy,
    faces: &ActionFaces,
    pi: &Policy,
) -> Result<PythagorasGap> {
    if !faces.supports(pi) {
        return Err(Error::InvalidPolicy("policy leaves the face class".into()));
    }
    let proj = kakade_projection(mdp, pi0, faces)?;
    let lhs = kakade_divergence(mdp, pi, pi0)?;
    let rhs = kakade_divergence(mdp, pi, &proj)? + kakade_divergence(mdp, &proj, pi0)?;
    Ok(PythagorasGap { lhs, rhs, gap: lhs - rhs })
}
