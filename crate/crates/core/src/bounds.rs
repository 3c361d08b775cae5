//! Constants and certificates for the exponential, sublinear and entrywise bounds on
//! flows and natural policy gradient runs, plus least-squares rate fits.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{FlowReference, FlowTrajectory};
use crate::geometry;
use crate::mdp::{self, ActionFaces, MdpInstance, OptimalStructure, Policy};
use crate::npg::{self, NpgRun};
use crate::regularized::{self, SigmaRegularizer};

/// Absolute slack `1e-9·(1+‖r‖∞)` used by every certificate.
pub fn cert_tol(mdp: &MdpInstance) -> f64 {
    1e-9 * (1.0 + mdp.reward_sup())
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BoundConstants {
    pub delta: f64,
    pub gamma: f64,
    pub r_inf: f64,
    pub n_states: usize,
    pub n_actions: usize,
    /// `D_K(π*, π0)` under the instance's `μ`.
    pub dk_star: f64,
    /// `max_s D_K(π*, π0)` with `μ = δ_s`.
    pub dk_star_sup: f64,
    /// `(1−γ)^{-1} D_K(π*, π0)`.
    pub c_flow: f64,
    /// `Σ_s d^{π*_u}(s) log(|A|/|A*_s|)` for the uniform reference.
    pub c_unif: f64,
    pub min_dstar: f64,
    /// `min_{s, a∉A*_s} d^{π*}(s) π0(a|s)`.
    pub min_dstar_pi0_off: f64,
    /// `Σ_{a∉A*_s} π0(a|s)` per state.
    pub pi0_offmass: Vec<f64>,
    pub eta: Option<f64>,
    /// `(D_K(π*, π0) + 2η‖r‖∞/(1−γ)) / (1−γ)`.
    pub c_npg: Option<f64>,
    /// Contraction constant of regularized NPG, see [`cen_constant`].
    pub c_cen: Option<f64>,
}

impl BoundConstants {
    pub fn compute(
        mdp: &MdpInstance,
        opt: &OptimalStructure,
        pi0: &Policy,
        pi_star: &Policy,
    ) -> Result<Self> {
        let delta = opt.delta.finite()?;
        let g = mdp.gamma();
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let occ_star = geometry::occupancy_of(mdp, pi_star)?;
        let dk_star = geometry::kakade_divergence_weighted(&occ_star.d, pi_star, pi0)?;
        let dk_star_sup = geometry::kakade_divergence_per_start(mdp, pi_star, pi0)?
            .fold(0.0f64, |m, &x| m.max(x));

        let faces = &opt.optimal_actions;
        let unif_star = face_uniform(faces, na);
        let d_u = geometry::occupancy_of(mdp, &unif_star)?.d;
        let c_unif = (0..ns)
            .map(|s| d_u[s] * (na as f64 / faces.count(s) as f64).ln())
            .sum();

        let mut min_off = f64::INFINITY;
        for s in 0..ns {
            for a in (0..na).filter(|&a| !faces.contains(s, a)) {
                min_off = min_off.min(occ_star.d[s] * pi0.probs()[[s, a]]);
            }
        }
        let pi0_offmass = opt.off_optimal_mass(pi0).to_vec();
        Ok(Self {
            delta,
            gamma: g,
            r_inf: mdp.reward_sup(),
            n_states: ns,
            n_actions: na,
            dk_star,
            dk_star_sup,
            c_flow: dk_star / (1.0 - g),
            c_unif,
            min_dstar: occ_star.d.fold(f64::INFINITY, |m, &x| m.min(x)),
            min_dstar_pi0_off: min_off,
            pi0_offmass,
            eta: None,
            c_npg: None,
            c_cen: None,
        })
    }

    /// Convenience: optimal structure, maximum-entropy optimal policy and constants.
    pub fn for_instance(mdp: &MdpInstance, pi0: &Policy) -> Result<(Self, FlowReference)> {
        let reference = FlowReference::new(mdp, pi0)?;
        let consts = Self::compute(mdp, &reference.opt, pi0, &reference.pi_star)?;
        Ok((consts, reference))
    }

    pub fn with_npg(mut self, eta: f64) -> Self {
        let g = self.gamma;
        self.eta = Some(eta);
        self.c_npg = Some((self.dk_star + 2.0 * eta * self.r_inf / (1.0 - g)) / (1.0 - g));
        self
    }

    pub fn with_cen(mut self, c_cen: f64) -> Self {
        self.c_cen = Some(c_cen);
        self
    }

    /// `min_s d(s) Σ_{a∉A*_s} π0(a|s)` for a given state distribution.
    pub fn min_d_offmass(&self, d: &Array1<f64>) -> f64 {
        d.iter()
            .zip(&self.pi0_offmass)
            .fold(f64::INFINITY, |m, (d, o)| m.min(d * o))
    }
}

fn face_uniform(faces: &ActionFaces, na: usize) -> Policy {
    let probs = Array2::from_shape_fn((faces.n_states(), na), |(s, a)| {
        if faces.contains(s, a) {
            1.0 / faces.count(s) as f64
        } else {
            0.0
        }
    });
    Policy::new(probs).expect("uniform on a nonempty face is a policy")
}

fn require_t(t: f64) -> Result<()> {
    if !(t >= 1.0) {
        return Err(Error::InvalidParameter(format!("bound requires t >= 1, got {t}")));
    }
    Ok(())
}

/// Value sandwich along the flow at time `t ≥ 1`; `d_min_offmass` is
/// `min_s d^{π_t}(s) Σ_{a∉A*_s} π0(a|s)`.
pub fn thm42_bounds(consts: &BoundConstants, t: f64, d_min_offmass: f64) -> Result<(f64, f64)> {
    require_t(t)?;
    let BoundConstants { delta, gamma, r_inf, c_flow: c, .. } = *consts;
    let upper = 2.0 * r_inf / (1.0 - gamma) * (-delta * (t - 1.0) + c * t.ln()).exp();
    let lower =
        delta * d_min_offmass * (-delta * (t - 1.0) - gamma * c * t.ln() - 2.0 * r_inf).exp();
    Ok((upper, lower))
}

/// Policy sandwich `lower ≤ D_K(π*, π_t) ≤ upper`; the upper bound is `None` when
/// `x = e^{−Δ(t−1)+c log t} ≥ 1`.
pub fn thm44_bounds(consts: &BoundConstants, t: f64) -> Result<(Option<f64>, f64)> {
    require_t(t)?;
    let BoundConstants { delta, gamma, r_inf, c_flow: c, .. } = *consts;
    let x = (-delta * (t - 1.0) + c * t.ln()).exp();
    let upper = if x < 1.0 { Some(x / (1.0 - x)) } else { None };
    let lower = consts.min_dstar_pi0_off
        * (-delta * (t - 1.0) - gamma * c * t.ln() - 2.0 * r_inf).exp();
    Ok((upper, lower))
}

/// Value sandwich for unregularized NPG at iterate `k ≥ 1`.
pub fn thm47_bounds(consts: &BoundConstants, k: usize, d_min_offmass: f64) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidParameter("bound requires k >= 1".into()));
    }
    let (eta, c) = npg_params(consts)?;
    let BoundConstants { delta, gamma, r_inf, .. } = *consts;
    let kf = k as f64;
    let upper = 2.0 * r_inf / (1.0 - gamma) * (-delta * eta * (kf - 1.0) + c * kf.ln() + c).exp();
    let lower = delta
        * d_min_offmass
        * (-delta * eta * (kf - 1.0) - c * kf.ln() - c - 4.0 * eta * r_inf / (1.0 - gamma)).exp();
    Ok((upper, lower))
}

fn npg_params(consts: &BoundConstants) -> Result<(f64, f64)> {
    match (consts.eta, consts.c_npg) {
        (Some(e), Some(c)) => Ok((e, c)),
        _ => Err(Error::InvalidParameter("NPG constants need a stepsize (with_npg)".into())),
    }
}

/// `‖Q*_τ − Q_τ^{π^{(0)}}‖∞ + 2τ(1 − ητ/(1−γ)) ‖log π*_τ − log π^{(0)}‖∞`, unnormalized units.
pub fn cen_constant(mdp: &MdpInstance, pi_init: &Policy, eta: f64, tau: f64) -> Result<f64> {
    let unif = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let sol = regularized::solve_entropy_regularized(mdp, &unif, tau, 1e-13)?;
    let q_star = npg::regularized_q_unnormalized(mdp, &sol.pi_star_tau, tau)?;
    let q0 = npg::regularized_q_unnormalized(mdp, pi_init, tau)?;
    let sup = |a: &Array2<f64>, b: &Array2<f64>| {
        a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };
    let dlog = sup(&sol.pi_star_tau.log_probs(), &pi_init.log_probs());
    Ok(sup(&q_star, &q0) + 2.0 * tau * (1.0 - eta * tau / (1.0 - mdp.gamma())) * dlog)
}

/// Contraction bounds for iterate `k + 1` of regularized NPG:
/// `(C (1−ητ)^k, 2Cτ^{-1}(1−ητ)^k)`.
pub fn contraction_bounds(c_cen: f64, eta: f64, tau: f64, k: usize) -> (f64, f64) {
    let rate = (1.0 - eta * tau).max(0.0).powi(k as i32);
    (c_cen * rate, 2.0 * c_cen / tau * rate)
}

/// Upper bound on `R* − R(π_{k+1})` for regularized NPG with the uniform reference.
pub fn thm61_overall(consts: &BoundConstants, k: usize, eta: f64, tau: f64) -> Result<f64> {
    let c_cen = consts
        .c_cen
        .ok_or_else(|| Error::InvalidParameter("overall bound needs the contraction constant".into()))?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidParameter(format!("tau must lie in (0, 1], got {tau}")));
    }
    let max = (1.0 - consts.gamma) / tau;
    if !(eta > 0.0) || eta > max * (1.0 + 1e-12) {
        return Err(Error::StepsizeTooLarge { eta, max });
    }
    let BoundConstants { delta, gamma, r_inf, c_unif, n_states, .. } = *consts;
    let first = 2.0 * r_inf * delta.exp() / (1.0 - gamma) * tau.powf(-c_unif) * (-delta / tau).exp();
    let second = 2.0 * n_states as f64 * r_inf * c_cen.sqrt() / (1.0 - gamma)
        * tau.powf(-0.5)
        * (-eta * tau * (k as f64 - 1.0) / 2.0).exp();
    Ok(first + second)
}

/// Entrywise bounds on `π_t` along the Kakade flow for `t ≥ 1`, using the divergence
/// constant `dk` (per-state rigorous with `dk_star_sup`).
pub fn flow_entry_bounds(
    consts: &BoundConstants,
    opt: &OptimalStructure,
    pi0: &Policy,
    t: f64,
    dk: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    require_t(t)?;
    let g = consts.gamma;
    let a_star = &opt.bundle.adv;
    let upper = Array2::from_shape_fn(a_star.dim(), |ix| {
        let e = (a_star[ix] * (t - 1.0) + dk * t.ln() + 2.0 * consts.r_inf) / (1.0 - g);
        (pi0.probs()[ix].ln() + e).exp()
    });
    let lower = Array2::from_shape_fn(a_star.dim(), |ix| {
        let e = (a_star[ix] * (t - 1.0) - g * dk * t.ln() - 2.0 * consts.r_inf) / (1.0 - g);
        (pi0.probs()[ix].ln() + e).exp()
    });
    Ok((upper, lower))
}

/// Entrywise bounds on NPG iterate `k ≥ 1` relative to `π0`, in log space:
/// returns `(log upper, log lower)`.
pub fn npg_entry_log_bounds(
    consts: &BoundConstants,
    opt: &OptimalStructure,
    pi0: &Policy,
    k: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if k == 0 {
        return Err(Error::InvalidParameter("bound requires k >= 1".into()));
    }
    let (eta, c) = npg_params(consts)?;
    let g = consts.gamma;
    let kf = k as f64;
    let extra = eta * consts.r_inf / (1.0 - g);
    let a_star = &opt.bundle.adv;
    let log_pi0 = pi0.log_probs();
    let upper = Array2::from_shape_fn(a_star.dim(), |ix| {
        log_pi0[ix] + a_star[ix] * eta * (kf - 1.0) / (1.0 - g) + c * kf.ln() + c + 2.0 * extra
    });
    let lower = Array2::from_shape_fn(a_star.dim(), |ix| {
        log_pi0[ix] + a_star[ix] * eta * kf / (1.0 - g) - c * kf.ln() - c - 4.0 * extra
    });
    Ok((upper, lower))
}

/// Entrywise bounds for iterate `k ≥ 1` relative to `π1`, in log space.
pub fn npg_entry_log_bounds_from_first(
    consts: &BoundConstants,
    opt: &OptimalStructure,
    log_pi1: &Array2<f64>,
    k: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if k == 0 {
        return Err(Error::InvalidParameter("bound requires k >= 1".into()));
    }
    let (eta, c) = npg_params(consts)?;
    let g = consts.gamma;
    let kf = k as f64;
    let a_star = &opt.bundle.adv;
    let upper = Array2::from_shape_fn(a_star.dim(), |ix| {
        log_pi1[ix] + a_star[ix] * eta * (kf - 1.0) / (1.0 - g) + c * kf.ln() + c
    });
    let lower = Array2::from_shape_fn(a_star.dim(), |ix| {
        log_pi1[ix] + a_star[ix] * eta * (kf - 1.0) / (1.0 - g) - c * kf.ln()
    });
    Ok((upper, lower))
}

/// Entrywise bounds on the σ-flow for `t ≥ 1`.
///
/// `dpsi` is `D_Ψ(π', π0)` for some optimal `π'` (`None` when infinite). The upper bound
/// is `+∞` where its base is not positive or `dpsi` is infinite. The lower bound carries
/// the `γ`-weighted divergence term and is finite whenever `γ = 0` or `dpsi` is finite.
pub fn sigma_entry_bounds(
    reg: &SigmaRegularizer,
    consts: &BoundConstants,
    opt: &OptimalStructure,
    pi0: &Policy,
    dpsi: Option<f64>,
    t: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    require_t(t)?;
    let sigma = reg.sigma();
    let g = consts.gamma;
    let r2 = 2.0 * consts.r_inf;
    let a_star = &opt.bundle.adv;
    let power = -1.0 / (sigma - 1.0);
    let upper = Array2::from_shape_fn(a_star.dim(), |ix| {
        let Some(d) = dpsi else { return f64::INFINITY };
        let base = (1.0 - sigma) * ((t - 1.0) * a_star[ix] + d * t.ln() + r2) / (1.0 - g)
            + pi0.probs()[ix].powf(1.0 - sigma);
        if base > 0.0 {
            base.powf(power)
        } else {
            f64::INFINITY
        }
    });
    let lower = Array2::from_shape_fn(a_star.dim(), |ix| {
        let div_term = if g == 0.0 {
            0.0
        } else {
            match dpsi {
                Some(d) => g * d * t.ln(),
                None => return 0.0,
            }
        };
        let base = (1.0 - sigma) * ((t - 1.0) * a_star[ix] - div_term - r2) / (1.0 - g)
            + pi0.probs()[ix].powf(1.0 - sigma);
        base.powf(power)
    });
    Ok((upper, lower))
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct Sandwich {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

impl Sandwich {
    pub fn holds(&self, tol: f64) -> bool {
        self.lower - tol <= self.value && self.value <= self.upper + tol
    }
}

/// `Σ_s d*(s) Σ_{a∉A*} π(a|s) ≤ D_K(π̂, π) ≤ m/(1−m)` with `π̂` the Kakade projection of
/// `π` onto the optimal policies and `m` the largest off-optimal mass.
pub fn projection_divergence_sandwich(mdp: &MdpInstance, opt: &OptimalStructure, pi: &Policy) -> Result<Sandwich> {
    let proj = geometry::kakade_projection(mdp, pi, &opt.optimal_actions)?;
    let occ = geometry::occupancy_of(mdp, &proj)?;
    let off = opt.off_optimal_mass(pi);
    let lower = occ.d.dot(&off);
    let value = geometry::kakade_divergence_weighted(&occ.d, &proj, pi)?;
    let m = off.fold(0.0f64, |m, &x| m.max(x));
    let upper = if m < 1.0 { m / (1.0 - m) } else { f64::INFINITY };
    Ok(Sandwich { lower, value, upper })
}

/// `Δ Σ d^π π_off ≤ R* − R(π) ≤ 2‖r‖∞/(1−γ) Σ d^π π_off`.
pub fn gap_offmass_sandwich(mdp: &MdpInstance, opt: &OptimalStructure, pi: &Policy) -> Result<Sandwich> {
    let delta = opt.delta.finite()?;
    let occ = geometry::occupancy_of(mdp, pi)?;
    let mass = occ.d.dot(&opt.off_optimal_mass(pi));
    Ok(Sandwich {
        lower: delta * mass,
        value: opt.reward_gap_from_occupancy(mdp, &occ.nu),
        upper: 2.0 * mdp.reward_sup() / (1.0 - mdp.gamma()) * mass,
    })
}

/// `(|R(π1) − R(π2)|, ‖r‖∞/(1−γ) ‖π1 − π2‖₁)`.
pub fn lipschitz_check(mdp: &MdpInstance, pi1: &Policy, pi2: &Policy) -> Result<(f64, f64)> {
    let lhs = (mdp::reward_of(mdp, pi1)? - mdp::reward_of(mdp, pi2)?).abs();
    let l1: f64 = pi1
        .probs()
        .iter()
        .zip(pi2.probs().iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((lhs, mdp.reward_sup() / (1.0 - mdp.gamma()) * l1))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BoundRow {
    pub check: String,
    /// Time, iteration or regularization strength, depending on the check.
    pub x: f64,
    pub quantity: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope.
    pub slope_stderr: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FittedExponent {
    pub fit: RateFit,
    pub expected: f64,
    pub window: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub constants: Option<BoundConstants>,
    pub tolerance: f64,
    pub rows: Vec<BoundRow>,
    pub fitted_exponent: Option<FittedExponent>,
    pub verdict: Verdict,
}

impl BoundReport {
    pub fn new(constants: Option<BoundConstants>, tolerance: f64) -> Self {
        Self { constants, tolerance, rows: Vec::new(), fitted_exponent: None, verdict: Verdict::Pass }
    }

    /// Records `lower − tol ≤ quantity ≤ upper + tol`; missing bounds are not checked.
    pub fn push(&mut self, check: &str, x: f64, quantity: f64, lower: Option<f64>, upper: Option<f64>) {
        let tol = self.tolerance;
        let pass = quantity.is_finite()
            && lower.is_none_or(|l| l - tol <= quantity)
            && upper.is_none_or(|u| quantity <= u + tol);
        if !pass {
            self.verdict = Verdict::Fail;
        }
        self.rows.push(BoundRow { check: check.to_string(), x, quantity, lower, upper, pass });
    }

    pub fn failures(&self) -> impl Iterator<Item = &BoundRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn merge(&mut self, other: BoundReport) {
        if other.verdict == Verdict::Fail {
            self.verdict = Verdict::Fail;
        }
        self.rows.extend(other.rows);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitModel {
    /// `log y` against `x`.
    LogLinear,
    /// `log y` against `log x`.
    LogLog,
}

/// Ordinary least squares on transformed coordinates.
pub fn rate_fit(xs: &[f64], ys: &[f64], model: FitModel) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension("rate fit: x and y lengths differ".into()));
    }
    if xs.len() < 10 {
        return Err(Error::WindowTooSmall(xs.len()));
    }
    let mut u = Vec::with_capacity(xs.len());
    let mut v = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys) {
        if !(y > 0.0) || (model == FitModel::LogLog && !(x > 0.0)) {
            return Err(Error::InvalidParameter(format!("cannot take logs of ({x}, {y})")));
        }
        u.push(if model == FitModel::LogLog { x.ln() } else { x });
        v.push(y.ln());
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let sxx: f64 = u.iter().map(|x| (x - mu).powi(2)).sum();
    let sxy: f64 = u.iter().zip(&v).map(|(x, y)| (x - mu) * (y - mv)).sum();
    let syy: f64 = v.iter().map(|y| (y - mv).powi(2)).sum();
    if !(sxx > 1e-300 * (1.0 + mu * mu)) {
        return Err(Error::DegenerateDesign);
    }
    let slope = sxy / sxx;
    let intercept = mv - slope * mu;
    let sse: f64 = u.iter().zip(&v).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if u.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(RateFit { slope, intercept, r2, slope_stderr, n_points: u.len() })
}

/// First grid time `t ≥ 1` at which the value upper bound drops below 10% of the gap at
/// the start of the trajectory.
pub fn flow_window_start(consts: &BoundConstants, traj: &FlowTrajectory) -> Option<f64> {
    let initial = traj.diagnostics.first()?.reward_gap;
    traj.times.iter().copied().find(|&t| {
        t >= 1.0
            && thm42_bounds(consts, t, 0.0).is_ok_and(|(upper, _)| upper < 0.1 * initial)
    })
}

/// Log-linear fit of the flow's value gap over the window starting at
/// [`flow_window_start`]; the expected slope is `−Δ`.
pub fn flow_rate_fit(consts: &BoundConstants, traj: &FlowTrajectory) -> Result<FittedExponent> {
    let start = flow_window_start(consts, traj).ok_or(Error::WindowTooSmall(0))?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .zip(&traj.diagnostics)
        .filter(|(&t, d)| t >= start && d.reward_gap > 0.0)
        .map(|(&t, d)| (t, d.reward_gap))
        .unzip();
    let fit = rate_fit(&xs, &ys, FitModel::LogLinear)?;
    Ok(FittedExponent { fit, expected: -consts.delta, window: (start, *xs.last().unwrap()) })
}

/// Log-log fit of the gap of a σ-flow trajectory over `window`; expected slope `−1/(σ−1)`.
pub fn sigma_rate_fit(
    traj: &FlowTrajectory,
    sigma: f64,
    window: (f64, f64),
) -> Result<FittedExponent> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .zip(&traj.diagnostics)
        .filter(|(&t, _)| t >= window.0 && t <= window.1)
        .map(|(&t, d)| (t, d.reward_gap))
        .unzip();
    let fit = rate_fit(&xs, &ys, FitModel::LogLog)?;
    Ok(FittedExponent { fit, expected: -1.0 / (sigma - 1.0), window })
}

/// First iterate at which the measured gap is at most 10% of the initial gap.
pub fn npg_window_start(run: &NpgRun) -> Option<usize> {
    let initial = run.diagnostics.first()?.reward_gap;
    run.diagnostics
        .iter()
        .find(|d| d.k >= 1 && d.reward_gap <= 0.1 * initial)
        .map(|d| d.k)
}

/// Log-linear fit of the NPG value gap against `k`; expected slope `−Δη`.
pub fn npg_rate_fit(consts: &BoundConstants, run: &NpgRun) -> Result<FittedExponent> {
    let start = npg_window_start(run).ok_or(Error::WindowTooSmall(0))?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = run
        .diagnostics
        .iter()
        .filter(|d| d.k >= start && d.reward_gap > 0.0)
        .map(|d| (d.k as f64, d.reward_gap))
        .unzip();
    let fit = rate_fit(&xs, &ys, FitModel::LogLinear)?;
    let last = *xs.last().unwrap();
    Ok(FittedExponent { fit, expected: -consts.delta * run.eta, window: (start as f64, last) })
}

/// Every certificate that applies to a Kakade flow trajectory.
pub fn certify_flow(
    mdp: &MdpInstance,
    reference: &FlowReference,
    consts: &BoundConstants,
    pi0: &Policy,
    traj: &FlowTrajectory,
) -> Result<BoundReport> {
    let mut rep = BoundReport::new(Some(consts.clone()), cert_tol(mdp));
    let opt = &reference.opt;
    let a_star = &opt.bundle.adv;
    let mut prev_reward = f64::NEG_INFINITY;
    for ((&t, pi), diag) in traj.times.iter().zip(&traj.policies).zip(&traj.diagnostics) {
        rep.push("reward_monotone", t, diag.reward, Some(prev_reward), None);
        prev_reward = diag.reward;
        if t > 0.0 {
            rep.push("sublinear_value", t, diag.reward_gap, Some(0.0), Some(consts.dk_star / t));
            let adv = mdp::evaluate_policy(mdp, pi)?.adv;
            let slack = &adv - a_star;
            let hi = slack.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lo = slack.fold(f64::INFINITY, |m, &x| m.min(x));
            rep.push("sublinear_advantage_upper", t, hi, None, Some(consts.dk_star / t));
            rep.push(
                "sublinear_advantage_lower",
                t,
                lo,
                Some(-consts.gamma * consts.dk_star / t),
                None,
            );
        }
        if t < 1.0 {
            continue;
        }
        let d = geometry::occupancy_of(mdp, pi)?.d;
        let (upper, lower) = thm42_bounds(consts, t, consts.min_d_offmass(&d))?;
        rep.push("value_gap", t, diag.reward_gap, Some(lower), Some(upper));
        let (upper, lower) = thm44_bounds(consts, t)?;
        rep.push("policy_divergence", t, diag.dk_to_pistar, Some(lower), upper);
        let (eu, el) = flow_entry_bounds(consts, opt, pi0, t, consts.dk_star)?;
        let (worst_up, worst_lo) = entry_margins(pi.probs(), &eu, &el);
        rep.push("entry_upper_margin", t, worst_up, None, Some(0.0));
        rep.push("entry_lower_margin", t, worst_lo, Some(0.0), None);
    }
    Ok(rep)
}

/// Largest `π − upper` and smallest `π − lower` over all entries.
fn entry_margins(p: &Array2<f64>, upper: &Array2<f64>, lower: &Array2<f64>) -> (f64, f64) {
    let mut up = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for ((x, u), l) in p.iter().zip(upper.iter()).zip(lower.iter()) {
        up = up.max(x - u);
        lo = lo.min(x - l);
    }
    (up, lo)
}

/// Certificates for an unregularized NPG run.
pub fn certify_npg(
    mdp: &MdpInstance,
    opt: &OptimalStructure,
    consts: &BoundConstants,
    pi0: &Policy,
    run: &NpgRun,
) -> Result<BoundReport> {
    let consts = consts.clone().with_npg(run.eta);
    let mut rep = BoundReport::new(Some(consts.clone()), cert_tol(mdp));
    let tol_progress = 1e-10;
    let eta = run.eta;
    let bound_num = consts.dk_star + 2.0 * eta * consts.r_inf / (1.0 - consts.gamma);
    let a_star = &opt.bundle.adv;
    let mut prev_v: Option<Array1<f64>> = None;
    for (i, diag) in run.diagnostics.iter().enumerate() {
        let k = diag.k;
        let kf = k as f64;
        let pi = &run.iterates[i];
        let vb = mdp::evaluate_policy(mdp, pi)?;
        if let (Some(lhs), Some(rhs)) = (diag.progress_lhs, diag.progress_rhs) {
            rep.push("progress", kf, lhs - rhs, Some(-tol_progress), None);
            rep.push("progress_rhs_nonnegative", kf, rhs, Some(-tol_progress), None);
        }
        if let Some(z) = diag.min_z {
            rep.push("min_z", kf, z, Some(1.0 - 1e-12), None);
        }
        if let Some(prev) = &prev_v {
            let worst = (&vb.v - prev).fold(f64::INFINITY, |m, &x| m.min(x));
            rep.push("value_monotone", kf, worst, Some(-tol_progress), None);
        }
        prev_v = Some(vb.v.clone());
        if k == 0 {
            continue;
        }
        let value_gap = (&opt.bundle.v - &vb.v).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        rep.push("sublinear_value", kf, value_gap, Some(0.0), Some(bound_num / (eta * kf)));
        let slack = &vb.adv - a_star;
        let hi = slack.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lo = slack.fold(f64::INFINITY, |m, &x| m.min(x));
        rep.push("sublinear_advantage_upper", kf, hi, None, Some(bound_num / (eta * kf)));
        rep.push(
            "sublinear_advantage_lower",
            kf,
            lo,
            Some(-consts.gamma * bound_num / (eta * kf)),
            None,
        );
        let d = geometry::occupancy_of(mdp, pi)?.d;
        let (upper, lower) = thm47_bounds(&consts, k, consts.min_d_offmass(&d))?;
        rep.push("value_gap", kf, diag.reward_gap, Some(lower), Some(upper));
        let log_pi = &run.log_iterates[i];
        let (lu, ll) = npg_entry_log_bounds(&consts, opt, pi0, k)?;
        let (up, lo) = entry_margins(log_pi, &lu, &ll);
        rep.push("entry_log_upper_margin", kf, up, None, Some(0.0));
        rep.push("entry_log_lower_margin", kf, lo, Some(0.0), None);
        let (lu, ll) = npg_entry_log_bounds_from_first(&consts, opt, &run.log_iterates[1], k)?;
        let (up, lo) = entry_margins(log_pi, &lu, &ll);
        rep.push("entry_log_upper_margin_from_first", kf, up, None, Some(0.0));
        rep.push("entry_log_lower_margin_from_first", kf, lo, Some(0.0), None);
    }
    Ok(rep)
}

/// Contraction and overall-error certificates for a regularized NPG run started at
/// `run.iterates[0]`.
pub fn certify_regularized_npg(
    mdp: &MdpInstance,
    consts: &BoundConstants,
    run: &NpgRun,
) -> Result<BoundReport> {
    let (eta, tau) = (run.eta, run.tau);
    let c_cen = cen_constant(mdp, &run.iterates[0], eta, tau)?;
    let consts = consts.clone().with_cen(c_cen);
    let mut rep = BoundReport::new(Some(consts.clone()), cert_tol(mdp));
    for diag in run.diagnostics.iter().skip(1) {
        let k = diag.k - 1;
        let kf = diag.k as f64;
        let (qb, lb) = contraction_bounds(c_cen, eta, tau, k);
        if let Some(q) = diag.q_dist_tau {
            rep.push("regularized_q_contraction", kf, q, None, Some(qb));
        }
        if let Some(l) = diag.logpi_dist_tau {
            rep.push("regularized_logpi_contraction", kf, l, None, Some(lb));
        }
        if tau <= 1.0 && k >= 1 {
            let upper = thm61_overall(&consts, k, eta, tau)?;
            rep.push("overall_error", kf, diag.reward_gap, Some(0.0), Some(upper));
        }
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularizationErrorReport {
    pub report: BoundReport,
    /// Largest grid `τ` at which the exponential estimate beats the linear one.
    pub tau_crossover: Option<f64>,
}

/// `0 ≤ R* − R(π*_τ) ≤ τ D_K(π*, π0)` on a grid of `τ`, plus the exponential estimate
/// at `t = 1/τ` for `τ ≤ 1`.
pub fn prop23_check(
    mdp: &MdpInstance,
    pi0: &Policy,
    tau_grid: &[f64],
    solver_tol: f64,
) -> Result<RegularizationErrorReport> {
    let reference = FlowReference::new(mdp, pi0)?;
    let dk_star = geometry::kakade_divergence(mdp, &reference.pi_star, pi0)?;
    let consts = BoundConstants::compute(mdp, &reference.opt, pi0, &reference.pi_star).ok();
    let mut rep = BoundReport::new(consts.clone(), cert_tol(mdp));
    let mut crossover: Option<f64> = None;
    for &tau in tau_grid {
        let sol = regularized::solve_entropy_regularized(mdp, pi0, tau, solver_tol)?;
        let gap = reference.opt.reward_gap(mdp, &sol.pi_star_tau)?;
        let linear = tau * dk_star;
        rep.push("regularization_error", tau, gap, Some(0.0), Some(linear));
        if let Some(c) = &consts {
            if tau <= 1.0 {
                let (expo, _) = thm42_bounds(c, 1.0 / tau, 0.0)?;
                rep.push("regularization_error_exponential", tau, gap, None, Some(expo));
                if expo < linear && crossover.is_none_or(|x| tau > x) {
                    crossover = Some(tau);
                }
            }
        }
    }
    Ok(RegularizationErrorReport { report: rep, tau_crossover: crossover })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bandit3() -> (MdpInstance, BoundConstants, FlowReference) {
        let mdp = generators::bandit(&[1.0, 0.5, 0.0]).unwrap();
        let (c, r) = BoundConstants::for_instance(&mdp, &Policy::uniform(1, 3)).unwrap();
        (mdp, c, r)
    }

    #[test]
    fn bandit3_constants() {
        let (_, c, _) = bandit3();
        assert_eq!(c.delta, 0.5);
        assert!((c.dk_star - 3f64.ln()).abs() < 1e-12);
        assert!((c.c_unif - 3f64.ln()).abs() < 1e-12);
        assert!(c.c_unif <= 3f64.ln() + 1e-12);
        assert!((c.min_dstar_pi0_off - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn value_bounds_at_one() {
        let (_, c, _) = bandit3();
        let (upper, _) = thm42_bounds(&c, 1.0, 0.0).unwrap();
        assert!((upper - 2.0).abs() < 1e-15);
        assert!(thm42_bounds(&c, 0.5, 0.0).is_err());
    }

    #[test]
    fn value_upper_decreasing_past_turning_point() {
        let (_, c, _) = bandit3();
        let t0 = c.c_flow / c.delta + 1.0;
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let t = t0 + 0.5 * i as f64;
            let (u, _) = thm42_bounds(&c, t, 0.0).unwrap();
            assert!(u < prev);
            prev = u;
        }
    }

    #[test]
    fn divergence_bound_applicability() {
        let (_, c, _) = bandit3();
        let (upper, _) = thm44_bounds(&c, 1.0).unwrap();
        assert!(upper.is_none());
        let (upper, _) = thm44_bounds(&c, 200.0).unwrap();
        let x = (-c.delta * 199.0 + c.c_flow * 200f64.ln()).exp();
        assert!((upper.unwrap() / x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn npg_value_bounds_at_one() {
        let (_, c, _) = bandit3();
        let c = c.with_npg(0.5);
        let (upper, _) = thm47_bounds(&c, 1, 0.0).unwrap();
        assert!((upper - 2.0 * c.c_npg.unwrap().exp()).abs() < 1e-12);
    }

    #[test]
    fn overall_bound_tends_to_first_term() {
        let (_, c, _) = bandit3();
        let tau: f64 = 0.2;
        let first = 2.0 * c.delta.exp() * tau.powf(-c.c_unif) * (-c.delta / tau).exp();
        let c = c.with_cen(3.0);
        let u = thm61_overall(&c, 100_000, 1.0, tau).unwrap();
        assert!((u - first).abs() < 1e-12);
        assert!(thm61_overall(&c, 10, 6.0, tau).is_err());
        assert!(thm61_overall(&c, 10, 1.0, 1.5).is_err());
    }

    #[test]
    fn exact_fits() {
        let xs: Vec<f64> = (0..20).map(|i| 0.5 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (-2.0 * x).exp()).collect();
        let f = rate_fit(&xs, &ys, FitModel::LogLinear).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-10 && (f.r2 - 1.0).abs() < 1e-12);
        let xs: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.powf(-0.5)).collect();
        let f = rate_fit(&xs, &ys, FitModel::LogLog).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-10);
        assert!(matches!(rate_fit(&xs[..5], &ys[..5], FitModel::LogLog), Err(Error::WindowTooSmall(5))));
        assert!(matches!(
            rate_fit(&[1.0; 12], &[1.0; 12], FitModel::LogLinear),
            Err(Error::DegenerateDesign)
        ));
    }

    #[test]
    fn noisy_fit_reports_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| (-0.3 * x + 0.2 * (rng.gen::<f64>() - 0.5)).exp()).collect();
        let f = rate_fit(&xs, &ys, FitModel::LogLinear).unwrap();
        assert!(f.r2 > 0.9 && f.r2 < 1.0);
        assert!((f.slope + 0.3).abs() < 0.02);
    }

    #[test]
    fn report_verdicts() {
        let mut rep = BoundReport::new(None, 1e-9);
        rep.push("a", 1.0, 0.5, Some(0.0), Some(1.0));
        assert!(rep.passed());
        rep.push("b", 2.0, 1.5, None, Some(1.0));
        assert!(!rep.passed());
        assert_eq!(rep.failures().count(), 1);
    }
}
