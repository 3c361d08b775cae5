//! Acceptance suite: one line per criterion, nonzero exit if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 3 7`.

mod common;

use std::time::Instant;

use entroflow::bounds::{self, BoundConstants};
use entroflow::flow::{self, FlowReference};
use entroflow::generators;
use entroflow::geometry::{self, TangentField};
use entroflow::mdp::{self, ActionFaces, MdpInstance, Policy};
use entroflow::npg;
use entroflow::regularized::{self, SigmaRegularizer};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn bandit3() -> MdpInstance {
    generators::bandit(&[1.0, 0.5, 0.0]).unwrap()
}

fn twocycle() -> MdpInstance {
    generators::fig1_twocycle(0.9, 1.0, None).unwrap()
}

/// Garnets used by the rate criteria.
fn rate_garnets() -> Vec<(String, MdpInstance)> {
    (1..=5u64)
        .map(|seed| {
            (format!("garnet(6,3,2,γ=0.8,seed={seed})"), generators::garnet(6, 3, 2, 0.8, seed).unwrap())
        })
        .collect()
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

// ---------------------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_case = (0.0, 0.0);
    let mut cases = 0;
    for seed in 0..10u64 {
        let (ns, na) = (4 + (seed as usize % 3), 2 + (seed as usize % 3));
        let mdp = generators::garnet(ns, na, 2, 0.9, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for _ in 0..100 {
            let pi = common::random_policy(&mut rng, ns, na);
            let w = common::random_tangent(&mut rng, ns, na);
            // |h·w| ≤ 5e-7 while every entry of π exceeds 1e-2, so π ± h·w stays interior.
            let grad = geometry::kakade_gradient(&mdp, &pi).unwrap();
            let tangent = TangentField::new(w.clone()).unwrap();
            let analytic = geometry::kakade_inner(&mdp, &pi, &grad, &tangent).unwrap();
            let plus = common::reward_by_iteration(&mdp, &(pi.probs() + &(&w * h)));
            let minus = common::reward_by_iteration(&mdp, &(pi.probs() - &(&w * h)));
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs();
            if rel > worst {
                worst = rel;
                worst_case = (analytic, fd);
            }
            cases += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-5,
        detail: format!(
            "{cases} directions, worst relative error {worst:.2e} (limit 1e-5) at derivative {:.3e} (finite difference {:.3e})",
            worst_case.0, worst_case.1
        ),
    }
}

fn central_path() -> Outcome {
    let mut worst: f64 = 0.0;
    for mdp in [twocycle(), bandit3()] {
        let pi0 = Policy::uniform(mdp.n_states(), mdp.n_actions());
        for t in [1.0, 2.0, 5.0, 10.0] {
            let kl = flow::central_path_check(&mdp, &pi0, t, 1e-12, 1e-13).unwrap();
            worst = worst.max(kl);
        }
    }
    Outcome {
        pass: worst <= 1e-5,
        detail: format!("worst max-state KL {worst:.2e} over t in {{1,2,5,10}} (limit 1e-5)"),
    }
}

struct RateRun {
    name: String,
    mdp: MdpInstance,
    consts: BoundConstants,
    reference: FlowReference,
    pi0: Policy,
    traj: flow::FlowTrajectory,
}

/// Grid covering the transient and, densely, the window where the value bound is below
/// a tenth of the initial gap, continued for another `25/Δ`.
fn rate_run(name: String, mdp: MdpInstance, horizon: Option<f64>) -> RateRun {
    let pi0 = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let (consts, reference) = BoundConstants::for_instance(&mdp, &pi0).unwrap();
    let gap0 = reference.opt.reward_gap(&mdp, &pi0).unwrap();
    let mut t_w = 1.0;
    while bounds::thm42_bounds(&consts, t_w, 0.0).unwrap().0 >= 0.1 * gap0 {
        t_w *= 1.01;
    }
    let t_end = horizon.unwrap_or(t_w + 25.0 / consts.delta).max(t_w + 25.0 / consts.delta);
    let early = flow::geometric_grid(1e-2, t_w, 40).unwrap();
    let window = linspace(t_w, t_end, 80);
    let grid = flow::merge_grids(&[&early, &window]);
    let traj = flow::integrate_kakade_flow_with(&mdp, &reference, &pi0, &grid, 1e-12).unwrap();
    RateRun { name, mdp, consts, reference, pi0, traj }
}

fn rate_instances() -> Vec<(String, MdpInstance)> {
    let mut v = vec![("twocycle(γ=0.9)".to_string(), twocycle())];
    v.extend(rate_garnets());
    v
}

fn exponential_rate() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, mdp) in rate_instances() {
        let run = rate_run(name, mdp, None);
        let fit = bounds::flow_rate_fit(&run.consts, &run.traj).unwrap();
        let rel = (fit.fit.slope / fit.expected - 1.0).abs();
        let rep = bounds::certify_flow(&run.mdp, &run.reference, &run.consts, &run.pi0, &run.traj)
            .unwrap();
        let bad = rep.rows.iter().filter(|r| r.check == "value_gap" && !r.pass).count();
        let ok = rel <= 0.10 && bad == 0;
        pass &= ok;
        parts.push(format!(
            "{}: slope {:.4} vs {:.4} ({:.1}%), sandwich violations {bad}",
            run.name,
            fit.fit.slope,
            fit.expected,
            100.0 * rel
        ));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn policy_convergence() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut instances = rate_instances();
    instances.push(("bandit3".into(), bandit3()));
    for (name, mdp) in instances {
        let delta = mdp::optimal_structure(&mdp, mdp::default_tie_tol(&mdp))
            .unwrap()
            .delta
            .finite()
            .unwrap();
        let t_final = 40.0 / delta;
        let run = rate_run(name, mdp, Some(t_final));
        let rep = bounds::certify_flow(&run.mdp, &run.reference, &run.consts, &run.pi0, &run.traj)
            .unwrap();
        let rows: Vec<_> = rep.rows.iter().filter(|r| r.check == "policy_divergence").collect();
        let applicable = rows.iter().filter(|r| r.upper.is_some()).count();
        let bad = rows.iter().filter(|r| !r.pass).count();
        let bias = flow::implicit_bias_check(&run.mdp, &run.pi0, t_final, 1e-12).unwrap();
        let entry = common::max_abs_diff(bias.flow_point.probs(), bias.limit.probs());
        let ok = bad == 0 && bias.dk_to_limit <= 1e-4 && entry <= 1e-4;
        pass &= ok;
        parts.push(format!(
            "{}: {bad} violations ({applicable} upper-applicable points), D_K at 40/Δ {:.1e}, entry diff {:.1e}",
            run.name, bias.dk_to_limit, entry
        ));
    }
    Outcome { pass, detail: parts.join("; ") }
}

/// Certificates on every instance; the slope fit is required where the asymptotic regime
/// is reached within 200 iterations (BANDIT3, two-cycle) and reported otherwise.
fn discrete_npg() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut instances = vec![
        ("bandit3".to_string(), bandit3(), true),
        ("twocycle(γ=0.9)".into(), twocycle(), true),
    ];
    instances.extend(rate_garnets().into_iter().take(2).map(|(n, m)| (n, m, false)));
    let wanted = ["progress", "value_monotone", "sublinear_value", "value_gap"];
    let mut rows = 0;
    for (name, mdp, fit_required) in instances {
        let pi0 = Policy::uniform(mdp.n_states(), mdp.n_actions());
        let (consts, reference) = BoundConstants::for_instance(&mdp, &pi0).unwrap();
        for eta in [0.1, 0.5, 1.0] {
            let run = npg::npg_run_unregularized_with(&mdp, &reference.opt, &pi0, eta, 200).unwrap();
            let rep = bounds::certify_npg(&mdp, &reference.opt, &consts, &pi0, &run).unwrap();
            let mut bad: Vec<&str> = rep
                .rows
                .iter()
                .filter(|r| wanted.contains(&r.check.as_str()))
                .inspect(|_| rows += 1)
                .filter(|r| !r.pass)
                .map(|r| r.check.as_str())
                .collect();
            let (fit_ok, fit_txt) = match bounds::npg_rate_fit(&consts, &run) {
                Ok(f) => {
                    let rel = (f.fit.slope / f.expected - 1.0).abs();
                    (rel <= 0.10, format!("slope {:.4} vs {:.4} ({:.1}%)", f.fit.slope, f.expected, 100.0 * rel))
                }
                Err(e) => (false, format!("no fit: {e}")),
            };
            let n_bad = bad.len();
            bad.dedup();
            pass &= n_bad == 0 && (fit_ok || !fit_required);
            let tag = if fit_required { "" } else { " [slope informational]" };
            parts.push(format!("{name} η={eta}: {fit_txt}{tag}, violations {n_bad} {bad:?}"));
        }
    }
    Outcome { pass, detail: format!("{rows} certificate rows; {}", parts.join("; ")) }
}

fn information_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_proj: f64 = 0.0;
    let mut below_grid = true;
    for case in 0..50 {
        let na = 2 + case % 2;
        let reference = common::random_policy(&mut rng, 1, na).into_probs().row(0).to_owned();
        let mut face = vec![false; na];
        while !face.iter().any(|&b| b) {
            for f in face.iter_mut() {
                *f = rng.gen_bool(0.6);
            }
        }
        let (_, kl) = geometry::face_information_projection(reference.view(), &face).unwrap();
        let grid = grid_min_kl(&reference, &face);
        worst_proj = worst_proj.max((kl - grid).abs());
        below_grid &= kl <= grid + 1e-12;
    }

    let mut worst_eq: f64 = 0.0;
    let mut worst_ineq = f64::INFINITY;
    for case in 0..20u64 {
        let mdp = generators::garnet(4, 3, 2, 0.85, 60 + case).unwrap();
        let pi0 = common::random_policy(&mut rng, 4, 3);
        let mask: Vec<Vec<bool>> = (0..4)
            .map(|_| loop {
                let row: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.5)).collect();
                if row.iter().any(|&b| b) {
                    break row;
                }
            })
            .collect();
        let faces = ActionFaces::new(mask.clone()).unwrap();
        let raw = common::random_policy(&mut rng, 4, 3).into_probs();
        let masked = Array2::from_shape_fn((4, 3), |(s, a)| if mask[s][a] { raw[[s, a]] } else { 0.0 });
        let sums = masked.sum_axis(ndarray::Axis(1));
        let pi = Policy::new(Array2::from_shape_fn((4, 3), |(s, a)| masked[[s, a]] / sums[s])).unwrap();
        let gap = geometry::pythagoras_check(&mdp, &pi0, &faces, &pi).unwrap().gap;
        worst_eq = worst_eq.max(gap.abs());
        worst_ineq = worst_ineq.min(gap);
    }
    Outcome {
        pass: worst_proj <= 1e-5 && below_grid && worst_eq <= 1e-6 && worst_ineq >= -1e-8,
        detail: format!(
            "projection vs 1e-3 grid: worst {worst_proj:.1e} (limit 1e-5, closed form never above grid: {below_grid}); \
             Pythagoras on face classes: worst |gap| {worst_eq:.1e} (limit 1e-6), min gap {worst_ineq:.1e} (limit -1e-8)"
        ),
    }
}

/// Minimum of `KL(p‖reference)` over face-supported `p` on a grid of spacing 1e-3.
fn grid_min_kl(reference: &Array1<f64>, face: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..face.len()).filter(|&a| face[a]).collect();
    let q: Vec<f64> = idx.iter().map(|&a| reference[a]).collect();
    let n = 1000usize;
    let mut best = f64::INFINITY;
    match idx.len() {
        1 => best = common::kl(&[1.0], &q),
        2 => {
            for i in 0..=n {
                let x = i as f64 / n as f64;
                best = best.min(common::kl(&[x, 1.0 - x], &q));
            }
        }
        _ => {
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
                    best = best.min(common::kl(&[x, y, (1.0 - x - y).max(0.0)], &q));
                }
            }
        }
    }
    best
}

fn sigma_rates() -> Outcome {
    let mdp = bandit3();
    let pi0 = Policy::uniform(1, 3);
    let opt = mdp::optimal_structure(&mdp, mdp::default_tie_tol(&mdp)).unwrap();
    let reference = FlowReference::new(&mdp, &pi0).unwrap();
    let consts = BoundConstants::compute(&mdp, &opt, &pi0, &reference.pi_star).unwrap();
    let tol = bounds::cert_tol(&mdp);
    let mut pass = true;
    let mut parts = Vec::new();
    for sigma in [1.5, 2.0, 3.0] {
        let reg = SigmaRegularizer::new(sigma).unwrap();
        let grid = flow::merge_grids(&[
            &flow::geometric_grid(1e-2, 10.0, 30).unwrap(),
            &flow::geometric_grid(10.0, 100.0, 40).unwrap(),
        ]);
        let traj = flow::integrate_sigma_flow(&mdp, &reg, &pi0, &grid, 1e-11).unwrap();
        let fit = bounds::sigma_rate_fit(&traj, sigma, (10.0, 100.0)).unwrap();
        let rel = (fit.fit.slope / fit.expected - 1.0).abs();
        let dpsi = regularized::sigma_potential_eval(&reg, &mdp, &opt.greedy, &pi0).ok();
        let mut violations = 0;
        for (&t, pi) in traj.times.iter().zip(&traj.policies) {
            if t < 1.0 {
                continue;
            }
            let (up, lo) = bounds::sigma_entry_bounds(&reg, &consts, &opt, &pi0, dpsi, t).unwrap();
            for ((p, u), l) in pi.probs().iter().zip(up.iter()).zip(lo.iter()) {
                if *p > u + tol || *p < l - tol {
                    violations += 1;
                }
            }
        }
        let ok = rel <= 0.15 && violations == 0;
        pass &= ok;
        parts.push(format!(
            "σ={sigma}: slope {:.4} vs {:.4} ({:.1}%), entry-bound violations {violations}",
            fit.fit.slope,
            fit.expected,
            100.0 * rel
        ));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn overall_error() -> Outcome {
    let mdp = bandit3();
    let pi0 = Policy::uniform(1, 3);
    let (consts, _) = BoundConstants::for_instance(&mdp, &pi0).unwrap();
    let delta = consts.delta;
    let etas = [0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];
    let ks: Vec<usize> = (4..=12).map(|p| 1usize << p).collect();
    let mut cells = 0;
    let mut violations = 0;
    let mut contraction_violations = 0;
    let mut ratio_parts = Vec::new();
    let mut ratios_ok = true;
    for &eta in &etas {
        let mut final_gap = std::collections::BTreeMap::new();
        for &k in &ks {
            let tau = (2.0 * delta / (eta * k as f64)).sqrt();
            let run = npg::npg_run_regularized(&mdp, eta, tau, k + 1).unwrap();
            let rep = bounds::certify_regularized_npg(&mdp, &consts, &run).unwrap();
            cells += 1;
            violations += rep.rows.iter().filter(|r| r.check == "overall_error" && !r.pass).count();
            contraction_violations += rep.rows.iter().filter(|r| r.check != "overall_error" && !r.pass).count();
            final_gap.insert(k, run.diagnostics.last().unwrap().reward_gap);
        }
        if eta == 0.5 || eta == 1.0 {
            let measured = final_gap[&4096] / final_gap[&64];
            let model = (-(delta * eta * 4096.0 / 2.0).sqrt()).exp() / (-(delta * eta * 64.0 / 2.0).sqrt()).exp();
            let ratio = measured / model;
            ratios_ok &= (0.1..=10.0).contains(&ratio);
            ratio_parts.push(format!("η={eta}: measured/model {ratio:.3}"));
        }
    }
    Outcome {
        pass: cells >= 100 && violations == 0 && ratios_ok,
        detail: format!(
            "{cells} (η,k) cells, every iterate certified: {violations} violations (contraction-bound violations {contraction_violations}); {}",
            ratio_parts.join(", ")
        ),
    }
}

fn structural_identities() -> Outcome {
    let instances = vec![
        twocycle(),
        bandit3(),
        generators::garnet(6, 3, 3, 0.9, 7).unwrap(),
        generators::garnet(5, 4, 2, 0.7, 11).unwrap(),
        generators::chain(5, 0.8).unwrap(),
    ];
    let mut worst = [0.0f64; 8];
    let names = [
        "pullback",
        "conditional decomposition",
        "performance difference",
        "regularization error sandwich",
        "Lipschitz",
        "advantage centering",
        "polytope constraints",
        "occupancy vs oracle",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for mdp in &instances {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let g = mdp.gamma();
        for _ in 0..100 {
            let pi1 = common::random_policy(&mut rng, ns, na);
            let pi2 = common::random_policy(&mut rng, ns, na);
            let o1 = geometry::occupancy_of(mdp, &pi1).unwrap();
            let o2 = geometry::occupancy_of(mdp, &pi2).unwrap();
            let dk = geometry::kakade_divergence(mdp, &pi1, &pi2).unwrap();
            let ckl = geometry::conditional_kl(&o1, &o2).unwrap();
            worst[0] = worst[0].max((dk - ckl).abs());
            let joint = common::kl(o1.nu.as_slice().unwrap(), o2.nu.as_slice().unwrap());
            let marg = common::kl(o1.d.as_slice().unwrap(), o2.d.as_slice().unwrap());
            worst[1] = worst[1].max((joint - marg - ckl).abs());
            let (lhs, rhs) = mdp::performance_difference(mdp, &pi1, &pi2).unwrap();
            let oracle = common::reward_by_iteration(mdp, pi1.probs())
                - common::reward_by_iteration(mdp, pi2.probs());
            worst[2] = worst[2].max((lhs - rhs).abs()).max((lhs - oracle).abs());
            let tau = 10f64.powf(rng.gen_range(-2.0..0.5));
            let rep = bounds::prop23_check(mdp, &pi1, &[tau], 1e-13).unwrap().report;
            for row in rep.rows.iter().filter(|r| r.check == "regularization_error") {
                let excess = (row.lower.unwrap() - row.quantity).max(row.quantity - row.upper.unwrap());
                worst[3] = worst[3].max(excess.max(0.0));
            }
            let (l, r) = bounds::lipschitz_check(mdp, &pi1, &pi2).unwrap();
            worst[4] = worst[4].max((l - r).max(0.0));
            let adv = mdp::evaluate_policy(mdp, &pi1).unwrap().adv;
            let centering = (&adv * pi1.probs()).sum_axis(ndarray::Axis(1));
            worst[5] = worst[5].max(centering.fold(0.0f64, |m, &x| m.max(x.abs())));
            let res = o1.polytope_residuals(mdp);
            let floor = (0..ns).map(|s| ((1.0 - g) * mdp.mu()[s] - o1.d[s]).max(0.0)).fold(0.0, f64::max);
            worst[6] = worst[6].max(res.fold(0.0f64, |m, &x| m.max(x.abs()))).max(floor);
            let d_oracle = common::state_distribution_by_iteration(mdp, pi1.probs());
            worst[7] = worst[7].max((&d_oracle - &o1.d).fold(0.0f64, |m, &x| m.max(x.abs())));
        }
    }
    let pass = worst.iter().all(|&w| w <= 1e-10);
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome { pass, detail: format!("worst absolute deviations over 500 cases (limit 1e-10): {detail}") }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("central path", central_path),
        ("exponential value rate", exponential_rate),
        ("policy convergence and implicit bias", policy_convergence),
        ("discrete natural policy gradient", discrete_npg),
        ("information projection", information_projection),
        ("sigma-family rates", sigma_rates),
        ("overall error of regularized NPG", overall_error),
        ("structural identities", structural_identities),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|&i| (1..=9).contains(&i))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} [{name}]: {verdict} ({:.1}s) — {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
        if !outcome.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
