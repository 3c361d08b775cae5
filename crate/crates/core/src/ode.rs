//! Explicit Dormand–Prince 5(4) integrator with PI step-size control.
//!
//! Steps are clipped so that every requested output time is hit exactly; no dense
//! output is used.

use ndarray::Array1;

use crate::error::{Error, Result};

pub trait OdeSystem {
    fn rhs(&self, t: f64, y: &Array1<f64>) -> Result<Array1<f64>>;

    /// Rejects states outside the domain of the vector field; the step is retried smaller.
    fn admissible(&self, _y: &Array1<f64>) -> bool {
        true
    }

    /// Applied to every accepted state (e.g. to remove normalization drift).
    fn correct(&self, _y: &mut Array1<f64>) {}
}

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub atol: f64,
    pub rtol: f64,
    pub h_init: Option<f64>,
    pub max_steps: usize,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { atol: tol, rtol: tol, h_init: None, max_steps: 5_000_000 }
    }
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self::with_tol(1e-10)
    }
}

#[derive(Clone, Debug, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;

fn lincomb(y: &Array1<f64>, h: f64, terms: &[(f64, &Array1<f64>)]) -> Array1<f64> {
    let mut out = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            out.scaled_add(h * c, k);
        }
    }
    out
}

/// Integrates from `t_out[0]` with initial state `y0` and returns the state at every
/// entry of `t_out` (the first being `y0` itself).
pub fn integrate<S: OdeSystem>(
    sys: &S,
    y0: &Array1<f64>,
    t_out: &[f64],
    opts: &OdeOptions,
) -> Result<(Vec<Array1<f64>>, OdeStats)> {
    if t_out.is_empty() {
        return Ok((Vec::new(), OdeStats::default()));
    }
    if t_out.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("output times must be strictly increasing".into()));
    }
    if !(opts.atol > 0.0 && opts.rtol > 0.0) {
        return Err(Error::InvalidParameter("ODE tolerances must be positive".into()));
    }
    let mut stats = OdeStats::default();
    let mut t = t_out[0];
    let mut y = y0.clone();
    let mut out = Vec::with_capacity(t_out.len());
    out.push(y.clone());

    let mut k1 = sys.rhs(t, &y)?;
    stats.evaluations += 1;
    let span = t_out[t_out.len() - 1] - t;
    let mut h = opts.h_init.unwrap_or_else(|| initial_step(&y, &k1, opts).min(span));
    let mut err_prev: f64 = 1e-4;

    for &target in &t_out[1..] {
        while t < target {
            if stats.accepted + stats.rejected >= opts.max_steps {
                return Err(Error::MaxIterations {
                    iterations: opts.max_steps,
                    residual: target - t,
                });
            }
            let remaining = target - t;
            let last = h >= remaining * (1.0 - 1e-12);
            let step = if last { remaining } else { h };
            if step < 1e-14 * t.abs().max(1.0) {
                return Err(Error::StepSizeUnderflow { t });
            }

            let k2 = sys.rhs(t + C2 * step, &lincomb(&y, step, &[(A21, &k1)]))?;
            let k3 = sys.rhs(t + C3 * step, &lincomb(&y, step, &[(A31, &k1), (A32, &k2)]))?;
            let k4 = sys.rhs(
                t + C4 * step,
                &lincomb(&y, step, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
            )?;
            let k5 = sys.rhs(
                t + C5 * step,
                &lincomb(&y, step, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
            )?;
            let k6 = sys.rhs(
                t + step,
                &lincomb(&y, step, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
            )?;
            let y_new = lincomb(&y, step, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
            stats.evaluations += 5;

            if !sys.admissible(&y_new) || y_new.iter().any(|x| !x.is_finite()) {
                stats.rejected += 1;
                h = step * 0.25;
                continue;
            }
            let k7 = sys.rhs(t + step, &y_new)?;
            stats.evaluations += 1;

            let mut sq = 0.0;
            for i in 0..y.len() {
                let e = step
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                sq += (e / sc).powi(2);
            }
            let err = (sq / y.len().max(1) as f64).sqrt();

            if err <= 1.0 {
                let fac = if err == 0.0 {
                    FAC_MAX
                } else {
                    (SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)).clamp(FAC_MIN, FAC_MAX)
                };
                err_prev = err.max(1e-4);
                t = if last { target } else { t + step };
                y = y_new;
                sys.correct(&mut y);
                // `correct` may move the state, so the FSAL stage is not reused.
                k1 = sys.rhs(t, &y)?;
                stats.evaluations += 1;
                stats.accepted += 1;
                // A step shortened to hit the grid says nothing about the natural step size.
                h = if last && step < h { h } else { step * fac };
            } else {
                stats.rejected += 1;
                let fac = (SAFETY * err.powf(-ALPHA)).clamp(FAC_MIN, 1.0);
                h = step * fac;
            }
        }
        out.push(y.clone());
    }
    Ok((out, stats))
}

fn initial_step(y: &Array1<f64>, f: &Array1<f64>, opts: &OdeOptions) -> f64 {
    let n = y.len().max(1) as f64;
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..y.len() {
        let sc = opts.atol + opts.rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (f[i] / sc).powi(2);
    }
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
}
