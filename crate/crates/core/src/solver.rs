//! Adaptive explicit Runge-Kutta integration (Dormand-Prince 5(4)).
//!
//! One general-purpose solver drives both the probability-flow sampler and
//! the exact likelihood computation, so it works on plain vector states and
//! supports integrating backward in time (pass `t1 < t0`). Step-size
//! control follows the standard embedded-error scheme: each step is
//! accepted when the RMS of the component-wise error, scaled by
//! `atol + rtol * |y|`, is at most one.

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions<T> {
    pub rtol: T,
    pub atol: T,
    /// Hard cap on accepted plus rejected steps.
    pub max_steps: usize,
    /// Initial step size magnitude; chosen automatically when `None`.
    pub h_init: Option<T>,
}

impl<T: Real> Default for OdeOptions<T> {
    fn default() -> Self {
        OdeOptions { rtol: T::of(1e-8), atol: T::of(1e-10), max_steps: 100_000, h_init: None }
    }
}

#[derive(Clone, Debug)]
pub struct OdeResult<T> {
    pub y: Vec<T>,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Number of right-hand-side evaluations.
    pub evals: usize,
}

/// Integrate `dy/dt = f(t, y)` from `t0` to `t1` (either direction).
///
/// `f` writes the derivative into its output buffer; returning an error
/// aborts the integration. The observer sees `(t, y)` at `t0` and after
/// every accepted step, ending with `t1` exactly.
pub fn integrate_observed<T, F, O>(
    mut f: F,
    t0: T,
    t1: T,
    y0: &[T],
    opts: &OdeOptions<T>,
    mut observe: O,
) -> Result<OdeResult<T>>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<()>,
    O: FnMut(T, &[T]),
{
    if !(opts.rtol > T::zero()) || !(opts.atol > T::zero()) {
        return Err(Error::Domain {
            what: "ode tolerances",
            detail: String::from("rtol and atol must be positive"),
        });
    }
    let n = y0.len();
    let span = t1 - t0;
    if span == T::zero() {
        observe(t0, y0);
        return Ok(OdeResult { y: y0.to_vec(), steps_accepted: 0, steps_rejected: 0, evals: 0 });
    }
    let dir = if span > T::zero() { T::one() } else { -T::one() };

    // Dormand-Prince coefficients. `B` is the fifth-order solution weight
    // vector; `E` is the difference against the embedded fourth-order
    // solution, so `h * E . k` estimates the local error.
    const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [&[f64]; 6] = [
        &[0.2],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B: [f64; 7] =
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k: Vec<Vec<T>> = (0..7).map(|_| vec![T::zero(); n]).collect();
    let mut y_stage = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];
    let mut evals = 0usize;

    f(t, &y, &mut k[0])?;
    evals += 1;
    observe(t, &y);

    let scaled_rms = |a: &[T], b: &[T], err: &[T], rtol: T, atol: T| -> T {
        let mut acc = T::zero();
        for i in 0..a.len() {
            let sc = atol + rtol * a[i].abs().max(b[i].abs());
            let r = err[i] / sc;
            acc = acc + r * r;
        }
        (acc / T::of(a.len() as f64)).sqrt()
    };

    // Initial step size: standard two-evaluation heuristic comparing the
    // state scale against the derivative scale, refined with one trial
    // Euler step.
    let mut h = match opts.h_init {
        Some(h0) => h0.abs() * dir,
        None => {
            let sc_rms = |v: &[T]| -> T {
                let mut acc = T::zero();
                for i in 0..n {
                    let sc = opts.atol + opts.rtol * y[i].abs();
                    let r = v[i] / sc;
                    acc = acc + r * r;
                }
                (acc / T::of(n as f64)).sqrt()
            };
            let d0 = sc_rms(&y);
            let d1 = sc_rms(&k[0]);
            let tiny = T::of(1e-10);
            let mut h0 = if d0 < tiny || d1 < tiny {
                T::of(1e-6)
            } else {
                T::of(0.01) * d0 / d1
            };
            h0 = h0.min(span.abs());
            for i in 0..n {
                y_stage[i] = y[i] + dir * h0 * k[0][i];
            }
            f(t + dir * h0, &y_stage, &mut k[1])?;
            evals += 1;
            let mut acc = T::zero();
            for i in 0..n {
                let sc = opts.atol + opts.rtol * y[i].abs();
                let r = (k[1][i] - k[0][i]) / sc;
                acc = acc + r * r;
            }
            let d2 = (acc / T::of(n as f64)).sqrt() / h0;
            let h1 = if d1.max(d2) <= T::of(1e-15) {
                (h0 * T::of(1e-3)).max(T::of(1e-6))
            } else {
                (T::of(0.01) / d1.max(d2)).powf(T::of(0.2))
            };
            (T::of(100.0) * h0).min(h1).min(span.abs()) * dir
        }
    };

    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut just_rejected = false;

    loop {
        if (t - t1) * dir >= T::zero() {
            break;
        }
        let eps_t = T::of(f64::EPSILON * 16.0) * t.abs().max(T::one());
        let remaining = t1 - t;
        // Within round-off of the endpoint: snap to it rather than asking
        // the controller for a sub-epsilon step.
        if remaining.abs() <= eps_t {
            t = t1;
            observe(t, &y);
            break;
        }
        if accepted + rejected >= opts.max_steps {
            return Err(Error::Domain {
                what: "ode integration",
                detail: format!(
                    "exceeded {} steps at t = {} (accepted {accepted}, rejected {rejected})",
                    opts.max_steps,
                    t.as_f64()
                ),
            });
        }
        // Do not step past the endpoint; a clamped step lands on it exactly.
        let mut final_step = false;
        if h.abs() > remaining.abs() {
            h = remaining;
            final_step = true;
        }
        if h.abs() < eps_t {
            return Err(Error::StepSizeUnderflow { t: t.as_f64(), err: f64::NAN });
        }

        // Stages 2..=6 (k[0] is fresh from FSAL or the initial evaluation).
        for s in 0..6 {
            for i in 0..n {
                let mut acc = T::zero();
                for (j, &aij) in A[s].iter().enumerate() {
                    acc = acc + T::of(aij) * k[j][i];
                }
                y_stage[i] = y[i] + h * acc;
            }
            let ts = t + T::of(C[s]) * h;
            f(ts, &y_stage, &mut k[s + 1])?;
            evals += 1;
        }
        // Fifth-order solution and embedded error estimate.
        for i in 0..n {
            let mut acc = T::zero();
            let mut eacc = T::zero();
            for j in 0..7 {
                acc = acc + T::of(B[j]) * k[j][i];
                eacc = eacc + T::of(E[j]) * k[j][i];
            }
            y_new[i] = y[i] + h * acc;
            y_stage[i] = h * eacc; // reuse y_stage as the error buffer
        }
        let norm = scaled_rms(&y, &y_new, &y_stage, opts.rtol, opts.atol);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "ode error estimate at t = {}",
                t.as_f64()
            )));
        }

        if norm <= T::one() {
            t = if final_step { t1 } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            // FSAL: the last stage of an accepted step is the first stage
            // of the next one.
            k.swap(0, 6);
            accepted += 1;
            observe(t, &y);
            let mut factor =
                (T::of(0.9) * norm.max(T::of(1e-12)).powf(T::of(-0.2))).min(T::of(5.0));
            if just_rejected {
                factor = factor.min(T::one());
            }
            just_rejected = false;
            h = h * factor.max(T::of(0.2));
        } else {
            rejected += 1;
            just_rejected = true;
            let factor = (T::of(0.9) * norm.powf(T::of(-0.2))).max(T::of(0.2));
            h = h * factor;
            let eps_t = T::of(f64::EPSILON * 16.0) * t.abs().max(T::one());
            if h.abs() < eps_t {
                return Err(Error::StepSizeUnderflow { t: t.as_f64(), err: norm.as_f64() });
            }
            // A rejected step invalidated the FSAL stage? No: k[0] still
            // holds f(t, y), which is what the retry needs.
        }
    }

    Ok(OdeResult { y, steps_accepted: accepted, steps_rejected: rejected, evals })
}

/// [`integrate_observed`] without an observer.
pub fn integrate<T, F>(f: F, t0: T, t1: T, y0: &[T], opts: &OdeOptions<T>) -> Result<OdeResult<T>>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<()>,
{
    integrate_observed(f, t0, t1, y0, opts, |_, _| {})
}
