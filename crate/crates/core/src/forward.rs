//! Forward-process algebra: marginals, posteriors, score, and the
//! data-conditional SDE drift.
//!
//! The latent marginal is `q(z_t | x) = N(alpha_t F(x, t), sigma_t^2 I)`.
//! Conditioning a later latent on an earlier one uses the posterior
//!
//! ```text
//! q(z_s | z_t, x) = N(mu, tilde_sigma2 I),
//! mu = alpha_s F(x, s) + k (z_t - alpha_t F(x, t)),
//! k  = sqrt(sigma_s^2 - tilde_sigma2) / sigma_t,
//! ```
//!
//! which reproduces the marginal at `s` for any noise split
//! `0 <= tilde_sigma2 <= sigma_s^2` (mean maps to mean, and
//! `k^2 sigma_t^2 + tilde_sigma2 = sigma_s^2`). The continuous-time limit
//! of these transitions is a reverse-time SDE conditioned on the data; its
//! drift is [`forward_sde_drift`].

use crate::error::{Error, Result};
use crate::num::Real;
use crate::schedule::Schedule;
use crate::transform::Transform;

#[derive(Clone, Debug)]
pub struct PosteriorParams<T> {
    pub mean: Vec<T>,
    /// Isotropic variance tilde_sigma2.
    pub variance: T,
}

fn check_dims<T: Real>(transform: &Transform<T>, x: &[T], other: Option<&[T]>) -> Result<()> {
    if x.len() != transform.dim() {
        return Err(Error::DimMismatch {
            what: "data vector",
            expected: transform.dim(),
            got: x.len(),
        });
    }
    if let Some(o) = other {
        if o.len() != x.len() {
            return Err(Error::DimMismatch {
                what: "latent vector",
                expected: x.len(),
                got: o.len(),
            });
        }
    }
    Ok(())
}

/// Mean of the latent marginal, alpha_t F(x, t).
pub fn marginal_mean<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    t: T,
) -> Result<Vec<T>> {
    check_dims(transform, x, None)?;
    let p = schedule.at(t)?;
    let f = transform.apply(x, t)?;
    Ok(f.iter().map(|&fj| p.alpha * fj).collect())
}

/// Reparameterized draw from the marginal: z_t = alpha_t F(x, t) + sigma_t eps.
/// The noise is caller-supplied so gradients can flow through the sample.
pub fn marginal_sample<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    t: T,
    eps: &[T],
) -> Result<Vec<T>> {
    check_dims(transform, x, Some(eps))?;
    let p = schedule.at(t)?;
    let f = transform.apply(x, t)?;
    Ok(f.iter().zip(eps).map(|(&fj, &ej)| p.alpha * fj + p.sigma * ej).collect())
}

/// Posterior parameters with the schedule's default noise split.
pub fn posterior_params<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    z_t: &[T],
    s: T,
    t: T,
) -> Result<PosteriorParams<T>> {
    let var = schedule.tilde_sigma2(s, t)?;
    posterior_params_with_var(transform, schedule, x, z_t, s, t, var)
}

/// Posterior parameters with an explicit noise split tilde_sigma2 in
/// [0, sigma_s^2]. Zero gives the deterministic (DDIM-style) transition.
pub fn posterior_params_with_var<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    z_t: &[T],
    s: T,
    t: T,
    tilde_sigma2: T,
) -> Result<PosteriorParams<T>> {
    check_dims(transform, x, Some(z_t))?;
    if !(s < t) {
        return Err(Error::Domain {
            what: "posterior times",
            detail: format!("posterior requires s < t, got s = {s}, t = {t}"),
        });
    }
    let ps = schedule.at(s)?;
    let pt = schedule.at(t)?;
    let gap = ps.sigma2 - tilde_sigma2;
    if tilde_sigma2 < T::zero() || gap < -T::of(1e-14) {
        return Err(Error::Domain {
            what: "posterior variance",
            detail: format!(
                "tilde_sigma2 must lie in [0, sigma_s^2]: {tilde_sigma2} vs {}",
                ps.sigma2
            ),
        });
    }
    let k = gap.max(T::zero()).sqrt() / pt.sigma;
    let f_s = transform.apply(x, s)?;
    let f_t = transform.apply(x, t)?;
    let mean = f_s
        .iter()
        .zip(&f_t)
        .zip(z_t)
        .map(|((&fs, &ft), &z)| ps.alpha * fs + k * (z - pt.alpha * ft))
        .collect();
    Ok(PosteriorParams { mean, variance: tilde_sigma2 })
}

/// Conditional score of the Gaussian marginal:
/// (alpha_t F(x, t) - z) / sigma_t^2.
pub fn score<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    z: &[T],
    t: T,
) -> Result<Vec<T>> {
    check_dims(transform, x, Some(z))?;
    let p = schedule.at(t)?;
    if p.sigma2 <= T::zero() {
        return Err(Error::Domain {
            what: "score",
            detail: format!("score undefined at noise-free time {t}"),
        });
    }
    let f = transform.apply(x, t)?;
    Ok(f.iter().zip(z).map(|(&fj, &zj)| (p.alpha * fj - zj) / p.sigma2).collect())
}

/// Drift of the data-conditional SDE (reverse time flow):
/// alpha Fdot + r z - (d sigma^2/dt - 2 r sigma^2 + nu_dot sigma^2)/2 * score.
/// Its exact transitions are the posteriors above, so simulating it from
/// t = 1 preserves the marginals `N(alpha_t F(x, t), sigma_t^2 I)`.
/// Continuous schedules only. Diffusion coefficient: g(t).
pub fn forward_sde_drift<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    z: &[T],
    t: T,
) -> Result<Vec<T>> {
    check_dims(transform, x, Some(z))?;
    let p = schedule.at(t)?;
    let d = schedule.dynamics_at(t)?;
    let sc = score(transform, schedule, x, z, t)?;
    let fdot = transform.time_derivative(x, t)?;
    let half = T::of(0.5);
    let coef = half * (d.d_sigma2_dt - T::of(2.0) * d.r * p.sigma2 + d.nu_dot_sigma2);
    Ok(fdot
        .iter()
        .zip(z)
        .zip(&sc)
        .map(|((&fd, &zj), &sj)| p.alpha * fd + d.r * zj - coef * sj)
        .collect())
}
