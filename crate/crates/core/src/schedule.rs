//! Variance-preserving noise schedules, continuous and discretized.
//!
//! The schedule fixes the pair `(alpha_t, sigma_t)` with
//! `alpha_t^2 + sigma_t^2 = 1`. The continuous family uses a linear noise
//! rate `beta(t) = beta_min + t (beta_max - beta_min)` on `t in [0, 1]`,
//! giving `alpha_t = exp(-B(t)/2)` with `B` the integral of `beta`. The
//! discrete family tabulates per-step rates `beta_i` whose products
//! reproduce the classical discrete-time construction.
//!
//! Conventions used throughout the crate:
//! - `r(t) = d log alpha / dt`, `g^2(t) = nu_dot sigma^2` with
//!   `nu = log(sigma^2 / alpha^2)`; for this family `g^2(t) = beta(t)`.
//! - The posterior noise level `tilde_sigma2(s, t)` is the default
//!   variance-preserving choice; it equals `sigma_s^2 (1 - e^{nu_s - nu_t})`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

/// Snapshot of the schedule at one time.
#[derive(Clone, Copy, Debug)]
pub struct SchedulePoint<T> {
    pub t: T,
    pub alpha: T,
    pub sigma: T,
    pub sigma2: T,
    /// Log signal-to-noise complement, log(sigma^2 / alpha^2).
    pub nu: T,
}

/// Time derivatives at one time (continuous schedules only).
#[derive(Clone, Copy, Debug)]
pub struct DynamicsPoint<T> {
    /// d log alpha / dt.
    pub r: T,
    /// Squared diffusion coefficient, nu_dot * sigma^2.
    pub g2: T,
    pub d_alpha_dt: T,
    pub d_sigma2_dt: T,
    /// Equal to g2 for this schedule family; kept separate so drift
    /// formulas can distinguish the noise-injection term structurally.
    pub nu_dot_sigma2: T,
}

#[derive(Clone, Debug)]
enum Kind<T> {
    Continuous { t_min: T },
    Discrete { steps: usize, betas: Vec<T>, alpha_bar: Vec<T>, one_minus_alpha_bar: Vec<T> },
}

#[derive(Clone, Debug)]
pub struct Schedule<T> {
    beta_min: T,
    beta_max: T,
    kind: Kind<T>,
}

/// Tolerance for matching a requested time to the discrete grid.
const GRID_EPS: f64 = 1e-9;

impl<T: Real> Schedule<T> {
    pub fn continuous(beta_min: T, beta_max: T, t_min: T) -> Result<Self> {
        Self::validate_rates(beta_min, beta_max)?;
        if !(t_min > T::zero() && t_min < T::one()) {
            return Err(Error::Config(format!(
                "t_min must lie strictly inside (0, 1), got {t_min}"
            )));
        }
        Ok(Schedule { beta_min, beta_max, kind: Kind::Continuous { t_min } })
    }

    /// Discretization with `steps` latents at times i/steps. When every
    /// per-step rate `beta_max/steps` stays below one this matches the
    /// classical linearly spaced construction (at 1000 steps: 1e-4 to 0.02).
    /// For coarse grids that construction is invalid (rates reach 1), so the
    /// rates are chosen to reproduce the continuous schedule's signal decay
    /// exactly: beta_i = 1 - exp(-(B(i/N) - B((i-1)/N))).
    pub fn discrete(beta_min: T, beta_max: T, steps: usize) -> Result<Self> {
        Self::validate_rates(beta_min, beta_max)?;
        if steps == 0 {
            return Err(Error::Config("discrete schedule needs at least one step".into()));
        }
        let n = T::of(steps as f64);
        let mut betas = Vec::with_capacity(steps);
        if steps >= 2 && beta_max / n < T::one() {
            let lo = beta_min / n;
            let hi = beta_max / n;
            let span = T::of((steps - 1) as f64);
            for i in 0..steps {
                betas.push(lo + (hi - lo) * T::of(i as f64) / span);
            }
        } else {
            let b = |t: T| beta_min * t + t * t * (beta_max - beta_min) / T::of(2.0);
            for i in 1..=steps {
                let db = b(T::of(i as f64) / n) - b(T::of((i - 1) as f64) / n);
                betas.push(-(-db).exp_m1());
            }
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut one_minus = Vec::with_capacity(steps + 1);
        alpha_bar.push(T::one());
        one_minus.push(T::zero());
        for (i, &beta) in betas.iter().enumerate() {
            let keep = T::one() - beta;
            alpha_bar.push(alpha_bar[i] * keep);
            one_minus.push(one_minus[i] * keep + beta);
        }
        Ok(Schedule {
            beta_min,
            beta_max,
            kind: Kind::Discrete { steps, betas, alpha_bar, one_minus_alpha_bar: one_minus },
        })
    }

    /// The rates used in the reference experiments.
    pub fn standard_continuous() -> Self {
        Schedule::continuous(T::of(0.1), T::of(20.0), T::of(1e-3)).expect("valid constants")
    }

    pub fn standard_discrete(steps: usize) -> Result<Self> {
        Schedule::discrete(T::of(0.1), T::of(20.0), steps)
    }

    fn validate_rates(beta_min: T, beta_max: T) -> Result<()> {
        if beta_min > T::zero() && beta_max >= beta_min && beta_max.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "noise rates must satisfy 0 < beta_min <= beta_max, got [{beta_min}, {beta_max}]"
            )))
        }
    }

    /// Integral of beta from 0 to t.
    fn b_int(&self, t: T) -> T {
        self.beta_min * t + t * t * (self.beta_max - self.beta_min) / T::of(2.0)
    }

    fn beta(&self, t: T) -> T {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, Kind::Discrete { .. })
    }

    pub fn steps(&self) -> Option<usize> {
        match &self.kind {
            Kind::Discrete { steps, .. } => Some(*steps),
            Kind::Continuous { .. } => None,
        }
    }

    pub fn discrete_betas(&self) -> Option<&[T]> {
        match &self.kind {
            Kind::Discrete { betas, .. } => Some(betas),
            Kind::Continuous { .. } => None,
        }
    }

    /// Latent times of the discrete grid, 0/N through N/N.
    pub fn grid(&self) -> Option<Vec<T>> {
        self.steps().map(|n| {
            (0..=n).map(|i| T::of(i as f64) / T::of(n as f64)).collect()
        })
    }

    /// Index of a grid time, if `t` sits on the grid.
    fn grid_index(&self, t: T) -> Result<usize> {
        let Kind::Discrete { steps, .. } = &self.kind else {
            return Err(Error::Domain {
                what: "grid_index",
                detail: "continuous schedule has no grid".into(),
            });
        };
        let scaled = (t * T::of(*steps as f64)).as_f64();
        let i = scaled.round();
        if (scaled - i).abs() > GRID_EPS || i < 0.0 || i > *steps as f64 {
            return Err(Error::Domain {
                what: "discrete time",
                detail: format!("time {t} is not on the {steps}-step grid"),
            });
        }
        Ok(i as usize)
    }

    /// Earliest latent time: t_min for continuous schedules, 1/N for
    /// discrete ones. The reconstruction term conditions on the latent at
    /// this time.
    pub fn t_lo(&self) -> T {
        match &self.kind {
            Kind::Continuous { t_min } => *t_min,
            Kind::Discrete { steps, .. } => T::one() / T::of(*steps as f64),
        }
    }

    /// Decoder scale: the noise level at the first latent, floored at 1e-2
    /// so the reconstruction likelihood stays well conditioned.
    pub fn sigma_rec(&self) -> T {
        let s = self.at(self.t_lo()).expect("t_lo is always valid").sigma;
        s.max(T::of(1e-2))
    }

    pub fn at(&self, t: T) -> Result<SchedulePoint<T>> {
        match &self.kind {
            Kind::Continuous { .. } => {
                if !(t >= T::zero() && t <= T::one()) {
                    return Err(Error::Domain {
                        what: "time",
                        detail: format!("continuous schedule is defined on [0, 1], got {t}"),
                    });
                }
                let b = self.b_int(t);
                let alpha = (-b / T::of(2.0)).exp();
                // 1 - exp(-B) without cancellation for small B.
                let sigma2 = -(-b).exp_m1();
                let nu = sigma2.ln() + b;
                Ok(SchedulePoint { t, alpha, sigma: sigma2.sqrt(), sigma2, nu })
            }
            Kind::Discrete { alpha_bar, one_minus_alpha_bar, .. } => {
                let i = self.grid_index(t)?;
                let ab = alpha_bar[i];
                let sigma2 = one_minus_alpha_bar[i];
                Ok(SchedulePoint {
                    t,
                    alpha: ab.sqrt(),
                    sigma: sigma2.sqrt(),
                    sigma2,
                    nu: (sigma2 / ab).ln(),
                })
            }
        }
    }

    /// Time derivatives of the schedule; continuous schedules only.
    pub fn dynamics_at(&self, t: T) -> Result<DynamicsPoint<T>> {
        if self.is_discrete() {
            return Err(Error::Domain {
                what: "dynamics",
                detail: "time derivatives are defined for continuous schedules only".into(),
            });
        }
        let p = self.at(t)?;
        let beta = self.beta(t);
        let r = -beta / T::of(2.0);
        Ok(DynamicsPoint {
            r,
            g2: beta,
            d_alpha_dt: r * p.alpha,
            d_sigma2_dt: beta * p.alpha * p.alpha,
            nu_dot_sigma2: beta,
        })
    }

    /// Default posterior noise level for conditioning z_s on z_t (s < t):
    /// `(sigma_t^2 - (alpha_t/alpha_s)^2 sigma_s^2) * sigma_s^2 / sigma_t^2`.
    /// Zero at s = 0 (the final ancestral step is deterministic).
    pub fn tilde_sigma2(&self, s: T, t: T) -> Result<T> {
        if !(s < t) {
            return Err(Error::Domain {
                what: "posterior times",
                detail: format!("tilde_sigma2 requires s < t, got s = {s}, t = {t}"),
            });
        }
        let ps = self.at(s)?;
        let pt = self.at(t)?;
        let ratio = pt.alpha / ps.alpha;
        Ok((pt.sigma2 - ratio * ratio * ps.sigma2) * ps.sigma2 / pt.sigma2)
    }

    /// Draw a time from the density proportional to 1/g^2(t) on
    /// [t_min, 1] and return `(t, 1/p(t))`. Multiplying an integrand by the
    /// returned weight makes the draw an unbiased estimate of its integral;
    /// since the diffusion integrand carries a 1/g^2 factor, this choice
    /// cancels the schedule scale and reduces variance.
    pub fn importance_sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(T, T)> {
        let Kind::Continuous { t_min } = &self.kind else {
            return Err(Error::Domain {
                what: "time sampling",
                detail: "importance sampling of time applies to continuous schedules".into(),
            });
        };
        let t_min = *t_min;
        let u = T::unit_uniform(rng);
        if self.beta_max == self.beta_min {
            // Constant g^2: the density is uniform.
            let t = t_min + (T::one() - t_min) * u;
            return Ok((t, T::one() - t_min));
        }
        let span = self.beta_max - self.beta_min;
        let b_lo = self.beta(t_min);
        let b_hi = self.beta(T::one());
        // Normalizer of 1/beta(t) on [t_min, 1].
        let z = (b_hi / b_lo).ln() / span;
        // Inverse CDF: beta(t) = b_lo (b_hi/b_lo)^u.
        let t = (b_lo * (b_hi / b_lo).powf(u) - self.beta_min) / span;
        let t = t.max(t_min).min(T::one());
        Ok((t, z * self.beta(t)))
    }

    /// Uniform time on [t_min, 1] with its integration weight (1 - t_min).
    pub fn uniform_time<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(T, T)> {
        let Kind::Continuous { t_min } = &self.kind else {
            return Err(Error::Domain {
                what: "time sampling",
                detail: "uniform time sampling applies to continuous schedules".into(),
            });
        };
        let u = T::unit_uniform(rng);
        let t = *t_min + (T::one() - *t_min) * u;
        Ok((t, T::one() - *t_min))
    }

    /// The f64 configuration that rebuilds this schedule exactly.
    pub fn config(&self) -> ScheduleConfig {
        match &self.kind {
            Kind::Continuous { t_min } => ScheduleConfig::Continuous {
                beta_min: self.beta_min.as_f64(),
                beta_max: self.beta_max.as_f64(),
                t_min: t_min.as_f64(),
            },
            Kind::Discrete { steps, .. } => ScheduleConfig::Discrete {
                beta_min: self.beta_min.as_f64(),
                beta_max: self.beta_max.as_f64(),
                steps: *steps,
            },
        }
    }
}

/// Serializable schedule description (configs and checkpoints).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleConfig {
    Continuous {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
        #[serde(default = "default_t_min")]
        t_min: f64,
    },
    Discrete {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
        steps: usize,
    },
}

fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}
fn default_t_min() -> f64 {
    1e-3
}

impl ScheduleConfig {
    pub fn build<T: Real>(&self) -> Result<Schedule<T>> {
        match *self {
            ScheduleConfig::Continuous { beta_min, beta_max, t_min } => {
                Schedule::continuous(T::of(beta_min), T::of(beta_max), T::of(t_min))
            }
            ScheduleConfig::Discrete { beta_min, beta_max, steps } => {
                Schedule::discrete(T::of(beta_min), T::of(beta_max), steps)
            }
        }
    }
}
