//! Variational training objectives.
//!
//! The negative evidence lower bound decomposes into three parts:
//!
//! * a reconstruction term at the smallest time on the schedule,
//! * a diffusion term (a sum of per-step posterior KLs on a discrete
//!   schedule, or a time integral in the continuous limit), and
//! * a prior term comparing the fully-noised marginal to the standard
//!   normal.
//!
//! Every estimator comes in two forms that must agree to round-off:
//! a plain value path (used for evaluation and as a test oracle) and a
//! tape path that also produces gradients with respect to the noise
//! network parameters (group 0) and the transform parameters (group 1).
//! The `*_with` variants take the random draws explicitly so callers can
//! replay the same stochastic loss at perturbed parameters, which is what
//! the finite-difference checks do.

use rand::Rng;

use crate::error::{Error, Result};
use crate::forward;
use crate::model::{NdmModel, ALPHA_SINGULAR};
use crate::nn::tape::{NodeId, Tape};
use crate::num::Real;
use crate::schedule::Schedule;
use crate::transform::Transform;

/// Tape parameter group holding the noise network parameters.
pub const GROUP_THETA: usize = 0;
/// Tape parameter group holding the transform parameters.
pub const GROUP_PHI: usize = 1;

/// Loss components for one batch, all in nats per example.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<T> {
    pub l_prior: T,
    pub l_rec: T,
    pub l_diff: T,
    pub total: T,
    pub batch_size: usize,
}

/// Flat gradients for the two parameter groups. `phi` is empty when the
/// transform has no learnable parameters.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub theta: Vec<T>,
    pub phi: Vec<T>,
}

/// Random draws behind one discrete-schedule loss sample.
#[derive(Clone, Debug)]
pub struct DiscreteDraw<T> {
    /// Grid index of the KL step, in `2..=steps`.
    pub index: usize,
    pub eps: Vec<T>,
    pub eps_rec: Vec<T>,
}

/// Random draws behind one continuous-schedule loss sample.
#[derive(Clone, Debug)]
pub struct ContinuousDraw<T> {
    pub t: T,
    /// Importance weight `1 / p(t)` for the time density used.
    pub weight: T,
    pub eps: Vec<T>,
    pub eps_rec: Vec<T>,
}

/// Random draws behind one noise-matching loss sample.
#[derive(Clone, Debug)]
pub struct SimpleDraw<T> {
    pub t: T,
    pub eps: Vec<T>,
}

fn normal_vec<T: Real, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<T> {
    (0..dim).map(|_| T::std_normal(rng)).collect()
}

fn require_steps<T: Real>(schedule: &Schedule<T>) -> Result<usize> {
    let steps = schedule.steps().ok_or(Error::Domain {
        what: "discrete objective",
        detail: String::from("the schedule is continuous; use the continuous loss"),
    })?;
    if steps < 2 {
        return Err(Error::Domain {
            what: "discrete objective",
            detail: format!("needs at least 2 steps to form a posterior KL, got {steps}"),
        });
    }
    Ok(steps)
}

pub fn sample_discrete_draws<T: Real, R: Rng + ?Sized>(
    schedule: &Schedule<T>,
    dim: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<DiscreteDraw<T>>> {
    let steps = require_steps(schedule)?;
    Ok((0..n)
        .map(|_| DiscreteDraw {
            index: rng.gen_range(2..=steps),
            eps: normal_vec(dim, rng),
            eps_rec: normal_vec(dim, rng),
        })
        .collect())
}

pub fn sample_continuous_draws<T: Real, R: Rng + ?Sized>(
    schedule: &Schedule<T>,
    dim: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ContinuousDraw<T>>> {
    (0..n)
        .map(|_| {
            let (t, weight) = schedule.importance_sample_time(rng)?;
            Ok(ContinuousDraw {
                t,
                weight,
                eps: normal_vec(dim, rng),
                eps_rec: normal_vec(dim, rng),
            })
        })
        .collect()
}

/// Times for the noise-matching loss: uniform over the grid (discrete) or
/// uniform on `[t_min, 1]` (continuous). No importance weight is needed
/// because the loss is an unweighted expectation over time.
pub fn sample_simple_draws<T: Real, R: Rng + ?Sized>(
    schedule: &Schedule<T>,
    dim: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SimpleDraw<T>>> {
    (0..n)
        .map(|_| {
            let t = if let Some(steps) = schedule.steps() {
                let grid = schedule.grid().expect("discrete schedule has a grid");
                grid[rng.gen_range(1..=steps)]
            } else {
                schedule.uniform_time(rng)?.0
            };
            Ok(SimpleDraw { t, eps: normal_vec(dim, rng) })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Value path
// ---------------------------------------------------------------------------

/// KL between the two posteriors `q(z_s | z_t, x)` and `q(z_s | z_t, x_hat)`
/// for `s < t`. The latent `z_t` cancels out of the difference of posterior
/// means, so it does not appear here.
pub fn diffusion_kl<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    x_hat: &[T],
    s: T,
    t: T,
) -> Result<T> {
    let var = schedule.tilde_sigma2(s, t)?;
    if var <= T::zero() {
        return Err(Error::DeterministicPosterior { s: s.as_f64(), t: t.as_f64() });
    }
    let ps = schedule.at(s)?;
    let pt = schedule.at(t)?;
    let k = (ps.sigma2 - var).max(T::zero()).sqrt() / pt.sigma;
    let f_x_s = transform.apply(x, s)?;
    let f_xh_s = transform.apply(x_hat, s)?;
    let f_x_t = transform.apply(x, t)?;
    let f_xh_t = transform.apply(x_hat, t)?;
    let mut sum = T::zero();
    for j in 0..f_x_s.len() {
        let d = ps.alpha * (f_x_s[j] - f_xh_s[j]) + k * pt.alpha * (f_xh_t[j] - f_x_t[j]);
        sum = sum + d * d;
    }
    Ok(sum / (T::of(2.0) * var))
}

/// Instantaneous KL rate: the limit of `T * KL(t - 1/T, t)` as the grid is
/// refined. With score residual `ds = alpha (F(x,t) - F(x_hat,t)) / sigma^2`
/// and drift residual `dV = dF/dt(x,t) - dF/dt(x_hat,t)`, this is
/// `|| alpha dV - g^2 ds ||^2 / (2 g^2)`.
pub fn continuous_integrand<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    x_hat: &[T],
    t: T,
) -> Result<T> {
    let dy = schedule.dynamics_at(t)?;
    let pt = schedule.at(t)?;
    let g2 = dy.nu_dot_sigma2;
    if g2 <= T::zero() || pt.sigma2 <= T::zero() {
        return Err(Error::Domain {
            what: "diffusion rate",
            detail: format!("needs g^2 > 0 and sigma^2 > 0 at t = {}", t.as_f64()),
        });
    }
    let (f_x, fd_x) = transform.value_and_time_derivative(x, t)?;
    let (f_xh, fd_xh) = transform.value_and_time_derivative(x_hat, t)?;
    let mut sum = T::zero();
    for j in 0..f_x.len() {
        let ds = pt.alpha * (f_x[j] - f_xh[j]) / pt.sigma2;
        let dv = fd_x[j] - fd_xh[j];
        let inner = pt.alpha * dv - g2 * ds;
        sum = sum + inner * inner;
    }
    Ok(sum / (T::of(2.0) * g2))
}

/// Diffusion KL with the data prediction produced by the model from `z_t`.
pub fn kl_diffusion_term<T: Real>(
    model: &NdmModel<T>,
    x: &[T],
    z_t: &[T],
    s: T,
    t: T,
) -> Result<T> {
    let x_hat = model.xhat(z_t, t)?;
    diffusion_kl(model.transform(), model.schedule(), x, &x_hat, s, t)
}

/// KL between the fully-noised marginal `N(alpha_1 F(x,1), sigma_1^2 I)`
/// and the standard normal prior.
pub fn prior_value<T: Real>(
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
) -> Result<T> {
    let p1 = schedule.at(T::one())?;
    let f1 = transform.apply(x, T::one())?;
    let d = T::of(f1.len() as f64);
    let norm2 = f1.iter().map(|&v| v * v).sum::<T>();
    Ok(T::of(0.5) * (d * (p1.sigma2 - p1.sigma2.ln() - T::one()) + p1.alpha * p1.alpha * norm2))
}

pub fn prior_term<T: Real>(model: &NdmModel<T>, x: &[T]) -> Result<T> {
    prior_value(model.transform(), model.schedule(), x)
}

/// Negative log-likelihood of `x` under the Gaussian decoder
/// `N(x; z_near0 / alpha_lo, sigma_rec^2 I)`.
pub fn rec_value<T: Real>(x: &[T], z_near0: &[T], alpha_lo: T, sigma_rec: T) -> Result<T> {
    if x.len() != z_near0.len() {
        return Err(Error::DimMismatch {
            what: "reconstruction latent",
            expected: x.len(),
            got: z_near0.len(),
        });
    }
    if alpha_lo <= T::zero() || sigma_rec <= T::zero() {
        return Err(Error::Domain {
            what: "reconstruction decoder",
            detail: String::from("needs alpha_lo > 0 and sigma_rec > 0"),
        });
    }
    let d = T::of(x.len() as f64);
    let two_pi = T::of(2.0 * std::f64::consts::PI);
    let mut quad = T::zero();
    for (&xj, &zj) in x.iter().zip(z_near0) {
        let r = xj - zj / alpha_lo;
        quad = quad + r * r;
    }
    Ok(T::of(0.5) * d * (two_pi * sigma_rec * sigma_rec).ln()
        + quad / (T::of(2.0) * sigma_rec * sigma_rec))
}

/// Reconstruction term using the model's own smallest time and decoder width.
pub fn rec_term<T: Real>(model: &NdmModel<T>, x: &[T], z_near0: &[T]) -> Result<T> {
    let sch = model.schedule();
    let alpha_lo = sch.at(sch.t_lo())?.alpha;
    rec_value(x, z_near0, alpha_lo, sch.sigma_rec())
}

/// One unbiased estimate of the per-example bound for a given discrete draw.
pub fn nelbo_discrete_with<T: Real>(
    model: &NdmModel<T>,
    x: &[T],
    draw: &DiscreteDraw<T>,
) -> Result<T> {
    let sch = model.schedule();
    let steps = require_steps(sch)?;
    if draw.index < 2 || draw.index > steps {
        return Err(Error::Domain {
            what: "discrete objective",
            detail: format!("step index {} outside 2..={steps}", draw.index),
        });
    }
    let grid = sch.grid().expect("discrete schedule has a grid");
    let (s, t) = (grid[draw.index - 1], grid[draw.index]);
    let z_t = forward::marginal_sample(model.transform(), sch, x, t, &draw.eps)?;
    let kl = kl_diffusion_term(model, x, &z_t, s, t)?;
    let z_lo = forward::marginal_sample(model.transform(), sch, x, grid[1], &draw.eps_rec)?;
    let rec = rec_term(model, x, &z_lo)?;
    let prior = prior_term(model, x)?;
    Ok(rec + T::of((steps - 1) as f64) * kl + prior)
}

/// One unbiased estimate of the per-example bound for a given continuous draw.
pub fn nelbo_continuous_with<T: Real>(
    model: &NdmModel<T>,
    x: &[T],
    draw: &ContinuousDraw<T>,
) -> Result<T> {
    let sch = model.schedule();
    let z_t = forward::marginal_sample(model.transform(), sch, x, draw.t, &draw.eps)?;
    let x_hat = model.xhat(&z_t, draw.t)?;
    let rate = continuous_integrand(model.transform(), sch, x, &x_hat, draw.t)?;
    let z_lo = forward::marginal_sample(model.transform(), sch, x, sch.t_lo(), &draw.eps_rec)?;
    let rec = rec_term(model, x, &z_lo)?;
    let prior = prior_term(model, x)?;
    Ok(rec + draw.weight * rate + prior)
}

/// One fresh unbiased draw of the per-example bound, dispatching on the
/// schedule kind.
pub fn nelbo_draw<T: Real, R: Rng + ?Sized>(
    model: &NdmModel<T>,
    x: &[T],
    rng: &mut R,
) -> Result<T> {
    if model.schedule().is_discrete() {
        let draw = sample_discrete_draws(model.schedule(), x.len(), 1, rng)?.pop().unwrap();
        nelbo_discrete_with(model, x, &draw)
    } else {
        let draw = sample_continuous_draws(model.schedule(), x.len(), 1, rng)?.pop().unwrap();
        nelbo_continuous_with(model, x, &draw)
    }
}

// ---------------------------------------------------------------------------
// Tape path
// ---------------------------------------------------------------------------

fn check_batch<T: Real>(model: &NdmModel<T>, batch: &[Vec<T>], n_draws: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain {
            what: "training batch",
            detail: String::from("batch must not be empty"),
        });
    }
    if batch.len() != n_draws {
        return Err(Error::DimMismatch {
            what: "loss draws",
            expected: batch.len(),
            got: n_draws,
        });
    }
    for row in batch {
        if row.len() != model.dim() {
            return Err(Error::DimMismatch {
                what: "batch example",
                expected: model.dim(),
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// Noised latent `z_t = alpha F(x, t) + sigma eps` and the data prediction
/// `x_hat = (z - sigma eps_hat) / alpha`, both as tape nodes.
fn latent_and_xhat<T: Real>(
    tp: &mut Tape<'_, T>,
    model: &NdmModel<T>,
    f_t: NodeId,
    eps: &[T],
    t: T,
) -> Result<(NodeId, NodeId)> {
    let pt = model.schedule().at(t)?;
    if pt.alpha.as_f64() < ALPHA_SINGULAR {
        return Err(Error::SingularAlpha { alpha: pt.alpha.as_f64() });
    }
    let scaled_mean = tp.scale(f_t, pt.alpha);
    let noise = tp.constant(eps.iter().map(|&e| pt.sigma * e).collect());
    let z = tp.add(scaled_mean, noise);
    let (eps_hat, _) = model.eps_net().forward_tape(tp, GROUP_THETA, z, t, false)?;
    let shifted = tp.add_scaled(z, eps_hat, -pt.sigma);
    let x_hat = tp.scale(shifted, T::one() / pt.alpha);
    Ok((z, x_hat))
}

pub(crate) fn prior_node<T: Real>(
    tp: &mut Tape<'_, T>,
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x_node: NodeId,
) -> Result<NodeId> {
    let p1 = schedule.at(T::one())?;
    let f1 = transform.apply_tape(tp, GROUP_PHI, x_node, T::one())?;
    let d = T::of(tp.len_of(f1) as f64);
    let quad = tp.sum_sq(f1);
    let scaled = tp.scale(quad, T::of(0.5) * p1.alpha * p1.alpha);
    let cst = tp.scalar_const(T::of(0.5) * d * (p1.sigma2 - p1.sigma2.ln() - T::one()));
    Ok(tp.add(scaled, cst))
}

pub(crate) fn rec_node<T: Real>(
    tp: &mut Tape<'_, T>,
    transform: &Transform<T>,
    schedule: &Schedule<T>,
    x: &[T],
    x_node: NodeId,
    eps_rec: &[T],
) -> Result<NodeId> {
    let sch = schedule;
    let t_lo = sch.t_lo();
    let plo = sch.at(t_lo)?;
    let s_rec = sch.sigma_rec();
    // x - z_lo/alpha = (x - ratio * eps_rec) - F(x, t_lo) with ratio = sigma/alpha.
    let ratio = plo.sigma / plo.alpha;
    let f_lo = transform.apply_tape(tp, GROUP_PHI, x_node, t_lo)?;
    let target = tp.constant(
        x.iter().zip(eps_rec).map(|(&xj, &ej)| xj - ratio * ej).collect(),
    );
    let diff = tp.sub(target, f_lo);
    let quad = tp.sum_sq(diff);
    let scaled = tp.scale(quad, T::one() / (T::of(2.0) * s_rec * s_rec));
    let d = T::of(x.len() as f64);
    let two_pi = T::of(2.0 * std::f64::consts::PI);
    let cst = tp.scalar_const(T::of(0.5) * d * (two_pi * s_rec * s_rec).ln());
    Ok(tp.add(scaled, cst))
}

pub(crate) struct BatchAccum<T> {
    l_prior: T,
    l_rec: T,
    l_diff: T,
    total_node: Option<NodeId>,
}

impl<T: Real> BatchAccum<T> {
    pub(crate) fn new() -> Self {
        BatchAccum { l_prior: T::zero(), l_rec: T::zero(), l_diff: T::zero(), total_node: None }
    }

    pub(crate) fn push(
        &mut self,
        tp: &mut Tape<'_, T>,
        diff: NodeId,
        rec: Option<NodeId>,
        prior: Option<NodeId>,
    ) {
        self.l_diff = self.l_diff + tp.scalar(diff);
        let mut total = diff;
        if let Some(r) = rec {
            self.l_rec = self.l_rec + tp.scalar(r);
            total = tp.add(total, r);
        }
        if let Some(p) = prior {
            self.l_prior = self.l_prior + tp.scalar(p);
            total = tp.add(total, p);
        }
        self.total_node = Some(match self.total_node {
            Some(acc) => tp.add(acc, total),
            None => total,
        });
    }

    pub(crate) fn finish(self, tp: &mut Tape<'_, T>, batch: usize) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
        let inv = T::one() / T::of(batch as f64);
        let mean = tp.scale(self.total_node.expect("at least one example"), inv);
        let grads = tp.backward(mean)?;
        let mut groups = grads.into_iter();
        let theta = groups.next().unwrap_or_default();
        let phi = groups.next().unwrap_or_default();
        Ok((
            LossBreakdown {
                l_prior: self.l_prior * inv,
                l_rec: self.l_rec * inv,
                l_diff: self.l_diff * inv,
                total: tp.scalar(mean),
                batch_size: batch,
            },
            ParamGrads { theta, phi },
        ))
    }
}

/// Discrete-schedule bound and gradients for one batch with explicit draws.
pub fn loss_discrete_with<T: Real>(
    model: &NdmModel<T>,
    batch: &[Vec<T>],
    draws: &[DiscreteDraw<T>],
) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
    check_batch(model, batch, draws.len())?;
    let sch = model.schedule();
    let steps = require_steps(sch)?;
    let grid = sch.grid().expect("discrete schedule has a grid");
    let kl_scale = T::of((steps - 1) as f64);

    let mut tp = Tape::new(vec![model.theta(), model.transform().params()]);
    let mut acc = BatchAccum::new();
    for (x, draw) in batch.iter().zip(draws) {
        if draw.index < 2 || draw.index > steps {
            return Err(Error::Domain {
                what: "discrete objective",
                detail: format!("step index {} outside 2..={steps}", draw.index),
            });
        }
        let (s, t) = (grid[draw.index - 1], grid[draw.index]);
        let var = sch.tilde_sigma2(s, t)?;
        if var <= T::zero() {
            return Err(Error::DeterministicPosterior { s: s.as_f64(), t: t.as_f64() });
        }
        let ps = sch.at(s)?;
        let pt = sch.at(t)?;
        let k = (ps.sigma2 - var).max(T::zero()).sqrt() / pt.sigma;

        let x_node = tp.constant(x.clone());
        let f_t = model.transform().apply_tape(&mut tp, GROUP_PHI, x_node, t)?;
        let (_, x_hat) = latent_and_xhat(&mut tp, model, f_t, &draw.eps, t)?;
        let f_s_x = model.transform().apply_tape(&mut tp, GROUP_PHI, x_node, s)?;
        let f_s_xh = model.transform().apply_tape(&mut tp, GROUP_PHI, x_hat, s)?;
        let f_t_xh = model.transform().apply_tape(&mut tp, GROUP_PHI, x_hat, t)?;

        // alpha_s (F(x,s) - F(xh,s)) + k alpha_t (F(xh,t) - F(x,t))
        let d_s = tp.sub(f_s_x, f_s_xh);
        let d_t = tp.sub(f_t_xh, f_t);
        let d_s_scaled = tp.scale(d_s, ps.alpha);
        let mean_gap = tp.add_scaled(d_s_scaled, d_t, k * pt.alpha);
        let quad = tp.sum_sq(mean_gap);
        let kl = tp.scale(quad, T::one() / (T::of(2.0) * var));
        let diff = tp.scale(kl, kl_scale);

        let rec = rec_node(&mut tp, model.transform(), model.schedule(), x, x_node, &draw.eps_rec)?;
        let prior = prior_node(&mut tp, model.transform(), model.schedule(), x_node)?;
        acc.push(&mut tp, diff, Some(rec), Some(prior));
    }
    acc.finish(&mut tp, batch.len())
}

/// Continuous-schedule bound and gradients for one batch with explicit draws.
pub fn loss_continuous_with<T: Real>(
    model: &NdmModel<T>,
    batch: &[Vec<T>],
    draws: &[ContinuousDraw<T>],
) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
    check_batch(model, batch, draws.len())?;
    let sch = model.schedule();

    let mut tp = Tape::new(vec![model.theta(), model.transform().params()]);
    let mut acc = BatchAccum::new();
    for (x, draw) in batch.iter().zip(draws) {
        let t = draw.t;
        let dy = sch.dynamics_at(t)?;
        let pt = sch.at(t)?;
        let g2 = dy.nu_dot_sigma2;
        if g2 <= T::zero() || pt.sigma2 <= T::zero() {
            return Err(Error::Domain {
                what: "diffusion rate",
                detail: format!("needs g^2 > 0 and sigma^2 > 0 at t = {}", t.as_f64()),
            });
        }

        let x_node = tp.constant(x.clone());
        let (f_t, fd_x) =
            model.transform().apply_tape_with_dt(&mut tp, GROUP_PHI, x_node, t)?;
        let (_, x_hat) = latent_and_xhat(&mut tp, model, f_t, &draw.eps, t)?;
        let (f_xh, fd_xh) =
            model.transform().apply_tape_with_dt(&mut tp, GROUP_PHI, x_hat, t)?;

        // alpha dV - g^2 ds, with ds = alpha (F(x,t) - F(xh,t)) / sigma^2.
        let dv = tp.sub(fd_x, fd_xh);
        let df = tp.sub(f_t, f_xh);
        let dv_scaled = tp.scale(dv, pt.alpha);
        let inner = tp.add_scaled(dv_scaled, df, -(g2 * pt.alpha / pt.sigma2));
        let quad = tp.sum_sq(inner);
        let rate = tp.scale(quad, T::one() / (T::of(2.0) * g2));
        let diff = tp.scale(rate, draw.weight);

        let rec = rec_node(&mut tp, model.transform(), model.schedule(), x, x_node, &draw.eps_rec)?;
        let prior = prior_node(&mut tp, model.transform(), model.schedule(), x_node)?;
        acc.push(&mut tp, diff, Some(rec), Some(prior));
    }
    acc.finish(&mut tp, batch.len())
}

/// Noise-matching loss `|| eps - eps_hat(z_t, t) ||^2` and gradients.
/// This deliberately drops the reconstruction, prior, and posterior-KL
/// structure; it is the simplified objective used for ablations.
pub fn loss_simple_with<T: Real>(
    model: &NdmModel<T>,
    batch: &[Vec<T>],
    draws: &[SimpleDraw<T>],
) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
    check_batch(model, batch, draws.len())?;
    let mut tp = Tape::new(vec![model.theta(), model.transform().params()]);
    let mut acc = BatchAccum::new();
    for (x, draw) in batch.iter().zip(draws) {
        let t = draw.t;
        let pt = model.schedule().at(t)?;
        let x_node = tp.constant(x.clone());
        let f_t = model.transform().apply_tape(&mut tp, GROUP_PHI, x_node, t)?;
        let scaled_mean = tp.scale(f_t, pt.alpha);
        let noise = tp.constant(draw.eps.iter().map(|&e| pt.sigma * e).collect());
        let z = tp.add(scaled_mean, noise);
        let (eps_hat, _) = model.eps_net().forward_tape(&mut tp, GROUP_THETA, z, t, false)?;
        let target = tp.constant(draw.eps.clone());
        let resid = tp.sub(eps_hat, target);
        let diff = tp.sum_sq(resid);
        acc.push(&mut tp, diff, None, None);
    }
    acc.finish(&mut tp, batch.len())
}

/// Discrete-schedule bound and gradients with fresh draws.
pub fn loss_discrete<T: Real, R: Rng + ?Sized>(
    model: &NdmModel<T>,
    batch: &[Vec<T>],
    rng: &mut R,
) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
    let draws = sample_discrete_draws(model.schedule(), model.dim(), batch.len(), rng)?;
    loss_discrete_with(model, batch, &draws)
}

/// Continuous-schedule bound and gradients with fresh draws.
pub fn loss_continuous<T: Real, R: Rng + ?Sized>(
    model: &NdmModel<T>,
    batch: &[Vec<T>],
    rng: &mut R,
) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
    let draws = sample_continuous_draws(model.schedule(), model.dim(), batch.len(), rng)?;
    loss_continuous_with(model, batch, &draws)
}

/// Noise-matching loss and gradients with fresh draws.
pub fn loss_simple<T: Real, R: Rng + ?Sized>(
    model: &NdmModel<T>,
    batch: &[Vec<T>],
    rng: &mut R,
) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
    let draws = sample_simple_draws(model.schedule(), model.dim(), batch.len(), rng)?;
    loss_simple_with(model, batch, &draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Net, NetSpec, TimeEmbedding};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// KL between diagonal Gaussians, straight from the definition.
    fn gaussian_kl_diag(mu_q: &[f64], var_q: f64, mu_p: &[f64], var_p: f64) -> f64 {
        let d = mu_q.len() as f64;
        let quad: f64 = mu_q.iter().zip(mu_p).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * (d * (var_q / var_p + (var_p / var_q).ln() - 1.0) + quad / var_p)
    }

    fn eps_net(dim: usize) -> Net {
        Net::new(NetSpec {
            in_dim: dim,
            hidden: vec![6],
            out_dim: dim,
            activation: Activation::Silu,
            time_embedding: TimeEmbedding::Sinusoidal { frequencies: 2 },
        })
        .unwrap()
    }

    fn learnable_model(schedule: Schedule<f64>, dim: usize, seed: u64) -> NdmModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tr = Transform::learnable(
            dim,
            vec![5],
            Activation::Silu,
            TimeEmbedding::Sinusoidal { frequencies: 2 },
            false,
            &mut rng,
        )
        .unwrap();
        let net = eps_net(dim);
        let theta = net.init(&mut rng, false);
        NdmModel::new(schedule, tr, net, theta).unwrap()
    }

    #[test]
    fn prior_is_a_gaussian_kl_to_the_standard_normal() {
        // Sanity-check the oracle itself on a hand-computed case first:
        // KL(N((0.1, 0.2), I) || N(0, I)) = (0.01 + 0.04)/2 = 0.025 nats.
        let oracle = gaussian_kl_diag(&[0.1, 0.2], 1.0, &[0.0, 0.0], 1.0);
        assert!((oracle - 0.025).abs() < 1e-15);

        let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
        let tr = Transform::fixed_diagonal(&[4.0, 0.25]).unwrap();
        for x in [[0.8, -1.1], [0.0, 0.0], [2.5, 0.3]] {
            let p1 = sch.at(1.0).unwrap();
            let f = tr.apply(&x, 1.0).unwrap();
            let mu_q: Vec<f64> = f.iter().map(|&v| p1.alpha * v).collect();
            let want = gaussian_kl_diag(&mu_q, p1.sigma2, &[0.0, 0.0], 1.0);
            let got = prior_value(&tr, &sch, &x).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn rec_at_the_decoder_mean_is_the_entropy_constant() {
        // x exactly equal to z/alpha with unit decoder width leaves only
        // (d/2) log(2 pi).
        let x = [0.3, -0.9, 1.4];
        let alpha = 0.98;
        let z: Vec<f64> = x.iter().map(|&v| alpha * v).collect();
        let got = rec_value(&x, &z, alpha, 1.0).unwrap();
        let want = 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn diffusion_kl_matches_the_generic_gaussian_kl() {
        // The two posteriors share their variance, so the generic diagonal
        // Gaussian KL collapses to the squared mean gap; the z samples must
        // cancel exactly.
        let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in 0..3 {
            let tr: Transform<f64> = match kind {
                0 => Transform::identity(2),
                1 => Transform::fixed_diagonal(&[4.0, 0.25]).unwrap(),
                _ => Transform::learnable(
                    2,
                    vec![5],
                    Activation::Silu,
                    TimeEmbedding::Sinusoidal { frequencies: 2 },
                    false,
                    &mut rng,
                )
                .unwrap(),
            };
            for _ in 0..50 {
                let x = [f64::std_normal(&mut rng), f64::std_normal(&mut rng)];
                let xh = [f64::std_normal(&mut rng), f64::std_normal(&mut rng)];
                let t = 0.1 + 0.9 * f64::unit_uniform(&mut rng);
                let s = 0.01 + (t - 0.02) * f64::unit_uniform(&mut rng);
                let z = [f64::std_normal(&mut rng), f64::std_normal(&mut rng)];
                let var = sch.tilde_sigma2(s, t).unwrap();
                let q = forward::posterior_params(&tr, &sch, &x, &z, s, t).unwrap();
                let p = forward::posterior_params(&tr, &sch, &xh, &z, s, t).unwrap();
                let want = gaussian_kl_diag(&q.mean, var, &p.mean, var);
                let got = diffusion_kl(&tr, &sch, &x, &xh, s, t).unwrap();
                assert!((got - want).abs() < 1e-10, "kind {kind}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn step_kl_converges_to_the_continuous_rate() {
        // T * KL(t - 1/T, t) must approach the instantaneous rate at first
        // order in 1/T. The pinned rate value guards the formula against
        // accidental edits.
        let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
        let tr = Transform::<f64>::fixed_diagonal(&[4.0, 0.25]).unwrap();
        let x = [0.8, -1.1];
        let xh = [0.5, -0.6];
        let t = 0.7;
        let rate = continuous_integrand(&tr, &sch, &x, &xh, t).unwrap();
        assert!((rate - 0.028006168097782547).abs() < 1e-12, "{rate}");

        let mut prev_err = f64::NAN;
        for log_steps in 6..=12 {
            let steps = (1usize << log_steps) as f64;
            let kl = diffusion_kl(&tr, &sch, &x, &xh, t - 1.0 / steps, t).unwrap();
            let err = (steps * kl - rate).abs();
            if !prev_err.is_nan() {
                let ratio = err / prev_err;
                assert!(
                    (0.4..=0.6).contains(&ratio),
                    "halving ratio {ratio} at {steps} steps (err {err}, prev {prev_err})"
                );
            }
            prev_err = err;
        }
    }

    #[test]
    fn identity_transform_rate_reduces_to_the_score_gap_form() {
        // With F = id the drift residual vanishes and the rate collapses to
        // (g^2 / 2) || alpha (x - xh) / sigma^2 ||^2.
        let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
        let tr = Transform::identity(2);
        let x = [0.8, -1.1];
        let xh = [0.5, -0.6];
        for &t in &[0.2, 0.5, 0.9] {
            let pt = sch.at(t).unwrap();
            let g2 = sch.dynamics_at(t).unwrap().nu_dot_sigma2;
            let ds2: f64 = x
                .iter()
                .zip(&xh)
                .map(|(&a, &b)| {
                    let v = pt.alpha * (a - b) / pt.sigma2;
                    v * v
                })
                .sum();
            let want = 0.5 * g2 * ds2;
            let got = continuous_integrand(&tr, &sch, &x, &xh, t).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn deterministic_posterior_is_refused() {
        let sch = Schedule::discrete(0.1, 20.0, 10).unwrap();
        let tr = Transform::identity(1);
        let err = diffusion_kl(&tr, &sch, &[0.4], &[0.1], 0.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::DeterministicPosterior { .. }), "{err}");
    }

    #[test]
    fn discrete_loss_agrees_with_the_value_path() {
        let sch = Schedule::discrete(0.1, 20.0, 10).unwrap();
        let model = learnable_model(sch, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|_| vec![f64::std_normal(&mut rng), f64::std_normal(&mut rng)])
            .collect();
        let draws = sample_discrete_draws(model.schedule(), 2, batch.len(), &mut rng).unwrap();
        let (breakdown, _) = loss_discrete_with(&model, &batch, &draws).unwrap();
        let mean_value = batch
            .iter()
            .zip(&draws)
            .map(|(x, d)| nelbo_discrete_with(&model, x, d).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        assert!(
            (breakdown.total - mean_value).abs() < 1e-12,
            "{} vs {mean_value}",
            breakdown.total
        );
        let parts = breakdown.l_prior + breakdown.l_rec + breakdown.l_diff;
        assert!((breakdown.total - parts).abs() < 1e-12);
    }

    #[test]
    fn continuous_loss_agrees_with_the_value_path() {
        let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
        let model = learnable_model(sch, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|_| vec![f64::std_normal(&mut rng), f64::std_normal(&mut rng)])
            .collect();
        let draws = sample_continuous_draws(model.schedule(), 2, batch.len(), &mut rng).unwrap();
        let (breakdown, _) = loss_continuous_with(&model, &batch, &draws).unwrap();
        let mean_value = batch
            .iter()
            .zip(&draws)
            .map(|(x, d)| nelbo_continuous_with(&model, x, d).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        assert!(
            (breakdown.total - mean_value).abs() < 1e-12,
            "{} vs {mean_value}",
            breakdown.total
        );
    }

    /// Central finite difference of the loss in one parameter coordinate.
    fn fd_grad<F: Fn(&NdmModel<f64>) -> f64>(
        model: &NdmModel<f64>,
        loss: F,
        group: usize,
        idx: usize,
        h: f64,
    ) -> f64 {
        let mut up = model.clone();
        let mut dn = model.clone();
        match group {
            GROUP_THETA => {
                up.theta_mut()[idx] += h;
                dn.theta_mut()[idx] -= h;
            }
            _ => {
                up.transform_mut().params_mut()[idx] += h;
                dn.transform_mut().params_mut()[idx] -= h;
            }
        }
        (loss(&up) - loss(&dn)) / (2.0 * h)
    }

    fn check_grads_against_fd<F: Fn(&NdmModel<f64>) -> f64 + Copy>(
        model: &NdmModel<f64>,
        loss: F,
        grads: &ParamGrads<f64>,
        label: &str,
    ) {
        let h = 1e-5;
        // Probe a spread of coordinates in both groups rather than all of
        // them; each probe costs two full loss evaluations.
        for (group, flat) in [(GROUP_THETA, &grads.theta), (GROUP_PHI, &grads.phi)] {
            let n = flat.len();
            for idx in [0, n / 3, n / 2, 2 * n / 3, n - 1] {
                let fd = fd_grad(model, loss, group, idx, h);
                let got = flat[idx];
                let scale = fd.abs().max(got.abs()).max(1e-6);
                assert!(
                    (fd - got).abs() / scale < 1e-3,
                    "{label} group {group} idx {idx}: tape {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn discrete_loss_gradients_match_finite_differences() {
        let sch = Schedule::discrete(0.1, 20.0, 10).unwrap();
        let model = learnable_model(sch, 2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| vec![f64::std_normal(&mut rng), f64::std_normal(&mut rng)])
            .collect();
        let draws = sample_discrete_draws(model.schedule(), 2, batch.len(), &mut rng).unwrap();
        let (_, grads) = loss_discrete_with(&model, &batch, &draws).unwrap();
        let loss =
            |m: &NdmModel<f64>| loss_discrete_with(m, &batch, &draws).unwrap().0.total;
        check_grads_against_fd(&model, loss, &grads, "discrete");
    }

    #[test]
    fn continuous_loss_gradients_match_finite_differences() {
        let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
        let model = learnable_model(sch, 2, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| vec![f64::std_normal(&mut rng), f64::std_normal(&mut rng)])
            .collect();
        let draws = sample_continuous_draws(model.schedule(), 2, batch.len(), &mut rng).unwrap();
        let (_, grads) = loss_continuous_with(&model, &batch, &draws).unwrap();
        let loss =
            |m: &NdmModel<f64>| loss_continuous_with(m, &batch, &draws).unwrap().0.total;
        check_grads_against_fd(&model, loss, &grads, "continuous");
    }

    #[test]
    fn simple_loss_gradients_match_finite_differences() {
        let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
        let model = learnable_model(sch, 2, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| vec![f64::std_normal(&mut rng), f64::std_normal(&mut rng)])
            .collect();
        let draws = sample_simple_draws(model.schedule(), 2, batch.len(), &mut rng).unwrap();
        let (breakdown, grads) = loss_simple_with(&model, &batch, &draws).unwrap();
        // Value check: plain mean of || eps - eps_hat ||^2.
        let mut want = 0.0;
        for (x, d) in batch.iter().zip(&draws) {
            let pt = model.schedule().at(d.t).unwrap();
            let f = model.transform().apply(x, d.t).unwrap();
            let z: Vec<f64> = f
                .iter()
                .zip(&d.eps)
                .map(|(&fi, &ei)| pt.alpha * fi + pt.sigma * ei)
                .collect();
            let eh = model.eps_hat(&z, d.t).unwrap();
            want += eh
                .iter()
                .zip(&d.eps)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        want /= batch.len() as f64;
        assert!((breakdown.total - want).abs() < 1e-12);
        assert!(breakdown.l_rec == 0.0 && breakdown.l_prior == 0.0);

        let loss = |m: &NdmModel<f64>| loss_simple_with(m, &batch, &draws).unwrap().0.total;
        check_grads_against_fd(&model, loss, &grads, "simple");
    }

    #[test]
    fn random_step_estimator_is_unbiased_for_the_full_sum() {
        // Estimate the diffusion part two ways on a tiny model: summing the
        // per-step KL expectations directly, and averaging the single-step
        // estimator (steps - 1) * KL_i with i uniform. Both are Monte Carlo;
        // they must agree within combined standard errors.
        let steps = 16;
        let sch = Schedule::discrete(0.1, 20.0, steps).unwrap();
        let model = learnable_model(sch, 1, 31);
        let x = vec![0.7];
        let grid = model.schedule().grid().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let per_step_reps = 2_000;
        let mut sum_mean = 0.0;
        let mut sum_var = 0.0;
        for i in 2..=steps {
            let (s, t) = (grid[i - 1], grid[i]);
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..per_step_reps {
                let eps = [f64::std_normal(&mut rng)];
                let z = forward::marginal_sample(
                    model.transform(),
                    model.schedule(),
                    &x,
                    t,
                    &eps,
                )
                .unwrap();
                let kl = kl_diffusion_term(&model, &x, &z, s, t).unwrap();
                acc += kl;
                acc2 += kl * kl;
            }
            let mean = acc / per_step_reps as f64;
            let var = (acc2 / per_step_reps as f64 - mean * mean).max(0.0);
            sum_mean += mean;
            sum_var += var / per_step_reps as f64;
        }

        let est_reps = 40_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..est_reps {
            let draw = sample_discrete_draws(model.schedule(), 1, 1, &mut rng)
                .unwrap()
                .pop()
                .unwrap();
            let (s, t) = (grid[draw.index - 1], grid[draw.index]);
            let z = forward::marginal_sample(
                model.transform(),
                model.schedule(),
                &x,
                t,
                &draw.eps,
            )
            .unwrap();
            let kl = (steps - 1) as f64 * kl_diffusion_term(&model, &x, &z, s, t).unwrap();
            acc += kl;
            acc2 += kl * kl;
        }
        let est_mean = acc / est_reps as f64;
        let est_var = (acc2 / est_reps as f64 - est_mean * est_mean).max(0.0) / est_reps as f64;

        let gap = (est_mean - sum_mean).abs();
        let se = (sum_var + est_var).sqrt();
        assert!(gap < 3.0 * se, "gap {gap} vs 3 se {}", 3.0 * se);
    }

    #[test]
    fn loss_kind_rejects_the_wrong_schedule() {
        let cont = learnable_model(Schedule::continuous(0.1, 20.0, 1e-3).unwrap(), 1, 41);
        let disc = learnable_model(Schedule::discrete(0.1, 20.0, 10).unwrap(), 1, 42);
        let batch = vec![vec![0.2]];
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        assert!(loss_discrete(&cont, &batch, &mut rng).is_err());
        assert!(loss_continuous(&disc, &batch, &mut rng).is_err());
        let err = loss_discrete(&cont, &batch, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn empty_batch_is_refused() {
        let model = learnable_model(Schedule::continuous(0.1, 20.0, 1e-3).unwrap(), 1, 44);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        assert!(loss_continuous(&model, &[], &mut rng).is_err());
    }

    #[test]
    fn identity_transform_has_no_phi_gradients() {
        let net = eps_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let theta = net.init(&mut rng, false);
        let model = NdmModel::new(
            Schedule::continuous(0.1, 20.0, 1e-3).unwrap(),
            Transform::identity(2),
            net,
            theta,
        )
        .unwrap();
        let batch = vec![vec![0.3, -0.4]];
        let (_, grads) = loss_continuous(&model, &batch, &mut rng).unwrap();
        assert!(grads.phi.is_empty());
        assert_eq!(grads.theta.len(), model.theta().len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_and_rate_are_nonnegative_and_finite(
            x0 in -3.0f64..3.0, x1 in -3.0f64..3.0,
            h0 in -3.0f64..3.0, h1 in -3.0f64..3.0,
            tt in 0.05f64..1.0, frac in 0.05f64..0.95,
        ) {
            let sch = Schedule::continuous(0.1, 20.0, 1e-3).unwrap();
            let tr = Transform::fixed_diagonal(&[2.0, 0.5]).unwrap();
            let x = [x0, x1];
            let xh = [h0, h1];
            let s = tt * frac;
            let kl = diffusion_kl(&tr, &sch, &x, &xh, s, tt).unwrap();
            prop_assert!(kl.is_finite() && kl >= 0.0);
            let rate = continuous_integrand(&tr, &sch, &x, &xh, tt).unwrap();
            prop_assert!(rate.is_finite() && rate >= 0.0);
            let prior = prior_value(&tr, &sch, &x).unwrap();
            prop_assert!(prior.is_finite() && prior >= 0.0);
        }
    }
}
