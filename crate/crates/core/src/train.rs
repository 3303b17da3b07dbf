//! Stochastic training for the two parameter groups.
//!
//! One Adam optimizer per group (noise network, transform), a linear
//! learning-rate warmup, and a minibatch loop over a fixed dataset. A
//! non-finite loss, gradient, or parameter aborts the run with an error
//! while restoring the parameters from the last healthy step, so a
//! divergence never destroys a model that was fine a moment earlier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NdmModel;
use crate::nn::adam::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::num::Real;
use crate::objective::{self, LossBreakdown, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// The variational bound matching the model's schedule (discrete sum
    /// or continuous-time integral estimate).
    Nelbo,
    /// Plain noise matching `||eps_hat - eps||^2`; trains the transform
    /// only through the latent, with no endpoint anchoring.
    SimpleEps,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Peak learning rate after warmup.
    pub lr: f64,
    /// Linear warmup length in iterations (0 disables warmup).
    pub warmup: usize,
    pub objective: ObjectiveKind,
    /// Emit a log row every this many iterations (0: final row only).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 128,
            lr: 1e-3,
            warmup: 100,
            objective: ObjectiveKind::Nelbo,
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iter: usize,
    pub total: f64,
    pub l_prior: f64,
    pub l_rec: f64,
    pub l_diff: f64,
    pub lr: f64,
    pub grad_theta_norm: f64,
    pub grad_phi_norm: f64,
}

fn l2_norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|&g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn compute_loss<T: Real, R: Rng + ?Sized>(
    model: &NdmModel<T>,
    batch: &[Vec<T>],
    objective: ObjectiveKind,
    rng: &mut R,
) -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
    match objective {
        ObjectiveKind::Nelbo => {
            if model.schedule().is_discrete() {
                objective::loss_discrete(model, batch, rng)
            } else {
                objective::loss_continuous(model, batch, rng)
            }
        }
        ObjectiveKind::SimpleEps => objective::loss_simple(model, batch, rng),
    }
}

/// Run the training loop, mutating `model` in place.
///
/// Batches are drawn with replacement from `data`; all randomness comes
/// from `rng`, so a seeded generator reproduces the run exactly. On a
/// non-finite loss, gradient, or parameter the model is rolled back to
/// the last healthy parameters and an error is returned.
pub fn train<T: Real, R: Rng + ?Sized>(
    model: &mut NdmModel<T>,
    data: &[Vec<T>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainLogRow>> {
    if data.is_empty() {
        return Err(Error::Domain {
            what: "training",
            detail: String::from("dataset is empty"),
        });
    }
    if cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(Error::Config(format!(
            "batch_size and iterations must be positive, got {} and {}",
            cfg.batch_size, cfg.iterations
        )));
    }
    for row in data {
        if row.len() != model.dim() {
            return Err(Error::DimMismatch {
                what: "training data",
                expected: model.dim(),
                got: row.len(),
            });
        }
    }

    let adam_cfg = AdamConfig::standard();
    let mut adam_theta = AdamState::new(model.theta().len());
    let mut adam_phi = AdamState::new(model.transform().params().len());
    let lr_schedule = LrSchedule { peak: cfg.lr, warmup: cfg.warmup as u64 };
    let mut log = Vec::new();
    let mut last_good = (model.theta().to_vec(), model.transform().params().to_vec());

    for iter in 0..cfg.iterations {
        let lr = T::of(lr_schedule.at(iter as u64));

        let batch: Vec<Vec<T>> =
            (0..cfg.batch_size).map(|_| data[rng.gen_range(0..data.len())].clone()).collect();

        // Any failure from here to the end of the step rolls the model
        // back to the last healthy parameters before reporting.
        let step = (|| -> Result<(LossBreakdown<T>, ParamGrads<T>)> {
            let (breakdown, grads) = compute_loss(model, &batch, cfg.objective, rng)?;
            if !breakdown.total.is_finite()
                || !all_finite(&grads.theta)
                || !all_finite(&grads.phi)
            {
                return Err(Error::NonFinite(format!("loss or gradient at step {iter}")));
            }
            Ok((breakdown, grads))
        })();
        let (breakdown, grads) = match step {
            Ok(v) => v,
            Err(e) => {
                model.theta_mut().copy_from_slice(&last_good.0);
                model.transform_mut().params_mut().copy_from_slice(&last_good.1);
                return Err(Error::NonFinite(format!(
                    "training step {iter} diverged ({e}); model restored to step {}",
                    iter.saturating_sub(1)
                )));
            }
        };
        adam_step(&adam_cfg, &mut adam_theta, model.theta_mut(), &grads.theta, lr)?;
        if !grads.phi.is_empty() {
            adam_step(&adam_cfg, &mut adam_phi, model.transform_mut().params_mut(), &grads.phi, lr)?;
        }
        if !all_finite(model.theta()) || !all_finite(model.transform().params()) {
            model.theta_mut().copy_from_slice(&last_good.0);
            model.transform_mut().params_mut().copy_from_slice(&last_good.1);
            return Err(Error::NonFinite(format!(
                "training step {iter} produced non-finite parameters; \
                 model restored to step {}",
                iter.saturating_sub(1)
            )));
        }
        last_good.0.copy_from_slice(model.theta());
        last_good.1.copy_from_slice(model.transform().params());

        let last = iter + 1 == cfg.iterations;
        if last || (cfg.log_every > 0 && (iter + 1) % cfg.log_every == 0) {
            log.push(TrainLogRow {
                iter: iter + 1,
                total: breakdown.total.as_f64(),
                l_prior: breakdown.l_prior.as_f64(),
                l_rec: breakdown.l_rec.as_f64(),
                l_diff: breakdown.l_diff.as_f64(),
                lr: lr.as_f64(),
                grad_theta_norm: l2_norm(&grads.theta),
                grad_phi_norm: l2_norm(&grads.phi),
            });
        }
    }
    Ok(log)
}
