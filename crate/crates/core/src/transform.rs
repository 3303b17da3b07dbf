//! The forward data transformation F(x, t) and its exact time derivative.
//!
//! Three kinds:
//! - identity: F(x, t) = x, recovering the classical diffusion model;
//! - fixed diagonal: F(x, t)_j = x_j c_j^t, a smooth interpolation between
//!   the identity at t = 0 and an elementwise scaling at t = 1;
//! - learnable: F(x, t) = (1 - t) x + t Fbar(x, t) with Fbar a network.
//!   The interpolation pins F(x, 0) = x exactly for any parameters, and
//!   zero-initializing the network's last layer makes the initial model
//!   behave like the classical baseline.
//!
//! Time derivatives are exact (forward-mode through the one generic
//! evaluation path), never finite differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::dual::{Dual, Lift};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::{Activation, Net, NetSpec, TimeEmbedding};
use crate::num::Real;

#[derive(Clone, Debug)]
pub enum Transform<T: Real> {
    Identity {
        dim: usize,
    },
    /// Elementwise x_j * c_j^t, stored as log c_j. Not trainable.
    FixedDiagonal {
        log_c: Vec<T>,
    },
    /// (1 - t) x + t Fbar(x, t); `params` are the network weights.
    Learnable {
        net: Net,
        params: Vec<T>,
    },
}

impl<T: Real> Transform<T> {
    pub fn identity(dim: usize) -> Self {
        Transform::Identity { dim }
    }

    /// Builds the diagonal kind from the per-coordinate scales c_j > 0.
    pub fn fixed_diagonal(scales: &[T]) -> Result<Self> {
        if scales.is_empty() || !scales.iter().all(|&c| c > T::zero() && c.is_finite()) {
            return Err(Error::Config(
                "fixed-diagonal transform needs positive finite scales".into(),
            ));
        }
        Ok(Transform::FixedDiagonal { log_c: scales.iter().map(|c| c.ln()).collect() })
    }

    /// Builds the learnable kind with a freshly initialized network whose
    /// input and output widths equal `dim`.
    pub fn learnable<R: Rng + ?Sized>(
        dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
        time_embedding: TimeEmbedding,
        zero_init_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Net::new(NetSpec { in_dim: dim, hidden, out_dim: dim, activation, time_embedding })?;
        let params = net.init(rng, zero_init_last);
        Ok(Transform::Learnable { net, params })
    }

    pub fn dim(&self) -> usize {
        match self {
            Transform::Identity { dim } => *dim,
            Transform::FixedDiagonal { log_c } => log_c.len(),
            Transform::Learnable { net, .. } => net.spec.in_dim,
        }
    }

    /// Trainable parameters (empty unless learnable).
    pub fn params(&self) -> &[T] {
        match self {
            Transform::Learnable { params, .. } => params,
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        match self {
            Transform::Learnable { params, .. } => params,
            _ => &mut [],
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Transform::Learnable { .. })
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got == self.dim() {
            Ok(())
        } else {
            Err(Error::DimMismatch { what: "transform input", expected: self.dim(), got })
        }
    }

    /// F(x, t) in any scalar mode; the single evaluation path shared by
    /// values, time derivatives, and mixed second derivatives.
    pub fn eval_in<S: Lift<T>>(&self, x: &[S], t: S) -> Result<Vec<S>> {
        self.check_dim(x.len())?;
        match self {
            Transform::Identity { .. } => Ok(x.to_vec()),
            Transform::FixedDiagonal { log_c } => Ok(x
                .iter()
                .zip(log_c)
                .map(|(&xj, &lc)| xj * t.scale(lc).exp())
                .collect()),
            Transform::Learnable { net, params } => {
                let fbar = net.forward_in(params, x, t)?;
                let one_minus_t = t.scale(-T::one()).add_real(T::one());
                Ok(x.iter()
                    .zip(&fbar)
                    .map(|(&xj, &fj)| xj * one_minus_t + fj * t)
                    .collect())
            }
        }
    }

    pub fn apply(&self, x: &[T], t: T) -> Result<Vec<T>> {
        self.eval_in::<T>(x, t)
    }

    /// Exact dF/dt at fixed x.
    pub fn time_derivative(&self, x: &[T], t: T) -> Result<Vec<T>> {
        Ok(self.value_and_time_derivative(x, t)?.1)
    }

    /// (F, dF/dt) in one forward pass.
    pub fn value_and_time_derivative(&self, x: &[T], t: T) -> Result<(Vec<T>, Vec<T>)> {
        let xd: Vec<Dual<T>> = x.iter().map(|&v| Dual::constant(v)).collect();
        let out = self.eval_in(&xd, Dual::new(t, T::one()))?;
        Ok((out.iter().map(|d| d.v).collect(), out.iter().map(|d| d.d).collect()))
    }

    /// F(x, t) as a tape node; learnable parameters are read from tape
    /// group `group`.
    pub fn apply_tape(
        &self,
        tp: &mut Tape<'_, T>,
        group: usize,
        x: NodeId,
        t: T,
    ) -> Result<NodeId> {
        Ok(self.apply_tape_inner(tp, group, x, t, false)?.0)
    }

    /// (F, dF/dt) as tape nodes. Gradients flow into the transform
    /// parameters through both outputs.
    pub fn apply_tape_with_dt(
        &self,
        tp: &mut Tape<'_, T>,
        group: usize,
        x: NodeId,
        t: T,
    ) -> Result<(NodeId, NodeId)> {
        let (f, df) = self.apply_tape_inner(tp, group, x, t, true)?;
        Ok((f, df.expect("tangent requested")))
    }

    fn apply_tape_inner(
        &self,
        tp: &mut Tape<'_, T>,
        group: usize,
        x: NodeId,
        t: T,
        with_dt: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        self.check_dim(tp.len_of(x))?;
        match self {
            Transform::Identity { dim } => {
                let df = if with_dt {
                    Some(tp.constant(vec![T::zero(); *dim]))
                } else {
                    None
                };
                Ok((x, df))
            }
            Transform::FixedDiagonal { log_c } => {
                let ct: Vec<T> = log_c.iter().map(|&lc| (t * lc).exp()).collect();
                let ct = tp.constant(ct);
                let f = tp.mul(x, ct);
                let df = if with_dt {
                    let lc = tp.constant(log_c.clone());
                    Some(tp.mul(f, lc))
                } else {
                    None
                };
                Ok((f, df))
            }
            Transform::Learnable { net, .. } => {
                let (fbar, fbar_dt) = net.forward_tape(tp, group, x, t, with_dt)?;
                // F = (1 - t) x + t Fbar
                let xs = tp.scale(x, T::one() - t);
                let f = tp.add_scaled(xs, fbar, t);
                let df = match fbar_dt {
                    // dF/dt = -x + Fbar + t dFbar/dt
                    Some(fd) => {
                        let tmp = tp.add_scaled(fbar, fd, t);
                        Some(tp.sub(tmp, x))
                    }
                    None => None,
                };
                Ok((f, df))
            }
        }
    }
}

/// Serializable description of a transform for configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransformConfig {
    Identity,
    FixedDiagonal {
        scales: Vec<f64>,
    },
    Learnable {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "default_frequencies")]
        frequencies: usize,
        #[serde(default = "default_zero_init")]
        zero_init_last: bool,
    },
}

fn default_activation() -> Activation {
    Activation::Silu
}
fn default_frequencies() -> usize {
    8
}
fn default_zero_init() -> bool {
    true
}

impl TransformConfig {
    pub fn build<T: Real, R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<Transform<T>> {
        match self {
            TransformConfig::Identity => Ok(Transform::identity(dim)),
            TransformConfig::FixedDiagonal { scales } => {
                if scales.len() != dim {
                    return Err(Error::Config(format!(
                        "fixed-diagonal scales have length {}, data dimension is {dim}",
                        scales.len()
                    )));
                }
                let s: Vec<T> = scales.iter().map(|&c| T::of(c)).collect();
                Transform::fixed_diagonal(&s)
            }
            TransformConfig::Learnable { hidden, activation, frequencies, zero_init_last } => {
                Transform::learnable(
                    dim,
                    hidden.clone(),
                    *activation,
                    TimeEmbedding::Sinusoidal { frequencies: *frequencies },
                    *zero_init_last,
                    rng,
                )
            }
        }
    }
}
