//! Minimal differentiable MLP engine.
//!
//! One forward implementation, [`Net::forward_in`], is generic over the
//! scalar mode ([`Lift`]): plain evaluation, forward-mode directional
//! derivatives ([`Dual`]), and two-slot forward mode with mixed second
//! derivatives ([`HDual`]). Reverse-mode parameter gradients go through the
//! operation tape in [`tape`], which shares the same parameter layout.
//!
//! Parameter layout per layer: row-major weight matrix `out x in`, then the
//! bias vector. Layers apply the activation everywhere except the output.
//! The time input is appended to the data input as an embedding; derivatives
//! with respect to time flow through the embedding features.

pub mod adam;
pub mod dual;
pub mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use dual::{Dual, Lift};
use tape::{NodeId, Tape, UnaryOp};

/// Numerically stable logistic function.
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// x * sigmoid(x); smooth, so time derivatives of the network exist
    /// everywhere (they appear inside the continuous-time objective).
    Silu,
    Tanh,
}

impl Activation {
    /// Value, first, and second derivative at `x`.
    pub fn eval012<T: Real>(self, x: T) -> (T, T, T) {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                let one = T::one();
                let two = T::of(2.0);
                let f = x * s;
                let d1 = s * (one + x * (one - s));
                let d2 = s * (one - s) * (two + x * (one - two * s));
                (f, d1, d2)
            }
            Activation::Tanh => {
                let f = x.tanh();
                let sech2 = T::one() - f * f;
                (f, sech2, -T::of(2.0) * f * sech2)
            }
        }
    }

    pub fn eval<T: Real>(self, x: T) -> T {
        self.eval012(x).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeEmbedding {
    /// The raw time value as a single extra input.
    RawScalar,
    /// Interleaved sin/cos pairs at frequencies pi * 2^k, k = 0..frequencies.
    Sinusoidal { frequencies: usize },
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        match self {
            TimeEmbedding::RawScalar => 1,
            TimeEmbedding::Sinusoidal { frequencies } => 2 * frequencies,
        }
    }

    pub fn features<T: Real, S: Lift<T>>(&self, t: S, out: &mut Vec<S>) {
        match self {
            TimeEmbedding::RawScalar => out.push(t),
            TimeEmbedding::Sinusoidal { frequencies } => {
                for k in 0..*frequencies {
                    let w = T::of(std::f64::consts::PI * (1u64 << k) as f64);
                    out.push(t.scale(w).sin());
                    out.push(t.scale(w).cos());
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Width of the data input; time features are appended internally.
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.in_dim >= 1
            && self.out_dim >= 1
            && self.hidden.iter().all(|&w| w >= 1)
            && self.time_embedding.width() >= 1;
        if widths_ok {
            Ok(())
        } else {
            Err(Error::Config(format!("all network widths must be >= 1: {self:?}")))
        }
    }

    /// Total network input width (data plus time features).
    pub fn input_width(&self) -> usize {
        self.in_dim + self.time_embedding.width()
    }

    /// (in, out) widths of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_width());
        widths.extend_from_slice(&self.hidden);
        widths.push(self.out_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| o * (i + 1)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub spec: NetSpec,
}

impl Net {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Net { spec })
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Fan-in-scaled Gaussian weights, zero biases. With `zero_last` the
    /// output layer starts at exactly zero so the network's initial output
    /// is the zero function.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R, zero_last: bool) -> Vec<T> {
        let dims = self.spec.layer_dims();
        let mut params = Vec::with_capacity(self.param_count());
        for (li, &(ind, outd)) in dims.iter().enumerate() {
            let last = li + 1 == dims.len();
            let std = (T::one() / T::of(ind as f64)).sqrt();
            for _ in 0..ind * outd {
                let w = if last && zero_last { T::zero() } else { T::std_normal(rng) * std };
                params.push(w);
            }
            params.extend(std::iter::repeat(T::zero()).take(outd));
        }
        params
    }

    fn check_call<T: Real>(&self, params: &[T], x_len: usize) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimMismatch {
                what: "network parameters",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        if x_len != self.spec.in_dim {
            return Err(Error::DimMismatch {
                what: "network input",
                expected: self.spec.in_dim,
                got: x_len,
            });
        }
        Ok(())
    }

    /// Forward pass in any scalar mode. One pass; tangents (if the mode
    /// carries them) ride along at constant overhead per value.
    pub fn forward_in<T: Real, S: Lift<T>>(&self, params: &[T], x: &[S], t: S) -> Result<Vec<S>> {
        self.check_call(params, x.len())?;
        let dims = self.spec.layer_dims();
        let mut cur: Vec<S> = Vec::with_capacity(self.spec.input_width());
        cur.extend_from_slice(x);
        self.spec.time_embedding.features(t, &mut cur);

        let mut off = 0;
        for (li, &(ind, outd)) in dims.iter().enumerate() {
            let w = &params[off..off + ind * outd];
            let b = &params[off + ind * outd..off + ind * outd + outd];
            off += outd * (ind + 1);
            let last = li + 1 == dims.len();
            let mut next = Vec::with_capacity(outd);
            for i in 0..outd {
                let mut acc = S::from_real(b[i]);
                let row = &w[i * ind..(i + 1) * ind];
                for (xj, &wij) in cur.iter().zip(row) {
                    acc = acc + xj.scale(wij);
                }
                if !last {
                    let (f, d1, d2) = self.spec.activation.eval012(acc.value());
                    acc = acc.chain(f, d1, d2);
                }
                next.push(acc);
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], t: T) -> Result<Vec<T>> {
        self.forward_in::<T, T>(params, x, t)
    }

    /// Jacobian-vector product against the direction `(x_dot, t_dot)`;
    /// returns `(value, directional derivative)` from a single forward pass.
    pub fn jvp<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        x_dot: &[T],
        t: T,
        t_dot: T,
    ) -> Result<(Vec<T>, Vec<T>)> {
        if x.len() != x_dot.len() {
            return Err(Error::DimMismatch {
                what: "jvp direction",
                expected: x.len(),
                got: x_dot.len(),
            });
        }
        let xd: Vec<Dual<T>> =
            x.iter().zip(x_dot).map(|(&v, &d)| Dual::new(v, d)).collect();
        let out = self.forward_in(params, &xd, Dual::new(t, t_dot))?;
        Ok((out.iter().map(|o| o.v).collect(), out.iter().map(|o| o.d).collect()))
    }

    /// Value and exact partial derivative with respect to the time input.
    pub fn value_and_time_derivative<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        t: T,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let zeros = vec![T::zero(); x.len()];
        self.jvp(params, x, &zeros, t, T::one())
    }

    /// Forward pass recorded on a reverse-mode tape. `x` is an existing tape
    /// node of width `in_dim`; parameters come from tape group `group` with
    /// this network's layout starting at offset 0. With `time_tangent`, a
    /// parallel tangent line computes the exact time derivative of the
    /// output as a second differentiable node (tangents share the weight
    /// parameters, so gradients flow from both paths).
    pub fn forward_tape<T: Real>(
        &self,
        tp: &mut Tape<'_, T>,
        group: usize,
        x: NodeId,
        t: T,
        time_tangent: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        if tp.len_of(x) != self.spec.in_dim {
            return Err(Error::DimMismatch {
                what: "network input node",
                expected: self.spec.in_dim,
                got: tp.len_of(x),
            });
        }
        if tp.group_len(group) != self.param_count() {
            return Err(Error::DimMismatch {
                what: "network parameter group",
                expected: self.param_count(),
                got: tp.group_len(group),
            });
        }

        // Embedding features and their time derivative, as constants.
        let mut emb_dual: Vec<Dual<T>> = Vec::with_capacity(self.spec.time_embedding.width());
        self.spec.time_embedding.features(Dual::new(t, T::one()), &mut emb_dual);
        let emb = tp.constant(emb_dual.iter().map(|d| d.v).collect());
        let mut cur = tp.concat(x, emb);
        let mut cur_tan = if time_tangent {
            let zero_x = tp.constant(vec![T::zero(); self.spec.in_dim]);
            let emb_dt = tp.constant(emb_dual.iter().map(|d| d.d).collect());
            Some(tp.concat(zero_x, emb_dt))
        } else {
            None
        };

        let dims = self.spec.layer_dims();
        let mut off = 0;
        let act = self.spec.activation;
        for (li, &(ind, outd)) in dims.iter().enumerate() {
            let w_off = off;
            let b_off = off + ind * outd;
            off += outd * (ind + 1);
            let last = li + 1 == dims.len();

            let pre = tp.affine(group, w_off, Some(b_off), ind, outd, cur);
            if !tp.value(pre).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLayer { context: "network forward", layer: li });
            }
            let pre_tan = cur_tan.map(|tn| tp.affine(group, w_off, None, ind, outd, tn));
            if last {
                cur = pre;
                cur_tan = pre_tan;
            } else {
                cur = tp.unary(UnaryOp::Act(act), pre);
                cur_tan = pre_tan.map(|pt| {
                    let dact = tp.unary(UnaryOp::ActPrime(act), pre);
                    tp.mul(dact, pt)
                });
            }
        }
        Ok((cur, cur_tan))
    }
}
