//! Vector-valued reverse-mode tape.
//!
//! Each node is a vector of scalars; values are computed eagerly as the
//! graph is built, and [`Tape::backward`] accumulates adjoints in one
//! reverse sweep. Parameters live in external flat slices registered as
//! groups, so a loss can differentiate several parameter families (say, a
//! noise-prediction network and a transform network) in a single pass.
//!
//! The op set is deliberately small: affine layers against a parameter
//! group, a few pointwise nonlinearities and arithmetic ops, concatenation,
//! and two reductions. That is all the objectives in this crate need, and a
//! small closed set keeps the backward sweep easy to audit.

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
pub enum UnaryOp {
    /// The activation itself.
    Act(Activation),
    /// Its first derivative (used for tangent lines through layers).
    ActPrime(Activation),
    Tanh,
    TanhPrime,
    Softplus,
}

impl UnaryOp {
    fn eval<T: Real>(self, x: T) -> T {
        match self {
            UnaryOp::Act(a) => a.eval012(x).0,
            UnaryOp::ActPrime(a) => a.eval012(x).1,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::TanhPrime => {
                let t = x.tanh();
                T::one() - t * t
            }
            // Stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
            UnaryOp::Softplus => x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln(),
        }
    }

    fn deriv<T: Real>(self, x: T) -> T {
        match self {
            UnaryOp::Act(a) => a.eval012(x).1,
            UnaryOp::ActPrime(a) => a.eval012(x).2,
            UnaryOp::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            UnaryOp::TanhPrime => {
                let t = x.tanh();
                -T::of(2.0) * t * (T::one() - t * t)
            }
            UnaryOp::Softplus => sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Const,
    /// A contiguous window of a parameter group.
    Param { group: usize, offset: usize },
    /// y = W x (+ b); W is `out x in` row-major at `w_off` in `group`,
    /// b (when present) at `b_off`. Without a bias this is the shared-weight
    /// linear map used by tangent lines.
    Affine { group: usize, w_off: usize, b_off: Option<usize>, in_dim: usize, x: NodeId },
    Unary { op: UnaryOp, x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    /// a + c * b with a constant c.
    AddScaled { a: NodeId, b: NodeId, c: T },
    Concat { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    SumSq { x: NodeId },
}

pub struct Tape<'p, T: Real> {
    params: Vec<&'p [T]>,
    ops: Vec<Op<T>>,
    vals: Vec<Vec<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(param_groups: Vec<&'p [T]>) -> Self {
        Tape { params: param_groups, ops: Vec::new(), vals: Vec::new() }
    }

    pub fn group_len(&self, group: usize) -> usize {
        self.params[group].len()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.vals[id.0]
    }

    pub fn len_of(&self, id: NodeId) -> usize {
        self.vals[id.0].len()
    }

    /// Value of a length-one node.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.vals[id.0].len(), 1);
        self.vals[id.0][0]
    }

    fn push(&mut self, op: Op<T>, val: Vec<T>) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        NodeId(self.ops.len() - 1)
    }

    pub fn constant(&mut self, v: Vec<T>) -> NodeId {
        self.push(Op::Const, v)
    }

    pub fn scalar_const(&mut self, v: T) -> NodeId {
        self.constant(vec![v])
    }

    /// A window `offset..offset + len` of parameter group `group` as a node.
    pub fn param(&mut self, group: usize, offset: usize, len: usize) -> NodeId {
        let val = self.params[group][offset..offset + len].to_vec();
        self.push(Op::Param { group, offset }, val)
    }

    pub fn affine(
        &mut self,
        group: usize,
        w_off: usize,
        b_off: Option<usize>,
        in_dim: usize,
        out_dim: usize,
        x: NodeId,
    ) -> NodeId {
        assert_eq!(self.len_of(x), in_dim, "affine input width");
        let p = self.params[group];
        let w = &p[w_off..w_off + in_dim * out_dim];
        let xv = &self.vals[x.0];
        let mut y = Vec::with_capacity(out_dim);
        for i in 0..out_dim {
            let mut acc = match b_off {
                Some(b) => p[b + i],
                None => T::zero(),
            };
            let row = &w[i * in_dim..(i + 1) * in_dim];
            for (xj, wij) in xv.iter().zip(row) {
                acc = acc + *xj * *wij;
            }
            y.push(acc);
        }
        self.push(Op::Affine { group, w_off, b_off, in_dim, x }, y)
    }

    pub fn unary(&mut self, op: UnaryOp, x: NodeId) -> NodeId {
        let y: Vec<T> = self.vals[x.0].iter().map(|&v| op.eval(v)).collect();
        self.push(Op::Unary { op, x }, y)
    }

    fn zip2(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Vec<T> {
        assert_eq!(self.len_of(a), self.len_of(b), "elementwise op widths");
        self.vals[a.0].iter().zip(&self.vals[b.0]).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip2(a, b, |x, y| x + y);
        self.push(Op::Add { a, b }, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip2(a, b, |x, y| x - y);
        self.push(Op::Sub { a, b }, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip2(a, b, |x, y| x * y);
        self.push(Op::Mul { a, b }, v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip2(a, b, |x, y| x / y);
        self.push(Op::Div { a, b }, v)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v: Vec<T> = self.vals[x.0].iter().map(|&y| y * c).collect();
        self.push(Op::Scale { x, c }, v)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: T) -> NodeId {
        let v = self.zip2(a, b, |x, y| x + c * y);
        self.push(Op::AddScaled { a, b, c }, v)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.vals[a.0].clone();
        v.extend_from_slice(&self.vals[b.0]);
        self.push(Op::Concat { a, b }, v)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.vals[x.0].iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Sum { x }, vec![s])
    }

    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let s = self.vals[x.0].iter().fold(T::zero(), |acc, &v| acc + v * v);
        self.push(Op::SumSq { x }, vec![s])
    }

    /// Reverse sweep from a scalar root. Returns one flat gradient buffer
    /// per parameter group, in registration order.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Vec<T>>> {
        assert_eq!(self.len_of(root), 1, "backward root must be a scalar node");
        if !self.scalar(root).is_finite() {
            return Err(Error::NonFinite("objective value".into()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.ops.len()];
        adj[root.0] = Some(vec![T::one()]);
        let mut grads: Vec<Vec<T>> =
            self.params.iter().map(|p| vec![T::zero(); p.len()]).collect();

        fn acc<T: Real>(slot: &mut Option<Vec<T>>, width: usize, f: impl Fn(&mut Vec<T>)) {
            let v = slot.get_or_insert_with(|| vec![T::zero(); width]);
            f(v);
        }

        for id in (0..=root.0).rev() {
            let Some(a) = adj[id].take() else { continue };
            match &self.ops[id] {
                Op::Const => {}
                Op::Param { group, offset } => {
                    let g = &mut grads[*group][*offset..*offset + a.len()];
                    for (gi, ai) in g.iter_mut().zip(&a) {
                        *gi = *gi + *ai;
                    }
                }
                Op::Affine { group, w_off, b_off, in_dim, x } => {
                    let (group, w_off, in_dim, x) = (*group, *w_off, *in_dim, *x);
                    let out_dim = a.len();
                    let xv = &self.vals[x.0];
                    {
                        let g = &mut grads[group];
                        for i in 0..out_dim {
                            let row = &mut g[w_off + i * in_dim..w_off + (i + 1) * in_dim];
                            for (gj, xj) in row.iter_mut().zip(xv) {
                                *gj = *gj + a[i] * *xj;
                            }
                        }
                        if let Some(b) = *b_off {
                            for i in 0..out_dim {
                                g[b + i] = g[b + i] + a[i];
                            }
                        }
                    }
                    let w = &self.params[group][w_off..w_off + in_dim * out_dim];
                    acc(&mut adj[x.0], in_dim, |dx| {
                        for i in 0..out_dim {
                            let row = &w[i * in_dim..(i + 1) * in_dim];
                            for (dxj, wij) in dx.iter_mut().zip(row) {
                                *dxj = *dxj + a[i] * *wij;
                            }
                        }
                    });
                }
                Op::Unary { op, x } => {
                    let (op, x) = (*op, *x);
                    let xv = &self.vals[x.0];
                    acc(&mut adj[x.0], xv.len(), |dx| {
                        for ((dxi, &xi), ai) in dx.iter_mut().zip(xv).zip(&a) {
                            *dxi = *dxi + *ai * op.deriv(xi);
                        }
                    });
                }
                Op::Add { a: na, b: nb } => {
                    let (na, nb) = (*na, *nb);
                    acc(&mut adj[na.0], a.len(), |d| {
                        for (di, ai) in d.iter_mut().zip(&a) {
                            *di = *di + *ai;
                        }
                    });
                    acc(&mut adj[nb.0], a.len(), |d| {
                        for (di, ai) in d.iter_mut().zip(&a) {
                            *di = *di + *ai;
                        }
                    });
                }
                Op::Sub { a: na, b: nb } => {
                    let (na, nb) = (*na, *nb);
                    acc(&mut adj[na.0], a.len(), |d| {
                        for (di, ai) in d.iter_mut().zip(&a) {
                            *di = *di + *ai;
                        }
                    });
                    acc(&mut adj[nb.0], a.len(), |d| {
                        for (di, ai) in d.iter_mut().zip(&a) {
                            *di = *di - *ai;
                        }
                    });
                }
                Op::Mul { a: na, b: nb } => {
                    let (na, nb) = (*na, *nb);
                    let (av, bv) = (&self.vals[na.0], &self.vals[nb.0]);
                    acc(&mut adj[na.0], a.len(), |d| {
                        for ((di, ai), bi) in d.iter_mut().zip(&a).zip(bv) {
                            *di = *di + *ai * *bi;
                        }
                    });
                    acc(&mut adj[nb.0], a.len(), |d| {
                        for ((di, ai), xi) in d.iter_mut().zip(&a).zip(av) {
                            *di = *di + *ai * *xi;
                        }
                    });
                }
                Op::Div { a: na, b: nb } => {
                    let (na, nb) = (*na, *nb);
                    let bv = &self.vals[nb.0];
                    let yv = &self.vals[id];
                    acc(&mut adj[na.0], a.len(), |d| {
                        for ((di, ai), bi) in d.iter_mut().zip(&a).zip(bv) {
                            *di = *di + *ai / *bi;
                        }
                    });
                    acc(&mut adj[nb.0], a.len(), |d| {
                        for (((di, ai), yi), bi) in d.iter_mut().zip(&a).zip(yv).zip(bv) {
                            *di = *di - *ai * *yi / *bi;
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    acc(&mut adj[x.0], a.len(), |d| {
                        for (di, ai) in d.iter_mut().zip(&a) {
                            *di = *di + *ai * c;
                        }
                    });
                }
                Op::AddScaled { a: na, b: nb, c } => {
                    let (na, nb, c) = (*na, *nb, *c);
                    acc(&mut adj[na.0], a.len(), |d| {
                        for (di, ai) in d.iter_mut().zip(&a) {
                            *di = *di + *ai;
                        }
                    });
                    acc(&mut adj[nb.0], a.len(), |d| {
                        for (di, ai) in d.iter_mut().zip(&a) {
                            *di = *di + *ai * c;
                        }
                    });
                }
                Op::Concat { a: na, b: nb } => {
                    let (na, nb) = (*na, *nb);
                    let la = self.vals[na.0].len();
                    acc(&mut adj[na.0], la, |d| {
                        for (di, ai) in d.iter_mut().zip(&a[..la]) {
                            *di = *di + *ai;
                        }
                    });
                    acc(&mut adj[nb.0], a.len() - la, |d| {
                        for (di, ai) in d.iter_mut().zip(&a[la..]) {
                            *di = *di + *ai;
                        }
                    });
                }
                Op::Sum { x } => {
                    let x = *x;
                    let w = self.vals[x.0].len();
                    acc(&mut adj[x.0], w, |d| {
                        for di in d.iter_mut() {
                            *di = *di + a[0];
                        }
                    });
                }
                Op::SumSq { x } => {
                    let x = *x;
                    let xv = &self.vals[x.0];
                    acc(&mut adj[x.0], xv.len(), |d| {
                        let two = T::of(2.0);
                        for (di, &xi) in d.iter_mut().zip(xv) {
                            *di = *di + two * a[0] * xi;
                        }
                    });
                }
            }
        }

        for g in &grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("parameter gradient".into()));
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar loss used across the gradient checks:
    /// L = sum((u * w)^2) + sum(u / (w + 3)) with u = softplus(p0..p3),
    /// w = tanh(q0..q3), exercising most ops.
    fn loss_value(p: &[f64], q: &[f64]) -> f64 {
        let u: Vec<f64> = p.iter().map(|&x| UnaryOp::Softplus.eval(x)).collect();
        let w: Vec<f64> = q.iter().map(|&x| x.tanh()).collect();
        let s1: f64 = u.iter().zip(&w).map(|(a, b)| (a * b) * (a * b)).sum();
        let s2: f64 = u.iter().zip(&w).map(|(a, b)| a / (b + 3.0)).sum();
        s1 + s2
    }

    fn loss_tape(p: &[f64], q: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let mut tp = Tape::new(vec![p, q]);
        let pn = tp.param(0, 0, p.len());
        let qn = tp.param(1, 0, q.len());
        let u = tp.unary(UnaryOp::Softplus, pn);
        let w = tp.unary(UnaryOp::Tanh, qn);
        let uw = tp.mul(u, w);
        let s1 = tp.sum_sq(uw);
        let three = tp.constant(vec![3.0; q.len()]);
        let wp3 = tp.add(w, three);
        let frac = tp.div(u, wp3);
        let s2 = tp.sum(frac);
        let total = tp.add(s1, s2);
        let v = tp.scalar(total);
        let g = tp.backward(total).unwrap();
        (v, g)
    }

    #[test]
    fn value_matches_plain_evaluation() {
        let p = [0.3, -1.2, 0.8, 2.0];
        let q = [-0.5, 0.9, 1.7, -2.2];
        let (v, _) = loss_tape(&p, &q);
        assert!((v - loss_value(&p, &q)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let p = [0.3, -1.2, 0.8, 2.0];
        let q = [-0.5, 0.9, 1.7, -2.2];
        let (_, g) = loss_tape(&p, &q);
        let h = 1e-6;
        for i in 0..4 {
            let mut pp = p;
            pp[i] += h;
            let mut pm = p;
            pm[i] -= h;
            let fd = (loss_value(&pp, &q) - loss_value(&pm, &q)) / (2.0 * h);
            assert!((g[0][i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "p[{i}]");
            let mut qp = q;
            qp[i] += h;
            let mut qm = q;
            qm[i] -= h;
            let fd = (loss_value(&p, &qp) - loss_value(&p, &qm)) / (2.0 * h);
            assert!((g[1][i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "q[{i}]");
        }
    }

    #[test]
    fn affine_gradients_match_differences() {
        // L = sumsq(W x + b) against params [W(2x3) | b(2)].
        let params = [0.4, -0.2, 0.7, 1.1, 0.05, -0.9, 0.3, -0.6];
        let x = [1.5, -0.4, 0.8];
        let eval = |p: &[f64]| -> f64 {
            let mut tp = Tape::new(vec![p]);
            let xn = tp.constant(x.to_vec());
            let y = tp.affine(0, 0, Some(6), 3, 2, xn);
            let l = tp.sum_sq(y);
            tp.scalar(l)
        };
        let mut tp = Tape::new(vec![&params[..]]);
        let xn = tp.constant(x.to_vec());
        let y = tp.affine(0, 0, Some(6), 3, 2, xn);
        let l = tp.sum_sq(y);
        let g = tp.backward(l).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut pp = params;
            pp[i] += h;
            let mut pm = params;
            pm[i] -= h;
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            assert!((g[0][i] - fd).abs() < 1e-5, "param {i}: {} vs {}", g[0][i], fd);
        }
    }

    #[test]
    fn affine_input_adjoint_flows_through_chain() {
        // L = sum(W2 act(W1 p)) where p itself is a parameter window; checks
        // the dx path of Affine by chaining two layers.
        let w1 = [0.5, -0.3, 0.2, 0.9, 0.1, -0.7]; // 2x3
        let w2 = [1.2, -0.4]; // 1x2
        let p = [0.6, -1.0, 0.25];
        let run = |pv: &[f64]| -> (f64, Vec<f64>) {
            let mut tp = Tape::new(vec![&w1[..], &w2[..], pv]);
            let x = tp.param(2, 0, 3);
            let h1 = tp.affine(0, 0, None, 3, 2, x);
            let a1 = tp.unary(UnaryOp::Act(Activation::Silu), h1);
            let h2 = tp.affine(1, 0, None, 2, 1, a1);
            let l = tp.sum(h2);
            let v = tp.scalar(l);
            let g = tp.backward(l).unwrap();
            (v, g[2].clone())
        };
        let (_, g) = run(&p);
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = p;
            pp[i] += h;
            let mut pm = p;
            pm[i] -= h;
            let fd = (run(&pp).0 - run(&pm).0) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "input {i}");
        }
    }

    #[test]
    fn reused_node_accumulates_adjoints() {
        // L = sum(x * x_reused) + sum(x): x feeds three consumers.
        let p = [0.7, -0.2];
        let run = |pv: &[f64]| -> (f64, Vec<f64>) {
            let mut tp = Tape::new(vec![pv]);
            let x = tp.param(0, 0, 2);
            let m = tp.mul(x, x);
            let s1 = tp.sum(m);
            let s2 = tp.sum(x);
            let l = tp.add(s1, s2);
            let v = tp.scalar(l);
            let g = tp.backward(l).unwrap();
            (v, g[0].clone())
        };
        let (_, g) = run(&p);
        for i in 0..2 {
            // d/dx (x^2 + x) = 2x + 1
            assert!((g[i] - (2.0 * p[i] + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let p = [1.0, 0.0];
        let mut tp = Tape::new(vec![&p[..]]);
        let x = tp.param(0, 0, 2);
        let a = tp.constant(vec![1.0, 1.0]);
        let y = tp.div(a, x); // 1/0 -> inf
        let l = tp.sum(y);
        assert!(matches!(tp.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn scale_concat_addscaled_grads() {
        let p = [0.4, -1.3, 0.9];
        let run = |pv: &[f64]| -> (f64, Vec<f64>) {
            let mut tp = Tape::new(vec![pv]);
            let x = tp.param(0, 0, 2);
            let y = tp.param(0, 2, 1);
            let xs = tp.scale(x, 2.5);
            let cat = tp.concat(xs, y);
            let soft = tp.unary(UnaryOp::Softplus, cat);
            let comb = tp.add_scaled(cat, soft, -0.75);
            let l = tp.sum_sq(comb);
            let v = tp.scalar(l);
            let g = tp.backward(l).unwrap();
            (v, g[0].clone())
        };
        let (_, g) = run(&p);
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = p;
            pp[i] += h;
            let mut pm = p;
            pm[i] -= h;
            let fd = (run(&pp).0 - run(&pm).0) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-5 * fd.abs().max(1.0), "param {i}");
        }
    }
}
