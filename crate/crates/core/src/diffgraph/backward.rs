//! Reverse-mode propagation rules, written once against [`Builder`].
//!
//! Two builders exist: the recording [`Graph`](super::Graph), whose adjoints
//! are new graph nodes (used for differentiable gradients), and [`Eager`],
//! whose adjoints are plain arrays (used for the final numeric pass over a
//! frozen tape).

use std::sync::Arc;

use ndarray::Array2;

use super::graph::{Node, Op, Var};
use super::kernels;
use super::Shape;

pub(crate) trait Builder {
    type T: Clone;

    fn op_of(&self, v: Var) -> Op;
    fn node_value(&self, v: Var) -> Arc<Array2<f64>>;
    fn lift(&mut self, v: Var) -> Self::T;
    fn shape_of(&self, t: &Self::T) -> Shape;
    fn constant(&mut self, a: Array2<f64>) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn div(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn neg(&mut self, a: &Self::T) -> Self::T;
    fn square(&mut self, a: &Self::T) -> Self::T;
    fn sum_to(&mut self, a: &Self::T, shape: Shape) -> Self::T;
    fn broadcast_to(&mut self, a: &Self::T, shape: Shape) -> Self::T;
    /// `a * b^T`
    fn matmul_nt(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// `a^T * b`
    fn matmul_tn(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn transpose(&mut self, a: &Self::T) -> Self::T;
    fn slice(&mut self, a: &Self::T, offset: usize, shape: Shape) -> Self::T;
    fn scatter(&mut self, a: &Self::T, offset: usize, shape: Shape) -> Self::T;
}

/// Numeric backward over frozen nodes.
pub(crate) struct Eager<'a> {
    pub(crate) nodes: &'a [Node],
}

type Arr = Arc<Array2<f64>>;

impl Builder for Eager<'_> {
    type T = Arr;

    fn op_of(&self, v: Var) -> Op {
        self.nodes[v.0].op
    }

    fn node_value(&self, v: Var) -> Arr {
        self.nodes[v.0].value.clone()
    }

    fn lift(&mut self, v: Var) -> Arr {
        self.nodes[v.0].value.clone()
    }

    fn shape_of(&self, t: &Arr) -> Shape {
        t.dim()
    }

    fn constant(&mut self, a: Array2<f64>) -> Arr {
        Arc::new(a)
    }

    fn add(&mut self, a: &Arr, b: &Arr) -> Arr {
        Arc::new(kernels::zip_with(a, b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Arr, b: &Arr) -> Arr {
        Arc::new(kernels::zip_with(a, b, |x, y| x - y))
    }

    fn mul(&mut self, a: &Arr, b: &Arr) -> Arr {
        Arc::new(kernels::zip_with(a, b, |x, y| x * y))
    }

    fn div(&mut self, a: &Arr, b: &Arr) -> Arr {
        Arc::new(kernels::zip_with(a, b, |x, y| x / y))
    }

    fn neg(&mut self, a: &Arr) -> Arr {
        Arc::new(a.mapv(|x| -x))
    }

    fn square(&mut self, a: &Arr) -> Arr {
        Arc::new(a.mapv(|x| x * x))
    }

    fn sum_to(&mut self, a: &Arr, shape: Shape) -> Arr {
        if a.dim() == shape {
            return a.clone();
        }
        Arc::new(kernels::sum_to(a, shape))
    }

    fn broadcast_to(&mut self, a: &Arr, shape: Shape) -> Arr {
        if a.dim() == shape {
            return a.clone();
        }
        Arc::new(kernels::broadcast_to(a, shape))
    }

    fn matmul_nt(&mut self, a: &Arr, b: &Arr) -> Arr {
        Arc::new(kernels::standard(a.dot(&b.t())))
    }

    fn matmul_tn(&mut self, a: &Arr, b: &Arr) -> Arr {
        Arc::new(kernels::standard(a.t().dot(&**b)))
    }

    fn transpose(&mut self, a: &Arr) -> Arr {
        Arc::new(kernels::transpose(a))
    }

    fn slice(&mut self, a: &Arr, offset: usize, shape: Shape) -> Arr {
        Arc::new(kernels::slice(a, offset, shape))
    }

    fn scatter(&mut self, a: &Arr, offset: usize, shape: Shape) -> Arr {
        Arc::new(kernels::scatter(a, offset, shape))
    }
}

/// Reduces an adjoint back to the operand's shape after broadcasting.
fn unbroadcast<B: Builder>(b: &mut B, g: B::T, shape: Shape) -> B::T {
    if b.shape_of(&g) == shape {
        g
    } else {
        b.sum_to(&g, shape)
    }
}

fn mask(values: &Array2<f64>, shape: Shape, keep: impl Fn(f64) -> bool) -> Array2<f64> {
    kernels::broadcast_to(values, shape).mapv(|x| if keep(x) { 1.0 } else { 0.0 })
}

/// Adjoint contributions of node `id` to the operands selected by `need`,
/// given its adjoint `g`.
fn propagate<B: Builder>(
    b: &mut B,
    id: Var,
    g: B::T,
    need: &dyn Fn(Var) -> bool,
) -> Vec<(Var, B::T)> {
    let shape_of_node = |b: &B, v: Var| b.node_value(v).dim();
    let out_shape = b.shape_of(&g);
    let mut out = Vec::with_capacity(2);
    match b.op_of(id) {
        Op::Input | Op::Constant => {}
        Op::Add(x, y) => {
            if need(x) {
                let s = shape_of_node(b, x);
                out.push((x, unbroadcast(b, g.clone(), s)));
            }
            if need(y) {
                let s = shape_of_node(b, y);
                out.push((y, unbroadcast(b, g, s)));
            }
        }
        Op::Sub(x, y) => {
            if need(x) {
                let s = shape_of_node(b, x);
                out.push((x, unbroadcast(b, g.clone(), s)));
            }
            if need(y) {
                let s = shape_of_node(b, y);
                let ng = b.neg(&g);
                out.push((y, unbroadcast(b, ng, s)));
            }
        }
        Op::Mul(x, y) => {
            if need(x) {
                let s = shape_of_node(b, x);
                let vy = b.lift(y);
                let gx = b.mul(&g, &vy);
                out.push((x, unbroadcast(b, gx, s)));
            }
            if need(y) {
                let s = shape_of_node(b, y);
                let vx = b.lift(x);
                let gy = b.mul(&g, &vx);
                out.push((y, unbroadcast(b, gy, s)));
            }
        }
        Op::Div(x, y) => {
            let vy = b.lift(y);
            let gx = b.div(&g, &vy);
            if need(y) {
                let s = shape_of_node(b, y);
                let res = b.lift(id);
                let gy = b.mul(&gx, &res);
                let gy = b.neg(&gy);
                out.push((y, unbroadcast(b, gy, s)));
            }
            if need(x) {
                let s = shape_of_node(b, x);
                out.push((x, unbroadcast(b, gx, s)));
            }
        }
        Op::Neg(x) => out.push((x, b.neg(&g))),
        Op::Exp(x) => {
            let res = b.lift(id);
            out.push((x, b.mul(&g, &res)));
        }
        Op::Log(x) => {
            let vx = b.lift(x);
            out.push((x, b.div(&g, &vx)));
        }
        Op::Tanh(x) => {
            let res = b.lift(id);
            let sq = b.square(&res);
            let one = b.constant(Array2::from_elem((1, 1), 1.0));
            let deriv = b.sub(&one, &sq);
            out.push((x, b.mul(&g, &deriv)));
        }
        Op::Relu(x) => {
            // derivative 0 at exactly 0
            let m = mask(&b.node_value(x), out_shape, |v| v > 0.0);
            let m = b.constant(m);
            out.push((x, b.mul(&g, &m)));
        }
        Op::Square(x) => {
            let vx = b.lift(x);
            let two = b.constant(Array2::from_elem((1, 1), 2.0));
            let gx = b.mul(&g, &vx);
            out.push((x, b.mul(&gx, &two)));
        }
        Op::Sum(x) | Op::SumTo(x, _) => {
            let s = shape_of_node(b, x);
            out.push((x, b.broadcast_to(&g, s)));
        }
        Op::BroadcastTo(x, _) => {
            let s = shape_of_node(b, x);
            out.push((x, b.sum_to(&g, s)));
        }
        Op::MatMul(x, y) => {
            if need(x) {
                let vy = b.lift(y);
                out.push((x, b.matmul_nt(&g, &vy)));
            }
            if need(y) {
                let vx = b.lift(x);
                out.push((y, b.matmul_tn(&vx, &g)));
            }
        }
        Op::Transpose(x) => out.push((x, b.transpose(&g))),
        Op::Max(x, y) => {
            let (vx, vy) = (b.node_value(x), b.node_value(y));
            let pick_x = kernels::zip_with(&vx, &vy, |p, q| if p >= q { 1.0 } else { 0.0 });
            let pick_x = kernels::broadcast_to(&pick_x, out_shape);
            if need(y) {
                let s = shape_of_node(b, y);
                let my = b.constant(pick_x.mapv(|p| 1.0 - p));
                let gy = b.mul(&g, &my);
                out.push((y, unbroadcast(b, gy, s)));
            }
            if need(x) {
                let s = shape_of_node(b, x);
                let mx = b.constant(pick_x);
                let gx = b.mul(&g, &mx);
                out.push((x, unbroadcast(b, gx, s)));
            }
        }
        Op::Select(c, x, y) => {
            let m = mask(&b.node_value(c), out_shape, |v| v > 0.0);
            if need(y) {
                let s = shape_of_node(b, y);
                let my = b.constant(m.mapv(|p| 1.0 - p));
                let gy = b.mul(&g, &my);
                out.push((y, unbroadcast(b, gy, s)));
            }
            if need(x) {
                let s = shape_of_node(b, x);
                let mx = b.constant(m);
                let gx = b.mul(&g, &mx);
                out.push((x, unbroadcast(b, gx, s)));
            }
        }
        Op::Slice { src, offset, .. } => {
            let s = shape_of_node(b, src);
            out.push((src, b.scatter(&g, offset, s)));
        }
        Op::Scatter { src, offset, .. } => {
            let s = shape_of_node(b, src);
            out.push((src, b.slice(&g, offset, s)));
        }
    }
    out
}

/// Runs reverse accumulation from the scalar `output` and returns one
/// adjoint per entry of `wrt` (zeros when the output does not depend on it).
pub(crate) fn backward<B: Builder>(b: &mut B, output: Var, wrt: &[Var]) -> Vec<B::T> {
    let n = output.0 + 1;

    // Only nodes that depend on some root need an adjoint.
    let mut relevant = vec![false; n];
    for w in wrt.iter().filter(|w| w.0 < n) {
        relevant[w.0] = true;
    }
    for i in 0..n {
        if !relevant[i] {
            relevant[i] = b.op_of(Var(i)).operands().any(|o| relevant[o.0]);
        }
    }

    let mut adjoint: Vec<Option<B::T>> = (0..n).map(|_| None).collect();
    let mut result: Vec<Option<B::T>> = vec![None; wrt.len()];
    let seed_shape = b.node_value(output).dim();
    adjoint[output.0] = Some(b.constant(Array2::ones(seed_shape)));

    for i in (0..n).rev() {
        if !relevant[i] {
            continue;
        }
        let Some(g) = adjoint[i].take() else {
            continue;
        };
        for (slot, w) in result.iter_mut().zip(wrt) {
            if w.0 == i {
                *slot = Some(g.clone());
            }
        }
        let need = |v: Var| relevant[v.0];
        for (operand, contribution) in propagate(b, Var(i), g, &need) {
            let acc = match adjoint[operand.0].take() {
                None => contribution,
                Some(prev) => b.add(&prev, &contribution),
            };
            adjoint[operand.0] = Some(acc);
        }
    }

    result
        .into_iter()
        .zip(wrt)
        .map(|(g, w)| match g {
            Some(g) => g,
            None => {
                let shape = b.node_value(*w).dim();
                b.constant(Array2::zeros(shape))
            }
        })
        .collect()
}
