//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Computations are recorded on a [`Graph`]: every primitive is evaluated
//! eagerly and appended, so operands always precede their users. A finished
//! graph becomes an immutable [`Tape`] that supports a fast numeric backward
//! pass ([`Tape::gradient`]) and exact forward replay ([`Tape::replay`]).
//!
//! Higher-order derivatives come from recording the backward pass itself:
//! [`Graph::grad`] appends the adjoint computation to the graph as ordinary
//! nodes, which can then be differentiated again (reverse-over-reverse).
//! [`grad_of_grad`] packages this for Hessian-vector style products on a
//! frozen tape.
//!
//! All values are `f64`. Vectors are `1 x n` rows; scalars are `1 x 1`.
//! Elementwise binary operations broadcast dimensions of size one.

mod backward;
mod graph;
mod kernels;
mod program;
mod tape;

use ndarray::Array2;

pub use graph::{row, Graph, Op, Var};
pub use program::{fd_check, record, record_scalars, Instr, Primitive, Program, Script};
pub use tape::{GradientResult, Tape};

use crate::error::{shape_mismatch, Result};

/// `(rows, cols)`.
pub type Shape = (usize, usize);

/// Computes `d/d(wrt_outer) [ sum_k <grad_{wrt_inner[k]} f, direction[k]> ]`
/// for the scalar `output` of `tape`.
///
/// With `wrt_outer == wrt_inner` this is a Hessian-vector product. The tape is
/// copied into a fresh graph; the original is left untouched.
pub fn grad_of_grad(
    tape: &Tape,
    output: Var,
    wrt_outer: &[Var],
    wrt_inner: &[Var],
    direction: &[Array2<f64>],
) -> Result<Vec<Array2<f64>>> {
    if direction.len() != wrt_inner.len() {
        return Err(shape_mismatch(
            "grad_of_grad direction count",
            wrt_inner.len(),
            direction.len(),
        ));
    }
    for (w, d) in wrt_inner.iter().zip(direction) {
        let expected = tape.value(*w).dim();
        if d.dim() != expected {
            return Err(shape_mismatch("grad_of_grad direction", expected, d.dim()));
        }
    }
    let mut graph = tape.to_graph();
    let inner = graph.grad(output, wrt_inner)?;
    let mut total = None;
    for (g, d) in inner.into_iter().zip(direction) {
        let d = graph.constant(d.clone());
        let term = graph.dot(g, d);
        total = Some(match total {
            None => term,
            Some(acc) => graph.add(acc, term),
        });
    }
    let total = match total {
        Some(t) => t,
        None => graph.scalar(0.0),
    };
    let second = graph.finish()?;
    second.gradient_arrays(total, wrt_outer)
}
