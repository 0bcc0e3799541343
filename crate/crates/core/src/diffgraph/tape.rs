use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;

use super::backward::{self, Eager};
use super::graph::{check_scalar, evaluate, Graph, Node, Op, Var};
use crate::error::{shape_mismatch, Error, Result};

/// Frozen recording produced by [`Graph::finish`].
///
/// A tape is immutable and `Sync`; several threads may compute gradients
/// over the same tape at once. Second-order passes copy it into a fresh
/// [`Graph`] with [`Tape::to_graph`].
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
}

/// Partial derivatives keyed by differentiation root.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientResult {
    values: BTreeMap<Var, Array2<f64>>,
}

impl GradientResult {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.values.get(&v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Array2<f64>)> {
        self.values.iter()
    }

    pub fn into_map(self) -> BTreeMap<Var, Array2<f64>> {
        self.values
    }
}

impl Tape {
    pub(crate) fn from_parts(nodes: Vec<Node>, inputs: Vec<Var>) -> Self {
        Self { nodes, inputs }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> Op {
        self.nodes[v.0].op
    }

    /// Cached node values in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.nodes.iter().map(|n| &*n.value)
    }

    /// Exact reverse-mode partials of the scalar `output`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<GradientResult> {
        check_scalar(self.value(output).dim(), output)?;
        let grads = self.gradient_arrays(output, wrt)?;
        Ok(GradientResult {
            values: wrt.iter().copied().zip(grads).collect(),
        })
    }

    /// Same as [`Tape::gradient`] but keeps the order of `wrt`, which may
    /// repeat roots.
    pub fn gradient_arrays(&self, output: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        check_scalar(self.value(output).dim(), output)?;
        let mut eager = Eager { nodes: &self.nodes };
        Ok(backward::backward(&mut eager, output, wrt)
            .into_iter()
            .map(|g| Arc::try_unwrap(g).unwrap_or_else(|shared| (*shared).clone()))
            .collect())
    }

    /// Re-evaluates every node with new values for the inputs (in creation
    /// order). Constants keep their recorded values.
    pub fn replay(&self, inputs: &[Array2<f64>]) -> Result<Tape> {
        if inputs.len() != self.inputs.len() {
            return Err(shape_mismatch(
                "replay inputs",
                self.inputs.len(),
                inputs.len(),
            ));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(self.nodes.len());
        let mut next_input = inputs.iter();
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Input => {
                    let v = next_input.next().expect("input count checked");
                    if v.dim() != node.value.dim() {
                        return Err(shape_mismatch("replay input", node.value.dim(), v.dim()));
                    }
                    Arc::new(v.clone())
                }
                Op::Constant => node.value.clone(),
                op => Arc::new(evaluate(op, &nodes)),
            };
            if !value.iter().all(|x| x.is_finite()) {
                return Err(Error::NumericDomain {
                    node: i,
                    op: node.op.name(),
                });
            }
            nodes.push(Node { op: node.op, value });
        }
        Ok(Tape {
            nodes,
            inputs: self.inputs.clone(),
        })
    }

    /// Copies the recording into a new, writable graph.
    pub fn to_graph(&self) -> Graph {
        Graph::from_parts(self.nodes.clone(), self.inputs.clone())
    }
}
