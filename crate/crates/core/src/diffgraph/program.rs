use std::str::FromStr;

use ndarray::Array2;

use super::graph::{Graph, Var};
use super::tape::Tape;
use crate::error::{Error, Result};

/// Something that can be recorded on a graph given its input nodes.
pub trait Program {
    fn build(&self, graph: &mut Graph, inputs: &[Var]) -> Result<Var>;
}

impl<F> Program for F
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    fn build(&self, graph: &mut Graph, inputs: &[Var]) -> Result<Var> {
        Ok(self(graph, inputs))
    }
}

/// Primitive names accepted by [`Script`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Neg,
    Div,
    Exp,
    Log,
    Tanh,
    Relu,
    Square,
    Sum,
    Dot,
    Max,
    Select,
    MatMul,
    Transpose,
}

impl Primitive {
    fn arity(self) -> usize {
        match self {
            Primitive::Neg
            | Primitive::Exp
            | Primitive::Log
            | Primitive::Tanh
            | Primitive::Relu
            | Primitive::Square
            | Primitive::Sum
            | Primitive::Transpose => 1,
            Primitive::Select => 3,
            _ => 2,
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "neg" => Primitive::Neg,
            "div" => Primitive::Div,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "tanh" => Primitive::Tanh,
            "relu" => Primitive::Relu,
            "square" => Primitive::Square,
            "sum" => Primitive::Sum,
            "dot" => Primitive::Dot,
            "max" => Primitive::Max,
            "select" => Primitive::Select,
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            other => return Err(Error::UnsupportedPrimitive(other.to_string())),
        })
    }
}

/// One straight-line instruction. Arguments index slots: the program inputs
/// first, then the result of every earlier instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Instr {
    pub prim: Primitive,
    pub args: Vec<usize>,
}

/// Straight-line program over primitive names, e.g. `["mul 0 1", "exp 0", "add 2 3"]`.
/// The last instruction is the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Script {
    instrs: Vec<Instr>,
}

impl Script {
    pub fn parse<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut instrs = Vec::with_capacity(lines.len());
        for line in lines {
            let mut words = line.as_ref().split_whitespace();
            let name = words
                .next()
                .ok_or_else(|| Error::Contract("empty instruction".into()))?;
            let prim: Primitive = name.parse()?;
            let args = words
                .map(|w| {
                    w.parse::<usize>().map_err(|_| {
                        Error::Contract(format!("bad slot `{w}` in `{}`", line.as_ref()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if args.len() != prim.arity() {
                return Err(Error::Contract(format!(
                    "`{name}` takes {} arguments, got {}",
                    prim.arity(),
                    args.len()
                )));
            }
            instrs.push(Instr { prim, args });
        }
        if instrs.is_empty() {
            return Err(Error::Contract("script has no instructions".into()));
        }
        Ok(Self { instrs })
    }
}

impl Program for Script {
    fn build(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        let mut slots: Vec<Var> = inputs.to_vec();
        for instr in &self.instrs {
            let a = instr
                .args
                .iter()
                .map(|&i| {
                    slots
                        .get(i)
                        .copied()
                        .ok_or_else(|| Error::Contract(format!("slot {i} is not defined yet")))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = match instr.prim {
                Primitive::Add => g.add(a[0], a[1]),
                Primitive::Sub => g.sub(a[0], a[1]),
                Primitive::Mul => g.mul(a[0], a[1]),
                Primitive::Neg => g.neg(a[0]),
                Primitive::Div => g.div(a[0], a[1]),
                Primitive::Exp => g.exp(a[0]),
                Primitive::Log => g.log(a[0]),
                Primitive::Tanh => g.tanh(a[0]),
                Primitive::Relu => g.relu(a[0]),
                Primitive::Square => g.square(a[0]),
                Primitive::Sum => g.sum(a[0]),
                Primitive::Dot => g.dot(a[0], a[1]),
                Primitive::Max => g.max(a[0], a[1]),
                Primitive::Select => g.select(a[0], a[1], a[2]),
                Primitive::MatMul => g.matmul(a[0], a[1]),
                Primitive::Transpose => g.transpose(a[0]),
            };
            slots.push(out);
        }
        Ok(*slots.last().expect("non-empty script"))
    }
}

/// Result of [`record`].
#[derive(Clone, Debug)]
pub struct Recording {
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub output: Var,
}

impl Recording {
    pub fn value(&self) -> &Array2<f64> {
        self.tape.value(self.output)
    }
}

/// Records `program` on a fresh tape with one input node per array.
pub fn record(program: &dyn Program, inputs: &[Array2<f64>]) -> Result<Recording> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| graph.input(x.clone())).collect();
    let output = program.build(&mut graph, &vars)?;
    Ok(Recording {
        tape: graph.finish()?,
        inputs: vars,
        output,
    })
}

/// [`record`] with one `1 x 1` input per number.
pub fn record_scalars(program: &dyn Program, inputs: &[f64]) -> Result<Recording> {
    let arrays: Vec<Array2<f64>> = inputs
        .iter()
        .map(|&x| Array2::from_elem((1, 1), x))
        .collect();
    record(program, &arrays)
}

fn evaluate_scalar(program: &dyn Program, inputs: &[Array2<f64>]) -> Result<f64> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| graph.input(x.clone())).collect();
    let out = program.build(&mut graph, &vars)?;
    Ok(graph.scalar_value(out))
}

/// Worst elementwise relative error between the reverse-mode gradient and a
/// central difference `(f(x+e) - f(x-e)) / 2e`, with denominator
/// `max(|a|, |b|, 1e-8)`.
pub fn fd_check(program: &dyn Program, inputs: &[Array2<f64>], epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Contract(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let rec = record(program, inputs)?;
    let analytic = rec.tape.gradient_arrays(rec.output, &rec.inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = inputs[k][[r, c]];
            probe[k][[r, c]] = orig + epsilon;
            let plus = evaluate_scalar(program, &probe)?;
            probe[k][[r, c]] = orig - epsilon;
            let minus = evaluate_scalar(program, &probe)?;
            probe[k][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
