use std::cell::Cell;

use super::graph::{Input, Op};
use super::{Array, AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Deliberate gradient-rule corruption, used to prove the gradient checks
/// catch a broken rule. Thread-local so concurrent tests stay isolated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Flip the sign of the `exp` gradient rule.
    FlipExpSign,
}

thread_local! {
    static FAULT: Cell<Fault> = const { Cell::new(Fault::None) };
}

#[doc(hidden)]
pub fn inject_fault(fault: Fault) {
    FAULT.with(|f| f.set(fault));
}

fn fault() -> Fault {
    FAULT.with(|f| f.get())
}

/// Result of [`grad`]: one gradient per requested tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub values: Vec<Tensor>,
    /// `true` where the requested tensor does not influence the output; the
    /// matching gradient is zero.
    pub unreachable: Vec<bool>,
}

impl Gradients {
    pub fn any_unreachable(&self) -> bool {
        self.unreachable.iter().any(|&u| u)
    }

    pub fn to_arrays(&self) -> Vec<Array> {
        self.values.iter().map(Tensor::to_array).collect()
    }
}

/// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
///
/// With `create_graph` the gradient computation is itself recorded, so the
/// returned gradients can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Gradients> {
    if !output.value.is_scalar() {
        return Err(AutodiffError::NonScalarOutput { shape: output.shape().to_vec() });
    }
    output.check_live()?;
    for w in wrt {
        w.check_live()?;
    }
    let zeros = |w: &Tensor| Tensor::constant(w.value.zeros_like());

    let Some(out_ref) = output.node.clone() else {
        return Ok(Gradients { values: wrt.iter().map(zeros).collect(), unreachable: vec![true; wrt.len()] });
    };
    let graph = out_ref.graph.clone();

    let mut acc: Vec<Option<Tensor>> = vec![None; out_ref.id + 1];
    acc[out_ref.id] = Some(Tensor::constant(Array::ones(output.shape())));

    let attach = |id: usize| -> Tensor {
        if create_graph {
            graph.tensor(id)
        } else {
            Tensor { value: graph.value(id), node: None }
        }
    };

    for id in (0..=out_ref.id).rev() {
        let Some(g) = acc[id].take() else { continue };
        let (op, inputs, _) = graph.node_parts(id);
        if op == Op::Leaf {
            acc[id] = Some(g);
            continue;
        }
        let in_tensors: Vec<Tensor> = inputs
            .iter()
            .map(|i| match i {
                Input::Node(j) => attach(*j),
                Input::Const(a) => Tensor { value: a.clone(), node: None },
            })
            .collect();
        let out_tensor = attach(id);
        let g = if create_graph { g } else { g.detach() };
        let needs: Vec<bool> = inputs.iter().map(|i| matches!(i, Input::Node(_))).collect();
        let grads = vjp(&op, &in_tensors, &out_tensor, &g, &needs)?;
        for (input, gi) in inputs.iter().zip(grads) {
            if let (Input::Node(j), Some(gi)) = (input, gi) {
                acc[*j] = Some(match acc[*j].take() {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                });
            }
        }
        // Keep the gradient of this node in case it was requested directly.
        acc[id] = Some(g);
    }

    let mut values = Vec::with_capacity(wrt.len());
    let mut unreachable = Vec::with_capacity(wrt.len());
    for w in wrt {
        let found = w.node.as_ref().and_then(|n| {
            if n.graph.same(&graph) && n.id <= out_ref.id {
                acc[n.id].clone()
            } else {
                None
            }
        });
        match found {
            Some(g) => {
                values.push(g);
                unreachable.push(false);
            }
            None => {
                values.push(zeros(w));
                unreachable.push(true);
            }
        }
    }
    Ok(Gradients { values, unreachable })
}

/// Vector-Jacobian products for one node, written with recordable ops so
/// they can be differentiated again.
fn vjp(op: &Op, x: &[Tensor], y: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), if want(1) { Some(g.neg()?) } else { None }]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&x[1])?) } else { None },
            if want(1) { Some(g.mul(&x[0])?) } else { None },
        ]),
        Op::Scale(c) => one(g.scale(*c)),
        Op::Shift(_) => Ok(vec![Some(g.clone())]),
        Op::MatMul => Ok(vec![
            if want(0) { Some(g.matmul(&x[1].t()?)?) } else { None },
            if want(1) { Some(x[0].t()?.matmul(g)?) } else { None },
        ]),
        Op::Transpose => one(g.t()),
        Op::Sum => one(g.broadcast_to(x[0].shape())),
        Op::Broadcast(_) => one(g.sum()?.reshape(x[0].shape())),
        Op::Abs => {
            // Subgradient 0 at the kink.
            let sign = x[0].value.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
            one(g.mul(&Tensor::constant(sign)))
        }
        Op::Exp => {
            let d = g.mul(y)?;
            if fault() == Fault::FlipExpSign {
                one(d.neg())
            } else {
                Ok(vec![Some(d)])
            }
        }
        Op::Log => one(g.mul(&x[0].recip()?)),
        Op::Recip => one(g.mul(&y.square()?)?.neg()),
        Op::Tanh => one(g.mul(&y.square()?.neg()?.shift(1.0)?)),
        Op::Gather(indices) => one(g.scatter_add_rows(indices, x[0].shape()[0])),
        Op::ScatterAdd { indices, .. } => one(g.gather_rows(indices)),
        Op::ConcatRows => {
            let mut start = 0;
            let mut out = Vec::with_capacity(x.len());
            for (i, part) in x.iter().enumerate() {
                let rows = part.shape()[0];
                out.push(if want(i) { Some(g.slice_rows(start, rows)?) } else { None });
                start += rows;
            }
            Ok(out)
        }
        Op::SliceRows { start, len } => {
            let shape = x[0].shape();
            let width: Vec<usize> = shape[1..].to_vec();
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                let mut s = vec![*start];
                s.extend_from_slice(&width);
                parts.push(Tensor::constant(Array::zeros(&s)));
            }
            parts.push(g.clone());
            let after = shape[0] - start - len;
            if after > 0 {
                let mut s = vec![after];
                s.extend_from_slice(&width);
                parts.push(Tensor::constant(Array::zeros(&s)));
            }
            one(Tensor::concat_rows(&parts))
        }
        Op::Reshape(_) => one(g.reshape(x[0].shape())),
    }
}
