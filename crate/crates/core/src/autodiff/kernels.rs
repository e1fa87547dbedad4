//! Forward kernels. Pure functions of input values, shared by recording and
//! by graph replay.

use super::graph::Op;
use super::{Array, AutodiffError};

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn as_matrix(op: &'static str, a: &Array) -> Result<(usize, usize), AutodiffError> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(op, format!("expected a matrix, got shape {:?}", s))),
    }
}

pub(crate) fn eval(op: &Op, inputs: &[&Array]) -> Result<Array, AutodiffError> {
    let name = op.name();
    match op {
        Op::Leaf => Ok(inputs[0].clone()),
        Op::Add => {
            same_shape(name, inputs[0], inputs[1])?;
            Ok(inputs[0].zip_map(inputs[1], |a, b| a + b))
        }
        Op::Sub => {
            same_shape(name, inputs[0], inputs[1])?;
            Ok(inputs[0].zip_map(inputs[1], |a, b| a - b))
        }
        Op::Mul => {
            same_shape(name, inputs[0], inputs[1])?;
            Ok(inputs[0].zip_map(inputs[1], |a, b| a * b))
        }
        Op::Scale(c) => Ok(inputs[0].map(|v| c * v)),
        Op::Shift(c) => Ok(inputs[0].map(|v| v + c)),
        Op::MatMul => matmul(inputs[0], inputs[1]),
        Op::Transpose => {
            let (r, c) = as_matrix(name, inputs[0])?;
            let a = inputs[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            Ok(Array::from_parts(vec![c, r], out))
        }
        Op::Sum => Ok(Array::scalar(inputs[0].sum())),
        Op::Broadcast(shape) => {
            if !inputs[0].is_scalar() {
                return Err(mismatch(
                    name,
                    format!("only one-element tensors broadcast, got {:?}", inputs[0].shape()),
                ));
            }
            Ok(Array::full(shape, inputs[0].data()[0]))
        }
        Op::Abs => Ok(inputs[0].map(f64::abs)),
        Op::Exp => Ok(inputs[0].map(f64::exp)),
        Op::Log => {
            if inputs[0].data().iter().any(|&v| v <= 0.0) {
                return Err(AutodiffError::Domain { op: name, detail: "log of non-positive value".into() });
            }
            Ok(inputs[0].map(f64::ln))
        }
        Op::Recip => {
            if inputs[0].data().iter().any(|&v| v == 0.0) {
                return Err(AutodiffError::Domain { op: name, detail: "reciprocal of zero".into() });
            }
            Ok(inputs[0].map(f64::recip))
        }
        Op::Tanh => Ok(inputs[0].map(f64::tanh)),
        Op::Gather(indices) => {
            let (rows, d) = as_matrix(name, inputs[0])?;
            let table = inputs[0].data();
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices.iter() {
                if i >= rows {
                    return Err(AutodiffError::IndexOutOfRange { index: i, len: rows });
                }
                out.extend_from_slice(&table[i * d..(i + 1) * d]);
            }
            Ok(Array::from_parts(vec![indices.len(), d], out))
        }
        Op::ScatterAdd { indices, rows } => {
            let (n, d) = as_matrix(name, inputs[0])?;
            if n != indices.len() {
                return Err(mismatch(name, format!("{} rows for {} indices", n, indices.len())));
            }
            let src = inputs[0].data();
            let mut out = vec![0.0; rows * d];
            for (k, &i) in indices.iter().enumerate() {
                if i >= *rows {
                    return Err(AutodiffError::IndexOutOfRange { index: i, len: *rows });
                }
                for j in 0..d {
                    out[i * d + j] += src[k * d + j];
                }
            }
            Ok(Array::from_parts(vec![*rows, d], out))
        }
        Op::ConcatRows => {
            let first = inputs
                .first()
                .ok_or_else(|| mismatch(name, "nothing to concatenate".into()))?;
            let tail = &first.shape()[1..];
            let mut rows = 0;
            let mut out = Vec::new();
            for a in inputs {
                if a.shape().is_empty() || &a.shape()[1..] != tail {
                    return Err(mismatch(name, format!("{:?} vs {:?}", first.shape(), a.shape())));
                }
                rows += a.shape()[0];
                out.extend_from_slice(a.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Ok(Array::from_parts(shape, out))
        }
        Op::SliceRows { start, len } => {
            let a = inputs[0];
            if a.shape().is_empty() || start + len > a.shape()[0] {
                return Err(mismatch(name, format!("rows {}..{} of {:?}", start, start + len, a.shape())));
            }
            let width: usize = a.shape()[1..].iter().product();
            let mut shape = a.shape().to_vec();
            shape[0] = *len;
            Ok(Array::from_parts(shape, a.data()[start * width..(start + len) * width].to_vec()))
        }
        Op::Reshape(shape) => inputs[0]
            .reshaped(shape)
            .map_err(|_| mismatch(name, format!("{:?} -> {:?}", inputs[0].shape(), shape))),
    }
}

fn matmul(a: &Array, b: &Array) -> Result<Array, AutodiffError> {
    let (m, k) = as_matrix("matmul", a)?;
    let (k2, n) = as_matrix("matmul", b)?;
    if k != k2 {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Array::from_parts(vec![m, n], out))
}
