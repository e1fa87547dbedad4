use std::rc::Rc;

use super::graph::{record, Op};
use super::{Array, AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tensor {
    /// Make both operands the same shape, broadcasting a one-element side.
    fn align(&self, other: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        if other.value.is_scalar() {
            return Ok((self.clone(), other.broadcast_to(self.shape())?));
        }
        if self.value.is_scalar() {
            return Ok((self.broadcast_to(other.shape())?, other.clone()));
        }
        Err(AutodiffError::ShapeMismatch {
            op: "elementwise",
            detail: format!("{:?} vs {:?} (only scalar broadcasting)", self.shape(), other.shape()),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other)?;
        record(Op::Add, &[&a, &b])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other)?;
        record(Op::Sub, &[&a, &b])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other)?;
        record(Op::Mul, &[&a, &b])
    }

    /// `self / other`, as `self * recip(other)`.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.recip()?)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        record(Op::Scale(c), &[self])
    }

    pub fn shift(&self, c: f64) -> Result<Tensor> {
        record(Op::Shift(c), &[self])
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        record(Op::MatMul, &[self, other])
    }

    pub fn t(&self) -> Result<Tensor> {
        record(Op::Transpose, &[self])
    }

    pub fn sum(&self) -> Result<Tensor> {
        record(Op::Sum, &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        record(Op::Broadcast(shape.to_vec()), &[self])
    }

    pub fn abs(&self) -> Result<Tensor> {
        record(Op::Abs, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        record(Op::Exp, &[self])
    }

    pub fn log(&self) -> Result<Tensor> {
        record(Op::Log, &[self])
    }

    pub fn recip(&self) -> Result<Tensor> {
        record(Op::Recip, &[self])
    }

    pub fn tanh(&self) -> Result<Tensor> {
        record(Op::Tanh, &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        record(Op::Reshape(shape.to_vec()), &[self])
    }

    /// Rows `indices` of a `[rows, d]` table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        record(Op::Gather(Rc::from(indices)), &[self])
    }

    /// Accumulate the rows of `self` into a zero `[rows, d]` table.
    pub fn scatter_add_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        record(Op::ScatterAdd { indices: Rc::from(indices), rows }, &[self])
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        record(Op::ConcatRows, &refs)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        record(Op::SliceRows { start, len }, &[self])
    }

    /// Sum of the elementwise product.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(other)?.sum()
    }

    /// GELU, tanh form.
    pub fn gelu(&self) -> Result<Tensor> {
        let cube = self.mul(&self.square()?)?;
        let inner = self.add(&cube.scale(GELU_K)?)?.scale(GELU_C)?;
        let gate = inner.tanh()?.shift(1.0)?.scale(0.5)?;
        self.mul(&gate)
    }

    /// Row sums of a `[n, m]` matrix broadcast back to `[n, m]`.
    fn row_sums_spread(&self) -> Result<Tensor> {
        let (_, m) = matrix_dims(self, "row sums")?;
        let col = self.matmul(&Tensor::constant(Array::ones(&[m, 1])))?;
        col.matmul(&Tensor::constant(Array::ones(&[1, m])))
    }

    /// Softmax over the last axis of a `[n, m]` matrix.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, m) = matrix_dims(self, "softmax")?;
        // Row max as a constant shift; softmax is shift invariant so the
        // gradient is unaffected.
        let shift = row_max_spread(self.value.data(), n, m);
        let shifted = self.sub(&Tensor::constant(Array::from_parts(vec![n, m], shift)))?;
        let e = shifted.exp()?;
        e.mul(&e.row_sums_spread()?.recip()?)
    }

    /// Log-softmax over the last axis, shifted by the row max so the
    /// log-sum-exp argument is at least one.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (n, m) = matrix_dims(self, "log_softmax")?;
        let shifted = self.sub(&Tensor::constant(Array::from_parts(vec![n, m], row_max_spread(self.value.data(), n, m))))?;
        let lse = shifted.exp()?.matmul(&Tensor::constant(Array::ones(&[m, 1])))?.log()?;
        shifted.sub(&lse.matmul(&Tensor::constant(Array::ones(&[1, m])))?)
    }

    /// Normalize each row of a `[n, m]` matrix to zero mean and unit
    /// variance, then apply per-column `gain` and `bias` (both `[1, m]`).
    pub fn layer_norm_rows(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, m) = matrix_dims(self, "layer_norm")?;
        let mean = self.row_sums_spread()?.scale(1.0 / m as f64)?;
        let centered = self.sub(&mean)?;
        let var = centered.square()?.row_sums_spread()?.scale(1.0 / m as f64)?;
        let inv_std = var.shift(eps)?.log()?.scale(-0.5)?.exp()?;
        let normed = centered.mul(&inv_std)?;
        let ones = Tensor::constant(Array::ones(&[n, 1]));
        normed.mul(&ones.matmul(gain)?)?.add(&ones.matmul(bias)?)
    }

    /// `self @ weight + bias` with `bias` of shape `[1, out]` added to every row.
    pub fn affine(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, _) = matrix_dims(self, "affine")?;
        let ones = Tensor::constant(Array::ones(&[n, 1]));
        self.matmul(weight)?.add(&ones.matmul(bias)?)
    }

    /// Column means of a `[n, m]` matrix as `[1, m]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (n, _) = matrix_dims(self, "mean_rows")?;
        Tensor::constant(Array::full(&[1, n], 1.0 / n as f64)).matmul(self)
    }
}

fn row_max_spread(data: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut shift = Vec::with_capacity(n * m);
    for i in 0..n {
        let mx = data[i * m..(i + 1) * m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(mx, m));
    }
    shift
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        s => Err(AutodiffError::ShapeMismatch { op, detail: format!("expected a matrix, got {:?}", s) }),
    }
}
