//! Finite-difference oracles and Hessian-vector products.

use super::{grad, Array, AutodiffError, Graph, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Central-difference gradient of `f` at `w`, one coordinate at a time.
///
/// The step for coordinate `x` is `step * max(1, |x|)`.
pub fn finite_diff_grad<F>(f: F, w: &[Array], step: f64) -> Result<Vec<Array>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eval = |point: &[Array]| -> Result<f64> {
        let consts: Vec<Tensor> = point.iter().cloned().map(Tensor::constant).collect();
        let out = f(&consts)?;
        if !out.value().is_scalar() {
            return Err(AutodiffError::NonScalarOutput { shape: out.shape().to_vec() });
        }
        Ok(out.item())
    };
    let mut point = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for p in 0..w.len() {
        let mut g = w[p].zeros_like();
        for i in 0..w[p].len() {
            let x = w[p].data()[i];
            let h = step * x.abs().max(1.0);
            point[p].data_mut()[i] = x + h;
            let fp = eval(&point)?;
            point[p].data_mut()[i] = x - h;
            let fm = eval(&point)?;
            point[p].data_mut()[i] = x;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Gradient of `f` at `w` by reverse mode on a fresh graph.
pub fn gradient<F>(f: F, w: &[Array]) -> Result<Vec<Array>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let graph = Graph::new();
    let vars = graph.vars(w);
    let loss = f(&vars)?;
    Ok(grad(&loss, &vars, false)?.to_arrays())
}

/// `(∇²f) v` as the gradient of `<∇f, v>`; the Hessian is never formed.
pub fn hvp<F>(f: F, w: &[Array], v: &[Array]) -> Result<Vec<Array>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if v.len() != w.len() || v.iter().zip(w).any(|(a, b)| a.shape() != b.shape()) {
        return Err(AutodiffError::ShapeMismatch { op: "hvp", detail: "v must match w".into() });
    }
    let graph = Graph::new();
    let vars = graph.vars(w);
    let loss = f(&vars)?;
    let g = grad(&loss, &vars, true)?;
    let inner = contract(&g.values, v)?;
    Ok(grad(&inner, &vars, false)?.to_arrays())
}

/// `Σ_i <a_i, b_i>` with the `b` side treated as constants.
pub fn contract(a: &[Tensor], b: &[Array]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (ai, bi) in a.iter().zip(b) {
        let term = ai.dot(&Tensor::constant(bi.clone()))?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, floor)` over the concatenation of all arrays.
pub fn relative_error(a: &[Array], b: &[Array], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}
