//! Arithmetic on parameter lists (`[Array]`) treated as one flat vector.

use crate::autodiff::Array;

pub fn dot(a: &[Array], b: &[Array]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub fn norm(a: &[Array]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[Array], b: &[Array]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

pub fn zeros_like(a: &[Array]) -> Vec<Array> {
    a.iter().map(Array::zeros_like).collect()
}

/// `a += alpha * x`
pub fn axpy(a: &mut [Array], alpha: f64, x: &[Array]) {
    for (ai, xi) in a.iter_mut().zip(x) {
        ai.axpy(alpha, xi);
    }
}

pub fn scaled(a: &[Array], alpha: f64) -> Vec<Array> {
    a.iter().map(|x| x.scaled(alpha)).collect()
}

pub fn add(a: &[Array], b: &[Array]) -> Vec<Array> {
    a.iter().zip(b).map(|(x, y)| x.zip_map(y, |p, q| p + q)).collect()
}

pub fn sub(a: &[Array], b: &[Array]) -> Vec<Array> {
    a.iter().zip(b).map(|(x, y)| x.zip_map(y, |p, q| p - q)).collect()
}

pub fn count(a: &[Array]) -> usize {
    a.iter().map(Array::len).sum()
}

pub fn flatten(a: &[Array]) -> Vec<f64> {
    a.iter().flat_map(|x| x.data().iter().copied()).collect()
}

/// Inverse of [`flatten`] using `like` for the shapes.
pub fn unflatten(flat: &[f64], like: &[Array]) -> Vec<Array> {
    let mut off = 0;
    like.iter()
        .map(|x| {
            let n = x.len();
            let out = Array::new(x.shape().to_vec(), flat[off..off + n].to_vec()).expect("length checked");
            off += n;
            out
        })
        .collect()
}

pub fn all_finite(a: &[Array]) -> bool {
    a.iter().all(Array::is_finite)
}

pub fn max_abs(a: &[Array]) -> f64 {
    a.iter().map(Array::max_abs).fold(0.0, f64::max)
}
