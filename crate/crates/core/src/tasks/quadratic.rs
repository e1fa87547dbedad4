//! Quadratic bi-level problem with a closed-form solution.
//!
//! `L_aux(w, φ) = Σ_t φ_t · ½ (w − c_t)ᵀ A_t (w − c_t)` and
//! `L_pri(w) = ½ (w − c_0)ᵀ A_0 (w − c_0)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Array, Tensor};
use crate::bilevel::Bilevel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTestbed {
    pub a: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
    pub phi: Vec<f64>,
}

/// `w*(φ)` and `∇_φ L_pri(w*(φ))`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadSolution {
    pub w_star: DVector<f64>,
    pub hypergrad: Vec<f64>,
}

/// Random SPD matrix `Q Λ Qᵀ` with eigenvalues uniform in `[lo, hi]`.
pub fn random_spd(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let eig = DVector::<f64>::from_fn(n, |_, _| rng.random_range(lo..=hi));
    let a: DMatrix<f64> = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&a + a.transpose()) * 0.5
}

impl QuadraticTestbed {
    pub fn new(a: Vec<DMatrix<f64>>, c: Vec<DVector<f64>>, phi: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.len() != c.len() || a.len() != phi.len() {
            return Err(Error::InvalidInput(format!("{} matrices, {} centers, {} weights", a.len(), c.len(), phi.len())));
        }
        let n = c[0].len();
        for (at, ct) in a.iter().zip(&c) {
            if at.shape() != (n, n) || ct.len() != n {
                return Err(Error::InvalidInput("inconsistent dimensions".into()));
            }
            if (at - at.transpose()).amax() > 1e-12 * at.amax().max(1.0) {
                return Err(Error::InvalidInput("A_t must be symmetric".into()));
            }
            if at.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite);
            }
        }
        if phi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("combiner weights must be positive".into()));
        }
        Ok(Self { a, c, phi })
    }

    /// `aux_tasks + 1` tasks in dimension `n`; eigenvalues in `[0.2, 2.0]`,
    /// centers standard normal, weights uniform in `[0.5, 1.5]`.
    pub fn random(rng: &mut impl Rng, n: usize, aux_tasks: usize) -> Self {
        let tasks = aux_tasks + 1;
        let a = (0..tasks).map(|_| random_spd(rng, n, 0.2, 2.0)).collect();
        let c = (0..tasks).map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(rng))).collect();
        let phi = (0..tasks).map(|_| rng.random_range(0.5..=1.5)).collect();
        Self::new(a, c, phi).expect("generated SPD")
    }

    pub fn dim(&self) -> usize {
        self.c[0].len()
    }

    pub fn tasks(&self) -> usize {
        self.a.len()
    }

    /// `Σ φ_t A_t`, the Hessian of `L_aux` in `w`.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.hessian_at(&self.phi)
    }

    fn hessian_at(&self, phi: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        self.a.iter().zip(phi).fold(DMatrix::zeros(n, n), |acc, (a, &p)| acc + a * p)
    }

    /// Multiply every weight by `lambda` so the Hessian's largest eigenvalue
    /// becomes `target`.
    pub fn scale_spectrum_to(&mut self, target: f64) {
        let top = self.hessian().symmetric_eigenvalues().max();
        for p in &mut self.phi {
            *p *= target / top;
        }
    }

    pub fn w_star(&self) -> Result<DVector<f64>> {
        self.w_star_at(&self.phi)
    }

    fn w_star_at(&self, phi: &[f64]) -> Result<DVector<f64>> {
        let chol = self.hessian_at(phi).cholesky().ok_or(Error::NotPositiveDefinite)?;
        let n = self.dim();
        let b = self.a.iter().zip(&self.c).zip(phi).fold(DVector::zeros(n), |acc, ((a, c), &p)| acc + a * c * p);
        Ok(chol.solve(&b))
    }

    pub fn pri_value(&self, w: &DVector<f64>) -> f64 {
        let d = w - &self.c[0];
        0.5 * d.dot(&(&self.a[0] * &d))
    }

    /// Central differences of `L_pri(w*(φ))` over each `φ_t`.
    pub fn fd_hypergrad(&self, step: f64) -> Result<Vec<f64>> {
        let mut phi = self.phi.clone();
        (0..self.tasks())
            .map(|t| {
                let x = self.phi[t];
                let h = step * x.abs().max(1.0);
                phi[t] = x + h;
                let fp = self.pri_value(&self.w_star_at(&phi)?);
                phi[t] = x - h;
                let fm = self.pri_value(&self.w_star_at(&phi)?);
                phi[t] = x;
                Ok((fp - fm) / (2.0 * h))
            })
            .collect()
    }

    /// `w` as the single `[n, 1]` learner array.
    pub fn w_arrays(&self, w: &DVector<f64>) -> Vec<Array> {
        vec![Array::new(vec![w.len(), 1], w.as_slice().to_vec()).expect("column")]
    }

    /// `φ` as the single `[T + 1, 1]` meta array.
    pub fn phi_arrays(&self) -> Vec<Array> {
        vec![Array::new(vec![self.tasks(), 1], self.phi.clone()).expect("column")]
    }

    fn quad_form(&self, w: &Tensor, t: usize) -> Result<Tensor> {
        let n = self.dim();
        let c = Tensor::constant(Array::new(vec![n, 1], self.c[t].as_slice().to_vec())?);
        // nalgebra is column-major; A_t is symmetric so the layout is moot
        let a = Tensor::constant(Array::new(vec![n, n], self.a[t].as_slice().to_vec())?);
        let d = w.sub(&c)?;
        Ok(d.t()?.matmul(&a)?.matmul(&d)?.reshape(&[])?.scale(0.5)?)
    }
}

impl Bilevel for QuadraticTestbed {
    fn aux(&self, w: &[Tensor], phi: &[Tensor]) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for t in 0..self.tasks() {
            let weight = phi[0].slice_rows(t, 1)?.reshape(&[])?;
            let term = weight.mul(&self.quad_form(&w[0], t)?)?;
            total = Some(match total {
                Some(s) => s.add(&term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one task"))
    }

    fn pri(&self, w: &[Tensor], _phi: &[Tensor]) -> Result<Tensor> {
        self.quad_form(&w[0], 0)
    }
}

/// Exact `w*` and hypergradient
/// `∂_{φ_t} = −(A_0 (w* − c_0))ᵀ H⁻¹ A_t (w* − c_t)` with `H = Σ φ_t A_t`.
pub fn quad_closed_form(tb: &QuadraticTestbed) -> Result<QuadSolution> {
    let w_star = tb.w_star()?;
    let chol = tb.hessian().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let u = chol.solve(&(&tb.a[0] * (&w_star - &tb.c[0])));
    let hypergrad = tb.a.iter().zip(&tb.c).map(|(a, c)| -u.dot(&(a * (&w_star - c)))).collect();
    Ok(QuadSolution { w_star, hypergrad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use proptest::prelude::*;
    use rand::Rng;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn primary_only_optimum() {
        let tb = QuadraticTestbed::new(vec![DMatrix::identity(3, 3)], vec![DVector::from_vec(vec![1.0, -2.0, 0.5])], vec![1.0]).unwrap();
        let sol = quad_closed_form(&tb).unwrap();
        assert!((sol.w_star - &tb.c[0]).amax() < 1e-15);
        assert_eq!(sol.hypergrad, vec![0.0]);
    }

    #[test]
    fn two_task_example() {
        let tb = QuadraticTestbed::new(
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0],
            vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])],
            vec![1.0, 1.0],
        )
        .unwrap();
        let sol = quad_closed_form(&tb).unwrap();
        assert!((sol.w_star[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((sol.w_star[1] - 2.0 / 3.0).abs() < 1e-15);
        // by hand: H = 3I, u = H⁻¹(w* − c_0) = (−2/9, 2/9)
        assert!((sol.hypergrad[0] + 8.0 / 27.0).abs() < 1e-15);
        assert!((sol.hypergrad[1] - 8.0 / 27.0).abs() < 1e-15);
        let fd = tb.fd_hypergrad(1e-5).unwrap();
        assert!(rel(&sol.hypergrad, &fd) < 1e-8, "{:?} vs {:?}", sol.hypergrad, fd);
    }

    #[test]
    fn matches_fd_on_random_instances() {
        let mut rng = init::rng(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=8);
            let t = rng.random_range(0..=3);
            let tb = QuadraticTestbed::random(&mut rng, n, t);
            let sol = quad_closed_form(&tb).unwrap();
            let fd = tb.fd_hypergrad(1e-5).unwrap();
            let norm: f64 = sol.hypergrad.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-10 {
                assert!(rel(&sol.hypergrad, &fd) < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_indefinite_and_bad_weights() {
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let c = vec![DVector::zeros(2)];
        assert_eq!(QuadraticTestbed::new(vec![bad], c.clone(), vec![1.0]), Err(Error::NotPositiveDefinite));
        assert!(QuadraticTestbed::new(vec![DMatrix::identity(2, 2)], c.clone(), vec![0.0]).is_err());
        assert!(QuadraticTestbed::new(vec![DMatrix::identity(2, 2)], c, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn spd_generator_spectrum() {
        let mut rng = init::rng(3);
        let a = random_spd(&mut rng, 6, 0.2, 2.0);
        let eig = a.symmetric_eigenvalues();
        assert!(eig.min() >= 0.2 - 1e-12 && eig.max() <= 2.0 + 1e-12);
    }

    #[test]
    fn spectrum_scaling() {
        let mut tb = QuadraticTestbed::random(&mut init::rng(5), 4, 2);
        tb.scale_spectrum_to(1.5);
        assert!((tb.hessian().symmetric_eigenvalues().max() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn tensor_objective_matches_values() {
        let tb = QuadraticTestbed::random(&mut init::rng(8), 3, 2);
        let w = DVector::from_vec(vec![0.3, -0.1, 0.7]);
        let wt: Vec<Tensor> = tb.w_arrays(&w).into_iter().map(Tensor::constant).collect();
        let pt: Vec<Tensor> = tb.phi_arrays().into_iter().map(Tensor::constant).collect();
        assert!((tb.pri(&wt, &pt).unwrap().item() - tb.pri_value(&w)).abs() < 1e-14);
        let expected: f64 = (0..3)
            .map(|t| {
                let d = &w - &tb.c[t];
                tb.phi[t] * 0.5 * d.dot(&(&tb.a[t] * &d))
            })
            .sum();
        assert!((tb.aux(&wt, &pt).unwrap().item() - expected).abs() < 1e-13);
    }

    proptest! {
        #[test]
        fn argmin_invariant_under_positive_scaling(seed in 0u64..200, lambda in 0.01f64..100.0) {
            let tb = QuadraticTestbed::random(&mut init::rng(seed), 4, 2);
            let mut scaled = tb.clone();
            for p in &mut scaled.phi {
                *p *= lambda;
            }
            let a = tb.w_star().unwrap();
            let b = scaled.w_star().unwrap();
            prop_assert!((a - b).amax() < 1e-10);
        }
    }
}
