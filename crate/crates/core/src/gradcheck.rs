//! Oracle suites: autodiff against finite differences, hvp against
//! differences of gradients, and exact hypergradients against the quadratic
//! closed form.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_grad, gradient, hvp, relative_error, Array, AutodiffError, Graph, Tensor};
use crate::bilevel::hypergrad_exact;
use crate::error::Result;
use crate::init;
use crate::params;
use crate::tasks::{quad_closed_form, QuadraticTestbed};

pub const FD_TOL: f64 = 1e-5;
pub const HVP_TOL: f64 = 1e-4;
pub const EXACT_TOL: f64 = 1e-8;
pub const ORACLE_FD_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;
const HVP_STEP: f64 = 1e-5;
const HYPER_FD_STEP: f64 = 1e-5;
/// Relative errors are taken against at least this norm.
const ERROR_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    MatMul(usize),
    Transpose,
    Add(usize),
    Sub(usize),
    Mul(usize),
    /// Multiply by a scalar parameter.
    Scalar(usize),
    Abs,
    Exp,
    /// `log(1 + h²)`
    Log,
    Gelu,
    Softmax,
    LayerNorm(usize, usize),
    Gather(usize),
    Concat(usize),
    Reshape,
    Mean,
}

/// A random chain of ops on an input matrix, reduced to a scalar through a
/// fixed random weighting. Every array it reads is a parameter.
#[derive(Clone, Debug)]
pub struct Composite {
    steps: Vec<Step>,
    pub params: Vec<Array>,
    gathers: Vec<Vec<usize>>,
    weights: Array,
}

impl Composite {
    pub fn random(rng: &mut impl Rng) -> Self {
        loop {
            if let Some(c) = Self::attempt(rng) {
                return c;
            }
        }
    }

    fn attempt(rng: &mut impl Rng) -> Option<Self> {
        let (r, c) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let mut params = vec![init::normal(rng, &[r, c], 1.0)];
        let mut gathers = Vec::new();
        let mut steps = Vec::new();
        let graph_free = |params: &[Array]| params.iter().cloned().map(Tensor::constant).collect::<Vec<_>>();
        let mut h = Tensor::constant(params[0].clone());
        let length = rng.random_range(3..=6);
        let mut tries = 0;
        while steps.len() < length {
            tries += 1;
            if tries > 100 {
                return None;
            }
            let shape = h.shape().to_vec();
            let (rows, cols) = (shape[0], shape[1]);
            let new_param = |rng: &mut _, s: &[usize], params: &mut Vec<Array>| {
                params.push(init::normal(rng, s, 0.8));
                params.len() - 1
            };
            let kinds = ["matmul", "t", "add", "sub", "mul", "scalar", "abs", "exp", "log", "gelu", "softmax", "ln", "gather", "concat", "reshape", "mean"];
            let value = h.value().clone();
            let max_abs = value.max_abs();
            let step = match *kinds.choose(rng).expect("nonempty") {
                "matmul" => {
                    let out = rng.random_range(2..=4);
                    Step::MatMul(new_param(rng, &[cols, out], &mut params))
                }
                "t" => Step::Transpose,
                "add" => Step::Add(new_param(rng, &[rows, cols], &mut params)),
                "sub" => Step::Sub(new_param(rng, &[rows, cols], &mut params)),
                "mul" => Step::Mul(new_param(rng, &[rows, cols], &mut params)),
                "scalar" => Step::Scalar(new_param(rng, &[], &mut params)),
                // keep finite differences away from the kink
                "abs" if value.data().iter().all(|v| v.abs() > 1e-2) => Step::Abs,
                "exp" if max_abs < 3.0 => Step::Exp,
                "log" => Step::Log,
                "gelu" => Step::Gelu,
                "softmax" if max_abs < 10.0 => Step::Softmax,
                "ln" if row_spread(&value) > 0.1 => {
                    let g = new_param(rng, &[1, cols], &mut params);
                    let b = new_param(rng, &[1, cols], &mut params);
                    Step::LayerNorm(g, b)
                }
                "gather" => {
                    let n = rng.random_range(2..=5);
                    gathers.push((0..n).map(|_| rng.random_range(0..rows)).collect());
                    Step::Gather(gathers.len() - 1)
                }
                "concat" => {
                    let extra = rng.random_range(1..=2);
                    Step::Concat(new_param(rng, &[extra, cols], &mut params))
                }
                "reshape" => Step::Reshape,
                "mean" if rows > 1 => Step::Mean,
                _ => continue,
            };
            let p = graph_free(&params);
            h = apply(step, &h, &p, &gathers).ok()?;
            if !h.value().is_finite() || h.value().max_abs() > 20.0 {
                return None;
            }
            steps.push(step);
        }
        let weights = init::normal(rng, h.shape(), 1.0);
        Some(Self { steps, params, gathers, weights })
    }

    pub fn eval(&self, params: &[Tensor]) -> std::result::Result<Tensor, AutodiffError> {
        let mut h = params[0].clone();
        for &step in &self.steps {
            h = apply(step, &h, params, &self.gathers)?;
        }
        Ok(h.mul(&Tensor::constant(self.weights.clone()))?.sum()?)
    }
}

fn row_spread(a: &Array) -> f64 {
    (0..a.rows())
        .map(|i| {
            let row: Vec<f64> = (0..a.cols()).map(|j| a.get2(i, j)).collect();
            let m = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

fn apply(step: Step, h: &Tensor, p: &[Tensor], gathers: &[Vec<usize>]) -> std::result::Result<Tensor, AutodiffError> {
    let shape = h.shape().to_vec();
    Ok(match step {
        Step::MatMul(i) => h.matmul(&p[i])?,
        Step::Transpose => h.t()?,
        Step::Add(i) => h.add(&p[i])?,
        Step::Sub(i) => h.sub(&p[i])?,
        Step::Mul(i) => h.mul(&p[i])?,
        Step::Scalar(i) => h.mul(&p[i])?,
        Step::Abs => h.abs()?,
        Step::Exp => h.exp()?,
        Step::Log => h.square()?.shift(1.0)?.log()?,
        Step::Gelu => h.gelu()?,
        Step::Softmax => h.softmax_rows()?,
        Step::LayerNorm(g, b) => h.layer_norm_rows(&p[g], &p[b], 1e-5)?,
        Step::Gather(k) => h.gather_rows(&gathers[k])?,
        Step::Concat(i) => Tensor::concat_rows(&[h.clone(), p[i].clone()])?,
        Step::Reshape => h.reshape(&[shape[1], shape[0]])?,
        Step::Mean => h.mean_rows()?,
    })
}

/// One suite's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub tolerance: f64,
    pub worst_error: f64,
    pub worst_case: usize,
}

impl SuiteReport {
    fn from_errors(name: &str, tolerance: f64, errors: &[f64]) -> Self {
        let (worst_case, worst_error) = errors
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, e)| if !best.1.is_nan() && !(e <= best.1) { (i, e) } else { best });
        Self {
            name: name.into(),
            cases: errors.len(),
            failures: errors.iter().filter(|e| !(**e <= tolerance)).count(),
            tolerance,
            worst_error,
            worst_case,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "{} {:<18} cases {:>3}  failures {:>3}  worst {:.3e} (case {}) tol {:.0e}",
                if s.passed() { "PASS" } else { "FAIL" },
                s.name,
                s.cases,
                s.failures,
                s.worst_error,
                s.worst_case,
                s.tolerance
            )?;
        }
        write!(f, "{}", if self.passed() { "gradcheck passed" } else { "gradcheck FAILED" })
    }
}

/// Errors count as failures, reported as infinite relative error.
fn or_inf(r: Result<f64>) -> f64 {
    r.unwrap_or(f64::INFINITY)
}

/// `grad()` against central differences on random composites.
pub fn fd_errors(seed: u64, cases: usize) -> Vec<f64> {
    let mut rng = init::rng(seed);
    (0..cases)
        .map(|_| {
            let c = Composite::random(&mut rng);
            or_inf((|| {
                let ad = gradient(|p| c.eval(p), &c.params)?;
                let fd = finite_diff_grad(|p| c.eval(p), &c.params, FD_STEP)?;
                Ok(relative_error(&ad, &fd, ERROR_FLOOR))
            })())
        })
        .collect()
}

/// `hvp()` against central differences of gradients along a random unit
/// direction.
pub fn hvp_errors(seed: u64, cases: usize) -> Vec<f64> {
    let mut rng = init::rng(seed);
    (0..cases)
        .map(|_| {
            let c = Composite::random(&mut rng);
            let mut v: Vec<Array> = c.params.iter().map(|p| init::normal(&mut rng, p.shape(), 1.0)).collect();
            let n = params::norm(&v);
            v = params::scaled(&v, 1.0 / n);
            or_inf((|| {
                let ad = hvp(|p| c.eval(p), &c.params, &v)?;
                let mut plus = c.params.clone();
                params::axpy(&mut plus, HVP_STEP, &v);
                let mut minus = c.params.clone();
                params::axpy(&mut minus, -HVP_STEP, &v);
                let diff = params::sub(&gradient(|p| c.eval(p), &plus)?, &gradient(|p| c.eval(p), &minus)?);
                Ok(relative_error(&ad, &params::scaled(&diff, 0.5 / HVP_STEP), ERROR_FLOOR))
            })())
        })
        .collect()
}

/// Per instance: (exact vs closed form, closed form vs differences of the
/// solved objective over `φ`).
pub fn quadratic_errors(seed: u64, cases: usize) -> Vec<(f64, f64)> {
    let mut rng = init::rng(seed);
    (0..cases)
        .map(|_| {
            let (n, t) = (rng.random_range(1..=8), rng.random_range(1..=4));
            let tb = QuadraticTestbed::random(&mut rng, n, t);
            let run = || -> Result<(f64, f64)> {
                let oracle = quad_closed_form(&tb)?;
                let want = [Array::new(vec![tb.tasks(), 1], oracle.hypergrad.clone())?];
                let exact = hypergrad_exact(&tb, &tb.w_arrays(&oracle.w_star), &tb.phi_arrays())?;
                let fd = [Array::new(vec![tb.tasks(), 1], tb.fd_hypergrad(HYPER_FD_STEP)?)?];
                Ok((relative_error(&exact.grads, &want, ERROR_FLOOR), relative_error(&want, &fd, ERROR_FLOOR)))
            };
            run().unwrap_or((f64::INFINITY, f64::INFINITY))
        })
        .collect()
}

/// Sizes of each suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradcheckPlan {
    pub seed: u64,
    pub composites: usize,
    pub quadratics: usize,
}

impl Default for GradcheckPlan {
    fn default() -> Self {
        Self { seed: 0, composites: 100, quadratics: 50 }
    }
}

pub fn run_gradcheck(plan: &GradcheckPlan) -> GradcheckReport {
    let quad = quadratic_errors(plan.seed.wrapping_add(2), plan.quadratics);
    let (exact, fd): (Vec<f64>, Vec<f64>) = quad.into_iter().unzip();
    GradcheckReport {
        suites: vec![
            SuiteReport::from_errors("autodiff_fd", FD_TOL, &fd_errors(plan.seed, plan.composites)),
            SuiteReport::from_errors("hvp_fd", HVP_TOL, &hvp_errors(plan.seed.wrapping_add(1), plan.composites)),
            SuiteReport::from_errors("quadratic_exact", EXACT_TOL, &exact),
            SuiteReport::from_errors("quadratic_fd", ORACLE_FD_TOL, &fd),
        ],
    }
}

/// Evaluate `f` once on a fresh graph; used to confirm composites build.
pub fn evaluates(c: &Composite) -> bool {
    let g = Graph::new();
    c.eval(&g.vars(&c.params)).is_ok()
}
