use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{contract, grad, Array, AutodiffError, Graph, Tensor};
use crate::error::{Error, Result};
use crate::params;

use super::{Bilevel, HypergradScheme};

pub const EXACT_PARAM_LIMIT: usize = 200;
pub const EXACT_CONDITION_LIMIT: f64 = 1e12;
pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAXIT: usize = 50;
pub const UNROLL_LIMIT: usize = 32;

/// Output of a hypergradient scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergrad {
    /// Estimate of the indirect hypergradient, shaped like `φ`.
    pub grads: Vec<Array>,
    /// `∂_φ L_pri` at fixed `w`, when the scheme had it for free.
    pub direct: Option<Vec<Array>>,
    /// Solver iterations or series terms used.
    pub iterations: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub tol: f64,
    pub maxit: usize,
    /// Stop at the best iterate instead of failing on non-positive curvature.
    pub truncate_on_negative_curvature: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_CG_TOL, maxit: DEFAULT_CG_MAXIT, truncate_on_negative_curvature: false }
    }
}

fn constants(a: &[Array]) -> Vec<Tensor> {
    a.iter().cloned().map(Tensor::constant).collect()
}

fn non_finite(op: &'static str) -> Error {
    Error::Autodiff(AutodiffError::NonFinite { op })
}

/// `(∇_w L_pri, ∂_φ L_pri)` from one backward pass.
pub fn pri_partials(problem: &impl Bilevel, w: &[Array], phi: &[Array]) -> Result<(Vec<Array>, Vec<Array>)> {
    let graph = Graph::new();
    let wv = graph.vars(w);
    let pv = graph.vars(phi);
    let loss = problem.pri(&wv, &pv)?;
    let all: Vec<Tensor> = wv.iter().chain(&pv).cloned().collect();
    let mut g = grad(&loss, &all, false)?.to_arrays();
    let gphi = g.split_off(w.len());
    Ok((g, gphi))
}

/// `−∇_φ ⟨∇_w L_aux(w, φ), v⟩` with `v` held constant.
pub fn mixed_contract(problem: &impl Bilevel, w: &[Array], phi: &[Array], v: &[Array]) -> Result<Vec<Array>> {
    let graph = Graph::new();
    let wv = graph.vars(w);
    let pv = graph.vars(phi);
    let aux = problem.aux(&wv, &pv)?;
    let gw = grad(&aux, &wv, true)?;
    let inner = contract(&gw.values, v)?;
    let g = grad(&inner, &pv, false)?;
    Ok(g.values.iter().map(|t| t.value().scaled(-1.0)).collect())
}

/// Hessian-vector products of `L_aux` in `w`, reusing one recorded
/// first-order backward pass.
pub struct Curvature {
    w: Vec<Tensor>,
    grad_w: Vec<Tensor>,
    _graph: Graph,
}

impl Curvature {
    pub fn new(problem: &impl Bilevel, w: &[Array], phi: &[Array]) -> Result<Self> {
        let graph = Graph::new();
        let wv = graph.vars(w);
        let aux = problem.aux(&wv, &constants(phi))?;
        let grad_w = grad(&aux, &wv, true)?.values;
        Ok(Self { w: wv, grad_w, _graph: graph })
    }

    pub fn apply(&self, v: &[Array]) -> Result<Vec<Array>> {
        let inner = contract(&self.grad_w, v)?;
        Ok(grad(&inner, &self.w, false)?.to_arrays())
    }
}

/// `w − α ∇_w L` for the objective built by `objective`.
pub fn inner_step<F>(w: &[Array], objective: F, alpha: f64) -> Result<Vec<Array>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    Ok(inner_step_probed(w, |p| Ok((objective(p)?, Vec::new())), alpha)?.0)
}

/// As [`inner_step`], also returning the objective value, its partial with
/// respect to each probe tensor the builder hands back, and the probe values.
pub(crate) fn inner_step_probed<F>(w: &[Array], objective: F, alpha: f64) -> Result<(Vec<Array>, f64, Vec<f64>, Vec<f64>)>
where
    F: Fn(&[Tensor]) -> Result<(Tensor, Vec<Tensor>)>,
{
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("inner learning rate must be positive, got {alpha}")));
    }
    let graph = Graph::new();
    let wv = graph.vars(w);
    let (loss, probes) = objective(&wv)?;
    let all: Vec<Tensor> = wv.iter().chain(&probes).cloned().collect();
    let g = grad(&loss, &all, false)?;
    let mut next = w.to_vec();
    for (wi, gi) in next.iter_mut().zip(&g.values) {
        if !gi.value().is_finite() {
            return Err(non_finite("inner_step"));
        }
        wi.axpy(-alpha, gi.value());
    }
    let partials = g.values[w.len()..].iter().map(Tensor::item).collect();
    Ok((next, loss.item(), partials, probes.iter().map(Tensor::item).collect()))
}

/// `φ − β (hypergrad + direct)`.
pub fn outer_step(phi: &[Array], hypergrad: &[Array], beta: f64, direct: Option<&[Array]>) -> Result<Vec<Array>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("outer learning rate must be positive, got {beta}")));
    }
    let update = match direct {
        Some(d) => params::add(hypergrad, d),
        None => hypergrad.to_vec(),
    };
    let mut next = phi.to_vec();
    params::axpy(&mut next, -beta, &update);
    if !params::all_finite(&next) {
        return Err(non_finite("outer_step"));
    }
    Ok(next)
}

pub fn hypergrad_identity(problem: &impl Bilevel, w: &[Array], phi: &[Array]) -> Result<Hypergrad> {
    let (gw, gphi) = pri_partials(problem, w, phi)?;
    Ok(Hypergrad { grads: mixed_contract(problem, w, phi, &gw)?, direct: Some(gphi), iterations: 0, warnings: Vec::new() })
}

/// `Σ_{j ≤ terms} (I − H)^j ∇_w L_pri`, contracted with the mixed term.
pub fn hypergrad_neumann(problem: &impl Bilevel, w: &[Array], phi: &[Array], terms: usize) -> Result<Hypergrad> {
    let (gw, gphi) = pri_partials(problem, w, phi)?;
    let mut v = gw.clone();
    if terms > 0 {
        let curvature = Curvature::new(problem, w, phi)?;
        let mut term = gw;
        for j in 1..=terms {
            let h_term = curvature.apply(&term).map_err(|e| match e {
                Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::SeriesDivergence { term: j },
                other => other,
            })?;
            term = params::sub(&term, &h_term);
            v = params::add(&v, &term);
            if !params::all_finite(&v) {
                return Err(Error::SeriesDivergence { term: j });
            }
        }
    }
    Ok(Hypergrad { grads: mixed_contract(problem, w, phi, &v)?, direct: Some(gphi), iterations: terms, warnings: Vec::new() })
}

/// Dense Hessian from one hvp per column, solved by LU.
pub fn hypergrad_exact(problem: &impl Bilevel, w: &[Array], phi: &[Array]) -> Result<Hypergrad> {
    let n = params::count(w);
    if n > EXACT_PARAM_LIMIT {
        return Err(Error::DimensionGuard { params: n, limit: EXACT_PARAM_LIMIT });
    }
    let (gw, gphi) = pri_partials(problem, w, phi)?;
    let curvature = Curvature::new(problem, w, phi)?;
    let mut h = DMatrix::zeros(n, n);
    let mut unit = vec![0.0; n];
    for i in 0..n {
        unit[i] = 1.0;
        let col = params::flatten(&curvature.apply(&params::unflatten(&unit, w))?);
        unit[i] = 0.0;
        h.set_column(i, &DVector::from_vec(col));
    }
    let sv = h.clone().singular_values();
    let condition = sv.max() / sv.min();
    if !(condition <= EXACT_CONDITION_LIMIT) {
        return Err(Error::SingularHessian { condition });
    }
    let rhs = DVector::from_vec(params::flatten(&gw));
    let x = h.transpose().lu().solve(&rhs).ok_or(Error::SingularHessian { condition: f64::INFINITY })?;
    let v = params::unflatten(x.as_slice(), w);
    Ok(Hypergrad { grads: mixed_contract(problem, w, phi, &v)?, direct: Some(gphi), iterations: n, warnings: Vec::new() })
}

/// Solve `H x = ∇_w L_pri` by conjugate gradients on hvps.
pub fn hypergrad_cg(problem: &impl Bilevel, w: &[Array], phi: &[Array], opts: &CgOptions) -> Result<Hypergrad> {
    HypergradScheme::ConjugateGradient { tol: opts.tol, maxit: opts.maxit }.validate()?;
    let (gw, gphi) = pri_partials(problem, w, phi)?;
    let b = params::flatten(&gw);
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
    let b_norm = dot(&b, &b).sqrt();
    let mut warnings = Vec::new();
    let mut iterations = 0;
    let mut x = vec![0.0; b.len()];
    if b_norm > 0.0 {
        let curvature = Curvature::new(problem, w, phi)?;
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rr = b_norm * b_norm;
        let mut best = (x.clone(), b_norm);
        let mut converged = false;
        let mut stopped_early = false;
        for k in 0..opts.maxit {
            let hp = params::flatten(&curvature.apply(&params::unflatten(&p, w))?);
            let curv = dot(&p, &hp);
            if !(curv > 0.0) {
                if !opts.truncate_on_negative_curvature {
                    return Err(Error::NegativeCurvature { iteration: k, curvature: curv });
                }
                warnings.push(format!("cg: non-positive curvature {curv:e} at iteration {k}; using best iterate"));
                stopped_early = true;
                break;
            }
            let step = rr / curv;
            for i in 0..x.len() {
                x[i] += step * p[i];
                r[i] -= step * hp[i];
            }
            iterations = k + 1;
            let rr_next = dot(&r, &r);
            let r_norm = rr_next.sqrt();
            if r_norm < best.1 {
                best = (x.clone(), r_norm);
            }
            if r_norm <= opts.tol * b_norm {
                converged = true;
                break;
            }
            let ratio = rr_next / rr;
            for i in 0..p.len() {
                p[i] = r[i] + ratio * p[i];
            }
            rr = rr_next;
        }
        if !converged && !stopped_early {
            warnings.push(format!("cg: maxit {} reached at relative residual {:e}; using best iterate", opts.maxit, best.1 / b_norm));
        }
        x = best.0;
        if iterations == 0 || x.iter().all(|&v| v == 0.0) {
            warnings.push("cg: no usable iterate; falling back to the identity".into());
            x = b;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(non_finite("cg"));
        }
    }
    let v = params::unflatten(&x, w);
    Ok(Hypergrad { grads: mixed_contract(problem, w, phi, &v)?, direct: Some(gphi), iterations, warnings })
}

/// Differentiate `L_pri(ŵ(φ))` through `steps` gradient steps of size
/// `alpha` recorded with `create_graph`.
pub fn hypergrad_unrolled(problem: &impl Bilevel, w: &[Array], phi: &[Array], steps: usize, alpha: f64) -> Result<Hypergrad> {
    if steps > UNROLL_LIMIT {
        return Err(Error::UnrollTooDeep { steps, limit: UNROLL_LIMIT });
    }
    HypergradScheme::Unrolled(steps).validate()?;
    let graph = Graph::new();
    let pv = graph.vars(phi);
    let mut cur = graph.vars(w);
    for _ in 0..steps {
        let aux = problem.aux(&cur, &pv)?;
        let g = grad(&aux, &cur, true)?;
        cur = cur
            .iter()
            .zip(&g.values)
            .map(|(wi, gi)| Ok(wi.sub(&gi.scale(alpha)?)?))
            .collect::<Result<_>>()?;
    }
    let pri = problem.pri(&cur, &constants(phi))?;
    let grads = grad(&pri, &pv, false)?.to_arrays();
    Ok(Hypergrad { grads, direct: None, iterations: steps, warnings: Vec::new() })
}

/// Dispatch on `scheme`; `alpha` is the unrolled step size.
pub fn hypergrad(
    scheme: &HypergradScheme,
    problem: &impl Bilevel,
    w: &[Array],
    phi: &[Array],
    alpha: f64,
    truncate_on_negative_curvature: bool,
) -> Result<Hypergrad> {
    match *scheme {
        HypergradScheme::Exact => hypergrad_exact(problem, w, phi),
        HypergradScheme::Neumann(i) => hypergrad_neumann(problem, w, phi, i),
        HypergradScheme::IdentityLite => hypergrad_identity(problem, w, phi),
        HypergradScheme::ConjugateGradient { tol, maxit } => {
            hypergrad_cg(problem, w, phi, &CgOptions { tol, maxit, truncate_on_negative_curvature })
        }
        HypergradScheme::Unrolled(k) => hypergrad_unrolled(problem, w, phi, k, alpha),
    }
}
