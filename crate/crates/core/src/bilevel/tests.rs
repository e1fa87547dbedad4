use super::*;
use crate::autodiff::{relative_error, Array, Tensor};
use crate::init;
use crate::meltr_net::Variant;
use crate::params;
use crate::tasks::{make_regression_suite, quad_closed_form, random_spd, QuadraticTestbed, Split};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn col(v: &[f64]) -> Array {
    Array::new(vec![v.len(), 1], v.to_vec()).unwrap()
}

fn close(a: &[Array], b: &[f64], tol: f64) {
    let flat = params::flatten(a);
    assert_eq!(flat.len(), b.len());
    for (x, y) in flat.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{flat:?} vs {b:?}");
    }
}

/// `aux = ½ wᵀ H w − φᵀ w`, `pri = 1ᵀ w`: the mixed term is `−I`, so every
/// scheme returns its inverse-Hessian estimate applied to the ones vector.
fn diagonal_problem(h: Vec<f64>) -> impl Bilevel {
    let n = h.len();
    FnBilevel {
        aux: move |w: &[Tensor], phi: &[Tensor]| {
            let hw = w[0].mul(&Tensor::constant(col(&h)))?;
            Ok(w[0].dot(&hw)?.scale(0.5)?.sub(&phi[0].dot(&w[0])?)?)
        },
        pri: move |w: &[Tensor], _: &[Tensor]| Ok(w[0].dot(&Tensor::constant(col(&vec![1.0; n])))?),
    }
}

fn at_optimum(tb: &QuadraticTestbed) -> Vec<Array> {
    tb.w_arrays(&tb.w_star().unwrap())
}

#[test]
fn inner_step_examples() {
    let sq = |w: &[Tensor]| Ok(w[0].square()?.sum()?);
    let next = inner_step(&[Array::scalar(1.0)], sq, 0.1).unwrap();
    assert!((next[0].item() - 0.8).abs() < 1e-15);
    let flat = inner_step(&[Array::scalar(0.0)], sq, 0.1).unwrap();
    assert_eq!(flat[0].item(), 0.0);
    assert!(inner_step(&[Array::scalar(1.0)], sq, 0.0).is_err());
    let blow = |w: &[Tensor]| Ok(w[0].log()?);
    assert!(inner_step(&[Array::scalar(0.0)], blow, 0.1).is_err());
    assert_eq!(FULL_SCALE_ALPHA, 3e-5);
    assert_eq!(DEFAULT_K, 3);
}

#[test]
fn neumann_partial_sums_follow_geometric_series() {
    let problem = diagonal_problem(vec![0.5, 0.2]);
    let w = vec![col(&[0.3, -0.7])];
    let phi = vec![col(&[0.1, 0.4])];
    let h = hypergrad_neumann(&problem, &w, &phi, 3).unwrap();
    close(&h.grads, &[1.875, 2.952], 1e-12);
    let exact = hypergrad_exact(&problem, &w, &phi).unwrap();
    close(&exact.grads, &[2.0, 5.0], 1e-12);
    for i in 0..6 {
        let got = hypergrad_neumann(&problem, &w, &phi, i).unwrap();
        let want: Vec<f64> = [0.5f64, 0.8].iter().map(|r| (0..=i).map(|j| r.powi(j as i32)).sum()).collect();
        close(&got.grads, &want, 1e-12);
    }
}

#[test]
fn unit_hessian_makes_every_scheme_exact() {
    let problem = diagonal_problem(vec![1.0; 3]);
    let w = vec![col(&[1.0, 2.0, 3.0])];
    let phi = vec![col(&[0.0; 3])];
    for i in 0..5 {
        close(&hypergrad_neumann(&problem, &w, &phi, i).unwrap().grads, &[1.0; 3], 0.0);
    }
    close(&hypergrad_identity(&problem, &w, &phi).unwrap().grads, &[1.0; 3], 0.0);
    let cg = hypergrad_cg(&problem, &w, &phi, &CgOptions::default()).unwrap();
    assert_eq!(cg.iterations, 1);
    close(&cg.grads, &[1.0; 3], 1e-14);
}

#[test]
fn neumann_diverges_loudly() {
    let problem = diagonal_problem(vec![1e200, 0.5]);
    let w = vec![col(&[0.0, 0.0])];
    let phi = vec![col(&[0.0, 0.0])];
    assert!(matches!(hypergrad_neumann(&problem, &w, &phi, 5), Err(Error::SeriesDivergence { .. })));
}

#[test]
fn identity_is_neumann_zero() {
    let mut rng = init::rng(11);
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let t = rng.random_range(0..=3);
        let tb = QuadraticTestbed::random(&mut rng, n, t);
        let w = tb.w_arrays(&DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));
        let phi = tb.phi_arrays();
        let a = hypergrad_identity(&tb, &w, &phi).unwrap();
        let b = hypergrad_neumann(&tb, &w, &phi, 0).unwrap();
        assert!(relative_error(&a.grads, &b.grads, 1e-300) <= 1e-12);
    }
}

#[test]
fn exact_matches_closed_form() {
    let mut rng = init::rng(5);
    for _ in 0..20 {
        let (n, t) = (rng.random_range(1..=8), rng.random_range(0..=4));
        let tb = QuadraticTestbed::random(&mut rng, n, t);
        let oracle = quad_closed_form(&tb).unwrap();
        let h = hypergrad_exact(&tb, &at_optimum(&tb), &tb.phi_arrays()).unwrap();
        let want = [col(&oracle.hypergrad)];
        assert!(relative_error(&h.grads, &want, 1e-12) <= 1e-8);
    }
}

#[test]
fn exact_zero_cases() {
    let mut rng = init::rng(6);
    let tb = QuadraticTestbed::random(&mut rng, 4, 2);
    // ∇_w L_pri vanishes at w = 0
    let w = vec![col(&[0.0; 4])];
    let center = tb.clone();
    let pri_center = FnBilevel {
        aux: |w: &[Tensor], phi: &[Tensor]| center.aux(w, phi),
        pri: |w: &[Tensor], _: &[Tensor]| Ok(w[0].square()?.sum()?),
    };
    let h = hypergrad_exact(&pri_center, &w, &tb.phi_arrays()).unwrap();
    assert_eq!(params::max_abs(&h.grads), 0.0);
    let no_phi = FnBilevel {
        aux: |w: &[Tensor], _: &[Tensor]| Ok(w[0].square()?.sum()?),
        pri: |w: &[Tensor], _: &[Tensor]| Ok(w[0].sum()?),
    };
    let w = vec![col(&[0.5, 1.0])];
    let phi = vec![col(&[1.0])];
    assert_eq!(params::max_abs(&hypergrad_exact(&no_phi, &w, &phi).unwrap().grads), 0.0);
    assert_eq!(params::max_abs(&hypergrad_unrolled(&no_phi, &w, &phi, 3, 0.1).unwrap().grads), 0.0);
    assert_eq!(params::max_abs(&hypergrad_identity(&no_phi, &w, &phi).unwrap().grads), 0.0);
}

#[test]
fn exact_guards() {
    let big = diagonal_problem(vec![1.0; EXACT_PARAM_LIMIT + 1]);
    let w = vec![col(&[0.0; EXACT_PARAM_LIMIT + 1])];
    assert!(matches!(hypergrad_exact(&big, &w, &w), Err(Error::DimensionGuard { .. })));
    let singular = diagonal_problem(vec![1.0, 0.0]);
    let w = vec![col(&[0.0, 0.0])];
    assert!(matches!(hypergrad_exact(&singular, &w, &w), Err(Error::SingularHessian { .. })));
    let ill = diagonal_problem(vec![1.0, 1e-13]);
    assert!(matches!(hypergrad_exact(&ill, &w, &w), Err(Error::SingularHessian { .. })));
}

#[test]
fn cg_matches_exact_on_spd_instances() {
    let mut rng = init::rng(7);
    let opts = CgOptions { tol: 1e-10, ..CgOptions::default() };
    for _ in 0..20 {
        let (n, t) = (rng.random_range(1..=8), rng.random_range(0..=4));
        let tb = QuadraticTestbed::random(&mut rng, n, t);
        let w = at_optimum(&tb);
        let cg = hypergrad_cg(&tb, &w, &tb.phi_arrays(), &opts).unwrap();
        let exact = hypergrad_exact(&tb, &w, &tb.phi_arrays()).unwrap();
        assert!(relative_error(&cg.grads, &exact.grads, 1e-12) <= 1e-8);
        assert!(cg.warnings.is_empty());
    }
    assert_eq!((DEFAULT_CG_TOL, DEFAULT_CG_MAXIT), (1e-8, 50));
}

#[test]
fn cg_negative_curvature_and_maxit() {
    let indefinite = diagonal_problem(vec![-1.0, 2.0]);
    let w = vec![col(&[0.0, 0.0])];
    let strict = CgOptions::default();
    assert!(matches!(hypergrad_cg(&indefinite, &w, &w, &strict), Err(Error::NegativeCurvature { .. })));
    let lenient = CgOptions { truncate_on_negative_curvature: true, ..strict };
    let h = hypergrad_cg(&indefinite, &w, &w, &lenient).unwrap();
    assert!(!h.warnings.is_empty());
    assert!(params::all_finite(&h.grads));

    let spread = diagonal_problem(vec![1.0, 3.0, 7.0, 20.0]);
    let w = vec![col(&[0.0; 4])];
    let short = CgOptions { tol: 1e-14, maxit: 1, truncate_on_negative_curvature: false };
    let h = hypergrad_cg(&spread, &w, &w, &short).unwrap();
    assert!(h.warnings.iter().any(|m| m.contains("maxit")));
    assert!(HypergradScheme::ConjugateGradient { tol: 0.0, maxit: 5 }.validate().is_err());
}

#[test]
fn identity_points_uphill_with_exact() {
    let mut rng = init::rng(8);
    let mut agree = 0;
    for _ in 0..100 {
        let (n, t) = (rng.random_range(2..=6), rng.random_range(1..=3));
        let mut tb = QuadraticTestbed::random(&mut rng, n, t);
        tb.scale_spectrum_to(rng.random_range(0.2..1.95));
        let w = at_optimum(&tb);
        let id = hypergrad_identity(&tb, &w, &tb.phi_arrays()).unwrap();
        let oracle = quad_closed_form(&tb).unwrap();
        if params::dot(&id.grads, &[col(&oracle.hypergrad)]) > 0.0 {
            agree += 1;
        }
    }
    assert!(agree >= 90, "{agree}/100");
}

#[test]
fn unrolled_single_step_is_the_chain_rule() {
    let mut rng = init::rng(9);
    let tb = QuadraticTestbed::random(&mut rng, 3, 2);
    let w = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let alpha = 0.1;
    let h = hypergrad_unrolled(&tb, &tb.w_arrays(&w), &tb.phi_arrays(), 1, alpha).unwrap();
    assert!(h.direct.is_none());
    // ŵ = w − α Σ φ_t A_t (w − c_t); ∂ŵ/∂φ_t = −α A_t (w − c_t)
    let (a, c) = rand_free_parts(&tb);
    let grad_aux = a.iter().zip(&c).zip(&tb.phi_arrays()[0].data().to_vec()).fold(DVector::zeros(3), |s, ((at, ct), p)| {
        s + at * (&w - ct) * *p
    });
    let w_hat = &w - grad_aux * alpha;
    let g_pri = &a[0] * (&w_hat - &c[0]);
    let want: Vec<f64> = a.iter().zip(&c).map(|(at, ct)| -alpha * g_pri.dot(&(at * (&w - ct)))).collect();
    close(&h.grads, &want, 1e-13);
}

/// Recover `A_t` and `c_t` from the testbed's objective by probing it, so
/// the chain-rule check does not reuse its internals.
fn rand_free_parts(tb: &QuadraticTestbed) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let n = tb.dim();
    let mut a = Vec::new();
    let mut c = Vec::new();
    for t in 0..tb.tasks() {
        let one_hot: Vec<f64> = (0..tb.tasks()).map(|s| f64::from(s == t)).collect();
        let phi = [Tensor::constant(col(&one_hot))];
        let value = |w: &DVector<f64>| tb.aux(&[Tensor::constant(col(w.as_slice()))], &phi).unwrap().item();
        // f(w) = ½ (w − c)ᵀ A (w − c): A from second differences, c from the gradient at 0
        let e = |i: usize| DVector::from_fn(n, |k, _| f64::from(k == i));
        let f0 = value(&DVector::zeros(n));
        let at = DMatrix::from_fn(n, n, |i, j| value(&(e(i) + e(j))) - value(&e(i)) - value(&e(j)) + f0);
        let g0 = DVector::from_fn(n, |i, _| (value(&e(i)) - value(&-e(i))) / 2.0);
        c.push(-at.clone().lu().solve(&g0).unwrap());
        a.push(at);
    }
    (a, c)
}

#[test]
fn unrolled_direction_approaches_exact() {
    let mut rng = init::rng(10);
    let n = 4;
    let a = (0..3).map(|_| random_spd(&mut rng, n, 1.0, 2.0)).collect();
    let c = (0..3).map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect();
    let tb = QuadraticTestbed::new(a, c, vec![1.0, 0.8, 1.2]).unwrap();
    let alpha = 1.0 / tb.hessian().symmetric_eigenvalues().max();
    let w = at_optimum(&tb);
    let unrolled = hypergrad_unrolled(&tb, &w, &tb.phi_arrays(), 30, alpha).unwrap();
    let exact = hypergrad_exact(&tb, &w, &tb.phi_arrays()).unwrap();
    let cos = params::cosine(&unrolled.grads, &exact.grads);
    assert!(cos >= 0.999, "cosine {cos}");
    assert!(matches!(
        hypergrad_unrolled(&tb, &w, &tb.phi_arrays(), UNROLL_LIMIT + 1, alpha),
        Err(Error::UnrollTooDeep { .. })
    ));
    assert!(hypergrad_unrolled(&tb, &w, &tb.phi_arrays(), 0, alpha).is_err());
}

#[test]
fn outer_step_examples() {
    let phi = vec![col(&[1.0, -2.0])];
    let zero = params::zeros_like(&phi);
    assert_eq!(outer_step(&phi, &zero, 0.5, None).unwrap(), phi);
    let g = vec![col(&[1.0, 1.0])];
    let d = vec![col(&[0.5, -1.0])];
    close(&outer_step(&phi, &g, 0.1, Some(&d)).unwrap(), &[0.85, -2.0], 1e-15);
    assert!(outer_step(&phi, &g, 0.0, None).is_err());
    assert!(outer_step(&phi, &[col(&[f64::NAN, 0.0])], 0.1, None).is_err());
    assert_eq!(FULL_SCALE_BETA, 1e-4);
}

#[test]
fn scheme_grammar() {
    for (text, scheme) in [
        ("exact", HypergradScheme::Exact),
        ("identity", HypergradScheme::IdentityLite),
        ("neumann:3", HypergradScheme::Neumann(3)),
        ("neumann", HypergradScheme::Neumann(DEFAULT_NEUMANN_TERMS)),
        ("cg:1e-10:20", HypergradScheme::ConjugateGradient { tol: 1e-10, maxit: 20 }),
        ("unrolled:3", HypergradScheme::Unrolled(3)),
    ] {
        let parsed: HypergradScheme = text.parse().unwrap();
        assert_eq!(parsed, scheme);
        assert_eq!(parsed.to_string().parse::<HypergradScheme>().unwrap(), scheme);
    }
    for bad in ["", "neumann:x", "cg:0:5", "unrolled:0", "exact:1", "newton"] {
        assert!(bad.parse::<HypergradScheme>().is_err(), "{bad}");
    }
    assert_eq!("mtl".parse::<Method>().unwrap(), Method::Mtl);
    assert_eq!("primary".parse::<Method>().unwrap(), Method::PrimaryOnly);
    assert_eq!("identity".parse::<Method>().unwrap(), Method::Meltr(HypergradScheme::IdentityLite));
}

#[test]
fn config_parsing_is_strict_with_defaults() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"scheme":"neumann:3","seed":4,"K":2,"meltr":{"variant":"linear"}}"#).unwrap();
    assert_eq!(cfg.scheme, Method::Meltr(HypergradScheme::Neumann(3)));
    assert_eq!((cfg.seed, cfg.k, cfg.meltr.variant), (4, 2, Variant::Linear));
    assert_eq!(cfg.meltr.d, 32);
    assert!(cfg.flags.direct_reg_grad);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"gama":1.0}"#).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"flags":{"direct":true}}"#).is_err());
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    let mut bad = TrainConfig::desk(0);
    bad.k = 0;
    assert!(bad.validate().is_err());
    bad = TrainConfig::desk(0);
    bad.gamma = -1.0;
    assert!(bad.validate().is_err());
}

fn quick(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(seed);
    cfg.epochs = 2;
    cfg.outer_steps_per_epoch = 3;
    cfg.batch_size = 16;
    cfg.warm_start = Some(WarmStart { steps: 20, lr: 1e-3, jitter: 1.0 });
    cfg
}

#[test]
fn mtl_reduces_to_plain_descent_bitwise() {
    let task = make_regression_suite(3, 4, 8).unwrap();
    let cfg = quick(3).with_method(Method::Mtl);
    let mut trainer = Trainer::new(cfg.clone(), &task).unwrap();
    trainer.run_epoch().unwrap();

    let mut w = task.init_learner(cfg.seed);
    let mut stream = task.stream(Split::Train, cfg.seed, cfg.batch_size);
    for _ in 0..cfg.k * cfg.outer_steps_per_epoch {
        let batch = stream.next_batch();
        let graph = crate::autodiff::Graph::new();
        let vars = graph.vars(&w);
        let losses = task.task_losses(&vars, &batch).unwrap();
        let total = losses[1..].iter().fold(losses[0].clone(), |s, l| s.add(l).unwrap());
        let g = crate::autodiff::grad(&total, &vars, false).unwrap().to_arrays();
        params::axpy(&mut w, -cfg.alpha, &g);
    }
    assert_eq!(trainer.learner(), w.as_slice());
}

#[test]
fn zero_gamma_equals_disabled_regularizer() {
    let task = make_regression_suite(4, 4, 8).unwrap();
    let on = train_loop(&quick(4).with_gamma(0.0), &task).unwrap();
    let mut stub = quick(4).with_gamma(0.0);
    stub.regularizer = RegularizerMode::Disabled;
    let off = train_loop(&stub, &task).unwrap();
    let vals = |r: &RunRecord| r.metrics.iter().map(|m| (m.train_pri, m.val_pri, m.reg)).collect::<Vec<_>>();
    assert_eq!(vals(&on), vals(&off));
    assert_eq!(on.partials, off.partials);
    assert_eq!(on.meltr, off.meltr);
}

#[test]
fn gamma_only_acts_through_the_outer_step() {
    let task = make_regression_suite(5, 4, 8).unwrap();
    let mut a = Trainer::new(quick(5).with_gamma(0.0), &task).unwrap();
    let mut b = Trainer::new(quick(5).with_gamma(1.0), &task).unwrap();
    for _ in 0..3 {
        a.inner_step().unwrap();
        b.inner_step().unwrap();
    }
    assert_eq!(a.learner(), b.learner());
    a.outer_step().unwrap();
    b.outer_step().unwrap();
    assert_ne!(a.meltr().unwrap().params(), b.meltr().unwrap().params());
}

#[test]
fn runs_are_deterministic_per_seed() {
    let task = make_regression_suite(6, 4, 8).unwrap();
    let a = train_loop(&quick(6), &task).unwrap();
    let b = train_loop(&quick(6), &task).unwrap();
    assert!(a.same_outcome(&b));
    let c = train_loop(&quick(7), &task).unwrap();
    assert_ne!(a.metrics[1].val_pri, c.metrics[1].val_pri);
    assert_eq!(a.metrics.len(), 2);
    assert_eq!(a.partials.len(), 2);
    assert_eq!(a.loss_ranges.len(), 4);
    assert_eq!(a.outer_step_ms.len(), 6);
    for r in &a.loss_ranges {
        assert!(r.min <= r.q1 && r.q1 <= r.median && r.median <= r.q3 && r.q3 <= r.max);
    }
}

#[test]
fn te_only_is_flagged_untrainable() {
    let task = make_regression_suite(1, 4, 8).unwrap();
    let r = train_loop(&quick(1).with_variant(Variant::TeOnly), &task).unwrap();
    assert!(r.untrainable);
    assert!(r.warnings.iter().any(|w| w == "meta-gradient identically zero"));
    assert!(r.partials.iter().flatten().all(|&p| p == 0.0));
    let full = train_loop(&quick(1), &task).unwrap();
    assert!(!full.untrainable);
}

#[test]
fn divergence_is_recorded_not_raised() {
    let task = make_regression_suite(2, 4, 8).unwrap();
    let mut cfg = quick(2).with_method(Method::Mtl);
    cfg.alpha = 50.0;
    let r = train_loop(&cfg, &task).unwrap();
    assert!(r.divergence.is_some());
    assert_eq!(r.final_val_pri(), f64::INFINITY);
}

#[test]
fn every_scheme_and_option_trains() {
    let task = make_regression_suite(8, 3, 4).unwrap();
    for scheme in ["identity", "neumann:2", "cg:1e-6:10", "unrolled:2", "primary", "mtl"] {
        let r = train_loop(&quick(8).with_method(scheme.parse().unwrap()), &task).unwrap();
        assert!(r.divergence.is_none(), "{scheme}");
        assert!(r.final_val_pri().is_finite());
    }
    let mut cfg = quick(8);
    cfg.flags.shared_outer_batch = true;
    cfg.outer_optimizer = OuterOptimizer::Adam { linear_decay: true };
    cfg.max_outer_norm = None;
    cfg.warm_start = None;
    assert!(train_loop(&cfg, &task).unwrap().divergence.is_none());
    let mut exact_small = quick(8).with_method(Method::Meltr(HypergradScheme::Exact));
    exact_small.epochs = 1;
    // the learner is far above the dense-Hessian limit
    assert!(matches!(train_loop(&exact_small, &task), Err(Error::DimensionGuard { .. })));
}
