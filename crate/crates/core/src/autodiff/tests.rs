use super::*;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let a = Tensor::constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = Tensor::constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(a.matmul(&i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let z = Tensor::constant(Array::zeros(&[1, 3]));
    let s = z.softmax_rows().unwrap();
    for v in s.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn log_softmax_handles_large_logits() {
    let z = Tensor::constant(arr(&[2, 3], &[1000.0, 0.0, -1000.0, 0.5, 0.5, 0.5]));
    let l = z.log_softmax_rows().unwrap();
    let d = l.value().data();
    assert!(d[0].abs() < 1e-12);
    assert!((d[1] + 1000.0).abs() < 1e-9);
    for v in &d[3..] {
        assert!((v + 3f64.ln()).abs() < 1e-14);
    }
    let w = arr(&[1, 3], &[0.3, -1.2, 2.0]);
    let f = |w: &[Tensor]| w[0].log_softmax_rows()?.slice_rows(0, 1)?.mul(&Tensor::constant(arr(&[1, 3], &[1.0, 0.0, 0.0])))?.sum();
    let ad = gradient(f, std::slice::from_ref(&w)).unwrap();
    let fd = finite_diff_grad(f, std::slice::from_ref(&w), 1e-6).unwrap();
    assert!(relative_error(&ad, &fd, 1e-12) < 1e-8);
}

#[test]
fn abs_of_negative() {
    assert_eq!(Tensor::scalar(-2.5).abs().unwrap().item(), 2.5);
}

#[test]
fn square_gradient() {
    let g = Graph::new();
    let w = g.var(Array::scalar(3.0));
    let f = w.mul(&w).unwrap();
    let d = grad(&f, &[w], false).unwrap();
    assert_eq!(d.values[0].item(), 6.0);
    assert!(!d.any_unreachable());
}

#[test]
fn sum_gradient_is_ones() {
    let g = Graph::new();
    let w = g.var(arr(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, 1.5]));
    let d = grad(&w.sum().unwrap(), std::slice::from_ref(&w), false).unwrap();
    assert_eq!(d.values[0].value(), &Array::ones(&[2, 3]));
}

#[test]
fn second_derivative_of_cube() {
    let g = Graph::new();
    let w = g.var(Array::scalar(2.0));
    let f = w.mul(&w).unwrap().mul(&w).unwrap();
    let d1 = grad(&f, std::slice::from_ref(&w), true).unwrap();
    assert_eq!(d1.values[0].item(), 12.0);
    let d2 = grad(&d1.values[0].scale(1.0).unwrap(), &[w], false).unwrap();
    assert_eq!(d2.values[0].item(), 12.0);
}

#[test]
fn unreachable_wrt_gives_zero_and_flag() {
    let g = Graph::new();
    let a = g.var(Array::scalar(1.0));
    let b = g.var(arr(&[2], &[1.0, 2.0]));
    let f = a.exp().unwrap();
    let d = grad(&f, &[a, b], false).unwrap();
    assert_eq!(d.unreachable, vec![false, true]);
    assert_eq!(d.values[1].value(), &Array::zeros(&[2]));
}

#[test]
fn non_scalar_output_is_rejected() {
    let g = Graph::new();
    let a = g.var(arr(&[2], &[1.0, 2.0]));
    assert!(matches!(grad(&a, std::slice::from_ref(&a), false), Err(AutodiffError::NonScalarOutput { .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let t = Tensor::scalar(1000.0);
    assert!(matches!(t.exp(), Err(AutodiffError::NonFinite { op: "exp" })));
    assert!(matches!(Tensor::scalar(-1.0).log(), Err(AutodiffError::Domain { .. })));
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Tensor::constant(Array::zeros(&[2, 3]));
    let b = Tensor::constant(Array::zeros(&[3, 2]));
    assert!(a.add(&b).is_err());
    assert!(a.matmul(&a).is_err());
    assert!(a.matmul(&b).is_ok());
}

#[test]
fn scalar_broadcasting_only() {
    let a = Tensor::constant(Array::ones(&[2, 2]));
    let s = Tensor::scalar(2.0);
    assert_eq!(a.mul(&s).unwrap().value().data(), &[2.0; 4]);
    let row = Tensor::constant(Array::ones(&[1, 2]));
    assert!(a.add(&row).is_err());
}

#[test]
fn mixed_graphs_are_rejected() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.var(Array::scalar(1.0));
    let b = g2.var(Array::scalar(1.0));
    assert_eq!(a.add(&b).unwrap_err(), AutodiffError::GraphMismatch);
}

#[test]
fn stale_tensor_after_reset() {
    let g = Graph::new();
    let a = g.var(Array::scalar(1.0));
    g.reset();
    assert!(matches!(a.exp(), Err(AutodiffError::StaleTensor { .. })));
    assert!(g.is_empty());
}

#[test]
fn hvp_of_half_norm_is_identity() {
    let w = vec![arr(&[3], &[0.5, -1.0, 2.0])];
    let v = vec![arr(&[3], &[1.0, 2.0, -3.0])];
    let hv = hvp(|w| w[0].dot(&w[0])?.scale(0.5), &w, &v).unwrap();
    assert_eq!(hv[0], v[0]);
}

#[test]
fn hvp_of_diagonal_quadratic() {
    let d = Array::vector(vec![2.0, 3.0]);
    let w = vec![arr(&[2], &[0.7, -0.2])];
    let v = vec![arr(&[2], &[1.0, 1.0])];
    let hv = hvp(|w| w[0].mul(&w[0])?.dot(&Tensor::constant(d.clone()))?.scale(0.5), &w, &v).unwrap();
    assert_eq!(hv[0].data(), &[2.0, 3.0]);
}

#[test]
fn finite_diff_examples() {
    let fd = finite_diff_grad(|w| w[0].mul(&w[0]), &[Array::scalar(3.0)], 1e-4).unwrap();
    assert!((fd[0].item() - 6.0).abs() < 1e-7);
    let fd = finite_diff_grad(|w| w[0].exp(), &[Array::scalar(0.0)], 1e-4).unwrap();
    assert!((fd[0].item() - 1.0).abs() < 1e-8);
}

#[test]
fn replay_reproduces_recorded_values() {
    let g = Graph::new();
    let x = g.var(arr(&[2, 3], &[0.1, -0.4, 0.9, 1.2, -0.7, 0.3]));
    let gain = g.var(Array::ones(&[1, 3]));
    let bias = g.var(Array::zeros(&[1, 3]));
    let y = x.layer_norm_rows(&gain, &bias, 1e-5).unwrap().softmax_rows().unwrap().gelu().unwrap();
    let loss = y.sum().unwrap();
    grad(&loss, &[x, gain], true).unwrap();
    assert_eq!(g.replay().unwrap(), g.recorded_values());
}

#[test]
fn gather_scatter_gradients() {
    let table = arr(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let f = |w: &[Tensor]| w[0].gather_rows(&[2, 0, 2])?.square()?.sum();
    let ad = gradient(f, std::slice::from_ref(&table)).unwrap();
    // row 2 used twice, row 1 never
    assert_eq!(ad[0].data(), &[2.0, 4.0, 0.0, 0.0, 20.0, 24.0]);
}

#[test]
fn concat_and_slice_gradients() {
    let a = arr(&[1, 2], &[1.0, 2.0]);
    let b = arr(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
    let f = |w: &[Tensor]| {
        let c = Tensor::concat_rows(&[w[0].clone(), w[1].clone()])?;
        c.slice_rows(1, 2)?.square()?.sum()
    };
    let ad = gradient(f, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(ad[0].data(), &[0.0, 0.0]);
    assert_eq!(ad[1].data(), &[6.0, 8.0, 10.0, 12.0]);
}

#[test]
fn abs_subgradient_is_zero_at_kink() {
    let ad = gradient(|w| w[0].abs(), &[Array::scalar(0.0)]).unwrap();
    assert_eq!(ad[0].item(), 0.0);
}

#[test]
fn fault_injection_flips_exp_rule() {
    inject_fault(Fault::FlipExpSign);
    let ad = gradient(|w| w[0].exp(), &[Array::scalar(0.0)]);
    inject_fault(Fault::None);
    assert_eq!(ad.unwrap()[0].item(), -1.0);
}
