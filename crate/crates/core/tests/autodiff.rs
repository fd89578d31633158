use lcsb_core::autodiff::{finite_difference_grad, Attrs, Graph, PrimitiveKind, Tensor};
use lcsb_core::gradcheck::{model_suite, primitive_suite, TOLERANCE};
use lcsb_core::Error;
use proptest::prelude::*;

fn close(a: f32, b: f64, tol: f64) -> bool {
    (a as f64 - b).abs() <= tol
}

#[test]
fn uniform_softmax() {
    let x = Tensor::<f32>::zeros(&[4]);
    let mut g = Graph::<f32>::new();
    let v = g.leaf(x, false);
    let p = g.softmax(v, false).unwrap();
    assert_eq!(g.value(p).data(), &[0.25; 4]);
}

#[test]
fn uniform_cross_entropy_is_log_classes() {
    let mut g = Graph::<f32>::new();
    let v = g.leaf(Tensor::zeros(&[3, 32]), false);
    let l = g.cross_entropy(v, &[0, 7, 31]).unwrap();
    assert!(close(g.value(l).item().unwrap(), 32f64.ln(), 1e-6));
}

#[test]
fn rms_norm_by_hand() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(), false);
    let gain = g.leaf(Tensor::ones(&[2]), false);
    let y = g.rms_norm(x, gain, 0.0).unwrap();
    let out = g.value(y).data();
    assert!(close(out[0], 0.848_528_137, 1e-6) && close(out[1], 1.131_370_850, 1e-6));
}

#[test]
fn linear_and_quadratic_gradients() {
    let mut g = Graph::<f32>::new();
    let t = g.leaf(Tensor::scalar(3.0), true);
    let two_t = g.scale(t, 2.0);
    let l = g.sum(two_t);
    assert_eq!(g.backward(l).unwrap().get(t).unwrap().data(), &[2.0]);

    let mut g = Graph::<f32>::new();
    let t = g.leaf(Tensor::scalar(3.0), true);
    let sq = g.mul(t, t).unwrap();
    assert_eq!(g.backward(sq).unwrap().get(t).unwrap().data(), &[6.0]);
}

#[test]
fn finite_difference_examples() {
    let fd = finite_difference_grad(|t: &Tensor<f64>| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-3);
    assert!((fd.data()[0] - 6.0).abs() < 1e-6);
    let theta = Tensor::<f64>::new(vec![3], vec![0.5, -2.0, 9.0]).unwrap();
    let fd = finite_difference_grad(|t: &Tensor<f64>| t.data().iter().sum(), &theta, 1e-3);
    assert!(fd.data().iter().all(|g| (g - 1.0).abs() < 1e-9));
}

#[test]
fn detach_copies_and_blocks_gradient() {
    let mut g = Graph::<f32>::new();
    let t = g.leaf(Tensor::new(vec![3], vec![1.5, -0.25, 8.0]).unwrap(), true);
    let d = g.detach(t);
    assert_eq!(g.value(d), g.value(t));
    let l = g.sum(d);
    assert_eq!(g.backward(l).unwrap().get(t).unwrap().data(), &[0.0; 3]);
}

#[test]
fn detached_residual_has_identity_jacobian() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.7]).unwrap(), true);
    let f = g.no_grad(|g| {
        let s = g.silu(x);
        g.mul(s, x).unwrap()
    });
    let fx = g.detach(f);
    let y = g.add(x, fx).unwrap();
    let l = g.sum(y);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::ones(&[2, 2]), true);
    assert!(matches!(g.backward(x), Err(Error::Rank(_))));
}

#[test]
fn non_finite_loss_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::scalar(f32::NAN), true);
    assert!(matches!(g.backward(x), Err(Error::NonFinite(_))));
}

#[test]
fn unreachable_parameter_gets_zero() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::ones(&[2]), true);
    let b = g.leaf(Tensor::ones(&[3]), true);
    let l = g.sum(a);
    assert_eq!(g.backward(l).unwrap().get(b).unwrap().data(), &[0.0; 3]);
}

#[test]
fn shape_mismatch_reports_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::ones(&[2, 3]), false);
    let b = g.leaf(Tensor::ones(&[2, 3]), false);
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("[2, 3]"), "{err}");
}

#[test]
fn unknown_primitive_name() {
    assert!(matches!("conv2d".parse::<PrimitiveKind>(), Err(Error::UnsupportedPrimitive(_))));
    for k in PrimitiveKind::ALL {
        assert_eq!(k.name().parse::<PrimitiveKind>().unwrap(), k);
    }
}

#[test]
fn apply_checks_arity() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::ones(&[2]), false);
    assert!(g.apply(PrimitiveKind::Add, &[a], &Attrs::default()).is_err());
}

#[test]
fn reused_parameter_accumulates_both_paths() {
    // l = sum(x * w) + sum(3 w) → dl/dw = x + 3
    let mut g = Graph::<f32>::new();
    let w = g.leaf(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), true);
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap(), false);
    let p = g.mul(x, w).unwrap();
    let s = g.scale(w, 3.0);
    let l1 = g.sum(p);
    let l2 = g.sum(s);
    let l = g.add(l1, l2).unwrap();
    assert_eq!(g.backward(l).unwrap().get(w).unwrap().data(), &[4.0, 1.0, 7.0]);
}

#[test]
fn backward_is_deterministic() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap(), true);
    let b = g.leaf(Tensor::new(vec![4, 5], (0..20).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap(), true);
    let c = g.matmul(a, b).unwrap();
    let s = g.softmax(c, false).unwrap();
    let l = g.cross_entropy(s, &[0, 4, 2]).unwrap();
    let (g1, g2) = (g.backward(l).unwrap(), g.backward(l).unwrap());
    assert_eq!(g1.get(a).unwrap(), g2.get(a).unwrap());
    assert_eq!(g1.get(b).unwrap(), g2.get(b).unwrap());
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let w1 = Tensor::<f64>::new(vec![5, 4], (0..20).map(|i| ((i * 7 % 11) as f32 / 11.0 - 0.5) as f64).collect()).unwrap();
    let w2 = Tensor::<f64>::new(vec![3, 5], (0..15).map(|i| ((i * 5 % 13) as f32 / 13.0 - 0.5) as f64).collect()).unwrap();
    let x = Tensor::<f64>::new(vec![2, 4], vec![0.5, -1.0, 0.25, 2.0, -0.75, 0.1, 1.5, -0.3]).unwrap();
    fn loss<T: lcsb_core::autodiff::Element>(
        g: &mut Graph<'_, T>,
        x: lcsb_core::autodiff::Var,
        w1: lcsb_core::autodiff::Var,
        w2: lcsb_core::autodiff::Var,
    ) -> lcsb_core::autodiff::Var {
        let h = g.matmul_t(x, w1, false, true).unwrap();
        let h = g.silu(h);
        let o = g.matmul_t(h, w2, false, true).unwrap();
        g.cross_entropy(o, &[2, 0]).unwrap()
    }
    let mut g = Graph::<f32>::new();
    let (vx, v1, v2) = (g.leaf(x.cast(), false), g.leaf(w1.cast(), true), g.leaf(w2.cast(), true));
    let l = loss(&mut g, vx, v1, v2);
    let grads = g.backward(l).unwrap();
    let fd1 = finite_difference_grad(
        |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let (vx, v1, v2) = (g.leaf(x.clone(), false), g.leaf(t.clone(), false), g.leaf(w2.clone(), false));
            let l = loss(&mut g, vx, v1, v2);
            g.value(l).data()[0]
        },
        &w1,
        1e-3,
    );
    let fd2 = finite_difference_grad(
        |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let (vx, v1, v2) = (g.leaf(x.clone(), false), g.leaf(w1.clone(), false), g.leaf(t.clone(), false));
            let l = loss(&mut g, vx, v1, v2);
            g.value(l).data()[0]
        },
        &w2,
        1e-3,
    );
    use lcsb_core::autodiff::max_relative_error;
    assert!(max_relative_error(grads.get(v1).unwrap(), &fd1) < 1e-3);
    assert!(max_relative_error(grads.get(v2).unwrap(), &fd2) < 1e-3);
}

#[test]
fn every_primitive_matches_finite_differences_over_twenty_seeds() {
    for outcome in primitive_suite(20).unwrap() {
        assert!(outcome.passed(), "{}: {:.3e}", outcome.name, outcome.max_rel_error);
    }
}

#[test]
fn micro_model_lora_gradients_match_reference() {
    let outcome = model_suite(10).unwrap();
    assert!(outcome.max_rel_error < TOLERANCE, "{:.3e}", outcome.max_rel_error);
}

proptest! {
    #[test]
    fn detach_is_bit_exact(data in prop::collection::vec(-1e6f32..1e6, 1..64)) {
        let n = data.len();
        let mut g = Graph::<f32>::new();
        let t = g.leaf(Tensor::new(vec![n], data).unwrap(), true);
        let d = g.detach(t);
        prop_assert!(g.value(d).data().iter().zip(g.value(t).data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn detach_residual_is_bit_exact(
        h in prop::collection::vec(-100f32..100.0, 8),
        o in prop::collection::vec(-100f32..100.0, 8),
    ) {
        let mut g = Graph::<f32>::new();
        let hv = g.leaf(Tensor::new(vec![8], h).unwrap(), true);
        let ov = g.leaf(Tensor::new(vec![8], o).unwrap(), true);
        let y = g.detach_residual(hv, ov).unwrap();
        prop_assert_eq!(g.value(y), g.value(ov));
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        prop_assert_eq!(grads.get(hv).unwrap().data(), &[1.0f32; 8][..]);
        prop_assert_eq!(grads.get(ov).unwrap().data(), &[0.0f32; 8][..]);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30f32..30.0, 12), causal in any::<bool>()) {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![3, 4], data).unwrap(), false);
        let p = g.softmax(x, causal).unwrap();
        for row in g.value(p).data().chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
