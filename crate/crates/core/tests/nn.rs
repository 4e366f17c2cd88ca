mod common;

use bilevel_kfac::nn::{softmax, Activation, Criterion, CriterionKind, LinearLayer, Network, Targets};
use bilevel_kfac::{Mat, Vector};
use common::*;
use proptest::prelude::*;

fn ce_loss(net: &Network, theta: &Vector, x: &Mat, y: &[usize]) -> f64 {
    let n = net.with_params(theta).unwrap();
    let t = n.forward(x).unwrap();
    Criterion::new(CriterionKind::SoftmaxCrossEntropy)
        .loss_and_output_grad(&t.outputs, &Targets::Classes(y.to_vec()))
        .unwrap()
        .0
}

#[test]
fn two_layer_forward_matches_scalar_evaluation() {
    let w1 = Mat::from_row_slice(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
    let w2 = Mat::from_row_slice(2, 3, &[0.7, -0.8, 0.9, -1.0, 1.1, -1.2]);
    let net = Network::new(vec![
        LinearLayer::new(w1.clone(), Activation::Tanh).unwrap(),
        LinearLayer::new(w2.clone(), Activation::Identity).unwrap(),
    ])
    .unwrap();
    let x = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
    let out = net.forward(&x).unwrap().outputs;
    for n in 0..2 {
        let mut h = [0.0; 3];
        for i in 0..3 {
            let mut z = 0.0;
            for j in 0..2 {
                z += w1[(i, j)] * x[(j, n)];
            }
            h[i] = z.tanh();
        }
        for i in 0..2 {
            let mut f = 0.0;
            for j in 0..3 {
                f += w2[(i, j)] * h[j];
            }
            assert!((out[(i, n)] - f).abs() <= 1e-15, "({i},{n})");
        }
    }
}

#[test]
fn tanh_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let net = net(&mut r, &[4, 5, 3], &[Activation::Tanh, Activation::Identity]);
    let x = gauss_mat(&mut r, 4, 7, 1.0);
    let y = vec![0, 1, 2, 1, 0, 2, 2];
    let theta = net.flatten_params();
    let t = net.forward(&x).unwrap();
    let (_, g) = Criterion::new(CriterionKind::SoftmaxCrossEntropy)
        .loss_and_output_grad(&t.outputs, &Targets::Classes(y.clone()))
        .unwrap();
    let grad = net.backward(&t, &g).unwrap().flat;
    let h = 1e-5;
    let fd = Vector::from_fn(theta.len(), |i, _| {
        let mut p = theta.clone();
        let mut m = theta.clone();
        p[i] += h;
        m[i] -= h;
        (ce_loss(&net, &p, &x, &y) - ce_loss(&net, &m, &x, &y)) / (2.0 * h)
    });
    assert!(relv(&grad, &fd) <= 1e-6, "{}", relv(&grad, &fd));
}

#[test]
fn linear_square_loss_weight_gradient_closed_form() {
    let mut r = rng(3);
    let net = net(&mut r, &[3, 2], &[Activation::Identity]);
    let x = gauss_mat(&mut r, 3, 5, 1.0);
    let y = gauss_mat(&mut r, 2, 5, 1.0);
    let t = net.forward(&x).unwrap();
    let (_, g) = Criterion::new(CriterionKind::Square)
        .loss_and_output_grad(&t.outputs, &Targets::Vectors(y.clone()))
        .unwrap();
    let b = net.backward(&t, &g).unwrap();
    let expected = (&t.outputs - &y) * x.transpose() / 5.0;
    assert!(rel(&b.weight_grads[0], &expected) <= 1e-14);
}

#[test]
fn weighted_cross_entropy_equals_single_example() {
    let mut r = rng(5);
    let logits = gauss_mat(&mut r, 3, 2, 1.0);
    let targets = Targets::Classes(vec![2, 0]);
    let w = Criterion::weighted(CriterionKind::SoftmaxCrossEntropy, Vector::from_vec(vec![2.0, 0.0])).unwrap();
    let (lw, _) = w.loss_and_output_grad(&logits, &targets).unwrap();
    let single = logits.columns(0, 1).into_owned();
    let (l0, _) = Criterion::new(CriterionKind::SoftmaxCrossEntropy)
        .loss_and_output_grad(&single, &Targets::Classes(vec![2]))
        .unwrap();
    assert_eq!(lw, 2.0 * l0 / 2.0);
}

#[test]
fn cross_entropy_hessian_matches_finite_differences() {
    let mut r = rng(8);
    let f = gauss_mat(&mut r, 3, 1, 1.0);
    let crit = Criterion::new(CriterionKind::SoftmaxCrossEntropy);
    let h = crit.hessian_at(&f, 0);
    let grad = |f: &Mat| crit.loss_and_output_grad(f, &Targets::Classes(vec![1])).unwrap().1;
    let step = 1e-5;
    let mut fd = Mat::zeros(3, 3);
    for j in 0..3 {
        let mut p = f.clone();
        let mut m = f.clone();
        p[(j, 0)] += step;
        m[(j, 0)] -= step;
        fd.set_column(j, &((grad(&p) - grad(&m)) / (2.0 * step)).column(0));
    }
    assert!(rel(&h, &fd) <= 1e-6, "{}", rel(&h, &fd));
}

fn small_net_strategy() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..5, 1usize..5, 2usize..4, 1usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flatten_unflatten_is_identity((seed, d_in, h, c, _n) in small_net_strategy()) {
        let mut r = rng(seed);
        let mut net = net(&mut r, &[d_in, h, c], &[Activation::Relu, Activation::Identity]);
        let theta = gauss_vec(&mut r, net.num_params());
        net.unflatten_params(&theta).unwrap();
        prop_assert_eq!(net.flatten_params(), theta);
    }

    #[test]
    fn flat_gradient_agrees_with_layer_view((seed, d_in, h, c, n) in small_net_strategy()) {
        let mut r = rng(seed);
        let net = net(&mut r, &[d_in, h, c], &[Activation::Tanh, Activation::Identity]);
        let x = gauss_mat(&mut r, d_in, n, 1.0);
        let t = net.forward(&x).unwrap();
        let g = gauss_mat(&mut r, c, n, 1.0);
        let b = net.backward(&t, &g).unwrap();
        for k in 0..2 {
            prop_assert_eq!(net.layout().layer_matrix(&b.flat, k), b.weight_grads[k].clone());
            let manual = &b.pre_activation_grads[k] * t.inputs[k].transpose() / n as f64;
            prop_assert!((&manual - &b.weight_grads[k]).amax() <= 1e-12);
        }
    }

    #[test]
    fn pre_activations_are_weight_times_input((seed, d_in, h, c, n) in small_net_strategy()) {
        let mut r = rng(seed);
        let net = net(&mut r, &[d_in, h, c], &[Activation::Relu, Activation::Identity]);
        let x = gauss_mat(&mut r, d_in, n, 1.0);
        let t = net.forward(&x).unwrap();
        for (k, l) in net.layers().iter().enumerate() {
            prop_assert_eq!(t.pre_activations[k].ncols(), n);
            prop_assert!((l.weight() * &t.inputs[k] - &t.pre_activations[k]).amax() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_hessian_psd_with_zero_row_sums(seed in any::<u64>(), c in 2usize..6, scale in 0.1f64..5.0) {
        let mut r = rng(seed);
        let f = gauss_mat(&mut r, c, 1, scale);
        let h = Criterion::new(CriterionKind::SoftmaxCrossEntropy).hessian_at(&f, 0);
        let p = softmax(f.column(0));
        prop_assert!((Mat::from_diagonal(&p) - &p * p.transpose() - &h).amax() <= 1e-15);
        for i in 0..c {
            prop_assert!(h.row(i).sum().abs() <= 1e-15);
        }
        let min = h.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-14);
    }

    #[test]
    fn hessian_factor_reconstructs_hessian(seed in any::<u64>(), c in 2usize..6, w in 0.0f64..4.0) {
        let mut r = rng(seed);
        let f = gauss_mat(&mut r, c, 2, 1.0);
        let crit = Criterion::weighted(CriterionKind::SoftmaxCrossEntropy, Vector::from_vec(vec![w, 1.0])).unwrap();
        let s = crit.hessian_factor(&f, 0);
        let h = Criterion::new(CriterionKind::SoftmaxCrossEntropy).hessian_at(&f, 0) * w;
        prop_assert!((&s * s.transpose() - h).amax() <= 1e-14);
    }
}
