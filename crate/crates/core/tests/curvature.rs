mod common;

use bilevel_kfac::curvature::*;
use bilevel_kfac::nn::{softmax, Activation, Criterion, CriterionKind, Network, Targets};
use bilevel_kfac::solvers::{exact_solve, ikvp};
use bilevel_kfac::{Mat, Vector};
use common::*;
use proptest::prelude::*;

fn ce() -> Criterion {
    Criterion::new(CriterionKind::SoftmaxCrossEntropy)
}

fn sq() -> Criterion {
    Criterion::new(CriterionKind::Square)
}

fn state_of(layers: Vec<(Mat, Mat)>) -> KfacState {
    KfacState {
        layers: layers.into_iter().map(|(a, b)| KfacFactors { a, b }).collect(),
        variant: KfacVariant::Exact,
        step_counter: 0,
        ema_beta: None,
    }
}

#[test]
fn input_factor_is_exact_second_moment() {
    let mut r = rng(1);
    let net = net(&mut r, &[3, 4, 2], &[Activation::Tanh, Activation::Identity]);
    let x = gauss_mat(&mut r, 3, 6, 1.0);
    let t = net.forward(&x).unwrap();
    let s = estimate_kfac_exact(&net, &t, &sq()).unwrap();
    for k in 0..2 {
        let a = &t.inputs[k] * t.inputs[k].transpose() / 6.0;
        assert!((&s.layers[k].a - a).amax() <= 1e-14);
    }
}

#[test]
fn monte_carlo_square_loss_factor_tends_to_identity() {
    let mut r = rng(2);
    let net = net(&mut r, &[3, 4], &[Activation::Identity]);
    let n = 5;
    let m = 10_000;
    let x = gauss_mat(&mut r, 3, n, 1.0);
    let t = net.forward(&x).unwrap();
    let s = estimate_kfac_mc(&net, &t, &sq(), PseudoSampling::MonteCarlo(m), &mut rng(99)).unwrap();
    let draws = (n * m) as f64;
    let b = &s.layers[0].b;
    for i in 0..4 {
        for j in 0..4 {
            let (target, se) = if i == j {
                (1.0, (2.0 / draws).sqrt())
            } else {
                (0.0, (1.0 / draws).sqrt())
            };
            assert!((b[(i, j)] - target).abs() <= 3.0 * se, "B[{i},{j}] = {}", b[(i, j)]);
        }
    }
}

#[test]
fn enumeration_equals_exact_bitwise() {
    let mut r = rng(3);
    let net = net(&mut r, &[4, 5, 3], &[Activation::Tanh, Activation::Identity]);
    let x = gauss_mat(&mut r, 4, 7, 1.0);
    let t = net.forward(&x).unwrap();
    let w = Criterion::weighted(CriterionKind::SoftmaxCrossEntropy, Vector::from_fn(7, |i, _| 0.25 * i as f64)).unwrap();
    for crit in [ce(), w] {
        let e = estimate_kfac_mc(&net, &t, &crit, PseudoSampling::Enumerate, &mut rng(0)).unwrap();
        let x = estimate_kfac_exact(&net, &t, &crit).unwrap();
        for k in 0..2 {
            assert_eq!(e.layers[k].b, x.layers[k].b);
            assert_eq!(e.layers[k].a, x.layers[k].a);
        }
    }
}

#[test]
fn weighted_factor_scales_by_sigma_through_layer_jacobian() {
    let mut r = rng(4);
    let net = net(&mut r, &[3, 4, 3], &[Activation::Tanh, Activation::Identity]);
    let x = gauss_mat(&mut r, 3, 2, 1.0);
    let t = net.forward(&x).unwrap();
    let crit = Criterion::weighted(CriterionKind::SoftmaxCrossEntropy, Vector::from_vec(vec![4.0, 0.0])).unwrap();
    let s = estimate_kfac_mc(&net, &t, &crit, PseudoSampling::Enumerate, &mut rng(0)).unwrap();
    let p = softmax(t.outputs.column(0));
    let fisher = (Mat::from_diagonal(&p) - &p * p.transpose()) * 4.0;
    // output layer: Jacobian of f w.r.t. its pre-activation is I
    assert!((&s.layers[1].b - &fisher / 2.0).amax() <= 1e-14);
    // hidden layer: J = W2 diag(tanh'(z1)) for example 0
    let z = t.pre_activations[0].column(0);
    let j = net.layers()[1].weight() * Mat::from_diagonal(&z.map(|v| 1.0 - v.tanh().powi(2)));
    let expected = j.transpose() * &fisher * &j / 2.0;
    assert!((&s.layers[0].b - expected).amax() <= 1e-14);
}

#[test]
fn empirical_factor_two_examples_by_hand() {
    let mut r = rng(5);
    let net = net(&mut r, &[3, 2], &[Activation::Identity]);
    let x = gauss_mat(&mut r, 3, 2, 1.0);
    let y = gauss_mat(&mut r, 2, 2, 1.0);
    let t = net.forward(&x).unwrap();
    let (_, g) = sq().loss_and_output_grad(&t.outputs, &Targets::Vectors(y.clone())).unwrap();
    let bundle = net.backward(&t, &g).unwrap();
    let s = estimate_kfac_emp(&net, &t, &bundle).unwrap();
    let g1: Vector = t.outputs.column(0) - y.column(0);
    let g2: Vector = t.outputs.column(1) - y.column(1);
    let expected = (&g1 * g1.transpose() + &g2 * g2.transpose()) / 2.0;
    assert!((&s.layers[0].b - expected).amax() <= 1e-15);
}

#[test]
fn empirical_factor_degenerate_cases() {
    let mut r = rng(6);
    let net = net(&mut r, &[3, 4], &[Activation::Identity]);
    let x = gauss_mat(&mut r, 3, 5, 1.0);
    let t = net.forward(&x).unwrap();
    let (_, g) = sq()
        .loss_and_output_grad(&t.outputs, &Targets::Vectors(t.outputs.clone()))
        .unwrap();
    let s = estimate_kfac_emp(&net, &t, &net.backward(&t, &g).unwrap()).unwrap();
    assert_eq!(s.layers[0].b, Mat::zeros(4, 4));

    let x1 = gauss_mat(&mut r, 3, 1, 1.0);
    let t1 = net.forward(&x1).unwrap();
    let y1 = gauss_mat(&mut r, 4, 1, 1.0);
    let (_, g1) = sq().loss_and_output_grad(&t1.outputs, &Targets::Vectors(y1)).unwrap();
    let s1 = estimate_kfac_emp(&net, &t1, &net.backward(&t1, &g1).unwrap()).unwrap();
    let sv = s1.layers[0].b.singular_values();
    let big = sv.iter().filter(|&&v| v > 1e-12 * sv.max()).count();
    assert!(big <= 1);
}

#[test]
fn two_class_uniform_logits_factor() {
    let net = Network::zeros(&[2, 2], &[Activation::Identity]).unwrap();
    let x = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
    let t = net.forward(&x).unwrap();
    let s = estimate_kfac_exact(&net, &t, &ce()).unwrap();
    let expected = Mat::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
    assert!((&s.layers[0].b - expected).amax() <= 1e-15);
    let sq_state = estimate_kfac_exact(&net, &t, &sq()).unwrap();
    assert_eq!(sq_state.layers[0].b, Mat::identity(2, 2));
}

#[test]
fn single_layer_square_loss_kfac_equals_ggn() {
    let mut r = rng(7);
    let net = net(&mut r, &[5, 3], &[Activation::Identity]);
    let x = gauss_mat(&mut r, 5, 9, 1.0);
    let t = net.forward(&x).unwrap();
    let s = estimate_kfac_exact(&net, &t, &sq()).unwrap();
    let k = kron(&s.layers[0].b, &s.layers[0].a);
    let g = dense_ggn(&net, &t, &sq()).unwrap();
    assert!(rel(&k, &g) <= 1e-10, "{}", rel(&k, &g));

    let damped = apply_damping(&s, 1e-3, PiConvention::Literal).unwrap();
    let l = &damped.layers[0];
    let v = gauss_vec(&mut r, 15);
    let dense = exact_solve(&kron(&l.b, &l.a), &v, 0.0).unwrap();
    assert!(relv(&ikvp(&damped, &v).unwrap(), &dense) <= 1e-10);
}

#[test]
fn single_example_cross_entropy_kfac_equals_ggn() {
    let mut r = rng(8);
    let net = net(&mut r, &[4, 3], &[Activation::Identity]);
    let x = gauss_mat(&mut r, 4, 1, 1.0);
    let t = net.forward(&x).unwrap();
    let s = estimate_kfac_exact(&net, &t, &ce()).unwrap();
    let g = dense_ggn(&net, &t, &ce()).unwrap();
    assert!(rel(&kron(&s.layers[0].b, &s.layers[0].a), &g) <= 1e-12);
}

#[test]
fn damping_examples() {
    assert!((damping_pi(&Mat::identity(2, 2), &Mat::identity(3, 3), PiConvention::Literal) - 2.0 / 3.0).abs() <= 1e-15);
    assert!((damping_pi(&Mat::identity(2, 2), &Mat::identity(3, 3), PiConvention::TraceNormalized) - 1.0).abs() <= 1e-15);

    let lambda: f64 = 0.04;
    let d = apply_damping(
        &state_of(vec![(Mat::identity(3, 3), Mat::identity(3, 3))]),
        lambda,
        PiConvention::Literal,
    )
    .unwrap();
    assert_eq!(d.layers[0].pi, 1.0);
    let expected = Mat::identity(3, 3) * (1.0 + lambda.sqrt());
    assert!((&d.layers[0].a - &expected).amax() <= 1e-15);
    assert!((&d.layers[0].b - &expected).amax() <= 1e-15);

    let d = apply_damping(
        &state_of(vec![(Mat::identity(2, 2), Mat::zeros(3, 3))]),
        lambda,
        PiConvention::Literal,
    )
    .unwrap();
    assert_eq!(d.layers[0].pi, 1.0);
    assert!((&d.layers[0].b - Mat::identity(3, 3) * lambda.sqrt()).amax() <= 1e-15);

    assert!(apply_damping(
        &state_of(vec![(Mat::identity(2, 2), Mat::identity(2, 2))]),
        0.0,
        PiConvention::Literal
    )
    .is_err());
}

#[test]
fn diagonal_kronecker_inverse_by_hand() {
    let d = DampedKfacState::undamped(&state_of(vec![(
        Mat::from_diagonal(&Vector::from_vec(vec![1.0, 4.0])),
        Mat::from_element(1, 1, 2.0),
    )]))
    .unwrap();
    let out = d.inverse_apply(&Vector::from_vec(vec![2.0, 4.0])).unwrap();
    assert!((out - Vector::from_vec(vec![1.0, 0.5])).amax() <= 1e-15);
    let id = DampedKfacState::undamped(&state_of(vec![(Mat::identity(2, 2), Mat::identity(3, 3))])).unwrap();
    let v = Vector::from_fn(6, |i, _| i as f64 - 2.5);
    assert_eq!(id.inverse_apply(&v).unwrap(), v);
}

#[test]
fn ema_examples() {
    let mut r = rng(9);
    let fresh = state_of(vec![(random_spd(&mut r, 3), random_spd(&mut r, 2))]);
    let old = state_of(vec![(random_spd(&mut r, 3), random_spd(&mut r, 2))]);
    let out = ema_update(&old, &fresh, 0.0).unwrap();
    assert_eq!(out.layers, fresh.layers);

    let two = state_of(vec![(Mat::identity(2, 2) * 2.0, Mat::identity(2, 2) * 2.0)]);
    let zero = state_of(vec![(Mat::zeros(2, 2), Mat::zeros(2, 2))]);
    let out = ema_update(&two, &zero, 0.5).unwrap();
    assert_eq!(out.layers[0].a, Mat::identity(2, 2));

    let beta: f64 = 0.9;
    let mut acc = zero.clone();
    let f = state_of(vec![(random_spd(&mut r, 2), random_spd(&mut r, 2))]);
    for _ in 0..10 {
        acc = ema_update(&acc, &f, beta).unwrap();
    }
    let expected = &f.layers[0].a * (1.0 - beta.powi(10));
    assert!((&acc.layers[0].a - expected).amax() <= 1e-14);
}

#[test]
fn ekfac_inverse_matches_dense_eigenbasis_oracle() {
    let mut r = rng(10);
    let net = net(&mut r, &[2, 2], &[Activation::Identity]);
    let x = gauss_mat(&mut r, 2, 6, 1.0);
    let t = net.forward(&x).unwrap();
    let s = estimate_kfac_exact(&net, &t, &ce()).unwrap();
    let lambda = 1e-3;
    let e = ekfac_correct(&s, &net, &t, &ce(), PseudoSampling::Enumerate, lambda, &mut rng(0)).unwrap();
    let l = &e.layers[0];
    for q in [&l.q_a, &l.q_b] {
        assert!((q.transpose() * q - Mat::identity(2, 2)).amax() <= 1e-8);
    }
    assert!(l.lambda_star.iter().all(|&x| x >= 0.0));
    let k = kron(&l.q_b, &l.q_a);
    let diag = Vector::from_iterator(
        4,
        (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| l.lambda_star[(i, j)] + lambda),
    );
    let dense = &k * Mat::from_diagonal(&diag) * k.transpose();
    let b = gauss_vec(&mut r, 4);
    let expected = exact_solve(&dense, &b, 0.0).unwrap();
    assert!(relv(&e.inverse_apply(&b).unwrap(), &expected) <= 1e-10);
}

#[test]
fn ekfac_identity_basis_is_raw_second_moment() {
    let mut r = rng(11);
    let net = net(&mut r, &[3, 3], &[Activation::Identity]);
    let x = gauss_mat(&mut r, 3, 4, 1.0);
    let t = net.forward(&x).unwrap();
    let s = state_of(vec![(Mat::identity(3, 3), Mat::identity(3, 3))]);
    let e = ekfac_correct(&s, &net, &t, &ce(), PseudoSampling::Enumerate, 0.0, &mut rng(0)).unwrap();
    let mut expected = Mat::zeros(3, 3);
    for n in 0..4 {
        let p = softmax(t.outputs.column(n));
        for j in 0..3 {
            let mut g = p.clone();
            g[j] -= 1.0;
            for a in 0..3 {
                for b in 0..3 {
                    expected[(a, b)] += p[j] * (g[a] * x[(b, n)]).powi(2) / 4.0;
                }
            }
        }
    }
    assert!((&e.layers[0].lambda_star - expected).amax() <= 1e-14);
}

#[test]
fn ekfac_rank_one_inputs_give_one_nonzero_eigenvalue() {
    let net = Network::zeros(&[3, 1], &[Activation::Identity]).unwrap();
    let u = Vector::from_vec(vec![1.0, -2.0, 0.5]);
    let x = Mat::from_fn(3, 5, |i, n| u[i] * (n as f64 + 1.0));
    let t = net.forward(&x).unwrap();
    let s = estimate_kfac_exact(&net, &t, &sq()).unwrap();
    let e = ekfac_correct(&s, &net, &t, &sq(), PseudoSampling::Enumerate, 0.0, &mut rng(0)).unwrap();
    let ls = &e.layers[0].lambda_star;
    let nonzero = ls.iter().filter(|&&v| v > 1e-12 * ls.max()).count();
    assert_eq!(nonzero, 1);
}

#[test]
fn ggn_linear_regression_closed_form() {
    let mut r = rng(12);
    let net = Network::zeros(&[6, 1], &[Activation::Identity]).unwrap();
    let x = gauss_mat(&mut r, 6, 10, 1.0);
    let t = net.forward(&x).unwrap();
    let g = dense_ggn(&net, &t, &sq()).unwrap();
    let h = &x * x.transpose() / 10.0;
    assert!((&g - &h).amax() <= 1e-14);
    let v = gauss_vec(&mut r, 6);
    assert!((ggn_vector_product(&net, &t, &sq(), &v).unwrap() - &h * &v).amax() <= 1e-14);
    assert_eq!(
        ggn_vector_product(&net, &t, &sq(), &Vector::zeros(6)).unwrap(),
        Vector::zeros(6)
    );

    let t0 = net.forward(&Mat::zeros(6, 4)).unwrap();
    assert_eq!(dense_ggn(&net, &t0, &sq()).unwrap(), Mat::zeros(6, 6));
}

#[test]
fn ggn_dense_matches_column_probes() {
    let mut r = rng(13);
    let net = net(&mut r, &[3, 4, 3], &[Activation::Tanh, Activation::Identity]);
    let x = gauss_mat(&mut r, 3, 5, 1.0);
    let t = net.forward(&x).unwrap();
    let g = dense_ggn(&net, &t, &ce()).unwrap();
    let d = net.num_params();
    for i in 0..d {
        let mut e = Vector::zeros(d);
        e[i] = 1.0;
        let col = ggn_vector_product(&net, &t, &ce(), &e).unwrap();
        assert!((col - g.column(i)).amax() <= 1e-10);
    }
    let v = gauss_vec(&mut r, d);
    assert!(relv(&ggn_vector_product(&net, &t, &ce(), &v).unwrap(), &(&g * &v)) <= 1e-10);
}

#[test]
fn finite_difference_hvp_on_quadratic() {
    let mut r = rng(14);
    let m = random_spd(&mut r, 6);
    let theta = gauss_vec(&mut r, 6);
    let v = gauss_vec(&mut r, 6);
    let hv = hvp_finite_difference(|th: &Vector| Ok(&m * th), &theta, &v, 1e-3).unwrap();
    assert!(relv(&hv, &(&m * &v)) <= 1e-12);
    let z = hvp_finite_difference(|th: &Vector| Ok(&m * th), &theta, &Vector::zeros(6), 1e-3).unwrap();
    assert_eq!(z, Vector::zeros(6));
}

#[test]
fn hessian_is_ggn_plus_residual_term() {
    let mut r = rng(15);
    let net = net(&mut r, &[2, 3, 2], &[Activation::Tanh, Activation::Identity]);
    let x = gauss_mat(&mut r, 2, 4, 1.0);
    let theta = net.flatten_params();
    let clean = net.forward(&x).unwrap().outputs;
    let v = gauss_vec(&mut r, theta.len());
    let h = 1e-5;
    for noise in [1e-1, 1e-2, 1e-3] {
        let y = &clean + gauss_mat(&mut r, 2, 4, noise);
        let grad = |th: &Vector| {
            let n = net.with_params(th)?;
            let t = n.forward(&x)?;
            let (_, g) = sq().loss_and_output_grad(&t.outputs, &Targets::Vectors(y.clone()))?;
            Ok(n.backward(&t, &g)?.flat)
        };
        let hv = hvp_finite_difference(grad, &theta, &v, h).unwrap();
        let t = net.forward(&x).unwrap();
        let gv = ggn_vector_product(&net, &t, &sq(), &v).unwrap();
        // residual term: Σ_n J(θ)ᵀ r_n differentiated with r held fixed
        let resid = &t.outputs - &y;
        let jt_r = |th: &Vector| {
            let n = net.with_params(th)?;
            let tr = n.forward(&x)?;
            Ok(n.backward(&tr, &resid)?.flat)
        };
        let rv = hvp_finite_difference(jt_r, &theta, &v, h).unwrap();
        assert!(relv(&(&gv + &rv), &hv) <= 1e-7, "noise {noise}");
        assert!((&hv - &gv).norm() <= 50.0 * resid.norm() * v.norm());
    }
}

#[test]
fn dump_round_trip_is_bitwise() {
    let mut r = rng(16);
    let net = net(&mut r, &[3, 4, 2], &[Activation::Relu, Activation::Identity]);
    let t = net.forward(&gauss_mat(&mut r, 3, 5, 1.0)).unwrap();
    let s = estimate_kfac_exact(&net, &t, &ce()).unwrap();
    let mut buf = Vec::new();
    write_kfac(&mut buf, &s).unwrap();
    assert_eq!(&buf[..4], KFAC_MAGIC);
    assert_eq!(read_kfac(buf.as_slice()).unwrap(), s.layers);
    assert!(read_kfac(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_kfac(bad.as_slice()).is_err());
}

#[test]
fn enumerated_moment_sigma_scaling() {
    let mut r = rng(17);
    for _ in 0..10 {
        let logits = gauss_vec(&mut r, 3);
        let p = softmax(logits.as_view());
        let fisher = Mat::from_diagonal(&p) - &p * p.transpose();
        for sigma in [0.0, 0.3, 1.0, 4.0] {
            let m = enumerated_pseudo_moment(&logits, sigma, WeightScaling::Sqrt);
            assert!((&m - &fisher * sigma).amax() <= 1e-12);
            let m2 = enumerated_pseudo_moment(&logits, sigma, WeightScaling::Linear);
            assert!((&m2 - &fisher * (sigma * sigma)).amax() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn factors_symmetric_psd(seed in any::<u64>(), n in 1usize..8, h in 1usize..5) {
        let mut r = rng(seed);
        let net = net(&mut r, &[3, h, 3], &[Activation::Tanh, Activation::Identity]);
        let t = net.forward(&gauss_mat(&mut r, 3, n, 1.0)).unwrap();
        let s = estimate_kfac_mc(&net, &t, &ce(), PseudoSampling::MonteCarlo(2), &mut rng(seed ^ 1)).unwrap();
        for f in &s.layers {
            for m in [&f.a, &f.b] {
                prop_assert!((m - m.transpose()).amax() <= 1e-10);
                prop_assert!(m.symmetric_eigenvalues().min() >= -1e-10 * m.amax().max(1.0));
            }
        }
    }

    #[test]
    fn damped_factors_bounded_below(seed in any::<u64>(), lambda in 1e-8f64..10.0, scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let a = gauss_mat(&mut r, 3, 5, scale);
        let b = gauss_mat(&mut r, 2, 4, 1.0);
        let s = state_of(vec![(&a * a.transpose(), &b * b.transpose())]);
        for conv in [PiConvention::Literal, PiConvention::TraceNormalized] {
            let d = apply_damping(&s, lambda, conv).unwrap();
            let l = &d.layers[0];
            prop_assert!(l.pi > 0.0 && l.pi.is_finite());
            let sl = lambda.sqrt();
            prop_assert!(l.a.symmetric_eigenvalues().min() >= l.pi * sl * (1.0 - 1e-9));
            prop_assert!(l.b.symmetric_eigenvalues().min() >= sl / l.pi * (1.0 - 1e-9));
        }
    }

    #[test]
    fn operators_are_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = net(&mut r, &[3, 4, 3], &[Activation::Tanh, Activation::Identity]);
        let x = gauss_mat(&mut r, 3, 6, 1.0);
        let t = net.forward(&x).unwrap();
        let s = estimate_kfac_exact(&net, &t, &ce()).unwrap();
        let ops = vec![
            CurvatureOperator::ggn(&net, &t, &ce(), 0.1),
            CurvatureOperator::KfacBlockDiag(apply_damping(&s, 1e-2, PiConvention::Literal).unwrap()),
            CurvatureOperator::Ekfac(ekfac_correct(&s, &net, &t, &ce(), PseudoSampling::Enumerate, 1e-2, &mut rng(0)).unwrap()),
        ];
        let d = net.num_params();
        let (u, v) = (gauss_vec(&mut r, d), gauss_vec(&mut r, d));
        for op in &ops {
            let lhs = u.dot(&op.apply(&v).unwrap());
            let rhs = op.apply(&u).unwrap().dot(&v);
            prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1.0), "{}", op.kind_name());
        }
    }

    #[test]
    fn ikvp_matches_dense_kronecker_inverse(seed in any::<u64>(), d1 in 1usize..4, d2 in 1usize..4) {
        let mut r = rng(seed);
        let s = state_of(vec![(random_spd(&mut r, d2), random_spd(&mut r, d1))]);
        let d = DampedKfacState::undamped(&s).unwrap();
        let v = gauss_vec(&mut r, d1 * d2);
        let dense = exact_solve(&kron(&s.layers[0].b, &s.layers[0].a), &v, 0.0).unwrap();
        prop_assert!(relv(&d.inverse_apply(&v).unwrap(), &dense) <= 1e-10);
        prop_assert!(relv(&d.apply(&v).unwrap(), &(kron(&s.layers[0].b, &s.layers[0].a) * &v)) <= 1e-12);
    }
}
