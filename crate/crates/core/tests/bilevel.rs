mod common;

use bilevel_kfac::bilevel::*;
use bilevel_kfac::nn::{Activation, Network};
use bilevel_kfac::rng::stream;
use bilevel_kfac::solvers::{NeumannScale, SolverSpec};
use bilevel_kfac::tasks::{gen_synthetic_classification, make_hyperclean_task, HypercleanTask, QuadraticTask, SyntheticConfig};
use bilevel_kfac::{Mat, Vector};
use common::*;
use std::ops::ControlFlow;

fn exact() -> SolverSpec {
    SolverSpec::Exact { lambda: 0.0 }
}

fn quadratic(seed: u64, d: usize, m: usize) -> QuadraticTask {
    let mut r = rng(seed);
    let evals: Vec<f64> = (0..d).map(|i| 1.0 + 9.0 * i as f64 / (d - 1).max(1) as f64).collect();
    let p = spd_with_spectrum(&mut r, &evals);
    QuadraticTask::new(p, gauss_mat(&mut r, d, m, 1.0), gauss_vec(&mut r, d)).unwrap()
}

/// 4 features + bias, 2 classes: 10 inner parameters.
fn small_hyperclean(n_train: usize, seed: u64) -> HypercleanTask {
    let ds = gen_synthetic_classification(&SyntheticConfig {
        n_train,
        n_val: 20,
        n_test: 20,
        classes: 2,
        input_dim: 4,
        separation: 2.0,
        noise_ratio: 0.25,
        seed,
    })
    .unwrap()
    .with_bias();
    let net = Network::zeros(&[5, 2], &[Activation::Identity]).unwrap();
    make_hyperclean_task(ds, net, 0.05).unwrap()
}

#[test]
fn toy_hypergradient_is_lambda() {
    let task = QuadraticTask::toy();
    for l in [-3.0, 0.5, 2.0, 7.25] {
        let lambda = Vector::from_element(1, l);
        let theta = task.solve_inner(&lambda).unwrap();
        let hg = ift_hypergradient(&task, &lambda, &theta, &exact(), &Batch::Full, &mut stream(0, "t")).unwrap();
        assert!((hg.grad[0] - l).abs() <= 1e-10);
        assert_eq!(hg.grad, &hg.direct_term - &hg.implicit_term);
        let fd = finite_difference_hypergradient(&task, &lambda, |l| task.solve_inner(l), 1e-4).unwrap();
        assert!((fd[0] - l).abs() <= 1e-4 * l.abs());
    }
}

#[test]
fn zero_outer_gradient_leaves_direct_term() {
    let task = quadratic(1, 4, 2);
    let lambda = Vector::from_vec(vec![0.3, -1.0]);
    let theta = task.target.clone();
    let hg = ift_hypergradient(&task, &lambda, &theta, &exact(), &Batch::Full, &mut stream(0, "t")).unwrap();
    assert_eq!(hg.implicit_term, Vector::zeros(2));
    assert_eq!(hg.grad, hg.direct_term);
}

#[test]
fn hyperclean_hypergradient_matches_finite_differences() {
    let task = small_hyperclean(8, 3);
    assert_eq!(task.inner_dim(), 10);
    let mut r = rng(4);
    let lambda = Vector::from_fn(8, |_, _| 0.2 + 0.6 * rand::Rng::random::<f64>(&mut r));
    let solve = |l: &Vector| task.solve_inner_newton(l, &Vector::zeros(10), 1e-11, 100);
    let theta = solve(&lambda).unwrap();
    let hg = ift_hypergradient(&task, &lambda, &theta, &exact(), &Batch::Full, &mut stream(0, "t")).unwrap();
    let fd = finite_difference_hypergradient(&task, &lambda, solve, 1e-5).unwrap();
    assert!(relv(&hg.grad, &fd) <= 1e-4, "{}", relv(&hg.grad, &fd));
}

#[test]
fn hyperclean_cross_derivative_matches_finite_differences() {
    let task = small_hyperclean(6, 5);
    let mut r = rng(6);
    let lambda = Vector::from_element(6, 0.5);
    let theta = gauss_vec(&mut r, 10) * 0.3;
    let v = gauss_vec(&mut r, 10);
    let cross = task.cross_dvp(&lambda, &theta, &v, &Batch::Full).unwrap();
    let h = 1e-5;
    for n in 0..6 {
        let mut p = lambda.clone();
        let mut m = lambda.clone();
        p[n] += h;
        m[n] -= h;
        let gp = task.inner_value_grad(&p, &theta, &Batch::Full).unwrap().1;
        let gm = task.inner_value_grad(&m, &theta, &Batch::Full).unwrap().1;
        let fd = (gp - gm).dot(&v) / (2.0 * h);
        assert!((cross[n] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "n={n}");
    }
}

#[test]
fn hyperclean_single_example_cross_derivative() {
    let task = small_hyperclean(2, 7);
    let mut r = rng(8);
    let lambda = Vector::from_element(2, 1.0);
    let theta = gauss_vec(&mut r, 10) * 0.3;
    let v = gauss_vec(&mut r, 10);
    let one = Batch::Indices(vec![0]);
    let cross = task.cross_dvp(&lambda, &theta, &v, &one).unwrap();
    assert_eq!(cross[1], 0.0);
    // with λ = 1 and the α-term removed, ∇θ J_in on one example is its loss gradient
    let (_, g) = task.inner_value_grad(&lambda, &theta, &one).unwrap();
    let grad_l = g - &theta * (2.0 * task.alpha);
    assert!((cross[0] - grad_l.dot(&v)).abs() <= 1e-12);
}

#[test]
fn hyperclean_zero_weights_reduce_to_regulariser() {
    let task = small_hyperclean(5, 9);
    let lambda = Vector::zeros(5);
    let mut r = rng(10);
    let theta = gauss_vec(&mut r, 10);
    let b = gauss_vec(&mut r, 10);
    let op = task.curvature(&lambda, &theta, &Batch::Full).unwrap();
    assert!((op.apply(&b).unwrap() - &b * (2.0 * task.alpha)).amax() <= 1e-15);
    let v = bilevel_kfac::solvers::solve(&SolverSpec::Exact { lambda: 0.0 }, &op, &b)
        .unwrap()
        .solution;
    assert!((v - &b / (2.0 * task.alpha)).amax() <= 1e-10);
}

#[test]
fn clipping_examples() {
    let l = Vector::from_vec(vec![-0.5, 0.3, 2.0]);
    assert_eq!(clip_weights(&l), Vector::from_vec(vec![0.0, 0.3, 1.0]));
    assert_eq!(clip_subgradient(&l), Vector::from_vec(vec![0.0, 1.0, 0.0]));
    let inside = Vector::from_vec(vec![0.1, 0.5, 0.9]);
    assert_eq!(clip_weights(&inside), inside);
    assert_eq!(clip_subgradient(&inside), Vector::from_element(3, 1.0));
}

#[test]
fn unrolled_one_step_toy() {
    let task = QuadraticTask::toy();
    let lambda = Vector::from_element(1, 2.0);
    let g = unrolled_hypergradient(&task, &lambda, &Vector::zeros(1), 1, 1.0, DEFAULT_UNROLL_CAP).unwrap();
    assert_eq!(g[0], 2.0);
    let g0 = unrolled_hypergradient(&task, &lambda, &Vector::zeros(1), 0, 1.0, DEFAULT_UNROLL_CAP).unwrap();
    assert_eq!(g0[0], 0.0);
    assert!(unrolled_hypergradient(&task, &lambda, &Vector::zeros(1), 20, 1.0, 10).is_err());
}

#[test]
fn unrolled_converges_geometrically_to_ift() {
    let task = quadratic(11, 10, 3);
    let lambda = Vector::from_vec(vec![0.5, -1.0, 2.0]);
    let theta = task.solve_inner(&lambda).unwrap();
    let ift = ift_hypergradient(&task, &lambda, &theta, &exact(), &Batch::Full, &mut stream(0, "t"))
        .unwrap()
        .grad;
    let eta = 0.1;
    let rho = (Mat::identity(10, 10) - &task.p * eta).symmetric_eigenvalues().amax();
    let ts: Vec<usize> = (1..=10).map(|k| 20 * k).collect();
    let gaps: Vec<f64> = ts
        .iter()
        .map(|&t| (unrolled_hypergradient(&task, &lambda, &Vector::zeros(10), t, eta, DEFAULT_UNROLL_CAP).unwrap() - &ift).norm())
        .collect();
    for w in gaps.windows(2) {
        assert!(w[1] < w[0]);
    }
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 10.0, ys.iter().sum::<f64>() / 10.0);
    let slope =
        xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope / rho.ln() - 1.0).abs() <= 0.1, "slope {slope} vs {}", rho.ln());
    let g500 = unrolled_hypergradient(&task, &lambda, &Vector::zeros(10), 500, eta, DEFAULT_UNROLL_CAP).unwrap();
    assert!((g500 - &ift).norm() <= 1e-8);
}

#[test]
fn inner_loop_edge_cases() {
    let task = QuadraticTask::new(Mat::identity(3, 3), Mat::identity(3, 3), Vector::zeros(3)).unwrap();
    let c = Vector::from_vec(vec![1.5, -2.0, 0.25]);
    let mut r = stream(0, "b");
    let none = InnerConfig {
        steps: 0,
        lr: 1.0,
        momentum: 0.0,
        batch_size: None,
    };
    let theta0 = Vector::from_vec(vec![9.0, 9.0, 9.0]);
    assert_eq!(run_inner(&task, &c, &theta0, &none, &mut r).unwrap().theta, theta0);
    let one = InnerConfig { steps: 1, ..none };
    assert_eq!(run_inner(&task, &c, &Vector::zeros(3), &one, &mut r).unwrap().theta, c);
}

#[test]
#[allow(clippy::needless_range_loop)]
fn inner_loop_matches_scalar_momentum_recurrence() {
    let task = quadratic(12, 3, 2);
    let lambda = Vector::from_vec(vec![1.0, -0.5]);
    let cfg = InnerConfig {
        steps: 20,
        lr: 0.05,
        momentum: 0.9,
        batch_size: None,
    };
    let theta0 = Vector::from_vec(vec![0.1, 0.2, 0.3]);
    let got = run_inner(&task, &lambda, &theta0, &cfg, &mut stream(0, "b")).unwrap().theta;
    let mut theta = [0.1, 0.2, 0.3];
    let mut buf = [0.0; 3];
    for _ in 0..20 {
        let mut g = [0.0; 3];
        for i in 0..3 {
            let mut pt = 0.0;
            for j in 0..3 {
                pt += task.p[(i, j)] * theta[j];
            }
            let mut cl = 0.0;
            for j in 0..2 {
                cl += task.c[(i, j)] * lambda[j];
            }
            g[i] = pt - cl;
        }
        for i in 0..3 {
            buf[i] = 0.9 * buf[i] + g[i];
            theta[i] -= 0.05 * buf[i];
        }
    }
    assert_eq!(got.as_slice(), &theta);
}

fn loop_cfg(solver: SolverSpec, iters: usize, inner_steps: usize, inner_lr: f64, outer_lr: f64) -> OuterLoopConfig {
    OuterLoopConfig {
        outer_iters: iters,
        inner: InnerConfig {
            steps: inner_steps,
            lr: inner_lr,
            momentum: 0.0,
            batch_size: None,
        },
        outer_lr,
        outer_momentum: 0.0,
        solver,
        tau: 1,
        ema_beta: 0.0,
        pi_convention: Default::default(),
        seed: 0,
        warm_start: true,
        independent_curvature_batch: false,
        freeze_outer: false,
    }
}

#[test]
fn outer_loop_zero_iterations_is_empty() {
    let task = QuadraticTask::toy();
    let run = outer_loop(
        &task,
        &Vector::from_element(1, 2.0),
        &Vector::zeros(1),
        &loop_cfg(exact(), 0, 1, 1.0, 0.1),
        |_, _| ControlFlow::Continue(()),
    )
    .unwrap();
    assert!(run.history.is_empty());
    assert_eq!(run.lambda[0], 2.0);
}

#[test]
fn identity_solver_drives_toy_lambda_monotonically_to_zero() {
    let task = QuadraticTask::toy();
    let mut seen = Vec::new();
    let run = outer_loop(
        &task,
        &Vector::from_element(1, 2.0),
        &Vector::zeros(1),
        &loop_cfg(SolverSpec::Identity, 60, 1, 1.0, 0.1),
        |_, l| {
            seen.push(l[0]);
            ControlFlow::Continue(())
        },
    )
    .unwrap();
    seen.push(run.lambda[0]);
    for w in seen.windows(2) {
        assert!(w[1] < w[0] && w[1] > 0.0);
    }
    assert!(run.lambda[0] < 2.0 * 0.9f64.powi(59));
}

#[test]
fn exact_and_cg_give_the_same_trajectory() {
    let task = quadratic(13, 10, 4);
    let lambda0 = Vector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
    let traj = |spec: SolverSpec| {
        let mut out = Vec::new();
        outer_loop(
            &task,
            &lambda0,
            &Vector::zeros(10),
            &loop_cfg(spec, 15, 200, 0.15, 0.05),
            |_, l| {
                out.push(l.clone());
                ControlFlow::Continue(())
            },
        )
        .unwrap();
        out
    };
    let a = traj(exact());
    let b = traj(SolverSpec::Cg {
        iters: 10,
        tol: 1e-300,
        lambda: 0.0,
    });
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).amax() <= 1e-6);
    }
}

#[test]
fn frozen_outer_keeps_lambda_and_neumann_runs() {
    let task = quadratic(14, 5, 2);
    let lambda0 = Vector::from_vec(vec![0.2, 0.7]);
    let mut cfg = loop_cfg(
        SolverSpec::Neumann {
            terms: 5,
            eta: NeumannScale::Auto,
            lambda: 0.0,
        },
        5,
        20,
        0.1,
        0.05,
    );
    cfg.freeze_outer = true;
    let run = outer_loop(&task, &lambda0, &Vector::zeros(5), &cfg, |_, _| ControlFlow::Continue(())).unwrap();
    assert_eq!(run.lambda, lambda0);
    assert_eq!(run.history.len(), 5);
    cfg.freeze_outer = false;
    let run = outer_loop(&task, &lambda0, &Vector::zeros(5), &cfg, |r, _| {
        if r.outer_iter == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(run.history.len(), 3);
    assert!(run.error.is_none());
}
