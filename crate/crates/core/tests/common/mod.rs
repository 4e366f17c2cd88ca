#![allow(dead_code)]

use bilevel_kfac::nn::{Activation, LinearLayer, Network};
use bilevel_kfac::{Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(rand_distr::StandardNormal))
}

pub fn gauss_vec(r: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal))
}

pub fn net(r: &mut ChaCha8Rng, widths: &[usize], acts: &[Activation]) -> Network {
    let layers = acts
        .iter()
        .enumerate()
        .map(|(k, &a)| LinearLayer::new(gauss_mat(r, widths[k + 1], widths[k], 0.7), a).unwrap())
        .collect();
    Network::new(layers).unwrap()
}

/// Random symmetric positive definite matrix with eigenvalues `evals`.
pub fn spd_with_spectrum(r: &mut ChaCha8Rng, evals: &[f64]) -> Mat {
    let n = evals.len();
    let q = gauss_mat(r, n, n, 1.0).qr().q();
    let m = &q * Mat::from_diagonal(&Vector::from_row_slice(evals)) * q.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_spd(r: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = gauss_mat(r, n, n, 1.0);
    &g * g.transpose() / n as f64 + Mat::identity(n, n) * 0.5
}

pub fn rel(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn relv(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
