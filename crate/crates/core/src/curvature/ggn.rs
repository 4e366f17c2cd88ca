use super::kfac::symmetrize;
use crate::error::{check_len, Error, Result};
use crate::nn::{Criterion, ForwardTrace, Network};
use crate::{Mat, Vector};

/// Largest parameter count for which dense curvature matrices are built.
pub const MAX_DENSE_DIM: usize = 5000;

/// Dense `G = (1/N) Σ_n J_nᵀ (∇²_f ℓ_n) J_n` from explicit per-example
/// Jacobians.
pub fn dense_ggn(net: &Network, trace: &ForwardTrace, criterion: &Criterion) -> Result<Mat> {
    let d = net.num_params();
    if d > MAX_DENSE_DIM {
        return Err(Error::SizeCap {
            what: "parameter dimension for dense GGN",
            got: d,
            cap: MAX_DENSE_DIM,
        });
    }
    let (c, n) = trace.outputs.shape();
    criterion.check_batch(n)?;
    // jac_rows[k] column n is row k of J_n
    let mut jac_rows = Vec::with_capacity(c);
    for k in 0..c {
        let mut seed = Mat::zeros(c, n);
        seed.row_mut(k).fill(1.0);
        let g = net.pre_activation_grads(trace, &seed)?;
        jac_rows.push(net.per_example_grads(trace, &g));
    }
    let mut ggn = Mat::zeros(d, d);
    let mut jn = Mat::zeros(c, d);
    for col in 0..n {
        for (k, rows) in jac_rows.iter().enumerate() {
            jn.row_mut(k).copy_from(&rows.column(col).transpose());
        }
        let h = criterion.hessian_at(&trace.outputs, col);
        let hj = &h * &jn;
        ggn.gemm(1.0, &jn.transpose(), &hj, 1.0);
    }
    ggn /= n as f64;
    symmetrize(&mut ggn);
    Ok(ggn)
}

/// `G v` without forming `G`: linearised forward pass, output Hessian,
/// then an ordinary backward pass.
pub fn ggn_vector_product(net: &Network, trace: &ForwardTrace, criterion: &Criterion, v: &Vector) -> Result<Vector> {
    check_len("GGN-vp direction length", net.num_params(), v.len())?;
    let n = trace.batch_size();
    criterion.check_batch(n)?;
    let jv = net.jvp(trace, v)?;
    let mut u = Mat::zeros(jv.nrows(), n);
    for col in 0..n {
        let h = criterion.hessian_at(&trace.outputs, col);
        u.set_column(col, &(h * jv.column(col)));
    }
    Ok(net.backward(trace, &u)?.flat)
}

/// Central-difference Hessian-vector product of a gradient oracle.
pub fn hvp_finite_difference<F>(grad_fn: F, theta: &Vector, v: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    check_len("HVP direction length", theta.len(), v.len())?;
    let plus = grad_fn(&(theta + v * h))?;
    let minus = grad_fn(&(theta - v * h))?;
    let out = (plus - minus) / (2.0 * h);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("finite-difference HVP".into()));
    }
    Ok(out)
}
