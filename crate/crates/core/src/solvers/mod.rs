//! Approximate solvers for `(C + λI) v = b` and the relative operator-norm
//! error used to compare approximate inverses.

mod metric;

pub use metric::{relative_operator_error, RelativeErrorScorer, ALPHA_BRACKET, ALPHA_REL_WIDTH};

use crate::curvature::{CurvatureOperator, DampedKfacState, MAX_DENSE_DIM};
use crate::error::{check_len, Error, Result};
use crate::{Mat, Vector};
use nalgebra::Cholesky;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeumannScale {
    /// `η = 1 / (1.1 λ_max)` with `λ_max` from power iteration.
    Auto,
    Fixed(f64),
}

pub const POWER_ITERATION_STEPS: usize = 20;
pub const AUTO_ETA_MARGIN: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverSpec {
    Exact { lambda: f64 },
    Cg { iters: usize, tol: f64, lambda: f64 },
    Neumann { terms: usize, eta: NeumannScale, lambda: f64 },
    Identity,
    Ikvp { lambda: f64 },
    Ekfac { lambda: f64 },
}

impl SolverSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if let Some(l) = self.lambda() {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("solver damping must be >= 0, got {l}"));
            }
        }
        match *self {
            SolverSpec::Cg { iters, tol, .. } => {
                if iters < 1 {
                    return bad("CG needs T >= 1".into());
                }
                if !(tol > 0.0) {
                    return bad(format!("CG tolerance must be > 0, got {tol}"));
                }
            }
            SolverSpec::Neumann {
                eta: NeumannScale::Fixed(eta),
                ..
            } if !(eta > 0.0) => {
                return bad(format!("Neumann scale must be > 0, got {eta}"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            SolverSpec::Exact { lambda }
            | SolverSpec::Cg { lambda, .. }
            | SolverSpec::Neumann { lambda, .. }
            | SolverSpec::Ikvp { lambda }
            | SolverSpec::Ekfac { lambda } => Some(lambda),
            SolverSpec::Identity => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverSpec::Exact { .. } => "exact",
            SolverSpec::Cg { .. } => "cg",
            SolverSpec::Neumann { .. } => "neumann",
            SolverSpec::Identity => "identity",
            SolverSpec::Ikvp { .. } => "kfac",
            SolverSpec::Ekfac { .. } => "ekfac",
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SolverSpec::Cg { iters, .. } => format!("CG-{iters}"),
            SolverSpec::Neumann { terms, .. } => format!("Neu-{terms}"),
            SolverSpec::Exact { .. } => "Exact".into(),
            SolverSpec::Identity => "Identity".into(),
            SolverSpec::Ikvp { .. } => "KFAC".into(),
            SolverSpec::Ekfac { .. } => "EKFAC".into(),
        }
    }

    /// Whether the solver consumes Kronecker factors instead of an operator.
    pub fn needs_factors(&self) -> bool {
        matches!(self, SolverSpec::Ikvp { .. } | SolverSpec::Ekfac { .. })
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vector,
    pub iterations: usize,
    /// `‖(C + λI) v − b‖`, absent when `C` is only known through its inverse.
    pub residual: Option<f64>,
    pub wall_time: Duration,
    pub warnings: Vec<String>,
}

fn shifted(dense: &Mat, lambda: f64) -> Mat {
    let mut m = dense.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += lambda;
    }
    m
}

/// Direct solve of `(dense + λI) v = b`.
pub fn exact_solve(dense: &Mat, b: &Vector, lambda: f64) -> Result<Vector> {
    let d = dense.nrows();
    if d > MAX_DENSE_DIM {
        return Err(Error::SizeCap {
            what: "dimension for exact solve",
            got: d,
            cap: MAX_DENSE_DIM,
        });
    }
    check_len("matrix columns", d, dense.ncols())?;
    check_len("right-hand side length", d, b.len())?;
    let m = shifted(dense, lambda);
    let v = match Cholesky::new(m.clone()) {
        Some(ch) => ch.solve(b),
        None => m
            .lu()
            .solve(b)
            .ok_or_else(|| Error::Factorization("system is singular".into()))?,
    };
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Factorization("exact solve produced non-finite values".into()));
    }
    Ok(v)
}

fn apply_shifted(op: &CurvatureOperator, v: &Vector, lambda: f64) -> Result<Vector> {
    let mut out = op.apply(v)?;
    if lambda != 0.0 {
        out.axpy(lambda, v, 1.0);
    }
    Ok(out)
}

fn residual(op: &CurvatureOperator, v: &Vector, b: &Vector, lambda: f64) -> Result<f64> {
    Ok((apply_shifted(op, v, lambda)? - b).norm())
}

/// Plain conjugate gradient on `(C + λI) v = b` from `v₀ = 0`.
pub fn cg_solve(op: &CurvatureOperator, b: &Vector, iters: usize, tol: f64, lambda: f64) -> Result<SolveReport> {
    SolverSpec::Cg { iters, tol, lambda }.validate()?;
    check_len("right-hand side length", op.dim(), b.len())?;
    let start = Instant::now();
    let bnorm = b.norm();
    let mut x = Vector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut used = 0;
    if bnorm > 0.0 {
        for it in 1..=iters {
            let ap = apply_shifted(op, &p, lambda)?;
            let pap = p.dot(&ap);
            if !pap.is_finite() || pap <= 0.0 {
                return Err(Error::CgBreakdown { iteration: it });
            }
            let alpha = rs / pap;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            let rs_new = r.norm_squared();
            if !rs_new.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::CgBreakdown { iteration: it });
            }
            used = it;
            if rs_new.sqrt() <= tol * bnorm {
                break;
            }
            p = &r + &p * (rs_new / rs);
            rs = rs_new;
        }
    }
    let res = residual(op, &x, b, lambda)?;
    Ok(SolveReport {
        solution: x,
        iterations: used,
        residual: Some(res),
        wall_time: start.elapsed(),
        warnings: Vec::new(),
    })
}

/// Largest eigenvalue estimate of `C + λI` by power iteration from the
/// normalised all-ones vector.
pub fn power_iteration(op: &CurvatureOperator, lambda: f64, steps: usize) -> Result<f64> {
    let d = op.dim();
    let mut v = Vector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..steps {
        let w = apply_shifted(op, &v, lambda)?;
        est = v.dot(&w);
        let n = w.norm();
        if n == 0.0 || !n.is_finite() {
            break;
        }
        v = w / n;
    }
    Ok(est)
}

pub fn resolve_eta(op: &CurvatureOperator, eta: NeumannScale, lambda: f64) -> Result<f64> {
    match eta {
        NeumannScale::Fixed(e) => Ok(e),
        NeumannScale::Auto => {
            let lmax = power_iteration(op, lambda, POWER_ITERATION_STEPS)?;
            Ok(if lmax > 0.0 { 1.0 / (AUTO_ETA_MARGIN * lmax) } else { 1.0 })
        }
    }
}

/// `v = η Σ_{k=0}^{K} (I − η(C + λI))^k b`.
pub fn neumann_solve(op: &CurvatureOperator, b: &Vector, terms: usize, eta: NeumannScale, lambda: f64) -> Result<SolveReport> {
    SolverSpec::Neumann { terms, eta, lambda }.validate()?;
    check_len("right-hand side length", op.dim(), b.len())?;
    let start = Instant::now();
    let eta = resolve_eta(op, eta, lambda)?;
    let mut term = b.clone();
    let mut sum = b.clone();
    let mut norms = vec![sum.norm()];
    let mut warnings = Vec::new();
    for k in 1..=terms {
        let ct = apply_shifted(op, &term, lambda)?;
        term.axpy(-eta, &ct, 1.0);
        sum += &term;
        norms.push(sum.norm());
        if warnings.is_empty() && k >= 5 && norms[k] > 10.0 * norms[k - 5] {
            warnings.push(format!(
                "Neumann partial sums grew more than 10x over terms {}..{k}; series is likely diverging",
                k - 5
            ));
        }
    }
    let v = sum * eta;
    let res = residual(op, &v, b, lambda)?;
    Ok(SolveReport {
        solution: v,
        iterations: terms,
        residual: Some(res),
        wall_time: start.elapsed(),
        warnings,
    })
}

/// Inverse KFAC-vector product `vec(B⁻¹ V A⁻¹)` per layer.
pub fn ikvp(state: &DampedKfacState, v: &Vector) -> Result<Vector> {
    state.inverse_apply(v)
}

pub fn solve(spec: &SolverSpec, op: &CurvatureOperator, b: &Vector) -> Result<SolveReport> {
    spec.validate()?;
    check_len("right-hand side length", op.dim(), b.len())?;
    let start = Instant::now();
    let direct = |solution: Vector, residual: Option<f64>| SolveReport {
        solution,
        iterations: 0,
        residual,
        wall_time: start.elapsed(),
        warnings: Vec::new(),
    };
    match (*spec, op) {
        (SolverSpec::Identity, _) => {
            let v = b.clone();
            let res = match op {
                CurvatureOperator::KfacBlockDiag(_) | CurvatureOperator::Ekfac(_) => None,
                _ => Some(residual(op, &v, b, 0.0)?),
            };
            Ok(direct(v, res))
        }
        (SolverSpec::Exact { lambda }, _) => {
            let v = exact_solve(&op.to_dense()?, b, lambda)?;
            let res = residual(op, &v, b, lambda)?;
            Ok(direct(v, Some(res)))
        }
        (SolverSpec::Cg { iters, tol, lambda }, _) => cg_solve(op, b, iters, tol, lambda),
        (SolverSpec::Neumann { terms, eta, lambda }, _) => neumann_solve(op, b, terms, eta, lambda),
        (SolverSpec::Ikvp { .. }, CurvatureOperator::KfacBlockDiag(state)) => Ok(direct(ikvp(state, b)?, None)),
        (SolverSpec::Ekfac { .. }, CurvatureOperator::Ekfac(state)) => Ok(direct(state.inverse_apply(b)?, None)),
        (s, op) => Err(Error::SolverMismatch {
            solver: s.name(),
            operator: op.kind_name(),
        }),
    }
}
