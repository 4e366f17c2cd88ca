//! Hypergradients for `min_λ J_out(λ, θ*(λ))` with `θ*(λ) = argmin_θ J_in(λ, θ)`.
//!
//! `∇Φ = ∇₁J_out − ∇²₁₂J_in · v` where `v` approximately solves
//! `H v = ∇₂J_out` and `H` is the inner curvature.

mod outer;

pub use outer::{outer_loop, run_inner, InnerConfig, InnerRun, OuterLoopConfig, OuterRecord, OuterRun};

use crate::curvature::{apply_damping, hvp_finite_difference, CurvatureOperator, EkfacState, KfacState, PiConvention};
use crate::error::{check_len, Error, Result};
use crate::rng::StreamRng;
use crate::solvers::{solve, SolveReport, SolverSpec};
use crate::Vector;

/// Which training examples an inner quantity is evaluated on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    Full,
    Indices(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct OuterEval {
    pub value: f64,
    /// `∇₁J_out`, length m.
    pub grad_outer: Vector,
    /// `∇₂J_out`, length d.
    pub grad_inner: Vector,
}

/// Step used by the default finite-difference inner HVP.
pub const DEFAULT_HVP_STEP: f64 = 1e-5;

pub trait BilevelTask: Send + Sync {
    /// m, the outer dimension.
    fn outer_dim(&self) -> usize;
    /// d, the inner dimension.
    fn inner_dim(&self) -> usize;

    fn inner_value_grad(&self, lambda: &Vector, theta: &Vector, batch: &Batch) -> Result<(f64, Vector)>;

    fn outer_eval(&self, lambda: &Vector, theta: &Vector) -> Result<OuterEval>;

    /// `∇²₁₂J_in · v`, length m.
    fn cross_dvp(&self, lambda: &Vector, theta: &Vector, v: &Vector, batch: &Batch) -> Result<Vector>;

    /// Curvature of the inner objective for operator-based solvers.
    fn curvature(&self, lambda: &Vector, theta: &Vector, batch: &Batch) -> Result<CurvatureOperator>;

    fn kfac_state(&self, _lambda: &Vector, _theta: &Vector, _batch: &Batch, _rng: &mut StreamRng) -> Result<KfacState> {
        Err(Error::Unsupported("Kronecker factors"))
    }

    fn ekfac_state(
        &self,
        _lambda: &Vector,
        _theta: &Vector,
        _batch: &Batch,
        _kfac: &KfacState,
        _damping: f64,
        _rng: &mut StreamRng,
    ) -> Result<EkfacState> {
        Err(Error::Unsupported("EKFAC"))
    }

    /// Damping the factors must carry on top of the solver's λ, e.g. for an
    /// explicit `α‖θ‖²` term the factors do not see.
    fn kfac_extra_damping(&self) -> f64 {
        0.0
    }

    fn inner_hvp(&self, lambda: &Vector, theta: &Vector, v: &Vector, batch: &Batch) -> Result<Vector> {
        hvp_finite_difference(|t| Ok(self.inner_value_grad(lambda, t, batch)?.1), theta, v, DEFAULT_HVP_STEP)
    }

    /// Called after every outer step.
    fn project_outer(&self, _lambda: &mut Vector) {}

    fn sample_batch(&self, _rng: &mut StreamRng, _size: Option<usize>) -> Batch {
        Batch::Full
    }

    fn test_metric(&self, _lambda: &Vector, _theta: &Vector) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct HypergradientResult {
    pub grad: Vector,
    pub direct_term: Vector,
    pub implicit_term: Vector,
    pub outer_value: f64,
    pub solver_report: SolveReport,
}

/// Curvature operator matching what `spec` consumes: Kronecker factors for
/// KFAC/EKFAC, the task's operator otherwise.
pub fn build_operator(
    task: &dyn BilevelTask,
    lambda: &Vector,
    theta: &Vector,
    spec: &SolverSpec,
    batch: &Batch,
    convention: PiConvention,
    rng: &mut StreamRng,
) -> Result<CurvatureOperator> {
    match *spec {
        SolverSpec::Ikvp { lambda: damp } => {
            let state = task.kfac_state(lambda, theta, batch, rng)?;
            Ok(CurvatureOperator::KfacBlockDiag(apply_damping(
                &state,
                damp + task.kfac_extra_damping(),
                convention,
            )?))
        }
        SolverSpec::Ekfac { lambda: damp } => {
            let state = task.kfac_state(lambda, theta, batch, rng)?;
            let ek = task.ekfac_state(lambda, theta, batch, &state, damp + task.kfac_extra_damping(), rng)?;
            Ok(CurvatureOperator::Ekfac(ek))
        }
        _ => task.curvature(lambda, theta, batch),
    }
}

pub fn ift_hypergradient_with_operator(
    task: &dyn BilevelTask,
    lambda: &Vector,
    theta: &Vector,
    spec: &SolverSpec,
    op: &CurvatureOperator,
    batch: &Batch,
) -> Result<HypergradientResult> {
    check_len("outer variable length", task.outer_dim(), lambda.len())?;
    check_len("inner variable length", task.inner_dim(), theta.len())?;
    let outer = task.outer_eval(lambda, theta)?;
    let report = solve(spec, op, &outer.grad_inner).map_err(|e| e.context(format!("{} solve", spec.label())))?;
    let implicit = task.cross_dvp(lambda, theta, &report.solution, batch)?;
    let grad = &outer.grad_outer - &implicit;
    Ok(HypergradientResult {
        grad,
        direct_term: outer.grad_outer,
        implicit_term: implicit,
        outer_value: outer.value,
        solver_report: report,
    })
}

pub fn ift_hypergradient(
    task: &dyn BilevelTask,
    lambda: &Vector,
    theta: &Vector,
    spec: &SolverSpec,
    batch: &Batch,
    rng: &mut StreamRng,
) -> Result<HypergradientResult> {
    let op = build_operator(task, lambda, theta, spec, batch, PiConvention::default(), rng)?;
    ift_hypergradient_with_operator(task, lambda, theta, spec, &op, batch)
}

pub const DEFAULT_UNROLL_CAP: usize = 10_000;

/// Hypergradient of `J_out(λ, θ^T)` after `T` full-batch gradient steps
/// `θ^{t+1} = θ^t − η ∇₂J_in(λ, θ^t)` from a λ-independent `θ⁰`, by reverse
/// accumulation over the stored iterates.
pub fn unrolled_hypergradient(
    task: &dyn BilevelTask,
    lambda: &Vector,
    theta0: &Vector,
    steps: usize,
    eta: f64,
    max_stored: usize,
) -> Result<Vector> {
    if steps + 1 > max_stored {
        return Err(Error::SizeCap {
            what: "stored unrolled iterates",
            got: steps + 1,
            cap: max_stored,
        });
    }
    let batch = Batch::Full;
    let mut iterates = Vec::with_capacity(steps + 1);
    iterates.push(theta0.clone());
    for t in 0..steps {
        let (_, g) = task.inner_value_grad(lambda, &iterates[t], &batch)?;
        iterates.push(&iterates[t] - g * eta);
    }
    let outer = task.outer_eval(lambda, &iterates[steps])?;
    let mut adj = outer.grad_inner;
    let mut total = outer.grad_outer;
    for t in (0..steps).rev() {
        let theta = &iterates[t];
        total -= task.cross_dvp(lambda, theta, &adj, &batch)? * eta;
        let hv = task.inner_hvp(lambda, theta, &adj, &batch)?;
        adj.axpy(-eta, &hv, 1.0);
    }
    Ok(total)
}

/// Central differences of `Φ(λ) = J_out(λ, θ*(λ))` with a caller-supplied
/// inner solver.
pub fn finite_difference_hypergradient<F>(task: &dyn BilevelTask, lambda: &Vector, solve_inner: F, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let phi = |l: &Vector| -> Result<f64> { Ok(task.outer_eval(l, &solve_inner(l)?)?.value) };
    let mut out = Vector::zeros(lambda.len());
    for i in 0..lambda.len() {
        let mut plus = lambda.clone();
        plus[i] += h;
        let mut minus = lambda.clone();
        minus[i] -= h;
        out[i] = (phi(&plus)? - phi(&minus)?) / (2.0 * h);
    }
    Ok(out)
}

pub fn clip_weights(lambda: &Vector) -> Vector {
    lambda.map(|x| x.clamp(0.0, 1.0))
}

/// 1 on the closed interval `[0, 1]`, 0 outside.
pub fn clip_subgradient(lambda: &Vector) -> Vector {
    lambda.map(|x| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 })
}
