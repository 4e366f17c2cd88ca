use super::{ift_hypergradient_with_operator, Batch, BilevelTask};
use crate::curvature::{apply_damping, ema_update, CurvatureOperator, KfacState, PiConvention};
use crate::error::{check_len, Error, Result};
use crate::rng::{stream, StreamRng};
use crate::solvers::SolverSpec;
use crate::Vector;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct InnerRun {
    pub theta: Vector,
    pub last_batch: Option<Batch>,
    pub last_loss: Option<f64>,
}

/// Momentum SGD on `J_in(λ, ·)`: `buf ← μ buf + g`, `θ ← θ − lr buf`.
pub fn run_inner(
    task: &dyn BilevelTask,
    lambda: &Vector,
    theta0: &Vector,
    cfg: &InnerConfig,
    rng: &mut StreamRng,
) -> Result<InnerRun> {
    check_len("inner variable length", task.inner_dim(), theta0.len())?;
    let mut theta = theta0.clone();
    let mut buf = Vector::zeros(theta.len());
    let mut last_batch = None;
    let mut last_loss = None;
    for step in 0..cfg.steps {
        let batch = task.sample_batch(rng, cfg.batch_size);
        let (loss, g) = task.inner_value_grad(lambda, &theta, &batch)?;
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::InnerDiverged { step, last_theta: theta });
        }
        for i in 0..theta.len() {
            buf[i] = cfg.momentum * buf[i] + g[i];
            theta[i] -= cfg.lr * buf[i];
        }
        last_batch = Some(batch);
        last_loss = Some(loss);
    }
    Ok(InnerRun {
        theta,
        last_batch,
        last_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterLoopConfig {
    pub outer_iters: usize,
    pub inner: InnerConfig,
    pub outer_lr: f64,
    pub outer_momentum: f64,
    pub solver: SolverSpec,
    /// Kronecker factors are re-estimated every `tau` outer steps.
    pub tau: usize,
    /// 0 disables the moving average.
    pub ema_beta: f64,
    pub pi_convention: PiConvention,
    pub seed: u64,
    pub warm_start: bool,
    /// Draw a fresh batch for the curvature instead of reusing the last inner batch.
    pub independent_curvature_batch: bool,
    /// Run only the inner loops and keep λ fixed (a no-reweighting baseline
    /// sharing the same batch stream).
    pub freeze_outer: bool,
}

impl OuterLoopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.inner.lr > 0.0) {
            return bad("inner lr must be > 0");
        }
        if !(self.outer_lr > 0.0) {
            return bad("outer lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.inner.momentum) || !(0.0..1.0).contains(&self.outer_momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.tau < 1 {
            return bad("tau must be >= 1");
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad("ema_beta must be in [0, 1)");
        }
        if self.inner.batch_size == Some(0) {
            return bad("batch size must be >= 1");
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone)]
pub struct OuterRecord {
    pub outer_iter: usize,
    pub outer_loss: f64,
    pub test_metric: Option<f64>,
    pub hypergrad_norm: f64,
    pub solver_residual: Option<f64>,
    pub solver_iters: usize,
    pub elapsed: Duration,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct OuterRun {
    pub history: Vec<OuterRecord>,
    pub lambda: Vector,
    pub theta: Vector,
    /// First fatal error; the history stops just before it.
    pub error: Option<Error>,
}

struct FactorCache {
    kfac: Option<KfacState>,
    op: Option<CurvatureOperator>,
}

/// AID-style double loop: inner momentum SGD, then an outer momentum step
/// along the IFT hypergradient. The callback sees each record and the
/// current λ and may stop the loop.
pub fn outer_loop<F>(
    task: &dyn BilevelTask,
    lambda0: &Vector,
    theta0: &Vector,
    cfg: &OuterLoopConfig,
    mut callback: F,
) -> Result<OuterRun>
where
    F: FnMut(&OuterRecord, &Vector) -> ControlFlow<()>,
{
    cfg.validate()?;
    check_len("outer variable length", task.outer_dim(), lambda0.len())?;
    check_len("inner variable length", task.inner_dim(), theta0.len())?;
    let mut batch_rng = stream(cfg.seed, "inner-batches");
    let mut curv_rng = stream(cfg.seed, "curvature");
    let mut lambda = lambda0.clone();
    let mut theta = theta0.clone();
    let mut buf = Vector::zeros(lambda.len());
    let mut cache = FactorCache { kfac: None, op: None };
    let mut history = Vec::with_capacity(cfg.outer_iters);
    let start = Instant::now();

    let mut step = |k: usize, lambda: &Vector, theta: &mut Vector, cache: &mut FactorCache| -> Result<(OuterRecord, Vector)> {
        let init = if cfg.warm_start { theta.clone() } else { theta0.clone() };
        let inner = run_inner(task, lambda, &init, &cfg.inner, &mut batch_rng)
            .map_err(|e| e.context(format!("inner loop at outer iteration {k}")))?;
        *theta = inner.theta;
        if cfg.freeze_outer {
            let eval = task.outer_eval(lambda, theta)?;
            let record = OuterRecord {
                outer_iter: k,
                outer_loss: eval.value,
                test_metric: task.test_metric(lambda, theta)?,
                hypergrad_norm: 0.0,
                solver_residual: None,
                solver_iters: 0,
                elapsed: start.elapsed(),
                warnings: Vec::new(),
            };
            return Ok((record, Vector::zeros(lambda.len())));
        }
        let batch = match (cfg.independent_curvature_batch, inner.last_batch) {
            (false, Some(b)) => b,
            _ => task.sample_batch(&mut batch_rng, cfg.inner.batch_size),
        };
        let op = if cfg.solver.needs_factors() {
            if k % cfg.tau == 0 || cache.op.is_none() {
                refresh_factors(task, lambda, theta, &batch, cfg, cache, &mut curv_rng)?;
            }
            cache.op.clone().expect("factor cache filled above")
        } else {
            task.curvature(lambda, theta, &batch)?
        };
        let hg = ift_hypergradient_with_operator(task, lambda, theta, &cfg.solver, &op, &batch)
            .map_err(|e| e.context(format!("hypergradient at outer iteration {k}")))?;
        if hg.grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("hypergradient at outer iteration {k}")));
        }
        let record = OuterRecord {
            outer_iter: k,
            outer_loss: hg.outer_value,
            test_metric: task.test_metric(lambda, theta)?,
            hypergrad_norm: hg.grad.norm(),
            solver_residual: hg.solver_report.residual,
            solver_iters: hg.solver_report.iterations,
            elapsed: start.elapsed(),
            warnings: hg.solver_report.warnings,
        };
        Ok((record, hg.grad))
    };

    for k in 0..cfg.outer_iters {
        match step(k, &lambda, &mut theta, &mut cache) {
            Ok((record, grad)) => {
                let flow = callback(&record, &lambda);
                history.push(record);
                for i in 0..lambda.len() {
                    buf[i] = cfg.outer_momentum * buf[i] + grad[i];
                    lambda[i] -= cfg.outer_lr * buf[i];
                }
                task.project_outer(&mut lambda);
                if flow.is_break() {
                    break;
                }
            }
            Err(e) => {
                return Ok(OuterRun {
                    history,
                    lambda,
                    theta,
                    error: Some(e),
                })
            }
        }
    }
    Ok(OuterRun {
        history,
        lambda,
        theta,
        error: None,
    })
}

fn refresh_factors(
    task: &dyn BilevelTask,
    lambda: &Vector,
    theta: &Vector,
    batch: &Batch,
    cfg: &OuterLoopConfig,
    cache: &mut FactorCache,
    rng: &mut StreamRng,
) -> Result<()> {
    let fresh = task.kfac_state(lambda, theta, batch, rng)?;
    let state = match (&cache.kfac, cfg.ema_beta > 0.0) {
        (Some(old), true) => ema_update(old, &fresh, cfg.ema_beta)?,
        _ => fresh,
    };
    let damp = cfg.solver.lambda().unwrap_or(0.0) + task.kfac_extra_damping();
    let op = match cfg.solver {
        SolverSpec::Ekfac { .. } => CurvatureOperator::Ekfac(task.ekfac_state(lambda, theta, batch, &state, damp, rng)?),
        _ => CurvatureOperator::KfacBlockDiag(apply_damping(&state, damp, cfg.pi_convention)?),
    };
    cache.kfac = Some(state);
    cache.op = Some(op);
    Ok(())
}
