use crate::bilevel::{Batch, BilevelTask, OuterEval};
use crate::curvature::CurvatureOperator;
use crate::error::{check_len, Error, Result};
use crate::solvers::exact_solve;
use crate::{Mat, Vector};

/// `J_in = ½ θᵀPθ − λᵀCᵀθ`, `J_out = ½‖θ − t‖²`, so `θ*(λ) = P⁻¹Cλ`.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    pub p: Mat,
    pub c: Mat,
    pub target: Vector,
}

impl QuadraticTask {
    pub fn new(p: Mat, c: Mat, target: Vector) -> Result<Self> {
        let d = p.nrows();
        check_len("P columns", d, p.ncols())?;
        check_len("C rows", d, c.nrows())?;
        check_len("target length", d, target.len())?;
        if (&p - p.transpose()).amax() > 1e-12 * p.amax().max(1.0) {
            return Err(Error::InvalidArgument("P must be symmetric".into()));
        }
        Ok(Self { p, c, target })
    }

    /// The scalar toy `J_in = ½(θ − λ)²` (up to a λ-only term), `J_out = ½θ²`.
    pub fn toy() -> Self {
        Self {
            p: Mat::identity(1, 1),
            c: Mat::identity(1, 1),
            target: Vector::zeros(1),
        }
    }

    pub fn solve_inner(&self, lambda: &Vector) -> Result<Vector> {
        exact_solve(&self.p, &(&self.c * lambda), 0.0)
    }
}

impl BilevelTask for QuadraticTask {
    fn outer_dim(&self) -> usize {
        self.c.ncols()
    }

    fn inner_dim(&self) -> usize {
        self.p.nrows()
    }

    fn inner_value_grad(&self, lambda: &Vector, theta: &Vector, _batch: &Batch) -> Result<(f64, Vector)> {
        let ct = &self.c * lambda;
        let pt = &self.p * theta;
        Ok((0.5 * theta.dot(&pt) - ct.dot(theta), pt - ct))
    }

    fn outer_eval(&self, lambda: &Vector, theta: &Vector) -> Result<OuterEval> {
        let r = theta - &self.target;
        Ok(OuterEval {
            value: 0.5 * r.norm_squared(),
            grad_outer: Vector::zeros(lambda.len()),
            grad_inner: r,
        })
    }

    fn cross_dvp(&self, _lambda: &Vector, _theta: &Vector, v: &Vector, _batch: &Batch) -> Result<Vector> {
        check_len("cross-derivative direction", self.p.nrows(), v.len())?;
        Ok(-self.c.tr_mul(v))
    }

    fn curvature(&self, _lambda: &Vector, _theta: &Vector, _batch: &Batch) -> Result<CurvatureOperator> {
        Ok(CurvatureOperator::Dense(self.p.clone()))
    }

    fn inner_hvp(&self, _lambda: &Vector, _theta: &Vector, v: &Vector, _batch: &Batch) -> Result<Vector> {
        Ok(&self.p * v)
    }
}
