use crate::rng::stream;
use crate::{Mat, Vector};
use rand_distr::{Distribution, StandardNormal};

/// Linear least squares with `X ∈ ℝ^{d×N}` and `y ∈ ℝ^N`, all entries i.i.d.
/// standard normal.
#[derive(Debug, Clone)]
pub struct LinRegProblem {
    pub x: Mat,
    pub y: Vector,
    pub seed: u64,
}

impl LinRegProblem {
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_examples(&self) -> usize {
        self.x.ncols()
    }

    /// `H = (1/N) X Xᵀ`
    pub fn hessian(&self) -> Mat {
        let mut h = &self.x * self.x.transpose();
        h /= self.num_examples() as f64;
        h
    }
}

pub fn gen_linreg(d: usize, n: usize, seed: u64) -> LinRegProblem {
    let mut rng = stream(seed, &format!("linreg/d{d}/n{n}"));
    let x = Mat::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let y = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    LinRegProblem { x, y, seed }
}
