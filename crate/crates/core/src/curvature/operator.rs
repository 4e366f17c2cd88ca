use super::ekfac::EkfacState;
use super::ggn::{ggn_vector_product, MAX_DENSE_DIM};
use super::kfac::DampedKfacState;
use crate::error::{check_len, Error, Result};
use crate::nn::{Criterion, ForwardTrace, Network};
use crate::{Mat, Vector};
use std::sync::Arc;

pub type MatvecFn = Arc<dyn Fn(&Vector) -> Result<Vector> + Send + Sync>;

/// A symmetric linear map `v ↦ C v`.
#[derive(Clone)]
pub enum CurvatureOperator {
    Dense(Mat),
    Matvec { dim: usize, apply: MatvecFn },
    KfacBlockDiag(DampedKfacState),
    Ekfac(EkfacState),
    Identity(usize),
}

impl std::fmt::Debug for CurvatureOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CurvatureOperator::{}(dim={})", self.kind_name(), self.dim())
    }
}

impl CurvatureOperator {
    /// GGN-vector products on a fixed batch, plus `shift · v`.
    pub fn ggn(net: &Network, trace: &ForwardTrace, criterion: &Criterion, shift: f64) -> Self {
        let (net, trace, criterion) = (net.clone(), trace.clone(), criterion.clone());
        let dim = net.num_params();
        CurvatureOperator::Matvec {
            dim,
            apply: Arc::new(move |v: &Vector| {
                let mut out = ggn_vector_product(&net, &trace, &criterion, v)?;
                if shift != 0.0 {
                    out.axpy(shift, v, 1.0);
                }
                Ok(out)
            }),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CurvatureOperator::Dense(_) => "dense",
            CurvatureOperator::Matvec { .. } => "matvec",
            CurvatureOperator::KfacBlockDiag(_) => "kfac",
            CurvatureOperator::Ekfac(_) => "ekfac",
            CurvatureOperator::Identity(_) => "identity",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CurvatureOperator::Dense(m) => m.nrows(),
            CurvatureOperator::Matvec { dim, .. } => *dim,
            CurvatureOperator::KfacBlockDiag(s) => s.dim(),
            CurvatureOperator::Ekfac(s) => s.dim(),
            CurvatureOperator::Identity(d) => *d,
        }
    }

    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        check_len("operator input length", self.dim(), v.len())?;
        match self {
            CurvatureOperator::Dense(m) => Ok(m * v),
            CurvatureOperator::Matvec { apply, .. } => apply(v),
            CurvatureOperator::KfacBlockDiag(s) => s.apply(v),
            CurvatureOperator::Ekfac(s) => s.apply(v),
            CurvatureOperator::Identity(_) => Ok(v.clone()),
        }
    }

    /// Materialise by probing with every basis vector.
    pub fn to_dense(&self) -> Result<Mat> {
        let d = self.dim();
        if let CurvatureOperator::Dense(m) = self {
            return Ok(m.clone());
        }
        if d > MAX_DENSE_DIM {
            return Err(Error::SizeCap {
                what: "operator dimension for densification",
                got: d,
                cap: MAX_DENSE_DIM,
            });
        }
        let mut out = Mat::zeros(d, d);
        let mut e = Vector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e)?);
            e[j] = 0.0;
        }
        Ok(out)
    }
}
