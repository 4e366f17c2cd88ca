use crate::error::{check_len, Error, Result};
use crate::{Mat, Vector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriterionKind {
    /// `½‖f − y‖²`
    Square,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone)]
pub enum Targets {
    Classes(Vec<usize>),
    /// `C × N`, one column per example.
    Vectors(Mat),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Vectors(m) => m.ncols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Vectors(m) => Targets::Vectors(m.select_columns(idx)),
        }
    }
}

/// Per-example criterion averaged over the batch, optionally weighted:
/// `(1/N) Σ_n w_n ℓ_n`.
#[derive(Debug, Clone)]
pub struct Criterion {
    kind: CriterionKind,
    weights: Option<Vector>,
}

pub fn softmax(logits: nalgebra::DVectorView<'_, f64>) -> Vector {
    let m = logits.max();
    let e = logits.map(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

impl Criterion {
    pub fn new(kind: CriterionKind) -> Self {
        Self { kind, weights: None }
    }

    pub fn weighted(kind: CriterionKind, weights: Vector) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "per-example weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            kind,
            weights: Some(weights),
        })
    }

    pub fn kind(&self) -> CriterionKind {
        self.kind
    }

    pub fn weights(&self) -> Option<&Vector> {
        self.weights.as_ref()
    }

    pub fn weight(&self, n: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[n])
    }

    fn check(&self, outputs: &Mat, targets: &Targets) -> Result<()> {
        let n = outputs.ncols();
        let c = outputs.nrows();
        check_len("target count", n, targets.len())?;
        if let Some(w) = &self.weights {
            check_len("weight count", n, w.len())?;
        }
        match (self.kind, targets) {
            (CriterionKind::SoftmaxCrossEntropy, Targets::Classes(ys)) => {
                for (example, &index) in ys.iter().enumerate() {
                    if index >= c {
                        return Err(Error::ClassOutOfRange {
                            example,
                            index,
                            classes: c,
                        });
                    }
                }
                Ok(())
            }
            (CriterionKind::Square, Targets::Vectors(y)) => check_len("target vector dim", c, y.nrows()),
            _ => Err(Error::InvalidArgument(
                "cross-entropy needs class targets, square loss needs vector targets".into(),
            )),
        }
    }

    /// Unweighted per-example losses and output gradients `∇_f ℓ_n`.
    fn per_example(&self, outputs: &Mat, targets: &Targets) -> (Vector, Mat) {
        let n = outputs.ncols();
        match (self.kind, targets) {
            (CriterionKind::Square, Targets::Vectors(y)) => {
                let r = outputs - y;
                let losses = Vector::from_iterator(n, r.column_iter().map(|c| 0.5 * c.norm_squared()));
                (losses, r)
            }
            (CriterionKind::SoftmaxCrossEntropy, Targets::Classes(ys)) => {
                let mut grads = Mat::zeros(outputs.nrows(), n);
                let mut losses = Vector::zeros(n);
                for (col, &y) in ys.iter().enumerate() {
                    let f = outputs.column(col);
                    let m = f.max();
                    let lse = m + f.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    losses[col] = lse - f[y];
                    let mut p = softmax(f);
                    p[y] -= 1.0;
                    grads.set_column(col, &p);
                }
                (losses, grads)
            }
            _ => unreachable!("checked by Criterion::check"),
        }
    }

    /// Mean (weighted) loss and per-example output gradients `w_n ∇_f ℓ_n`.
    pub fn loss_and_output_grad(&self, outputs: &Mat, targets: &Targets) -> Result<(f64, Mat)> {
        self.check(outputs, targets)?;
        let (losses, mut grads) = self.per_example(outputs, targets);
        let n = outputs.ncols();
        let mut total = 0.0;
        for col in 0..n {
            match &self.weights {
                Some(w) => {
                    total += w[col] * losses[col];
                    grads.column_mut(col).scale_mut(w[col]);
                }
                None => total += losses[col],
            }
        }
        Ok((total / n as f64, grads))
    }

    /// Unweighted per-example losses.
    pub fn losses(&self, outputs: &Mat, targets: &Targets) -> Result<Vector> {
        self.check(outputs, targets)?;
        Ok(self.per_example(outputs, targets).0)
    }

    /// `∇²_f ℓ_n` for each example, scaled by `w_n` when weighted.
    pub fn output_hessian(&self, outputs: &Mat, targets: &Targets) -> Result<Vec<Mat>> {
        self.check(outputs, targets)?;
        Ok((0..outputs.ncols()).map(|col| self.hessian_at(outputs, col)).collect())
    }

    /// `∇²_f ℓ` for example `col`; the softmax Hessian does not depend on
    /// the label, so no targets are needed.
    pub fn hessian_at(&self, outputs: &Mat, col: usize) -> Mat {
        let c = outputs.nrows();
        let h = match self.kind {
            CriterionKind::Square => Mat::identity(c, c),
            CriterionKind::SoftmaxCrossEntropy => {
                let p = softmax(outputs.column(col));
                Mat::from_diagonal(&p) - &p * p.transpose()
            }
        };
        match &self.weights {
            Some(w) => h * w[col],
            None => h,
        }
    }

    /// Check that weights (if any) cover a batch of `n` examples.
    pub fn check_batch(&self, n: usize) -> Result<()> {
        if let Some(w) = &self.weights {
            check_len("weight count", n, w.len())?;
        }
        Ok(())
    }

    /// Symmetric factor `S_n` (`C × C`) with `S_n S_nᵀ = ∇²_f ℓ_n` (weighted).
    ///
    /// Square loss uses `√w I`. Cross-entropy uses columns
    /// `√(w p_j) (p − e_j)`, i.e. every pseudo-label weighted by its
    /// probability.
    pub fn hessian_factor(&self, outputs: &Mat, col: usize) -> Mat {
        let c = outputs.nrows();
        let sw = self.weight(col).sqrt();
        match self.kind {
            CriterionKind::Square => Mat::identity(c, c) * sw,
            CriterionKind::SoftmaxCrossEntropy => {
                let p = softmax(outputs.column(col));
                let mut s = Mat::zeros(c, c);
                for j in 0..c {
                    let scale = sw * p[j].sqrt();
                    for i in 0..c {
                        let e = if i == j { 1.0 } else { 0.0 };
                        s[(i, j)] = scale * (p[i] - e);
                    }
                }
                s
            }
        }
    }

    pub fn validate_targets(&self, outputs: &Mat, targets: &Targets) -> Result<()> {
        self.check(outputs, targets)
    }
}
