use super::data::HypercleanDataset;
use crate::bilevel::{clip_subgradient, clip_weights, Batch, BilevelTask, OuterEval};
use crate::curvature::{dense_ggn, ekfac_correct, estimate_kfac_mc, CurvatureOperator, EkfacState, KfacState, PseudoSampling};
use crate::error::{check_len, Error, Result};
use crate::nn::{Criterion, CriterionKind, Network, Targets};
use crate::rng::StreamRng;
use crate::solvers::exact_solve;
use crate::{Mat, Vector};
use rand::seq::index::sample;

/// Per-example weights `σ(λ_n) = clip(λ_n, [0, 1])` on the training loss:
///
/// `J_in(λ, θ) = (1/|S|) Σ_{n∈S} σ(λ_n) ℓ_n(θ) + α‖θ‖²`,
/// `J_out(θ) = ` mean cross-entropy on the clean validation split.
#[derive(Debug, Clone)]
pub struct HypercleanTask {
    pub data: HypercleanDataset,
    pub net: Network,
    pub alpha: f64,
    pub sampling: PseudoSampling,
}

pub fn make_hyperclean_task(ds: HypercleanDataset, net: Network, alpha: f64) -> Result<HypercleanTask> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "regularisation alpha must be >= 0, got {alpha}"
        )));
    }
    check_len("network input dim vs dataset features", ds.input_dim(), net.input_dim())?;
    check_len("network output dim vs classes", ds.classes, net.output_dim())?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        if split.inputs.nrows() != ds.input_dim() {
            return Err(Error::InvalidArgument(format!("{name} split has a different feature count")));
        }
        if let Some(&bad) = split.labels.iter().find(|&&l| l >= ds.classes) {
            return Err(Error::ClassOutOfRange {
                example: 0,
                index: bad,
                classes: ds.classes,
            });
        }
    }
    check_len("corruption mask length", ds.train.len(), ds.corrupted.len())?;
    Ok(HypercleanTask {
        data: ds,
        net,
        alpha,
        sampling: PseudoSampling::MonteCarlo(1),
    })
}

struct BatchView {
    idx: Vec<usize>,
    inputs: Mat,
    targets: Targets,
}

impl HypercleanTask {
    pub fn with_sampling(mut self, sampling: PseudoSampling) -> Self {
        self.sampling = sampling;
        self
    }

    fn view(&self, batch: &Batch) -> Result<BatchView> {
        let n = self.data.train.len();
        let idx: Vec<usize> = match batch {
            Batch::Full => (0..n).collect(),
            Batch::Indices(i) => {
                if let Some(&bad) = i.iter().find(|&&k| k >= n) {
                    return Err(Error::InvalidArgument(format!("batch index {bad} out of range")));
                }
                if i.is_empty() {
                    return Err(Error::InvalidArgument("empty batch".into()));
                }
                i.clone()
            }
        };
        Ok(BatchView {
            inputs: self.data.train.inputs.select_columns(&idx),
            targets: Targets::Classes(idx.iter().map(|&k| self.data.train.labels[k]).collect()),
            idx,
        })
    }

    fn weighted_criterion(&self, lambda: &Vector, idx: &[usize]) -> Result<Criterion> {
        let sigma = clip_weights(&Vector::from_iterator(idx.len(), idx.iter().map(|&k| lambda[k])));
        Criterion::weighted(CriterionKind::SoftmaxCrossEntropy, sigma)
    }

    fn check(&self, lambda: &Vector, theta: &Vector) -> Result<Network> {
        check_len("outer variable length", self.data.train.len(), lambda.len())?;
        self.net.with_params(theta)
    }

    fn mean_ce(&self, theta: &Vector, split: &super::data::ClassificationData) -> Result<(f64, Vector)> {
        let net = self.net.with_params(theta)?;
        let trace = net.forward(&split.inputs)?;
        let crit = Criterion::new(CriterionKind::SoftmaxCrossEntropy);
        let (loss, g) = crit.loss_and_output_grad(&trace.outputs, &Targets::Classes(split.labels.clone()))?;
        Ok((loss, net.backward(&trace, &g)?.flat))
    }

    pub fn test_loss(&self, theta: &Vector) -> Result<f64> {
        Ok(self.mean_ce(theta, &self.data.test)?.0)
    }

    pub fn test_accuracy(&self, theta: &Vector) -> Result<f64> {
        let net = self.net.with_params(theta)?;
        let out = net.forward(&self.data.test.inputs)?.outputs;
        let hits = out
            .column_iter()
            .zip(&self.data.test.labels)
            .filter(|(c, &y)| c.argmax().0 == y)
            .count();
        Ok(hits as f64 / self.data.test.len() as f64)
    }

    /// Damped Newton on the full-batch inner objective until
    /// `‖∇θ J_in‖ ≤ tol`. The GGN is the exact Hessian for a single linear
    /// softmax layer, which makes this the exact inner solve there.
    pub fn solve_inner_newton(&self, lambda: &Vector, theta0: &Vector, tol: f64, max_iter: usize) -> Result<Vector> {
        let mut theta = theta0.clone();
        let view = self.view(&Batch::Full)?;
        let crit = self.weighted_criterion(lambda, &view.idx)?;
        for _ in 0..max_iter {
            let (f, g) = self.inner_value_grad(lambda, &theta, &Batch::Full)?;
            if g.norm() <= tol {
                return Ok(theta);
            }
            let net = self.net.with_params(&theta)?;
            let trace = net.forward(&view.inputs)?;
            let h = dense_ggn(&net, &trace, &crit)?;
            let step = exact_solve(&h, &g, 2.0 * self.alpha)?;
            let mut t = 1.0;
            loop {
                let cand = &theta - &step * t;
                let (fc, _) = self.inner_value_grad(lambda, &cand, &Batch::Full)?;
                if fc <= f - 1e-4 * t * g.dot(&step) || t < 1e-10 {
                    theta = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        let (_, g) = self.inner_value_grad(lambda, &theta, &Batch::Full)?;
        if g.norm() <= tol {
            Ok(theta)
        } else {
            Err(Error::NonFinite(format!(
                "Newton inner solve stalled at gradient norm {:.3e}",
                g.norm()
            )))
        }
    }
}

impl BilevelTask for HypercleanTask {
    fn outer_dim(&self) -> usize {
        self.data.train.len()
    }

    fn inner_dim(&self) -> usize {
        self.net.num_params()
    }

    fn inner_value_grad(&self, lambda: &Vector, theta: &Vector, batch: &Batch) -> Result<(f64, Vector)> {
        let net = self.check(lambda, theta)?;
        let view = self.view(batch)?;
        let crit = self.weighted_criterion(lambda, &view.idx)?;
        let trace = net.forward(&view.inputs)?;
        let (loss, g) = crit.loss_and_output_grad(&trace.outputs, &view.targets)?;
        let mut grad = net.backward(&trace, &g)?.flat;
        grad.axpy(2.0 * self.alpha, theta, 1.0);
        Ok((loss + self.alpha * theta.norm_squared(), grad))
    }

    fn outer_eval(&self, lambda: &Vector, theta: &Vector) -> Result<OuterEval> {
        check_len("outer variable length", self.data.train.len(), lambda.len())?;
        let (value, grad_inner) = self.mean_ce(theta, &self.data.val)?;
        Ok(OuterEval {
            value,
            grad_outer: Vector::zeros(lambda.len()),
            grad_inner,
        })
    }

    /// `(1/|S|) clip'(λ_n) ⟨∇θ ℓ_n, v⟩` for `n ∈ S`, zero elsewhere.
    fn cross_dvp(&self, lambda: &Vector, theta: &Vector, v: &Vector, batch: &Batch) -> Result<Vector> {
        let net = self.check(lambda, theta)?;
        let view = self.view(batch)?;
        let trace = net.forward(&view.inputs)?;
        let crit = Criterion::new(CriterionKind::SoftmaxCrossEntropy);
        let (_, g) = crit.loss_and_output_grad(&trace.outputs, &view.targets)?;
        let pre = net.pre_activation_grads(&trace, &g)?;
        let dots = net.per_example_dot(&trace, &pre, v)?;
        let sub = clip_subgradient(lambda);
        let inv = 1.0 / view.idx.len() as f64;
        let mut out = Vector::zeros(lambda.len());
        for (pos, &k) in view.idx.iter().enumerate() {
            out[k] += inv * sub[k] * dots[pos];
        }
        Ok(out)
    }

    fn curvature(&self, lambda: &Vector, theta: &Vector, batch: &Batch) -> Result<CurvatureOperator> {
        let net = self.check(lambda, theta)?;
        let view = self.view(batch)?;
        let crit = self.weighted_criterion(lambda, &view.idx)?;
        let trace = net.forward(&view.inputs)?;
        Ok(CurvatureOperator::ggn(&net, &trace, &crit, 2.0 * self.alpha))
    }

    fn kfac_state(&self, lambda: &Vector, theta: &Vector, batch: &Batch, rng: &mut StreamRng) -> Result<KfacState> {
        let net = self.check(lambda, theta)?;
        let view = self.view(batch)?;
        let crit = self.weighted_criterion(lambda, &view.idx)?;
        let trace = net.forward(&view.inputs)?;
        estimate_kfac_mc(&net, &trace, &crit, self.sampling, rng)
    }

    fn ekfac_state(
        &self,
        lambda: &Vector,
        theta: &Vector,
        batch: &Batch,
        kfac: &KfacState,
        damping: f64,
        rng: &mut StreamRng,
    ) -> Result<EkfacState> {
        let net = self.check(lambda, theta)?;
        let view = self.view(batch)?;
        let crit = self.weighted_criterion(lambda, &view.idx)?;
        let trace = net.forward(&view.inputs)?;
        ekfac_correct(kfac, &net, &trace, &crit, self.sampling, damping, rng)
    }

    fn kfac_extra_damping(&self) -> f64 {
        2.0 * self.alpha
    }

    fn project_outer(&self, lambda: &mut Vector) {
        lambda.apply(|x| *x = x.clamp(0.0, 1.0));
    }

    fn sample_batch(&self, rng: &mut StreamRng, size: Option<usize>) -> Batch {
        let n = self.data.train.len();
        match size {
            Some(b) if b < n => Batch::Indices(sample(rng, n, b).into_vec()),
            _ => Batch::Full,
        }
    }

    fn test_metric(&self, _lambda: &Vector, theta: &Vector) -> Result<Option<f64>> {
        Ok(Some(self.test_loss(theta)?))
    }
}
