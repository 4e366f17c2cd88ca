use super::kfac::{pseudo_outputs, KfacState, PseudoSampling};
use crate::error::{check_len, Error, Result};
use crate::nn::{Criterion, ForwardTrace, Network};
use crate::{Mat, Vector};
use nalgebra::SymmetricEigen;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct EkfacLayer {
    pub q_a: Mat,
    pub q_b: Mat,
    /// Second moments of pseudo-gradients in the Kronecker eigenbasis, `d1 × d2`.
    pub lambda_star: Mat,
}

impl EkfacLayer {
    fn rotate(&self, v: &Mat) -> Mat {
        self.q_b.tr_mul(v) * &self.q_a
    }

    fn unrotate(&self, v: &Mat) -> Mat {
        &self.q_b * v * self.q_a.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct EkfacState {
    pub layers: Vec<EkfacLayer>,
    pub damping: f64,
}

fn eigenbasis(m: &Mat, which: &str, layer: usize) -> Result<Mat> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("layer {layer}: factor {which}")));
    }
    Ok(SymmetricEigen::new(m.clone()).eigenvectors)
}

/// Corrected eigenvalues for the given per-layer bases.
pub(crate) fn corrected_eigenvalues<R: Rng + ?Sized>(
    bases: &[(Mat, Mat)],
    net: &Network,
    trace: &ForwardTrace,
    criterion: &Criterion,
    sampling: PseudoSampling,
    rng: &mut R,
) -> Result<Vec<Mat>> {
    let (passes, norm) = pseudo_outputs(trace, criterion, sampling, rng)?;
    let a_sq: Vec<Mat> = bases
        .iter()
        .zip(&trace.inputs)
        .map(|((q_a, _), a)| q_a.tr_mul(a).map(|x| x * x))
        .collect();
    let mut out: Vec<Mat> = net.layers().iter().map(|l| Mat::zeros(l.out_dim(), l.in_dim())).collect();
    for s in &passes {
        let g = net.pre_activation_grads(trace, s)?;
        for k in 0..out.len() {
            let g_sq = bases[k].1.tr_mul(&g[k]).map(|x| x * x);
            out[k].gemm(1.0, &g_sq, &a_sq[k].transpose(), 1.0);
        }
    }
    for m in out.iter_mut() {
        *m /= norm;
    }
    Ok(out)
}

/// Keep the KFAC eigenbases and replace the Kronecker eigenvalues with
/// per-direction second moments of the pseudo-gradients.
pub fn ekfac_correct<R: Rng + ?Sized>(
    state: &KfacState,
    net: &Network,
    trace: &ForwardTrace,
    criterion: &Criterion,
    sampling: PseudoSampling,
    damping: f64,
    rng: &mut R,
) -> Result<EkfacState> {
    if !(damping >= 0.0) {
        return Err(Error::InvalidArgument(format!("EKFAC damping must be >= 0, got {damping}")));
    }
    check_len("KFAC layer count", net.layers().len(), state.layers.len())?;
    let bases = state
        .layers
        .iter()
        .enumerate()
        .map(|(k, f)| Ok((eigenbasis(&f.a, "A", k)?, eigenbasis(&f.b, "B", k)?)))
        .collect::<Result<Vec<_>>>()?;
    let lambdas = corrected_eigenvalues(&bases, net, trace, criterion, sampling, rng)?;
    Ok(EkfacState {
        layers: bases
            .into_iter()
            .zip(lambdas)
            .map(|((q_a, q_b), lambda_star)| EkfacLayer { q_a, q_b, lambda_star })
            .collect(),
        damping,
    })
}

impl EkfacState {
    pub fn dim(&self) -> usize {
        self.layers.iter().map(|l| l.lambda_star.len()).sum()
    }

    fn per_layer(&self, v: &Vector, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        check_len("vector length vs EKFAC layout", self.dim(), v.len())?;
        let mut out = Vector::zeros(v.len());
        let mut off = 0;
        for layer in &self.layers {
            let (d1, d2) = layer.lambda_star.shape();
            let vm = Mat::from_row_slice(d1, d2, &v.as_slice()[off..off + d1 * d2]);
            let mut r = layer.rotate(&vm);
            r.zip_apply(&layer.lambda_star, |x, l| *x = f(*x, l + self.damping));
            let r = layer.unrotate(&r);
            for i in 0..d1 {
                for j in 0..d2 {
                    out[off + i * d2 + j] = r[(i, j)];
                }
            }
            off += d1 * d2;
        }
        Ok(out)
    }

    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        self.per_layer(v, |x, l| x * l)
    }

    /// `(Λ* + λ)⁻¹` applied elementwise in the joint eigenbasis.
    pub fn inverse_apply(&self, v: &Vector) -> Result<Vector> {
        if self.damping == 0.0 && self.layers.iter().any(|l| l.lambda_star.iter().any(|&x| x <= 0.0)) {
            return Err(Error::Factorization("EKFAC eigenvalue is zero and no damping is set".into()));
        }
        self.per_layer(v, |x, l| x / l)
    }
}
