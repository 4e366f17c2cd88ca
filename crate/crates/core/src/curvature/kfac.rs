use crate::error::{Error, Result};
use crate::nn::{Criterion, CriterionKind, ForwardTrace, GradientBundle, Network};
use crate::{Mat, Vector};
use nalgebra::Cholesky;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Largest output dimension for which exact/enumerated factors are built.
pub const MAX_EXACT_CLASSES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KfacVariant {
    MonteCarlo {
        samples: usize,
    },
    /// Every pseudo-label, weighted by its probability. Same numbers as `Exact`.
    Enumerated,
    Empirical,
    Exact,
}

/// How pseudo-gradients are drawn for the output-side factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoSampling {
    MonteCarlo(usize),
    Enumerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfacFactors {
    /// Input covariance, `d2 × d2`.
    pub a: Mat,
    /// Pre-activation curvature covariance, `d1 × d1`.
    pub b: Mat,
}

#[derive(Debug, Clone)]
pub struct KfacState {
    pub layers: Vec<KfacFactors>,
    pub variant: KfacVariant,
    pub step_counter: u64,
    pub ema_beta: Option<f64>,
}

pub(crate) fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

fn input_factors(trace: &ForwardTrace) -> Vec<Mat> {
    let n = trace.batch_size() as f64;
    trace
        .inputs
        .iter()
        .map(|a| {
            let mut f = (a * a.transpose()) / n;
            symmetrize(&mut f);
            f
        })
        .collect()
}

fn check_trace(net: &Network, trace: &ForwardTrace) -> Result<()> {
    if trace.version() != net.version() {
        return Err(Error::StaleTrace {
            trace: trace.version(),
            net: net.version(),
        });
    }
    Ok(())
}

fn sample_pseudo_target<R: Rng + ?Sized>(criterion: &Criterion, outputs: &Mat, col: usize, rng: &mut R) -> Vector {
    let c = outputs.nrows();
    let sw = criterion.weight(col).sqrt();
    let s = match criterion.kind() {
        CriterionKind::Square => Vector::from_fn(c, |_, _| rng.sample::<f64, _>(StandardNormal)),
        CriterionKind::SoftmaxCrossEntropy => {
            let mut p = crate::nn::softmax(outputs.column(col));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut j = c - 1;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    j = k;
                    break;
                }
            }
            p[j] -= 1.0;
            p
        }
    };
    s * sw
}

/// Pseudo-output matrices, one `C × N` matrix per backward pass, and the
/// normaliser that turns `Σ g gᵀ` over all passes into an average.
pub(crate) fn pseudo_outputs<R: Rng + ?Sized>(
    trace: &ForwardTrace,
    criterion: &Criterion,
    sampling: PseudoSampling,
    rng: &mut R,
) -> Result<(Vec<Mat>, f64)> {
    let out = &trace.outputs;
    let (c, n) = out.shape();
    criterion.check_batch(n)?;
    match sampling {
        PseudoSampling::MonteCarlo(m) => {
            if m < 1 {
                return Err(Error::InvalidArgument("MC sample count M must be >= 1".into()));
            }
            let mut passes = vec![Mat::zeros(c, n); m];
            for col in 0..n {
                for pass in passes.iter_mut() {
                    pass.set_column(col, &sample_pseudo_target(criterion, out, col, rng));
                }
            }
            Ok((passes, (n * m) as f64))
        }
        PseudoSampling::Enumerate => {
            if c > MAX_EXACT_CLASSES {
                return Err(Error::SizeCap {
                    what: "output dimension for exact factors",
                    got: c,
                    cap: MAX_EXACT_CLASSES,
                });
            }
            let mut passes = vec![Mat::zeros(c, n); c];
            for col in 0..n {
                let s = criterion.hessian_factor(out, col);
                for (j, pass) in passes.iter_mut().enumerate() {
                    pass.set_column(col, &s.column(j));
                }
            }
            Ok((passes, n as f64))
        }
    }
}

fn output_factors<R: Rng + ?Sized>(
    net: &Network,
    trace: &ForwardTrace,
    criterion: &Criterion,
    sampling: PseudoSampling,
    rng: &mut R,
) -> Result<Vec<Mat>> {
    let (passes, norm) = pseudo_outputs(trace, criterion, sampling, rng)?;
    let mut bs: Vec<Mat> = net.layers().iter().map(|l| Mat::zeros(l.out_dim(), l.out_dim())).collect();
    for s in &passes {
        let g = net.pre_activation_grads(trace, s)?;
        for (b, gk) in bs.iter_mut().zip(&g) {
            b.gemm(1.0, gk, &gk.transpose(), 1.0);
        }
    }
    for b in bs.iter_mut() {
        *b /= norm;
        symmetrize(b);
    }
    Ok(bs)
}

fn assemble(a: Vec<Mat>, b: Vec<Mat>, variant: KfacVariant) -> KfacState {
    KfacState {
        layers: a.into_iter().zip(b).map(|(a, b)| KfacFactors { a, b }).collect(),
        variant,
        step_counter: 0,
        ema_beta: None,
    }
}

/// KFAC factors with the output-side factor built from `M` sampled
/// pseudo-gradients per example (or all of them, weighted, with
/// [`PseudoSampling::Enumerate`]). Example weights scale pseudo-targets by
/// `√σ_n`.
pub fn estimate_kfac_mc<R: Rng + ?Sized>(
    net: &Network,
    trace: &ForwardTrace,
    criterion: &Criterion,
    sampling: PseudoSampling,
    rng: &mut R,
) -> Result<KfacState> {
    check_trace(net, trace)?;
    let b = output_factors(net, trace, criterion, sampling, rng)?;
    let variant = match sampling {
        PseudoSampling::MonteCarlo(m) => KfacVariant::MonteCarlo { samples: m },
        PseudoSampling::Enumerate => KfacVariant::Enumerated,
    };
    Ok(assemble(input_factors(trace), b, variant))
}

pub fn estimate_kfac_emp(net: &Network, trace: &ForwardTrace, grads: &GradientBundle) -> Result<KfacState> {
    check_trace(net, trace)?;
    let n = trace.batch_size();
    let mut bs = Vec::with_capacity(grads.pre_activation_grads.len());
    for (k, g) in grads.pre_activation_grads.iter().enumerate() {
        if g.ncols() != n {
            return Err(Error::LayerDimension {
                layer: k,
                what: "gradient batch size",
                expected: n,
                got: g.ncols(),
            });
        }
        let mut b = (g * g.transpose()) / n as f64;
        symmetrize(&mut b);
        bs.push(b);
    }
    Ok(assemble(input_factors(trace), bs, KfacVariant::Empirical))
}

/// Exact output-side factor from a symmetric factorisation of each
/// example's output Hessian (`C` backward passes per example).
pub fn estimate_kfac_exact(net: &Network, trace: &ForwardTrace, criterion: &Criterion) -> Result<KfacState> {
    check_trace(net, trace)?;
    // enumeration never touches the rng
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let b = output_factors(net, trace, criterion, PseudoSampling::Enumerate, &mut rng)?;
    Ok(assemble(input_factors(trace), b, KfacVariant::Exact))
}

/// How a per-example weight enters the pseudo-target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScaling {
    Sqrt,
    Linear,
}

/// `E_j[s sᵀ]` under `j ~ Cat(p)`, `s = c(σ)(p − e_j)`, computed by
/// enumerating every pseudo-label. With `Sqrt` this is `σ (diag(p) − ppᵀ)`;
/// `Linear` gives `σ² (diag(p) − ppᵀ)`.
pub fn enumerated_pseudo_moment(logits: &Vector, sigma: f64, scaling: WeightScaling) -> Mat {
    let p = crate::nn::softmax(logits.as_view());
    let c = p.len();
    let scale = match scaling {
        WeightScaling::Sqrt => sigma.sqrt(),
        WeightScaling::Linear => sigma,
    };
    let mut m = Mat::zeros(c, c);
    for j in 0..c {
        let mut s = &p * scale;
        s[j] -= scale;
        m.gemm(p[j], &s, &s.transpose(), 1.0);
    }
    m
}

pub fn ema_update(old: &KfacState, fresh: &KfacState, beta: f64) -> Result<KfacState> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("EMA beta {beta} outside [0, 1)")));
    }
    if old.layers.len() != fresh.layers.len() {
        return Err(Error::DimensionMismatch {
            what: "layer count",
            expected: old.layers.len(),
            got: fresh.layers.len(),
        });
    }
    let mut layers = Vec::with_capacity(old.layers.len());
    for (k, (o, f)) in old.layers.iter().zip(&fresh.layers).enumerate() {
        if o.a.shape() != f.a.shape() || o.b.shape() != f.b.shape() {
            return Err(Error::LayerDimension {
                layer: k,
                what: "factor size",
                expected: o.a.nrows() + o.b.nrows(),
                got: f.a.nrows() + f.b.nrows(),
            });
        }
        layers.push(KfacFactors {
            a: &o.a * beta + &f.a * (1.0 - beta),
            b: &o.b * beta + &f.b * (1.0 - beta),
        });
    }
    Ok(KfacState {
        layers,
        variant: fresh.variant,
        step_counter: old.step_counter + 1,
        ema_beta: Some(beta),
    })
}

/// Split of the damping between the two factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiConvention {
    /// `π = sqrt(d2 Tr(A) / (d1 Tr(B)))`
    #[default]
    Literal,
    /// `π = sqrt((Tr(A)/d2) / (Tr(B)/d1))`
    TraceNormalized,
}

/// Below this trace for `B`, π falls back to 1.
pub const PI_TRACE_FLOOR: f64 = 1e-30;

pub fn damping_pi(a: &Mat, b: &Mat, convention: PiConvention) -> f64 {
    let d2 = a.nrows() as f64;
    let d1 = b.nrows() as f64;
    let (ta, tb) = (a.trace(), b.trace());
    if tb < PI_TRACE_FLOOR || ta < PI_TRACE_FLOOR {
        return 1.0;
    }
    match convention {
        PiConvention::Literal => (d2 * ta / (d1 * tb)).sqrt(),
        PiConvention::TraceNormalized => ((ta / d2) / (tb / d1)).sqrt(),
    }
}

#[derive(Debug, Clone)]
pub struct DampedLayer {
    pub a: Mat,
    pub b: Mat,
    pub pi: f64,
    chol_a: Cholesky<f64, nalgebra::Dyn>,
    chol_b: Cholesky<f64, nalgebra::Dyn>,
}

impl DampedLayer {
    fn new(a: Mat, b: Mat, pi: f64, layer: usize) -> Result<Self> {
        let chol_a = Cholesky::new(a.clone())
            .ok_or_else(|| Error::Factorization(format!("layer {layer}: damped A not positive definite")))?;
        let chol_b = Cholesky::new(b.clone())
            .ok_or_else(|| Error::Factorization(format!("layer {layer}: damped B not positive definite")))?;
        Ok(Self {
            a,
            b,
            pi,
            chol_a,
            chol_b,
        })
    }

    /// `B⁻¹ V A⁻¹` via the cached Cholesky factors.
    pub fn inverse_apply(&self, v: &Mat) -> Mat {
        let left = self.chol_b.solve(v);
        // (B⁻¹V) A⁻¹ = (A⁻¹ (B⁻¹V)ᵀ)ᵀ with A symmetric
        self.chol_a.solve(&left.transpose()).transpose()
    }

    pub fn apply(&self, v: &Mat) -> Mat {
        &self.b * v * &self.a
    }
}

#[derive(Debug, Clone)]
pub struct DampedKfacState {
    pub layers: Vec<DampedLayer>,
    pub lambda: f64,
    pub convention: PiConvention,
}

/// Factored Tikhonov damping: `A + π√λ I` and `B + (√λ/π) I`.
pub fn apply_damping(state: &KfacState, lambda: f64, convention: PiConvention) -> Result<DampedKfacState> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("damping must be > 0, got {lambda}")));
    }
    let sl = lambda.sqrt();
    let layers = state
        .layers
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let pi = damping_pi(&f.a, &f.b, convention);
            let a = &f.a + Mat::identity(f.a.nrows(), f.a.nrows()) * (pi * sl);
            let b = &f.b + Mat::identity(f.b.nrows(), f.b.nrows()) * (sl / pi);
            DampedLayer::new(a, b, pi, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DampedKfacState {
        layers,
        lambda,
        convention,
    })
}

impl DampedKfacState {
    /// Use the factors as they are (they must already be positive definite).
    pub fn undamped(state: &KfacState) -> Result<Self> {
        let layers = state
            .layers
            .iter()
            .enumerate()
            .map(|(k, f)| DampedLayer::new(f.a.clone(), f.b.clone(), 1.0, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            lambda: 0.0,
            convention: PiConvention::Literal,
        })
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(|l| l.a.nrows() * l.b.nrows()).sum()
    }

    fn per_layer(&self, v: &Vector, f: impl Fn(&DampedLayer, &Mat) -> Mat) -> Result<Vector> {
        crate::error::check_len("vector length vs KFAC layout", self.dim(), v.len())?;
        let mut out = Vector::zeros(v.len());
        let mut off = 0;
        for layer in &self.layers {
            let (d1, d2) = (layer.b.nrows(), layer.a.nrows());
            let vm = Mat::from_row_slice(d1, d2, &v.as_slice()[off..off + d1 * d2]);
            let r = f(layer, &vm);
            for i in 0..d1 {
                for j in 0..d2 {
                    out[off + i * d2 + j] = r[(i, j)];
                }
            }
            off += d1 * d2;
        }
        Ok(out)
    }

    /// `(B ⊗ A) v` per layer on the damped factors.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        self.per_layer(v, |l, m| l.apply(m))
    }

    /// `vec(B⁻¹ V A⁻¹)` per layer.
    pub fn inverse_apply(&self, v: &Vector) -> Result<Vector> {
        self.per_layer(v, |l, m| l.inverse_apply(m))
    }
}

pub const KFAC_MAGIC: &[u8; 4] = b"KFAC";
pub const KFAC_DUMP_VERSION: u32 = 1;

/// Binary dump: magic, version, layer count, `(d1, d2)` per layer, then per
/// layer `A` (`d2 × d2`) and `B` (`d1 × d1`) as row-major little-endian f64.
pub fn write_kfac<W: Write>(mut w: W, state: &KfacState) -> Result<()> {
    w.write_all(KFAC_MAGIC)?;
    w.write_all(&KFAC_DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(state.layers.len() as u32).to_le_bytes())?;
    for f in &state.layers {
        w.write_all(&(f.b.nrows() as u32).to_le_bytes())?;
        w.write_all(&(f.a.nrows() as u32).to_le_bytes())?;
    }
    for f in &state.layers {
        for m in [&f.a, &f.b] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    w.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_kfac<R: Read>(mut r: R) -> Result<Vec<KfacFactors>> {
    let mut word = [0u8; 4];
    let mut next = |r: &mut R| -> Result<[u8; 4]> {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated KFAC header".into()))?;
        Ok(word)
    };
    if &next(&mut r)? != KFAC_MAGIC {
        return Err(Error::Format("bad KFAC magic".into()));
    }
    let version = u32::from_le_bytes(next(&mut r)?);
    if version != KFAC_DUMP_VERSION {
        return Err(Error::Format(format!("unsupported KFAC dump version {version}")));
    }
    let count = u32::from_le_bytes(next(&mut r)?) as usize;
    let mut dims = Vec::new();
    for _ in 0..count {
        let d1 = u32::from_le_bytes(next(&mut r)?) as usize;
        let d2 = u32::from_le_bytes(next(&mut r)?) as usize;
        dims.push((d1, d2));
    }
    let mut read_mat = |n: usize| -> Result<Mat> {
        let mut vals = vec![0.0; n * n];
        let mut buf = [0u8; 8];
        for v in vals.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated KFAC payload".into()))?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Mat::from_row_slice(n, n, &vals))
    };
    dims.into_iter()
        .map(|(d1, d2)| {
            let a = read_mat(d2)?;
            let b = read_mat(d1)?;
            Ok(KfacFactors { a, b })
        })
        .collect()
}
