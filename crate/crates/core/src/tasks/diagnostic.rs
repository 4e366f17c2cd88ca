use super::linreg::{gen_linreg, LinRegProblem};
use crate::curvature::{
    apply_damping, estimate_kfac_exact, estimate_kfac_mc, kron, CurvatureOperator, KfacState, PiConvention, PseudoSampling,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Criterion, CriterionKind, Network};
use crate::rng::stream;
use crate::solvers::{resolve_eta, NeumannScale, RelativeErrorScorer};
use crate::Mat;
use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

pub const MAX_DIAGNOSTIC_DIM: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosticMethod {
    Exact,
    /// `(B ⊗ A + λI)⁻¹` with Monte-Carlo `B`.
    Kfac,
    /// Same with the exact `B`.
    KfacExact,
    /// `((B + √λ/π) ⊗ (A + π√λ))⁻¹` with Monte-Carlo `B`.
    KfacDamped,
    Neumann(usize),
    Cg(usize),
    Identity,
}

impl fmt::Display for DiagnosticMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagnosticMethod::Exact => write!(f, "Exact"),
            DiagnosticMethod::Kfac => write!(f, "KFAC"),
            DiagnosticMethod::KfacExact => write!(f, "KFAC-exact"),
            DiagnosticMethod::KfacDamped => write!(f, "KFAC-damped"),
            DiagnosticMethod::Neumann(k) => write!(f, "Neu-{k}"),
            DiagnosticMethod::Cg(t) => write!(f, "CG-{t}"),
            DiagnosticMethod::Identity => write!(f, "Identity"),
        }
    }
}

impl FromStr for DiagnosticMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad iteration count in method {s:?}")))
        };
        match s {
            "Exact" => Ok(DiagnosticMethod::Exact),
            "KFAC" => Ok(DiagnosticMethod::Kfac),
            "KFAC-exact" => Ok(DiagnosticMethod::KfacExact),
            "KFAC-damped" => Ok(DiagnosticMethod::KfacDamped),
            "Identity" => Ok(DiagnosticMethod::Identity),
            _ => {
                if let Some(k) = s.strip_prefix("Neu-") {
                    Ok(DiagnosticMethod::Neumann(count(k)?))
                } else if let Some(t) = s.strip_prefix("CG-") {
                    let t = count(t)?;
                    if t == 0 {
                        return Err(Error::InvalidArgument("CG needs T >= 1".into()));
                    }
                    Ok(DiagnosticMethod::Cg(t))
                } else {
                    Err(Error::InvalidArgument(format!("unknown diagnostic method {s:?}")))
                }
            }
        }
    }
}

impl DiagnosticMethod {
    /// The Table-style method set.
    pub fn standard() -> Vec<Self> {
        use DiagnosticMethod::*;
        vec![
            Exact,
            Kfac,
            KfacExact,
            KfacDamped,
            Neumann(3),
            Neumann(20),
            Neumann(50),
            Cg(3),
            Cg(5),
            Cg(10),
            Identity,
        ]
    }

    fn uses_mc(self) -> bool {
        matches!(self, DiagnosticMethod::Kfac | DiagnosticMethod::KfacDamped)
    }
}

#[derive(Debug, Clone)]
pub struct DiagnosticConfig {
    pub ds: Vec<usize>,
    pub n: usize,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<DiagnosticMethod>,
    /// Pseudo-samples per example for the Monte-Carlo `B`.
    pub mc_samples: usize,
    pub cg_tol: f64,
    pub neumann_eta: NeumannScale,
    pub pi_convention: PiConvention,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            ds: vec![10, 100, 500],
            n: 100,
            lambda: 1e-5,
            seeds: (1..=5).collect(),
            methods: DiagnosticMethod::standard(),
            mc_samples: 1,
            cg_tol: 1e-14,
            neumann_eta: NeumannScale::Auto,
            pi_convention: PiConvention::Literal,
        }
    }
}

impl DiagnosticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n < 1 {
            return bad("N must be >= 1".into());
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if self.mc_samples < 1 {
            return bad("mc_samples must be >= 1".into());
        }
        if !(self.cg_tol > 0.0) {
            return bad("cg_tol must be > 0".into());
        }
        for &d in &self.ds {
            if d < 1 {
                return bad("every d must be >= 1".into());
            }
            if d > MAX_DIAGNOSTIC_DIM {
                return Err(Error::SizeCap {
                    what: "diagnostic dimension",
                    got: d,
                    cap: MAX_DIAGNOSTIC_DIM,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub method: String,
    pub d: usize,
    pub seed: u64,
    pub rel_error: f64,
    pub alpha_star: f64,
    pub wall_time: Duration,
    /// Pseudo-samples per example behind a Monte-Carlo factor.
    pub mc_samples: Option<usize>,
    /// Total pseudo-samples behind a Monte-Carlo factor.
    pub mc_draws: Option<usize>,
}

fn shifted(h: &Mat, lambda: f64) -> Mat {
    let mut m = h.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += lambda;
    }
    m
}

fn spd_inverse(m: Mat) -> Result<Mat> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Factorization("matrix not positive definite".into()))
}

/// CG from zero on `(H + λI) x = e_j` for every `j`, as columns of one
/// matrix. Each column follows exactly the scalar recurrences of
/// [`crate::solvers::cg_solve`].
pub fn cg_dense_inverse(h: &Mat, lambda: f64, iters: usize, tol: f64) -> Result<Mat> {
    let d = h.nrows();
    let a = shifted(h, lambda);
    let mut x = Mat::zeros(d, d);
    let mut r = Mat::identity(d, d);
    let mut p = Mat::identity(d, d);
    let mut rs = vec![1.0; d];
    let mut active = vec![true; d];
    for it in 1..=iters {
        if !active.iter().any(|&x| x) {
            break;
        }
        let ap = &a * &p;
        for j in 0..d {
            if !active[j] {
                continue;
            }
            let pap = p.column(j).dot(&ap.column(j));
            if !pap.is_finite() || pap <= 0.0 {
                return Err(Error::CgBreakdown { iteration: it });
            }
            let alpha = rs[j] / pap;
            let pj = p.column(j).clone_owned();
            x.column_mut(j).axpy(alpha, &pj, 1.0);
            r.column_mut(j).axpy(-alpha, &ap.column(j), 1.0);
            let rs_new = r.column(j).norm_squared();
            if rs_new.sqrt() <= tol {
                active[j] = false;
                continue;
            }
            let beta = rs_new / rs[j];
            let new_p = r.column(j) + pj * beta;
            p.set_column(j, &new_p);
            rs[j] = rs_new;
        }
    }
    Ok(x)
}

/// `η Σ_{k=0}^{K} (I − η(H + λI))^k` as a dense matrix.
pub fn neumann_dense_inverse(h: &Mat, lambda: f64, terms: usize, eta: NeumannScale) -> Result<Mat> {
    let d = h.nrows();
    let eta = resolve_eta(&CurvatureOperator::Dense(h.clone()), eta, lambda)?;
    let a = shifted(h, lambda);
    let mut term = Mat::identity(d, d);
    let mut sum = term.clone();
    for _ in 0..terms {
        let at = &a * &term;
        term -= at * eta;
        sum += &term;
    }
    Ok(sum * eta)
}

struct Cell {
    problem: LinRegProblem,
    h: Mat,
    scorer: RelativeErrorScorer,
}

fn linear_model(problem: &LinRegProblem) -> Result<(Network, crate::nn::ForwardTrace)> {
    let net = Network::zeros(&[problem.dim(), 1], &[Activation::Identity])?;
    let trace = net.forward(&problem.x)?;
    Ok((net, trace))
}

fn mc_state(cell: &Cell, cfg: &DiagnosticConfig, seed: u64) -> Result<KfacState> {
    let (net, trace) = linear_model(&cell.problem)?;
    let mut rng = stream(seed, &format!("kfac-mc/d{}", cell.problem.dim()));
    estimate_kfac_mc(
        &net,
        &trace,
        &Criterion::new(CriterionKind::Square),
        PseudoSampling::MonteCarlo(cfg.mc_samples),
        &mut rng,
    )
}

fn kfac_plus_lambda_inverse(state: &KfacState, lambda: f64) -> Result<Mat> {
    let f = &state.layers[0];
    spd_inverse(shifted(&kron(&f.b, &f.a), lambda))
}

fn approx_inverse(method: DiagnosticMethod, cell: &Cell, cfg: &DiagnosticConfig, seed: u64) -> Result<Mat> {
    let d = cell.h.nrows();
    let lambda = cfg.lambda;
    match method {
        DiagnosticMethod::Exact => spd_inverse(shifted(&cell.h, lambda)),
        DiagnosticMethod::Identity => Ok(Mat::identity(d, d)),
        DiagnosticMethod::Neumann(k) => neumann_dense_inverse(&cell.h, lambda, k, cfg.neumann_eta),
        DiagnosticMethod::Cg(t) => cg_dense_inverse(&cell.h, lambda, t, cfg.cg_tol),
        DiagnosticMethod::Kfac => kfac_plus_lambda_inverse(&mc_state(cell, cfg, seed)?, lambda),
        DiagnosticMethod::KfacExact => {
            let (net, trace) = linear_model(&cell.problem)?;
            let state = estimate_kfac_exact(&net, &trace, &Criterion::new(CriterionKind::Square))?;
            kfac_plus_lambda_inverse(&state, lambda)
        }
        DiagnosticMethod::KfacDamped => {
            let damped = apply_damping(&mc_state(cell, cfg, seed)?, lambda, cfg.pi_convention)?;
            let l = &damped.layers[0];
            Ok(kron(&spd_inverse(l.b.clone())?, &spd_inverse(l.a.clone())?))
        }
    }
}

fn run_cell(d: usize, seed: u64, cfg: &DiagnosticConfig) -> Result<Vec<DiagnosticRecord>> {
    let problem = gen_linreg(d, cfg.n, seed);
    let h = problem.hessian();
    let se = SymmetricEigen::new(h.clone());
    let inv_vals = se.eigenvalues.map(|mu| 1.0 / (mu.max(0.0) + cfg.lambda));
    let exact = &se.eigenvectors * Mat::from_diagonal(&inv_vals) * se.eigenvectors.transpose();
    let scorer = RelativeErrorScorer::new(&exact)?;
    let cell = Cell { problem, h, scorer };
    cfg.methods
        .iter()
        .map(|&m| {
            let start = Instant::now();
            let approx = approx_inverse(m, &cell, cfg, seed).map_err(|e| e.context(format!("{m} at d={d}, seed={seed}")))?;
            let (rel_error, alpha_star) = cell.scorer.score(&approx)?;
            Ok(DiagnosticRecord {
                method: m.to_string(),
                d,
                seed,
                rel_error,
                alpha_star,
                wall_time: start.elapsed(),
                mc_samples: m.uses_mc().then_some(cfg.mc_samples),
                mc_draws: m.uses_mc().then_some(cfg.mc_samples * cfg.n),
            })
        })
        .collect()
}

/// Relative operator error of every method against `(H + λI)⁻¹` on
/// Gaussian linear-regression Hessians. Cells `(d, seed)` run in parallel
/// on the current rayon pool; records come back sorted by
/// (method order, d, seed).
pub fn diagnostic_study(cfg: &DiagnosticConfig) -> Result<Vec<DiagnosticRecord>> {
    cfg.validate()?;
    let cells: Vec<(usize, u64)> = cfg.ds.iter().flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s))).collect();
    let per_cell = cells
        .par_iter()
        .map(|&(d, s)| run_cell(d, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<DiagnosticRecord> = per_cell.into_iter().flatten().collect();
    let order = |m: &str| cfg.methods.iter().position(|x| x.to_string() == m).unwrap_or(usize::MAX);
    records.sort_by_key(|r| (order(&r.method), r.d, r.seed));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSummary {
    pub method: String,
    pub d: usize,
    pub mean_error: f64,
    pub seeds: usize,
}

/// Seed-averaged error per `(method, d)`, in first-appearance order.
pub fn summarize(records: &[DiagnosticRecord]) -> Vec<DiagnosticSummary> {
    let mut out: Vec<DiagnosticSummary> = Vec::new();
    for r in records {
        match out.iter_mut().find(|s| s.method == r.method && s.d == r.d) {
            Some(s) => {
                s.mean_error += r.rel_error;
                s.seeds += 1;
            }
            None => out.push(DiagnosticSummary {
                method: r.method.clone(),
                d: r.d,
                mean_error: r.rel_error,
                seeds: 1,
            }),
        }
    }
    for s in out.iter_mut() {
        s.mean_error /= s.seeds as f64;
    }
    out
}
