use crate::error::{Error, Result};
use crate::{Mat, Vector};
use nalgebra::SymmetricEigen;

/// α is searched over `α₀ · [1/ALPHA_BRACKET, ALPHA_BRACKET]` with
/// `α₀ = ‖E‖₂ / ‖M‖₂`.
pub const ALPHA_BRACKET: f64 = 1e4;
/// Golden-section search stops once `α_hi / α_lo − 1` is below this.
pub const ALPHA_REL_WIDTH: f64 = 1e-6;

const INV_PHI: f64 = 0.618_033_988_749_894_8;
/// Off-diagonal mass (relative) below which `QᵀMQ` is treated as diagonal
/// during the search. The final value is always recomputed densely.
const DIAGONAL_SLACK: f64 = 1e-6;

fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // faer's sequential SVD is markedly faster than nalgebra's at d ≈ 500
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    match f.singular_values() {
        Ok(s) => s.into_iter().fold(0.0, f64::max),
        Err(_) => m.singular_values().max(),
    }
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} matrix")));
    }
    Ok(())
}

/// Minimise a unimodal function of `ln α` by golden-section search.
fn golden_section(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > ALPHA_REL_WIDTH.ln_1p() {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Scores approximate inverses against a fixed exact inverse `E`.
///
/// When `E` is symmetric its eigenbasis is computed once; approximations
/// that are (numerically) diagonal in that basis are searched in `O(n)` per
/// α. Everything else goes through a dense SVD per evaluation.
pub struct RelativeErrorScorer {
    exact: Mat,
    norm: f64,
    eig: Option<(Mat, Vector)>,
}

impl RelativeErrorScorer {
    pub fn new(exact_inv: &Mat) -> Result<Self> {
        check_finite(exact_inv, "exact inverse")?;
        if exact_inv.nrows() != exact_inv.ncols() {
            return Err(Error::DimensionMismatch {
                what: "exact inverse columns",
                expected: exact_inv.nrows(),
                got: exact_inv.ncols(),
            });
        }
        let asym = (exact_inv - exact_inv.transpose()).norm();
        let eig = if asym <= 1e-12 * exact_inv.norm() {
            let se = SymmetricEigen::new(exact_inv.clone());
            Some((se.eigenvectors, se.eigenvalues))
        } else {
            None
        };
        let norm = match &eig {
            Some((_, vals)) => vals.amax(),
            None => spectral_norm(exact_inv),
        };
        Ok(Self {
            exact: exact_inv.clone(),
            norm,
            eig,
        })
    }

    pub fn exact_norm(&self) -> f64 {
        self.norm
    }

    fn dense_error(&self, approx: &Mat, alpha: f64) -> f64 {
        spectral_norm(&(approx * alpha - &self.exact)) / self.norm
    }

    /// `(min_α ‖αM − E‖₂ / ‖E‖₂, α*)`.
    pub fn score(&self, approx: &Mat) -> Result<(f64, f64)> {
        check_finite(approx, "approximate inverse")?;
        if approx.shape() != self.exact.shape() {
            return Err(Error::DimensionMismatch {
                what: "approximate inverse size",
                expected: self.exact.nrows(),
                got: approx.nrows(),
            });
        }
        if self.norm == 0.0 {
            return Ok((0.0, 1.0));
        }
        let diag = self.eig.as_ref().and_then(|(q, e)| {
            let rot = q.tr_mul(approx) * q;
            let m = rot.diagonal();
            let off = (&rot - Mat::from_diagonal(&m)).norm();
            let mnorm = m.amax();
            (mnorm > 0.0 && off * (self.norm / mnorm) <= DIAGONAL_SLACK * self.norm).then(|| (m, e.clone(), mnorm))
        });
        let mnorm = match &diag {
            Some((_, _, n)) => *n,
            None => spectral_norm(approx),
        };
        if mnorm == 0.0 {
            return Ok((1.0, 1.0));
        }
        let alpha0 = self.norm / mnorm;
        let (lo, hi) = ((alpha0 / ALPHA_BRACKET).ln(), (alpha0 * ALPHA_BRACKET).ln());
        let t = match &diag {
            Some((m, e, _)) => golden_section(lo, hi, |t| {
                let a = t.exp();
                m.iter().zip(e.iter()).map(|(mi, ei)| (a * mi - ei).abs()).fold(0.0, f64::max)
            }),
            None => golden_section(lo, hi, |t| self.dense_error(approx, t.exp())),
        };
        let alpha = t.exp();
        let (err, a_star) = [
            (self.dense_error(approx, alpha), alpha),
            (self.dense_error(approx, alpha0), alpha0),
        ]
        .into_iter()
        .fold((f64::INFINITY, alpha), |best, c| if c.0 < best.0 { c } else { best });
        Ok((err, a_star))
    }
}

pub fn relative_operator_error(approx_inv: &Mat, exact_inv: &Mat) -> Result<(f64, f64)> {
    RelativeErrorScorer::new(exact_inv)?.score(approx_inv)
}
