//! Curvature estimates: KFAC factors (Monte-Carlo, empirical, exact),
//! factored damping, EMA smoothing, EKFAC eigenvalue correction, and dense
//! GGN oracles for small problems.
//!
//! Vectorisation is row-major throughout, so a layer block of the KFAC
//! approximation is `B ⊗ A` and acts as `vec(B V A)`.

mod ekfac;
mod ggn;
mod kfac;
mod operator;

pub use ekfac::{ekfac_correct, EkfacLayer, EkfacState};
pub use ggn::{dense_ggn, ggn_vector_product, hvp_finite_difference, MAX_DENSE_DIM};
pub use kfac::{
    apply_damping, damping_pi, ema_update, enumerated_pseudo_moment, estimate_kfac_emp, estimate_kfac_exact, estimate_kfac_mc,
    read_kfac, write_kfac, DampedKfacState, DampedLayer, KfacFactors, KfacState, KfacVariant, PiConvention, PseudoSampling,
    WeightScaling, KFAC_MAGIC, MAX_EXACT_CLASSES, PI_TRACE_FLOOR,
};
pub use operator::{CurvatureOperator, MatvecFn};

/// Dense `B ⊗ A` for row-major vectorisation.
pub fn kron(b: &crate::Mat, a: &crate::Mat) -> crate::Mat {
    b.kronecker(a)
}
