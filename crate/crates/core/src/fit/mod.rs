//! Classical least-squares estimators.
//!
//! [`fit_segmented`] is the closed-form-ish two-stage fit and serves as the
//! starting point for [`fit_nlls`], the full bounded Levenberg-Marquardt
//! refinement of `(D, f, D*, s0)`. [`fit_lsq`] chains the two.

mod nlls;
mod segmented;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::model::{IvimParams, SignalCurve};

pub use nlls::{fit_nlls, residual_jacobian, NllsOptions};
pub use segmented::fit_segmented;

/// Split between the pseudo-diffusion and diffusion regimes, s/mm².
pub const DEFAULT_B_THRESHOLD: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    #[serde(rename = "D")]
    pub d: (f64, f64),
    pub f: (f64, f64),
    #[serde(rename = "Dstar")]
    pub d_star: (f64, f64),
    /// `None` leaves s0 free on `(0, inf)`. Equal bounds fix it.
    pub s0: Option<(f64, f64)>,
}

impl Default for FitBounds {
    fn default() -> Self {
        FitBounds {
            d: (0.0, 0.005),
            f: (0.0, 1.0),
            d_star: (0.001, 0.5),
            s0: None,
        }
    }
}

impl FitBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("D", self.d), ("f", self.f), ("Dstar", self.d_star)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0) {
                return Err(IvimError::InvalidArgument(format!(
                    "invalid {name} bounds ({lo}, {hi})"
                )));
            }
        }
        if self.f.1 > 1.0 {
            return Err(IvimError::InvalidArgument("f upper bound must be <= 1".into()));
        }
        if let Some((lo, hi)) = self.s0 {
            if lo.is_nan() || hi.is_nan() || lo < 0.0 || lo > hi {
                return Err(IvimError::InvalidArgument(format!("invalid s0 bounds ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Lower and upper bounds of `[D, f, D*, s0]`.
    pub fn as_arrays(&self) -> ([f64; 4], [f64; 4]) {
        let (s0_lo, s0_hi) = self.s0.unwrap_or((0.0, f64::INFINITY));
        (
            [self.d.0, self.f.0, self.d_star.0, s0_lo],
            [self.d.1, self.f.1, self.d_star.1, s0_hi],
        )
    }

    pub fn clamp(&self, p: IvimParams) -> IvimParams {
        IvimParams {
            d: p.d.clamp(self.d.0, self.d.1),
            f: p.f.clamp(self.f.0, self.f.1),
            d_star: p.d_star.clamp(self.d_star.0, self.d_star.1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: IvimParams,
    pub s0_hat: f64,
    /// Sum of squared residuals at `params`.
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Segmented initialization followed by bounded NLLS refinement.
pub fn fit_lsq(curve: &SignalCurve, bounds: &FitBounds) -> Result<FitResult> {
    let init = fit_segmented(curve, DEFAULT_B_THRESHOLD, bounds)?;
    let (lo, hi) = bounds.as_arrays();
    let s0 = init.s0_hat.clamp(lo[3], hi[3]);
    fit_nlls(curve, init.params, s0, bounds, &NllsOptions::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassicalMethod {
    Segmented,
    Lsq,
}

/// Fits every curve independently; output order follows input order.
pub fn fit_batch(
    curves: &[SignalCurve],
    method: ClassicalMethod,
    bounds: &FitBounds,
) -> Vec<Result<FitResult>> {
    curves
        .par_iter()
        .map(|c| match method {
            ClassicalMethod::Segmented => fit_segmented(c, DEFAULT_B_THRESHOLD, bounds),
            ClassicalMethod::Lsq => fit_lsq(c, bounds),
        })
        .collect()
}
