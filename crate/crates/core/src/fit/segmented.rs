use crate::error::{IvimError, Result};
use crate::fit::{FitBounds, FitResult};
use crate::model::{signal, IvimParams, SignalCurve};

const GRID_POINTS: usize = 64;
const GOLDEN_TOL: f64 = 1e-12;

fn cost_for(curve: &SignalCurve, d: f64, f: f64, d_star: f64, s0: f64) -> f64 {
    curve
        .b_values()
        .iter()
        .zip(curve.samples())
        .map(|(&b, &s)| (signal(d, f, d_star, s0, b) - s).powi(2))
        .sum()
}

/// Three-stage segmented fit:
/// 1. log-linear fit of the samples with `b >= b_threshold` gives `D` and
///    the intercept `A`;
/// 2. `f = 1 - A / s(0)`;
/// 3. with `D`, `f` and `s0 = s(0)` fixed, `D*` minimizes the full-curve
///    squared error over its bounds (log grid, then golden section).
pub fn fit_segmented(curve: &SignalCurve, b_threshold: f64, bounds: &FitBounds) -> Result<FitResult> {
    bounds.validate()?;
    if !curve.schedule().is_anchored() {
        return Err(IvimError::InvalidArgument(
            "segmented fit needs a schedule anchored at b=0".into(),
        ));
    }
    let (high, low): (Vec<_>, Vec<_>) = curve
        .b_values()
        .iter()
        .copied()
        .zip(curve.samples().iter().copied())
        .partition(|&(b, _)| b >= b_threshold);
    if high.len() < 2 || low.len() < 2 {
        return Err(IvimError::Underdetermined(format!(
            "need >= 2 b-values on each side of {b_threshold}, have {} below and {} at or above",
            low.len(),
            high.len()
        )));
    }
    if high.iter().any(|&(_, s)| s <= 0.0) {
        return Err(IvimError::DegenerateSignal(
            "non-positive sample in the log-linear stage".into(),
        ));
    }
    let s_zero = curve.samples()[0];
    if s_zero <= 0.0 {
        return Err(IvimError::DegenerateSignal("b=0 sample is zero".into()));
    }

    // ordinary least squares on (b, ln s)
    let n = high.len() as f64;
    let mean_b = high.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = high.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(b, s) in &high {
        sxy += (b - mean_b) * (s.ln() - mean_y);
        sxx += (b - mean_b).powi(2);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_b;

    let d = (-slope).clamp(bounds.d.0, bounds.d.1);
    let f = (1.0 - intercept.exp() / s_zero).clamp(bounds.f.0, bounds.f.1);

    let (d_star, iterations) = fit_pseudo_diffusion(curve, d, f, s_zero, bounds.d_star);
    let params = IvimParams { d, f, d_star };
    Ok(FitResult {
        params,
        s0_hat: s_zero,
        residual_norm: cost_for(curve, d, f, d_star, s_zero),
        converged: true,
        iterations,
    })
}

fn fit_pseudo_diffusion(curve: &SignalCurve, d: f64, f: f64, s0: f64, (lo, hi): (f64, f64)) -> (f64, usize) {
    let lo_search = if lo > 0.0 { lo } else { hi * 1e-4 };
    let (ln_lo, ln_hi) = (lo_search.ln(), hi.ln());
    let cost = |ln_ds: f64| cost_for(curve, d, f, ln_ds.exp(), s0);

    let step = (ln_hi - ln_lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| ln_lo + step * i as f64).collect();
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (i, &x) in grid.iter().enumerate() {
        let c = cost(x);
        if c < best_cost {
            best_cost = c;
            best = i;
        }
    }

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(GRID_POINTS - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut c1, mut c2) = (cost(x1), cost(x2));
    let mut iterations = 0;
    while (b - a) > GOLDEN_TOL && iterations < 200 {
        iterations += 1;
        if c1 <= c2 {
            b = x2;
            x2 = x1;
            c2 = c1;
            x1 = b - inv_phi * (b - a);
            c1 = cost(x1);
        } else {
            a = x1;
            x1 = x2;
            c1 = c2;
            x2 = a + inv_phi * (b - a);
            c2 = cost(x2);
        }
    }
    let refined = if c1 <= c2 { x1 } else { x2 };
    let choice = if cost(refined) <= best_cost { refined } else { grid[best] };
    (choice.exp().clamp(lo, hi), iterations)
}
