use nalgebra::{DMatrix, DVector};

use crate::error::{IvimError, Result};
use crate::fit::{FitBounds, FitResult};
use crate::model::{signal_with_gradient, IvimParams, SignalCurve};

const NPAR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllsOptions {
    pub rel_step_tol: f64,
    pub rel_cost_tol: f64,
    pub max_iterations: usize,
}

impl Default for NllsOptions {
    fn default() -> Self {
        NllsOptions {
            rel_step_tol: 1e-8,
            rel_cost_tol: 1e-10,
            max_iterations: 200,
        }
    }
}

/// Residuals `model(x, b_i) - s_i` and their Jacobian (one row per sample,
/// columns `[D, f, D*, s0]`).
pub fn residual_jacobian(curve: &SignalCurve, x: &[f64; NPAR]) -> (Vec<f64>, Vec<[f64; NPAR]>) {
    curve
        .b_values()
        .iter()
        .zip(curve.samples())
        .map(|(&b, &s)| {
            let (v, g) = signal_with_gradient(x[0], x[1], x[2], x[3], b);
            (v - s, g)
        })
        .unzip()
}

fn cost_of(curve: &SignalCurve, x: &[f64; NPAR]) -> f64 {
    residual_jacobian(curve, x).0.iter().map(|r| r * r).sum()
}

/// Bounded Levenberg-Marquardt on `sum_i (s0 * m(theta, b_i) - s_i)^2`.
///
/// Steps use Marquardt's diagonal scaling, which makes the iteration
/// invariant to rescaling of the signal. Parameters pinned at a bound whose
/// gradient points outward are dropped from the step (active set); trial
/// points are projected back into the box. A step is only accepted if it
/// lowers the cost.
pub fn fit_nlls(
    curve: &SignalCurve,
    init: IvimParams,
    s0_init: f64,
    bounds: &FitBounds,
    options: &NllsOptions,
) -> Result<FitResult> {
    bounds.validate()?;
    let (lo, hi) = bounds.as_arrays();
    let mut x = [init.d, init.f, init.d_star, s0_init];
    if x.iter().any(|v| !v.is_finite()) {
        return Err(IvimError::NumericFailure(format!("non-finite initial point {x:?}")));
    }
    if (0..NPAR).any(|j| x[j] < lo[j] || x[j] > hi[j]) {
        return Err(IvimError::InvalidArgument(format!(
            "initial point {x:?} outside bounds"
        )));
    }
    let fixed: [bool; NPAR] = std::array::from_fn(|j| lo[j] == hi[j]);

    let signal_energy: f64 = curve.samples().iter().map(|s| s * s).sum();
    let exact_cost = (4.0 * f64::EPSILON).powi(2) * signal_energy;

    let mut cost = cost_of(curve, &x);
    if !cost.is_finite() {
        return Err(IvimError::NumericFailure("non-finite residual at initial point".into()));
    }
    let finish = |x: [f64; NPAR], cost: f64, converged: bool, iterations: usize| FitResult {
        params: IvimParams::from_array([x[0], x[1], x[2]]),
        s0_hat: x[3],
        residual_norm: cost,
        converged,
        iterations,
    };
    if cost <= exact_cost {
        return Ok(finish(x, cost, true, 0));
    }

    let mut lambda = 1e-3;
    for iteration in 1..=options.max_iterations {
        let (r, jac) = residual_jacobian(curve, &x);
        let mut grad = [0.0; NPAR];
        let mut normal = [[0.0; NPAR]; NPAR];
        for (ri, row) in r.iter().zip(&jac) {
            for a in 0..NPAR {
                grad[a] += row[a] * ri;
                for b in 0..NPAR {
                    normal[a][b] += row[a] * row[b];
                }
            }
        }
        let free: Vec<usize> = (0..NPAR)
            .filter(|&j| {
                !fixed[j] && !(x[j] <= lo[j] && grad[j] > 0.0) && !(x[j] >= hi[j] && grad[j] < 0.0)
            })
            .collect();
        if free.is_empty() || free.iter().all(|&j| grad[j] == 0.0) {
            // first-order conditions hold on the active set
            return Ok(finish(x, cost, true, iteration - 1));
        }
        let max_diag = free.iter().map(|&j| normal[j][j]).fold(0.0, f64::max);
        let diag_floor = max_diag * 1e-14;

        loop {
            let nf = free.len();
            let mut a = DMatrix::<f64>::zeros(nf, nf);
            let mut rhs = DVector::<f64>::zeros(nf);
            for (p, &jp) in free.iter().enumerate() {
                rhs[p] = -grad[jp];
                for (q, &jq) in free.iter().enumerate() {
                    a[(p, q)] = normal[jp][jq];
                }
                a[(p, p)] += lambda * normal[jp][jp].max(diag_floor);
            }
            let step = a.cholesky().map(|c| c.solve(&rhs));
            if let Some(step) = step {
                let mut trial = x;
                for (p, &j) in free.iter().enumerate() {
                    trial[j] = (x[j] + step[p]).clamp(lo[j], hi[j]);
                }
                let trial_cost = cost_of(curve, &trial);
                if trial_cost.is_finite() && trial_cost < cost {
                    let rel_step = (0..NPAR)
                        .map(|j| {
                            let scale = x[j].abs().max(trial[j].abs());
                            if scale == 0.0 { 0.0 } else { (trial[j] - x[j]).abs() / scale }
                        })
                        .fold(0.0, f64::max);
                    let rel_decrease = (cost - trial_cost) / cost;
                    x = trial;
                    cost = trial_cost;
                    lambda = (lambda * 0.1).max(1e-12);
                    if cost <= exact_cost
                        || (rel_step < options.rel_step_tol && rel_decrease < options.rel_cost_tol)
                    {
                        return Ok(finish(x, cost, true, iteration));
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // no representable descent step remains
                return Ok(finish(x, cost, true, iteration));
            }
        }
    }
    Ok(finish(x, cost, false, options.max_iterations))
}
