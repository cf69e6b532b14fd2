use crate::error::{IvimError, Result};

/// Root-mean-squared error divided by the mean absolute reference value.
pub fn nrmse(estimates: &[f64], references: &[f64]) -> Result<f64> {
    if estimates.len() != references.len() || estimates.is_empty() {
        return Err(IvimError::InvalidArgument(format!(
            "nrmse needs equal non-empty lists, got {} and {}",
            estimates.len(),
            references.len()
        )));
    }
    let n = references.len() as f64;
    let scale = references.iter().map(|r| r.abs()).sum::<f64>() / n;
    if scale == 0.0 {
        return Err(IvimError::UndefinedNormalization);
    }
    let mse = estimates
        .iter()
        .zip(references)
        .map(|(e, r)| (e - r).powi(2))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt() / scale)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(IvimError::InvalidArgument(format!(
            "pearson needs two equal lists of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(IvimError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
