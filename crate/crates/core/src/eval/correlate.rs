use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::eval::metrics::pearson;

/// Weeks; boundary between the canalicular (16-25) and saccular (26-34)
/// phases of fetal lung development.
pub const DEFAULT_STAGE_SPLIT: f64 = 25.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCorrelation {
    pub stage: String,
    pub n: usize,
    /// `None` when the stage holds fewer than two cases.
    pub r: Option<f64>,
}

/// Joins per-case `f` estimates with a per-case covariate (e.g. gestational
/// age), splits the cases at `stage_split` and returns Pearson `r` for the
/// `early` (covariate `<= stage_split`) and `late` stages.
pub fn correlate_fraction_with_covariate(
    fits: &[(String, f64)],
    covariates: &[(String, f64)],
    stage_split: f64,
) -> Result<Vec<StageCorrelation>> {
    let fit_map = unique_map(fits, "fit table")?;
    let cov_map = unique_map(covariates, "covariate table")?;
    let fit_ids: BTreeSet<&str> = fit_map.keys().copied().collect();
    let cov_ids: BTreeSet<&str> = cov_map.keys().copied().collect();
    if fit_ids != cov_ids {
        let missing: Vec<&str> = fit_ids.symmetric_difference(&cov_ids).copied().collect();
        let shown = missing.iter().take(5).copied().collect::<Vec<_>>().join(", ");
        let more = missing.len().saturating_sub(5);
        let tail = if more > 0 { format!(" and {more} more") } else { String::new() };
        return Err(IvimError::Join(format!("ids present in only one table: {shown}{tail}")));
    }

    let mut stages = [("early", Vec::new(), Vec::new()), ("late", Vec::new(), Vec::new())];
    for (id, &f) in &fit_map {
        let c = cov_map[id];
        let s = if c <= stage_split { 0 } else { 1 };
        stages[s].1.push(c);
        stages[s].2.push(f);
    }
    stages
        .into_iter()
        .map(|(stage, cov, f)| {
            let r = if cov.len() >= 2 { Some(pearson(&cov, &f)?) } else { None };
            Ok(StageCorrelation {
                stage: stage.to_string(),
                n: cov.len(),
                r,
            })
        })
        .collect()
}

fn unique_map<'a>(rows: &'a [(String, f64)], what: &str) -> Result<BTreeMap<&'a str, f64>> {
    let mut map = BTreeMap::new();
    for (id, v) in rows {
        if map.insert(id.as_str(), *v).is_some() {
            return Err(IvimError::Join(format!("duplicate id '{id}' in {what}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(i, x)| (i.to_string(), *x)).collect()
    }

    #[test]
    fn perfect_linear_in_both_stages() {
        let ga = [18.0, 20.0, 23.0, 27.0, 30.0, 33.0];
        let cov: Vec<(String, f64)> = ga.iter().enumerate().map(|(i, g)| (format!("c{i}"), *g)).collect();
        let fits: Vec<(String, f64)> = ga.iter().enumerate().map(|(i, g)| (format!("c{i}"), 0.01 * g)).collect();
        let out = correlate_fraction_with_covariate(&fits, &cov, DEFAULT_STAGE_SPLIT).unwrap();
        assert_eq!(out.len(), 2);
        for s in out {
            assert_eq!(s.n, 3);
            assert!((s.r.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_outside_range_leaves_one_stage_empty() {
        let cov = table(&[("a", 20.0), ("b", 22.0), ("c", 24.0)]);
        let fits = table(&[("a", 0.1), ("b", 0.3), ("c", 0.2)]);
        let out = correlate_fraction_with_covariate(&fits, &cov, 40.0).unwrap();
        assert_eq!(out[0].n, 3);
        assert!(out[0].r.is_some());
        assert_eq!(out[1].n, 0);
        assert_eq!(out[1].r, None);
    }

    #[test]
    fn unmatched_ids_fail_to_join() {
        let cov = table(&[("a", 20.0), ("b", 22.0)]);
        let fits = table(&[("a", 0.1), ("x", 0.3)]);
        assert!(matches!(
            correlate_fraction_with_covariate(&fits, &cov, 25.5),
            Err(IvimError::Join(_))
        ));
        let dup = table(&[("a", 0.1), ("a", 0.3)]);
        assert!(matches!(
            correlate_fraction_with_covariate(&dup, &cov, 25.5),
            Err(IvimError::Join(_))
        ));
    }
}
