use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::eval::sweep::{parameter_nrmse, predict_all};
use crate::nn::{train, LossAxis, NetworkConfig, TrainingConfig};
use crate::simulate::LabeledDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub value: f64,
    /// Sum of the `D`, `f`, `D*` NRMSE on the evaluation set.
    pub score: Option<f64>,
    pub nrmse: Option<[f64; 3]>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub axis: LossAxis,
    pub best: f64,
    pub table: Vec<GridCell>,
}

/// One-dimensional search over a single loss weight. Each grid value trains
/// a fresh network with the otherwise unchanged `base` configuration.
/// Failed cells are kept in the table and skipped; ties go to the smaller
/// value.
pub fn grid_search(
    base: &TrainingConfig,
    net_config: &NetworkConfig,
    axis: LossAxis,
    grid: &[f64],
    train_set: &LabeledDataset,
    eval_set: &LabeledDataset,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(IvimError::InvalidArgument("empty grid".into()));
    }
    let labels = eval_set.labels()?;
    let table: Vec<GridCell> = grid
        .iter()
        .map(|&value| {
            let cfg = TrainingConfig {
                loss_weights: base.loss_weights.with(axis, value),
                ..base.clone()
            };
            let outcome = train(train_set, net_config, &cfg)
                .and_then(|(w, _)| predict_all(&w, eval_set))
                .and_then(|est| parameter_nrmse(&est, labels));
            match outcome {
                Ok(n) if n.iter().all(|v| v.is_finite()) => GridCell {
                    value,
                    score: Some(n.iter().sum()),
                    nrmse: Some(n),
                    error: None,
                },
                Ok(_) => GridCell {
                    value,
                    score: None,
                    nrmse: None,
                    error: Some("non-finite score".into()),
                },
                Err(e) => GridCell {
                    value,
                    score: None,
                    nrmse: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let best = table
        .iter()
        .filter_map(|c| c.score.map(|s| (c.value, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(v, _)| v)
        .ok_or_else(|| IvimError::NumericFailure("every grid cell failed".into()))?;
    Ok(GridSearchResult { axis, best, table })
}
