//! NRMSE of each estimator as a function of the b-value sampling factor.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::eval::metrics::nrmse;
use crate::fit::{fit_lsq, fit_segmented, FitBounds, DEFAULT_B_THRESHOLD};
use crate::model::{normalize_curve, BValueSchedule, IvimParams};
use crate::nn::{predict, train, NetworkConfig, NetworkWeights, TrainingConfig, TrainingMode};
use crate::rng::derive_seed;
use crate::simulate::{
    generate_dataset, subsample_schedule, LabeledDataset, ParamRanges, SimDatasetConfig, HIGH_B_VALUES,
    LOW_B_VALUES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "super-dc")]
    SuperDc,
    #[serde(rename = "ivimnet")]
    IvimNet,
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "lsq")]
    Lsq,
    #[serde(rename = "segmented")]
    Segmented,
}

impl Method {
    pub fn training_mode(self) -> Option<TrainingMode> {
        match self {
            Method::SuperDc => Some(TrainingMode::SuperDc),
            Method::IvimNet => Some(TrainingMode::IvimNet),
            Method::Supervised => Some(TrainingMode::Supervised),
            Method::Lsq | Method::Segmented => None,
        }
    }
}

impl FromStr for Method {
    type Err = IvimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "super-dc" => Ok(Method::SuperDc),
            "ivimnet" => Ok(Method::IvimNet),
            "supervised" => Ok(Method::Supervised),
            "lsq" => Ok(Method::Lsq),
            "segmented" | "seg" => Ok(Method::Segmented),
            other => Err(IvimError::Config(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SuperDc => "super-dc",
            Method::IvimNet => "ivimnet",
            Method::Supervised => "supervised",
            Method::Lsq => "lsq",
            Method::Segmented => "segmented",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Parameter {
    #[serde(rename = "D")]
    D,
    #[serde(rename = "f")]
    F,
    #[serde(rename = "Dstar")]
    DStar,
}

impl Parameter {
    pub const ALL: [Parameter; 3] = [Parameter::D, Parameter::F, Parameter::DStar];

    pub fn of(self, p: &IvimParams) -> f64 {
        match self {
            Parameter::D => p.d,
            Parameter::F => p.f,
            Parameter::DStar => p.d_star,
        }
    }
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameter::D => "D",
            Parameter::F => "f",
            Parameter::DStar => "Dstar",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub factors: Vec<usize>,
    pub methods: Vec<Method>,
    pub train_count: usize,
    pub test_count: usize,
    /// Noise level of both the training and test data.
    #[serde(with = "crate::simulate::snr_serde")]
    pub snr: f64,
    pub seed: u64,
    pub ranges: ParamRanges,
    pub low_b_values: Vec<f64>,
    pub high_b_values: Vec<f64>,
    /// Mode and seed are set per method and factor; the rest is shared.
    pub training: TrainingConfig,
    /// `None` uses [`NetworkConfig::for_input`] for each schedule.
    pub hidden_layers: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            factors: (1..=6).collect(),
            methods: vec![Method::SuperDc, Method::IvimNet],
            train_count: 100_000,
            test_count: 1000,
            snr: 10.0,
            seed: 0,
            ranges: ParamRanges::default(),
            low_b_values: LOW_B_VALUES.to_vec(),
            high_b_values: HIGH_B_VALUES.to_vec(),
            training: TrainingConfig::new(TrainingMode::SuperDc, 0),
            hidden_layers: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() || self.factors.iter().any(|k| !(1..=6).contains(k)) {
            return Err(IvimError::Config(format!(
                "sampling factors must be a non-empty subset of 1..=6, got {:?}",
                self.factors
            )));
        }
        if self.methods.is_empty() {
            return Err(IvimError::Config("no methods selected".into()));
        }
        if self.test_count == 0 {
            return Err(IvimError::Config("test_count must be >= 1".into()));
        }
        if self.methods.iter().any(|m| m.training_mode().is_some()) && self.train_count < 2 {
            return Err(IvimError::Config("train_count must be >= 2 for neural methods".into()));
        }
        self.ranges.validate()?;
        self.training.validate()
    }

    pub fn schedule(&self, factor: usize) -> Result<BValueSchedule> {
        subsample_schedule(
            &BValueSchedule::new(self.low_b_values.clone())?,
            &BValueSchedule::new(self.high_b_values.clone())?,
            factor,
        )
    }

    fn sim_config(&self, count: usize, schedule: BValueSchedule, seed: u64) -> SimDatasetConfig {
        SimDatasetConfig {
            count,
            ranges: self.ranges,
            schedule,
            snr: self.snr,
            seed,
            s0: 1.0,
        }
    }

    pub fn train_seed(&self, factor: usize) -> u64 {
        derive_seed(self.seed, &[factor as u64, 0])
    }

    pub fn test_seed(&self, factor: usize) -> u64 {
        derive_seed(self.seed, &[factor as u64, 1])
    }

    /// Network initialization / shuffling seed, shared by all neural methods
    /// at a given factor.
    pub fn network_seed(&self, factor: usize) -> u64 {
        derive_seed(self.seed, &[factor as u64, 2])
    }

    pub fn network_config(&self, input_size: usize) -> NetworkConfig {
        let mut cfg = NetworkConfig::for_input(input_size);
        if let Some(h) = self.hidden_layers {
            cfg.hidden_layers = h;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub factor: usize,
    pub parameter: Parameter,
    pub nrmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepProvenance {
    pub config: SweepConfig,
    /// `(factor, schedule, train seed, test seed, network seed)`
    pub factors: Vec<(usize, Vec<f64>, u64, u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cells: Vec<SweepCell>,
    pub provenance: SweepProvenance,
}

impl ExperimentResult {
    pub fn get(&self, method: Method, factor: usize, parameter: Parameter) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.factor == factor && c.parameter == parameter)
            .and_then(|c| c.nrmse)
    }
}

/// Estimates for every test curve with one method.
pub fn estimate_with(
    method: Method,
    train_set: Option<&LabeledDataset>,
    test_set: &LabeledDataset,
    net_config: &NetworkConfig,
    training: &TrainingConfig,
) -> Result<Vec<IvimParams>> {
    let bounds = FitBounds::default();
    match method.training_mode() {
        Some(mode) => {
            let train_set = train_set.ok_or_else(|| IvimError::Config("no training data".into()))?;
            let cfg = TrainingConfig { mode, ..training.clone() };
            let (weights, _) = train(train_set, net_config, &cfg)?;
            predict_all(&weights, test_set)
        }
        None => test_set
            .curves
            .par_iter()
            .map(|c| {
                let r = match method {
                    Method::Lsq => fit_lsq(c, &bounds)?,
                    _ => fit_segmented(c, DEFAULT_B_THRESHOLD, &bounds)?,
                };
                Ok(r.params)
            })
            .collect(),
    }
}

pub fn predict_all(weights: &NetworkWeights, dataset: &LabeledDataset) -> Result<Vec<IvimParams>> {
    dataset
        .curves
        .par_iter()
        .map(|c| Ok(predict(weights, &normalize_curve(c)?)?.params))
        .collect()
}

/// NRMSE of `estimates` against `labels` for `D`, `f`, `D*`.
pub fn parameter_nrmse(estimates: &[IvimParams], labels: &[IvimParams]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (k, p) in Parameter::ALL.iter().enumerate() {
        let e: Vec<f64> = estimates.iter().map(|x| p.of(x)).collect();
        let r: Vec<f64> = labels.iter().map(|x| p.of(x)).collect();
        out[k] = nrmse(&e, &r)?;
    }
    Ok(out)
}

/// Runs every `(factor, method)` cell. Failed cells are kept with their
/// error message and no NRMSE.
pub fn sampling_factor_sweep(config: &SweepConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let needs_training = config.methods.iter().any(|m| m.training_mode().is_some());
    let mut cells = Vec::new();
    let mut factors = Vec::new();
    for &k in &config.factors {
        let schedule = config.schedule(k)?;
        let test = generate_dataset(&config.sim_config(config.test_count, schedule.clone(), config.test_seed(k)))?;
        let train_set = if needs_training {
            Some(generate_dataset(&config.sim_config(
                config.train_count,
                schedule.clone(),
                config.train_seed(k),
            ))?)
        } else {
            None
        };
        let labels = test.labels()?;
        let net_config = config.network_config(schedule.len());
        let training = TrainingConfig {
            seed: config.network_seed(k),
            ..config.training.clone()
        };
        let outcomes: Vec<(Method, Result<[f64; 3]>)> = config
            .methods
            .par_iter()
            .map(|&m| {
                let r = estimate_with(m, train_set.as_ref(), &test, &net_config, &training)
                    .and_then(|est| parameter_nrmse(&est, labels));
                (m, r)
            })
            .collect();
        for (m, r) in outcomes {
            for (i, p) in Parameter::ALL.iter().enumerate() {
                let (nrmse, error) = match &r {
                    Ok(v) => (Some(v[i]), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                cells.push(SweepCell {
                    method: m,
                    factor: k,
                    parameter: *p,
                    nrmse,
                    error,
                });
            }
        }
        factors.push((k, schedule.values().to_vec(), config.train_seed(k), config.test_seed(k), config.network_seed(k)));
    }
    Ok(ExperimentResult {
        cells,
        provenance: SweepProvenance {
            config: config.clone(),
            factors,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lsq_only(factors: Vec<usize>) -> SweepConfig {
        SweepConfig {
            factors,
            methods: vec![Method::Lsq],
            test_count: 50,
            snr: f64::INFINITY,
            seed: 5,
            ..SweepConfig::default()
        }
    }

    #[test]
    fn noiseless_lsq_is_accurate() {
        let r = sampling_factor_sweep(&lsq_only(vec![1])).unwrap();
        assert_eq!(r.cells.len(), 3);
        for c in &r.cells {
            assert!(c.nrmse.unwrap() < 1e-3, "{c:?}");
        }
    }

    #[test]
    fn table_shape() {
        let mut cfg = lsq_only(vec![1, 6]);
        cfg.methods = vec![Method::Lsq, Method::Segmented];
        let r = sampling_factor_sweep(&cfg).unwrap();
        assert_eq!(r.cells.len(), 2 * 2 * 3);
        assert_eq!(r.provenance.factors.len(), 2);
    }

    #[test]
    fn invalid_factors_rejected() {
        assert!(sampling_factor_sweep(&lsq_only(vec![7])).is_err());
        assert!(sampling_factor_sweep(&lsq_only(vec![])).is_err());
    }

    #[test]
    fn failed_cells_are_recorded() {
        let mut cfg = lsq_only(vec![1]);
        cfg.methods = vec![Method::Supervised, Method::Lsq];
        cfg.train_count = 20;
        cfg.training.max_epochs = 2;
        cfg.training.loss_weights.alpha_d = f64::MAX;
        cfg.snr = 10.0;
        let r = sampling_factor_sweep(&cfg).unwrap();
        let failed: Vec<_> = r.cells.iter().filter(|c| c.method == Method::Supervised).collect();
        assert_eq!(failed.len(), 3);
        assert!(failed.iter().all(|c| c.nrmse.is_none() && c.error.is_some()));
        assert!(r.get(Method::Lsq, 1, Parameter::D).is_some());
    }
}
