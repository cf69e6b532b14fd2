//! Python bindings. Curves and schedules are plain lists of floats;
//! parameter sets are dicts with keys `D`, `f`, `Dstar`.

use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ivim_core::eval;
use ivim_core::fit::{self, FitBounds, FitResult, NllsOptions, DEFAULT_B_THRESHOLD};
use ivim_core::model::{self, normalize_curve, BValueSchedule, IvimParams, SignalCurve};
use ivim_core::nn::{self, NetworkConfig, NetworkWeights, TrainingConfig, TrainingMode};
use ivim_core::simulate::{self as sim, LabeledDataset, SimDatasetConfig};
use ivim_core::IvimError;

create_exception!(ivim, IvimException, PyException, "Error raised by the IVIM toolkit.");

fn err(e: IvimError) -> PyErr {
    match e {
        IvimError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => IvimException::new_err(other.to_string()),
    }
}

fn schedule(b_values: Vec<f64>) -> PyResult<Arc<BValueSchedule>> {
    BValueSchedule::new(b_values).map(Arc::new).map_err(err)
}

fn curve(b_values: Vec<f64>, samples: Vec<f64>) -> PyResult<SignalCurve> {
    SignalCurve::new(samples, schedule(b_values)?).map_err(err)
}

fn params_dict<'py>(py: Python<'py>, p: &IvimParams) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("D", p.d)?;
    d.set_item("f", p.f)?;
    d.set_item("Dstar", p.d_star)?;
    Ok(d)
}

fn fit_dict<'py>(py: Python<'py>, r: &FitResult) -> PyResult<Bound<'py, PyDict>> {
    let d = params_dict(py, &r.params)?;
    d.set_item("s0", r.s0_hat)?;
    d.set_item("residual", r.residual_norm)?;
    d.set_item("converged", r.converged)?;
    d.set_item("iterations", r.iterations)?;
    Ok(d)
}

/// Signal at one b-value.
#[pyfunction]
#[pyo3(signature = (d, f, d_star, b, s0 = 1.0))]
fn ivim_signal(d: f64, f: f64, d_star: f64, b: f64, s0: f64) -> PyResult<f64> {
    model::ivim_signal(&IvimParams::new(d, f, d_star).map_err(err)?, s0, b).map_err(err)
}

/// Noiseless curve over `b_values`.
#[pyfunction]
#[pyo3(signature = (d, f, d_star, b_values, s0 = 1.0))]
fn ivim_curve(d: f64, f: f64, d_star: f64, b_values: Vec<f64>, s0: f64) -> PyResult<Vec<f64>> {
    let p = IvimParams::new(d, f, d_star).map_err(err)?;
    Ok(model::ivim_curve(&p, s0, &schedule(b_values)?).map_err(err)?.into_samples())
}

/// Stride-`k` subsampling of `low`, keeping b=0 and b=200, followed by `high`.
#[pyfunction]
fn subsample_schedule(low: Vec<f64>, high: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    let low = BValueSchedule::new(low).map_err(err)?;
    let high = BValueSchedule::new(high).map_err(err)?;
    Ok(sim::subsample_schedule(&low, &high, k).map_err(err)?.values().to_vec())
}

/// The standard acquisition protocol subsampled with stride `k`.
#[pyfunction]
fn protocol_schedule(k: usize) -> PyResult<Vec<f64>> {
    Ok(sim::protocol_schedule(k).map_err(err)?.values().to_vec())
}

/// Synthetic labelled curves. Returns a dict with `b_values`, `curves` and
/// `labels` (one parameter dict per curve).
#[pyfunction]
#[pyo3(signature = (count, snr = 10.0, factor = 1, seed = 0, b_values = None))]
fn simulate<'py>(
    py: Python<'py>,
    count: usize,
    snr: f64,
    factor: usize,
    seed: u64,
    b_values: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let sched = match b_values {
        Some(b) => BValueSchedule::new(b).map_err(err)?,
        None => sim::protocol_schedule(factor).map_err(err)?,
    };
    let cfg = SimDatasetConfig::new(count, sched, snr, seed);
    let ds = py.detach(|| sim::generate_dataset(&cfg)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("b_values", ds.schedule.values().to_vec())?;
    out.set_item(
        "curves",
        ds.curves.iter().map(|c| c.samples().to_vec()).collect::<Vec<_>>(),
    )?;
    let labels = ds
        .labels()
        .map_err(err)?
        .iter()
        .map(|p| params_dict(py, p))
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("labels", labels)?;
    Ok(out)
}

/// Segmented least-squares fit.
#[pyfunction]
#[pyo3(signature = (b_values, samples, b_threshold = DEFAULT_B_THRESHOLD))]
fn fit_segmented<'py>(
    py: Python<'py>,
    b_values: Vec<f64>,
    samples: Vec<f64>,
    b_threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let c = curve(b_values, samples)?;
    let r = fit::fit_segmented(&c, b_threshold, &FitBounds::default()).map_err(err)?;
    fit_dict(py, &r)
}

/// Bounded nonlinear least squares. Without `init` the segmented fit
/// provides the starting point.
#[pyfunction]
#[pyo3(signature = (b_values, samples, init = None, s0_init = None))]
fn fit_nlls<'py>(
    py: Python<'py>,
    b_values: Vec<f64>,
    samples: Vec<f64>,
    init: Option<(f64, f64, f64)>,
    s0_init: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let c = curve(b_values, samples)?;
    let bounds = FitBounds::default();
    let r = match init {
        None => fit::fit_lsq(&c, &bounds),
        Some((d, f, ds)) => {
            let p = IvimParams::new(d, f, ds).map_err(err)?;
            let s0 = s0_init.unwrap_or_else(|| c.samples()[0].max(f64::MIN_POSITIVE));
            fit::fit_nlls(&c, p, s0, &bounds, &NllsOptions::default())
        }
    }
    .map_err(err)?;
    fit_dict(py, &r)
}

#[pyfunction]
fn nrmse(estimates: Vec<f64>, references: Vec<f64>) -> PyResult<f64> {
    eval::nrmse(&estimates, &references).map_err(err)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    eval::pearson(&x, &y).map_err(err)
}

/// Trained network estimator.
#[pyclass(module = "ivim", frozen)]
struct Network {
    weights: NetworkWeights,
}

#[pymethods]
impl Network {
    /// Trains a network on `curves` sampled at `b_values`. `labels` is a
    /// list of `(D, f, Dstar)` tuples, required by `supervised` and
    /// `super-dc`. Returns `(network, history)`.
    #[staticmethod]
    #[pyo3(signature = (
        b_values, curves, labels = None, mode = "super-dc", seed = 0,
        learning_rate = 1e-4, batch_size = 128, max_epochs = 1000, patience_epochs = 10,
        alpha_dc = 1.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        b_values: Vec<f64>,
        curves: Vec<Vec<f64>>,
        labels: Option<Vec<(f64, f64, f64)>>,
        mode: &str,
        seed: u64,
        learning_rate: f64,
        batch_size: usize,
        max_epochs: usize,
        patience_epochs: usize,
        alpha_dc: f64,
    ) -> PyResult<(Network, Bound<'py, PyDict>)> {
        let sched = schedule(b_values)?;
        let curves = curves
            .into_iter()
            .map(|s| SignalCurve::new(s, Arc::clone(&sched)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let labels = labels
            .map(|l| {
                l.into_iter()
                    .map(|(d, f, ds)| IvimParams::new(d, f, ds))
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()
            .map_err(err)?;
        let dataset = LabeledDataset::new(Arc::clone(&sched), curves, labels).map_err(err)?;
        let mode: TrainingMode = mode.parse().map_err(err)?;
        let mut cfg = TrainingConfig::new(mode, seed);
        cfg.learning_rate = learning_rate;
        cfg.batch_size = batch_size;
        cfg.max_epochs = max_epochs;
        cfg.patience_epochs = patience_epochs;
        cfg.loss_weights.alpha_dc = alpha_dc;
        let net = NetworkConfig::for_input(sched.len());
        let (weights, history) = py.detach(|| nn::train(&dataset, &net, &cfg)).map_err(err)?;
        let h = PyDict::new(py);
        h.set_item("train_loss", history.train_loss.clone())?;
        h.set_item("val_loss", history.val_loss.clone())?;
        h.set_item("best_epoch", history.best_epoch)?;
        h.set_item("stopped_early", history.stopped_early)?;
        Ok((Network { weights }, h))
    }

    /// Reads a weight file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Network> {
        Ok(Network { weights: nn::load_weights(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        nn::save_weights(&self.weights, path).map_err(err)
    }

    /// Number of b-values the network expects.
    #[getter]
    fn input_size(&self) -> usize {
        self.weights.config().input_size
    }

    /// Estimates `(D, f, Dstar)` for one curve; it is normalized by its
    /// b=0 sample first.
    fn predict<'py>(&self, py: Python<'py>, b_values: Vec<f64>, samples: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let c = normalize_curve(&curve(b_values, samples)?).map_err(err)?;
        let p = nn::predict(&self.weights, &c).map_err(err)?;
        params_dict(py, &p.params)
    }

    /// Estimates for many curves sharing one schedule.
    fn predict_many<'py>(
        &self,
        py: Python<'py>,
        b_values: Vec<f64>,
        curves: Vec<Vec<f64>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let sched = schedule(b_values)?;
        let mut out = Vec::with_capacity(curves.len());
        for s in curves {
            let c = normalize_curve(&SignalCurve::new(s, Arc::clone(&sched)).map_err(err)?).map_err(err)?;
            let p = nn::predict(&self.weights, &c).map_err(err)?;
            out.push(params_dict(py, &p.params)?);
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let c = self.weights.config();
        format!(
            "Network(input_size={}, hidden_layers={}, hidden_width={})",
            c.input_size, c.hidden_layers, c.hidden_width
        )
    }
}

#[pymodule]
fn ivim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IvimException", m.py().get_type::<IvimException>())?;
    m.add_function(wrap_pyfunction!(ivim_signal, m)?)?;
    m.add_function(wrap_pyfunction!(ivim_curve, m)?)?;
    m.add_function(wrap_pyfunction!(subsample_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(protocol_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_segmented, m)?)?;
    m.add_function(wrap_pyfunction!(fit_nlls, m)?)?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_class::<Network>()?;
    Ok(())
}
