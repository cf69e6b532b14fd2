//! Fully connected per-voxel estimator with range-bounded sigmoid outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::model::{IvimParams, SignalCurve};
use crate::rng::rng_from_seed;

/// Pre-sigmoid outputs are clamped to this magnitude so the mapped
/// parameters stay strictly inside their ranges in floating point.
const LOGIT_LIMIT: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Map from the last layer to parameter values. `Identity` exposes the raw
/// affine outputs and is only meant for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    #[default]
    Sigmoid,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRanges {
    #[serde(rename = "D")]
    pub d: (f64, f64),
    pub f: (f64, f64),
    #[serde(rename = "Dstar")]
    pub d_star: (f64, f64),
    pub s0: (f64, f64),
}

impl Default for OutputRanges {
    fn default() -> Self {
        OutputRanges {
            d: (1e-4, 5e-3),
            f: (0.0, 0.7),
            d_star: (1e-3, 0.3),
            s0: (0.5, 2.0),
        }
    }
}

impl OutputRanges {
    fn as_vec(&self, with_s0: bool) -> Vec<(f64, f64)> {
        let mut v = vec![self.d, self.f, self.d_star];
        if with_s0 {
            v.push(self.s0);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub output_ranges: OutputRanges,
    #[serde(default)]
    pub output_transform: OutputTransform,
    pub predict_s0: bool,
}

impl NetworkConfig {
    /// Default architecture for a schedule with `input_size` b-values:
    /// three ELU hidden layers as wide as the input.
    pub fn for_input(input_size: usize) -> Self {
        NetworkConfig {
            input_size,
            hidden_layers: 3,
            hidden_width: input_size,
            activation: Activation::Elu,
            output_ranges: OutputRanges::default(),
            output_transform: OutputTransform::Sigmoid,
            predict_s0: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_width == 0 {
            return Err(IvimError::InvalidArgument("layer sizes must be >= 1".into()));
        }
        if self.hidden_layers < 1 {
            return Err(IvimError::InvalidArgument("hidden_layers must be >= 1".into()));
        }
        for (lo, hi) in self.output_ranges.as_vec(true) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0) {
                return Err(IvimError::InvalidArgument(format!(
                    "invalid output range ({lo}, {hi})"
                )));
            }
        }
        if self.output_ranges.f.1 > 1.0 {
            return Err(IvimError::InvalidArgument("f output range must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_outputs(&self) -> usize {
        if self.predict_s0 {
            4
        } else {
            3
        }
    }

    /// `(inputs, outputs)` of each fully connected layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut n_in = self.input_size;
        for _ in 0..self.hidden_layers {
            shapes.push((n_in, self.hidden_width));
            n_in = self.hidden_width;
        }
        shapes.push((n_in, self.n_outputs()));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub(crate) fn ranges(&self) -> Vec<(f64, f64)> {
        self.output_ranges.as_vec(self.predict_s0)
    }
}

/// All learnable parameters, flattened. Layer `l` occupies a weight block
/// (`outputs x inputs`, row-major) followed by its bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    config: NetworkConfig,
    params: Vec<f64>,
}

impl NetworkWeights {
    pub fn from_parts(config: NetworkConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.parameter_count() {
            return Err(IvimError::Shape(format!(
                "config needs {} parameters, got {}",
                config.parameter_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(IvimError::InvalidArgument("non-finite network weight".into()));
        }
        Ok(NetworkWeights { config, params })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        let n = config.parameter_count();
        NetworkWeights::from_parts(config, vec![0.0; n])
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix of layer `l` as row-major `outputs x inputs`.
    pub fn layer_weights(&self, l: usize) -> (&[f64], (usize, usize)) {
        let shapes = self.config.layer_shapes();
        let offset: usize = shapes[..l].iter().map(|(i, o)| i * o + o).sum();
        let (i, o) = shapes[l];
        (&self.params[offset..offset + i * o], (o, i))
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<NetworkWeights> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = Vec::with_capacity(config.parameter_count());
    for (n_in, n_out) in config.layer_shapes() {
        let bound = 1.0 / (n_in as f64).sqrt();
        for _ in 0..(n_in * n_out + n_out) {
            params.push(rng.random_range(-bound..bound));
        }
    }
    NetworkWeights::from_parts(config.clone(), params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub params: IvimParams,
    pub s0: Option<f64>,
}

/// Forward pass on a normalized curve (first sample 1).
pub fn predict(weights: &NetworkWeights, curve: &SignalCurve) -> Result<Prediction> {
    predict_samples(weights, curve.samples())
}

pub fn predict_samples(weights: &NetworkWeights, samples: &[f64]) -> Result<Prediction> {
    if samples.len() != weights.config.input_size {
        return Err(IvimError::Shape(format!(
            "network expects {} samples, curve has {}",
            weights.config.input_size,
            samples.len()
        )));
    }
    let mut ws = Workspace::new(&weights.config);
    ws.forward(weights, samples);
    let o = &ws.outputs;
    Ok(Prediction {
        params: IvimParams::from_array([o[0], o[1], o[2]]),
        s0: weights.config.predict_s0.then(|| o[3]),
    })
}

/// Per-sample buffers for the forward and backward passes.
pub(crate) struct Workspace {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    activation: Activation,
    transform: OutputTransform,
    ranges: Vec<(f64, f64)>,
    /// pre-activations per layer
    pre: Vec<Vec<f64>>,
    /// inputs to each layer (activations of the previous one)
    acts: Vec<Vec<f64>>,
    pub(crate) outputs: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(config: &NetworkConfig) -> Self {
        let shapes = config.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let widest = shapes.iter().map(|(i, o)| (*i).max(*o)).max().unwrap_or(1);
        Workspace {
            pre: shapes.iter().map(|(_, o)| vec![0.0; *o]).collect(),
            acts: shapes.iter().map(|(i, _)| vec![0.0; *i]).collect(),
            outputs: vec![0.0; config.n_outputs()],
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
            activation: config.activation,
            transform: config.output_transform,
            ranges: config.ranges(),
            shapes,
            offsets,
        }
    }

    pub(crate) fn forward(&mut self, weights: &NetworkWeights, input: &[f64]) {
        let params = &weights.params;
        self.acts[0].copy_from_slice(input);
        let n_layers = self.shapes.len();
        for l in 0..n_layers {
            let (n_in, n_out) = self.shapes[l];
            let w = &params[self.offsets[l]..self.offsets[l] + n_in * n_out];
            let bias = &params[self.offsets[l] + n_in * n_out..self.offsets[l] + n_in * n_out + n_out];
            let (left, right) = self.acts.split_at_mut(l + 1);
            let a_in = &left[l];
            for r in 0..n_out {
                let row = &w[r * n_in..(r + 1) * n_in];
                let z = row.iter().zip(a_in.iter()).map(|(x, y)| x * y).sum::<f64>() + bias[r];
                self.pre[l][r] = z;
                if l + 1 < n_layers {
                    right[0][r] = self.activation.apply(z);
                }
            }
        }
        let last = &self.pre[n_layers - 1];
        for (k, &(lo, hi)) in self.ranges.iter().enumerate() {
            self.outputs[k] = match self.transform {
                OutputTransform::Sigmoid => lo + sigmoid(last[k].clamp(-LOGIT_LIMIT, LOGIT_LIMIT)) * (hi - lo),
                OutputTransform::Identity => last[k],
            };
        }
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/doutputs`, using the
    /// state of the last `forward` call.
    pub(crate) fn backward(&mut self, weights: &NetworkWeights, d_outputs: &[f64], grad: &mut [f64]) {
        let params = &weights.params;
        let n_layers = self.shapes.len();
        self.delta.clear();
        for (k, &(lo, hi)) in self.ranges.iter().enumerate() {
            let z = self.pre[n_layers - 1][k];
            let dp_dz = match self.transform {
                OutputTransform::Identity => 1.0,
                OutputTransform::Sigmoid if z.abs() > LOGIT_LIMIT => 0.0,
                OutputTransform::Sigmoid => {
                    let s = sigmoid(z);
                    s * (1.0 - s) * (hi - lo)
                }
            };
            self.delta.push(d_outputs[k] * dp_dz);
        }
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = self.shapes[l];
            let off = self.offsets[l];
            let a_in = &self.acts[l];
            for r in 0..n_out {
                let d = self.delta[r];
                if d != 0.0 {
                    let g_row = &mut grad[off + r * n_in..off + (r + 1) * n_in];
                    for (g, a) in g_row.iter_mut().zip(a_in.iter()) {
                        *g += d * a;
                    }
                }
                grad[off + n_in * n_out + r] += d;
            }
            if l == 0 {
                break;
            }
            let w = &params[off..off + n_in * n_out];
            self.delta_prev.clear();
            self.delta_prev.resize(n_in, 0.0);
            for r in 0..n_out {
                let d = self.delta[r];
                if d != 0.0 {
                    let row = &w[r * n_in..(r + 1) * n_in];
                    for (dp, wv) in self.delta_prev.iter_mut().zip(row.iter()) {
                        *dp += d * wv;
                    }
                }
            }
            let prev_pre = &self.pre[l - 1];
            for (dp, &z) in self.delta_prev.iter_mut().zip(prev_pre.iter()) {
                *dp *= self.activation.derivative(z);
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
