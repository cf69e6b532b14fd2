use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::model::{normalize_curve, IvimParams};
use crate::nn::loss::{sample_loss, LossWeights, TrainingMode};
use crate::nn::network::{init_network, NetworkConfig, NetworkWeights, Workspace};
use crate::rng::{derive_seed, hash_f64s, rng_from_seed};
use crate::simulate::LabeledDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl TrainingConfig {
    pub fn new(mode: TrainingMode, seed: u64) -> Self {
        TrainingConfig {
            mode,
            learning_rate: 1e-4,
            batch_size: 128,
            validation_fraction: 0.10,
            patience_epochs: 10,
            max_epochs: 1000,
            seed,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(IvimError::InvalidArgument(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(IvimError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(IvimError::InvalidArgument("learning_rate must be >= 0".into()));
        }
        if self.max_epochs == 0 {
            return Err(IvimError::InvalidArgument("max_epochs must be >= 1".into()));
        }
        self.loss_weights.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss.get(self.best_epoch).copied().unwrap_or(f64::NAN)
    }

    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }
}

/// Normalized inputs, labels and b-values laid out for the inner loop.
pub(crate) struct PreparedData {
    pub inputs: Vec<f64>,
    pub width: usize,
    pub labels: Option<Vec<IvimParams>>,
    pub b_values: Vec<f64>,
}

impl PreparedData {
    pub(crate) fn from_dataset(dataset: &LabeledDataset) -> Result<Self> {
        let width = dataset.schedule.len();
        let mut inputs = Vec::with_capacity(width * dataset.len());
        for c in &dataset.curves {
            inputs.extend_from_slice(normalize_curve(c)?.samples());
        }
        Ok(PreparedData {
            inputs,
            width,
            labels: dataset.labels.clone(),
            b_values: dataset.schedule.values().to_vec(),
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.inputs.len() / self.width
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    fn label(&self, i: usize) -> Option<&IvimParams> {
        self.labels.as_ref().map(|l| &l[i])
    }
}

/// Mean loss over `rows` and, when `grad` is given, its gradient with
/// respect to every weight (accumulated in row order).
pub(crate) fn batch_loss(
    weights: &NetworkWeights,
    data: &PreparedData,
    rows: &[usize],
    mode: TrainingMode,
    loss_weights: &LossWeights,
    ws: &mut Workspace,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let n_out = weights.config().n_outputs();
    let mut d_out = [0.0; 4];
    let mut total = 0.0;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let inv_n = 1.0 / rows.len() as f64;
    for &i in rows {
        ws.forward(weights, data.row(i));
        let loss = sample_loss(
            mode,
            loss_weights,
            &ws.outputs,
            data.label(i),
            &data.b_values,
            data.row(i),
            &mut d_out[..n_out],
        );
        total += loss;
        if let Some(g) = grad.as_deref_mut() {
            for d in d_out[..n_out].iter_mut() {
                *d *= inv_n;
            }
            ws.backward(weights, &d_out[..n_out], g);
        }
    }
    total * inv_n
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Orders rows by a seeded hash of their content, so the train/validation
/// assignment and batch order follow the rows rather than their positions.
fn canonical_order(data: &PreparedData, seed: u64) -> Vec<usize> {
    let key = |i: usize| {
        let mut h = hash_f64s(seed, data.row(i));
        if let Some(l) = data.label(i) {
            h = hash_f64s(h, &l.to_array());
        }
        h
    };
    let mut keyed: Vec<(u64, usize)> = (0..data.len()).map(|i| (key(i), i)).collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            let (ra, rb) = (data.row(a.1), data.row(b.1));
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Mini-batch Adam on the mode's objective with a seeded 90/10 split and
/// early stopping on the validation loss. Returns the weights of the best
/// validation epoch.
pub fn train(
    dataset: &LabeledDataset,
    net_config: &NetworkConfig,
    config: &TrainingConfig,
) -> Result<(NetworkWeights, TrainingHistory)> {
    config.validate()?;
    net_config.validate()?;
    if dataset.is_empty() {
        return Err(IvimError::InvalidArgument("empty training dataset".into()));
    }
    if dataset.len() < 2 {
        return Err(IvimError::InvalidArgument(
            "need at least two curves to split train and validation".into(),
        ));
    }
    if net_config.input_size != dataset.schedule.len() {
        return Err(IvimError::Shape(format!(
            "network input size {} does not match schedule length {}",
            net_config.input_size,
            dataset.schedule.len()
        )));
    }
    let mut data = PreparedData::from_dataset(dataset)?;
    if config.mode.needs_labels() {
        dataset.labels()?;
    } else {
        data.labels = None;
    }

    let order = canonical_order(&data, derive_seed(config.seed, &[0]));
    let n_val = ((data.len() as f64 * config.validation_fraction).round() as usize).clamp(1, data.len() - 1);
    let (val_rows, train_rows) = order.split_at(n_val);
    let mut train_rows = train_rows.to_vec();

    let mut weights = init_network(net_config, derive_seed(config.seed, &[1]))?;
    let mut best = weights.clone();
    let mut ws = Workspace::new(net_config);
    let mut grad = vec![0.0; weights.params().len()];
    let mut adam = Adam::new(grad.len(), config.learning_rate);
    let mut history = TrainingHistory::default();
    let mut best_val = f64::INFINITY;

    for epoch in 0..config.max_epochs {
        let mut rng = rng_from_seed(derive_seed(config.seed, &[2, epoch as u64]));
        train_rows.shuffle(&mut rng);
        let mut train_total = 0.0;
        for batch in train_rows.chunks(config.batch_size) {
            let l = batch_loss(&weights, &data, batch, config.mode, &config.loss_weights, &mut ws, Some(&mut grad));
            train_total += l * batch.len() as f64;
            adam.step(weights.params_mut(), &grad);
        }
        let train_loss = train_total / train_rows.len() as f64;
        let val_loss = batch_loss(&weights, &data, val_rows, config.mode, &config.loss_weights, &mut ws, None);
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);

        if !train_loss.is_finite() || !val_loss.is_finite() || weights.params().iter().any(|p| !p.is_finite()) {
            return Err(IvimError::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        if val_loss < best_val {
            best_val = val_loss;
            history.best_epoch = epoch;
            best.params_mut().copy_from_slice(weights.params());
        } else if epoch - history.best_epoch >= config.patience_epochs {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best, history))
}

/// Mean loss of `mode` over every curve of `dataset` (curves are normalized
/// first), with its gradient with respect to all network weights.
pub fn loss_and_gradient(
    weights: &NetworkWeights,
    dataset: &LabeledDataset,
    mode: TrainingMode,
    loss_weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let data = prepared_for(weights, dataset, mode)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut ws = Workspace::new(weights.config());
    let mut grad = vec![0.0; weights.params().len()];
    let loss = batch_loss(weights, &data, &rows, mode, loss_weights, &mut ws, Some(&mut grad));
    Ok((loss, grad))
}

fn prepared_for(weights: &NetworkWeights, dataset: &LabeledDataset, mode: TrainingMode) -> Result<PreparedData> {
    if dataset.is_empty() {
        return Err(IvimError::InvalidArgument("empty batch".into()));
    }
    if weights.config().input_size != dataset.schedule.len() {
        return Err(IvimError::Shape("batch width does not match network input".into()));
    }
    if mode.needs_labels() {
        dataset.labels()?;
    }
    PreparedData::from_dataset(dataset)
}

/// Largest relative discrepancy between the analytic gradient and a
/// fourth-order central difference (step `2e-4`) over all weights. Entries
/// where both gradients are below `1e-10` in magnitude are compared
/// absolutely.
pub fn gradient_check(
    weights: &NetworkWeights,
    batch: &LabeledDataset,
    mode: TrainingMode,
    loss_weights: &LossWeights,
) -> Result<f64> {
    const STEP: f64 = 2e-4;
    const FLOOR: f64 = 1e-10;
    let data = prepared_for(weights, batch, mode)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut ws = Workspace::new(weights.config());
    let mut analytic = vec![0.0; weights.params().len()];
    batch_loss(weights, &data, &rows, mode, loss_weights, &mut ws, Some(&mut analytic));

    let mut probe = weights.clone();
    let mut worst: f64 = 0.0;
    for (j, &a) in analytic.iter().enumerate() {
        let original = probe.params()[j];
        let mut at = |dx: f64| {
            probe.params_mut()[j] = original + dx;
            let v = batch_loss(&probe, &data, &rows, mode, loss_weights, &mut ws, None);
            probe.params_mut()[j] = original;
            v
        };
        let numeric = (8.0 * (at(STEP) - at(-STEP)) - (at(2.0 * STEP) - at(-2.0 * STEP))) / (12.0 * STEP);
        let scale = a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max((a - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{Activation, OutputTransform};
    use crate::rng::IvimRng;
    use crate::simulate::{generate_dataset, protocol_schedule, SimDatasetConfig};
    use rand::{Rng, SeedableRng};

    fn dataset(count: usize, snr: f64, seed: u64, k: usize) -> LabeledDataset {
        generate_dataset(&SimDatasetConfig::new(count, protocol_schedule(k).unwrap(), snr, seed)).unwrap()
    }

    fn quick(mode: TrainingMode) -> TrainingConfig {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            ..TrainingConfig::new(mode, 3)
        }
    }

    #[test]
    fn gradient_check_all_modes() {
        let mut rng = IvimRng::seed_from_u64(8);
        for draw in 0..5 {
            let batch = dataset(6, 10.0, draw, 1 + draw as usize % 6);
            let cfg = NetworkConfig {
                predict_s0: draw % 2 == 1,
                ..NetworkConfig::for_input(batch.schedule.len())
            };
            let w = init_network(&cfg, rng.random()).unwrap();
            for mode in TrainingMode::ALL {
                let err = gradient_check(&w, &batch, mode, &LossWeights::default()).unwrap();
                assert!(err < 1e-4, "draw {draw} {mode}: {err}");
            }
        }
    }

    #[test]
    fn gradient_check_linear_network() {
        let batch = dataset(4, f64::INFINITY, 1, 2);
        let cfg = NetworkConfig {
            activation: Activation::Identity,
            output_transform: OutputTransform::Identity,
            hidden_layers: 1,
            ..NetworkConfig::for_input(batch.schedule.len())
        };
        let w = init_network(&cfg, 2).unwrap();
        let err = gradient_check(&w, &batch, TrainingMode::Supervised, &LossWeights::unit()).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_gradient_at_perfect_fit() {
        let batch = dataset(1, f64::INFINITY, 4, 1);
        let label = batch.labels().unwrap()[0];
        let cfg = NetworkConfig::for_input(batch.schedule.len());
        let mut w = NetworkWeights::zeros(cfg.clone()).unwrap();
        let r = cfg.output_ranges;
        let logit = |v: f64, (lo, hi): (f64, f64)| {
            let u = (v - lo) / (hi - lo);
            (u / (1.0 - u)).ln()
        };
        let n = w.params().len();
        w.params_mut()[n - 3] = logit(label.d, r.d);
        w.params_mut()[n - 2] = logit(label.f, r.f);
        w.params_mut()[n - 1] = logit(label.d_star, r.d_star);
        for mode in TrainingMode::ALL {
            let (_, grad) = loss_and_gradient(&w, &batch, mode, &LossWeights::unit()).unwrap();
            assert!(grad.iter().all(|g| g.abs() < 1e-10), "{mode}: {grad:?}");
            let data = PreparedData::from_dataset(&batch).unwrap();
            let mut ws = Workspace::new(&cfg);
            let mut probe = w.clone();
            for j in 0..n {
                let orig = probe.params()[j];
                probe.params_mut()[j] = orig + 1e-5;
                let up = batch_loss(&probe, &data, &[0], mode, &LossWeights::unit(), &mut ws, None);
                probe.params_mut()[j] = orig - 1e-5;
                let dn = batch_loss(&probe, &data, &[0], mode, &LossWeights::unit(), &mut ws, None);
                probe.params_mut()[j] = orig;
                assert!(((up - dn) / 2e-5).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn supervised_training_reduces_validation_loss() {
        let ds = dataset(200, f64::INFINITY, 5, 1);
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let (_, h) = train(&ds, &cfg, &quick(TrainingMode::Supervised)).unwrap();
        assert!(h.best_val_loss() < h.val_loss[0], "{:?}", h.val_loss);
        assert!(*h.val_loss.last().unwrap() < h.val_loss[0]);
    }

    #[test]
    fn plateau_stops_after_patience() {
        let ds = dataset(100, 10.0, 6, 1);
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let tc = TrainingConfig {
            learning_rate: 0.0,
            ..quick(TrainingMode::SuperDc)
        };
        let (w, h) = train(&ds, &cfg, &tc).unwrap();
        assert!(h.stopped_early);
        assert_eq!(h.best_epoch, 0);
        assert_eq!(h.epochs(), h.best_epoch + tc.patience_epochs + 1);
        assert_eq!(w, init_network(&cfg, derive_seed(tc.seed, &[1])).unwrap());
    }

    #[test]
    fn returns_best_validation_weights() {
        let ds = dataset(300, 10.0, 7, 2);
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let tc = TrainingConfig { learning_rate: 3e-2, max_epochs: 40, patience_epochs: 3, ..quick(TrainingMode::IvimNet) };
        let (w, h) = train(&ds, &cfg, &tc).unwrap();
        let min = h.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val_loss(), min);

        let data = PreparedData { labels: None, ..PreparedData::from_dataset(&ds).unwrap() };
        let order = canonical_order(&data, derive_seed(tc.seed, &[0]));
        let n_val = (data.len() as f64 * tc.validation_fraction).round() as usize;
        let mut ws = Workspace::new(&cfg);
        let val = batch_loss(&w, &data, &order[..n_val], tc.mode, &tc.loss_weights, &mut ws, None);
        assert_eq!(val, min);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = dataset(150, 10.0, 8, 3);
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let tc = TrainingConfig { max_epochs: 5, ..quick(TrainingMode::SuperDc) };
        let a = train(&ds, &cfg, &tc).unwrap();
        let b = train(&ds, &cfg, &tc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn row_order_does_not_matter() {
        let ds = dataset(150, 10.0, 9, 3);
        let mut rows: Vec<usize> = (0..ds.len()).collect();
        rows.shuffle(&mut IvimRng::seed_from_u64(1));
        let labels = ds.labels().unwrap();
        let shuffled = LabeledDataset::new(
            ds.schedule.clone(),
            rows.iter().map(|&i| ds.curves[i].clone()).collect(),
            Some(rows.iter().map(|&i| labels[i]).collect()),
        )
        .unwrap();
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let tc = TrainingConfig { max_epochs: 5, ..quick(TrainingMode::Supervised) };
        let (wa, ha) = train(&ds, &cfg, &tc).unwrap();
        let (wb, hb) = train(&shuffled, &cfg, &tc).unwrap();
        assert_eq!(ha.best_val_loss(), hb.best_val_loss());
        assert_eq!(wa, wb);
    }

    #[test]
    fn label_requirements() {
        let mut ds = dataset(50, 10.0, 10, 1);
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let tc = TrainingConfig { max_epochs: 1, ..quick(TrainingMode::IvimNet) };
        assert!(train(&ds, &cfg, &tc).is_ok());
        ds.labels = None;
        assert!(train(&ds, &cfg, &tc).is_ok());
        let sup = TrainingConfig { mode: TrainingMode::Supervised, ..tc.clone() };
        assert!(matches!(train(&ds, &cfg, &sup), Err(IvimError::MissingLabels(_))));
        let sdc = TrainingConfig { mode: TrainingMode::SuperDc, ..tc };
        assert!(matches!(train(&ds, &cfg, &sdc), Err(IvimError::MissingLabels(_))));
    }

    #[test]
    fn invalid_inputs() {
        let ds = dataset(50, 10.0, 11, 1);
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let empty = LabeledDataset::new(ds.schedule.clone(), vec![], Some(vec![])).unwrap();
        assert!(matches!(train(&empty, &cfg, &quick(TrainingMode::IvimNet)), Err(IvimError::InvalidArgument(_))));
        let wrong = NetworkConfig::for_input(ds.schedule.len() + 1);
        assert!(matches!(train(&ds, &wrong, &quick(TrainingMode::IvimNet)), Err(IvimError::Shape(_))));
        let bad = TrainingConfig { validation_fraction: 1.0, ..quick(TrainingMode::IvimNet) };
        assert!(train(&ds, &cfg, &bad).is_err());
    }

    #[test]
    fn divergence_keeps_history() {
        let ds = dataset(50, 10.0, 12, 1);
        let cfg = NetworkConfig::for_input(ds.schedule.len());
        let mut tc = quick(TrainingMode::Supervised);
        tc.loss_weights.alpha_d = f64::MAX;
        match train(&ds, &cfg, &tc) {
            Err(IvimError::Diverged { epoch, history }) => {
                assert_eq!(epoch, 0);
                assert_eq!(history.epochs(), 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
