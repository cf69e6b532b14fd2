//! Training objectives.
//!
//! * supervised: weighted squared parameter error;
//! * ivimnet: squared error between the forward model of the prediction and
//!   the observed curve (no labels);
//! * super-dc: supervised term plus `alpha_dc` times the data-consistency
//!   term against the reference curve.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::model::{signal, signal_with_gradient, BValueSchedule, IvimParams, SignalCurve};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_d: f64,
    pub alpha_f: f64,
    pub alpha_d_star: f64,
    pub alpha_dc: f64,
}

impl Default for LossWeights {
    /// Supervised terms scaled by the inverse squared parameter scale.
    fn default() -> Self {
        LossWeights {
            alpha_d: 1.0 / (3e-3 * 3e-3),
            alpha_f: 1.0 / (0.5 * 0.5),
            alpha_d_star: 1.0 / (0.1 * 0.1),
            alpha_dc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn unit() -> Self {
        LossWeights {
            alpha_d: 1.0,
            alpha_f: 1.0,
            alpha_d_star: 1.0,
            alpha_dc: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_d, self.alpha_f, self.alpha_d_star, self.alpha_dc];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(IvimError::InvalidArgument(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, axis: LossAxis) -> f64 {
        match axis {
            LossAxis::AlphaD => self.alpha_d,
            LossAxis::AlphaF => self.alpha_f,
            LossAxis::AlphaDStar => self.alpha_d_star,
            LossAxis::AlphaDc => self.alpha_dc,
        }
    }

    pub fn with(mut self, axis: LossAxis, value: f64) -> Self {
        match axis {
            LossAxis::AlphaD => self.alpha_d = value,
            LossAxis::AlphaF => self.alpha_f = value,
            LossAxis::AlphaDStar => self.alpha_d_star = value,
            LossAxis::AlphaDc => self.alpha_dc = value,
        }
        self
    }
}

/// One of the four loss weights, used as a grid-search axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossAxis {
    #[serde(rename = "alpha_D")]
    AlphaD,
    #[serde(rename = "alpha_f")]
    AlphaF,
    #[serde(rename = "alpha_Dstar")]
    AlphaDStar,
    #[serde(rename = "alpha_dc")]
    AlphaDc,
}

impl FromStr for LossAxis {
    type Err = IvimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_D" | "alpha_d" => Ok(LossAxis::AlphaD),
            "alpha_f" => Ok(LossAxis::AlphaF),
            "alpha_Dstar" | "alpha_dstar" | "alpha_d_star" => Ok(LossAxis::AlphaDStar),
            "alpha_dc" => Ok(LossAxis::AlphaDc),
            other => Err(IvimError::Config(format!("unknown loss axis '{other}'"))),
        }
    }
}

impl fmt::Display for LossAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossAxis::AlphaD => "alpha_D",
            LossAxis::AlphaF => "alpha_f",
            LossAxis::AlphaDStar => "alpha_Dstar",
            LossAxis::AlphaDc => "alpha_dc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainingMode {
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "ivimnet")]
    IvimNet,
    #[serde(rename = "super-dc")]
    SuperDc,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [TrainingMode::Supervised, TrainingMode::IvimNet, TrainingMode::SuperDc];

    pub fn needs_labels(self) -> bool {
        !matches!(self, TrainingMode::IvimNet)
    }
}

impl FromStr for TrainingMode {
    type Err = IvimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TrainingMode::Supervised),
            "ivimnet" => Ok(TrainingMode::IvimNet),
            "super-dc" => Ok(TrainingMode::SuperDc),
            other => Err(IvimError::Config(format!("unknown training mode '{other}'"))),
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Supervised => "supervised",
            TrainingMode::IvimNet => "ivimnet",
            TrainingMode::SuperDc => "super-dc",
        })
    }
}

#[inline]
fn supervised_term(pred: &[f64], reference: &IvimParams, w: &LossWeights) -> f64 {
    w.alpha_d * (pred[0] - reference.d).powi(2)
        + w.alpha_f * (pred[1] - reference.f).powi(2)
        + w.alpha_d_star * (pred[2] - reference.d_star).powi(2)
}

#[inline]
fn dc_term(pred: &[f64], s0: f64, b_values: &[f64], samples: &[f64]) -> f64 {
    b_values
        .iter()
        .zip(samples)
        .map(|(&b, &s)| (signal(pred[0], pred[1], pred[2], s0, b) - s).powi(2))
        .sum()
}

pub fn loss_supervised(predicted: &IvimParams, reference: &IvimParams, w: &LossWeights) -> f64 {
    supervised_term(&predicted.to_array(), reference, w)
}

fn check_curve(curve: &SignalCurve, schedule: &BValueSchedule) -> Result<()> {
    if !curve.same_schedule(schedule) {
        return Err(IvimError::Shape(format!(
            "curve sampled on {:?}, loss evaluated on {:?}",
            curve.b_values(),
            schedule.values()
        )));
    }
    Ok(())
}

/// Squared error between the forward model of `predicted` and the reference
/// curve, summed over every sampled b-value. For curves normalized to
/// `s0 = 1` the b=0 term is identically zero.
pub fn loss_dc(
    predicted: &IvimParams,
    reference_curve: &SignalCurve,
    s0: f64,
    schedule: &BValueSchedule,
) -> Result<f64> {
    check_curve(reference_curve, schedule)?;
    Ok(dc_term(&predicted.to_array(), s0, schedule.values(), reference_curve.samples()))
}

/// Same functional form as [`loss_dc`], applied to the observed curve.
pub fn loss_unsupervised(
    predicted: &IvimParams,
    observed_curve: &SignalCurve,
    s0: f64,
    schedule: &BValueSchedule,
) -> Result<f64> {
    check_curve(observed_curve, schedule)?;
    Ok(dc_term(&predicted.to_array(), s0, schedule.values(), observed_curve.samples()))
}

pub fn loss_total(
    predicted: &IvimParams,
    reference_params: &IvimParams,
    reference_curve: &SignalCurve,
    s0: f64,
    w: &LossWeights,
) -> Result<f64> {
    let supervised = loss_supervised(predicted, reference_params, w);
    let dc = loss_dc(predicted, reference_curve, s0, reference_curve.schedule())?;
    Ok(supervised + w.alpha_dc * dc)
}

/// Loss of one training sample and its gradient with respect to the network
/// outputs (`[D, f, D*]` plus `s0` when predicted).
pub(crate) fn sample_loss(
    mode: TrainingMode,
    w: &LossWeights,
    outputs: &[f64],
    label: Option<&IvimParams>,
    b_values: &[f64],
    samples: &[f64],
    d_outputs: &mut [f64],
) -> f64 {
    d_outputs.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;

    if let (TrainingMode::Supervised | TrainingMode::SuperDc, Some(reference)) = (mode, label) {
        loss += supervised_term(outputs, reference, w);
        d_outputs[0] += 2.0 * w.alpha_d * (outputs[0] - reference.d);
        d_outputs[1] += 2.0 * w.alpha_f * (outputs[1] - reference.f);
        d_outputs[2] += 2.0 * w.alpha_d_star * (outputs[2] - reference.d_star);
    }

    let dc_weight = match mode {
        TrainingMode::Supervised => return loss,
        TrainingMode::IvimNet => 1.0,
        TrainingMode::SuperDc => w.alpha_dc,
    };
    let predict_s0 = outputs.len() > 3;
    let s0 = if predict_s0 { outputs[3] } else { 1.0 };
    let mut dc = 0.0;
    let mut g = [0.0; 4];
    for (&b, &s) in b_values.iter().zip(samples) {
        let (v, dv) = signal_with_gradient(outputs[0], outputs[1], outputs[2], s0, b);
        let r = v - s;
        dc += r * r;
        for k in 0..4 {
            g[k] += 2.0 * r * dv[k];
        }
    }
    loss += dc_weight * dc;
    for k in 0..d_outputs.len() {
        d_outputs[k] += dc_weight * g[k];
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ivim_curve;
    use std::sync::Arc;

    fn schedule(v: &[f64]) -> Arc<BValueSchedule> {
        Arc::new(BValueSchedule::new(v.to_vec()).unwrap())
    }

    #[test]
    fn supervised_examples() {
        let r = IvimParams::new(1.5e-3, 0.2, 0.05).unwrap();
        assert_eq!(loss_supervised(&r, &r, &LossWeights::default()), 0.0);
        let p = IvimParams::new(2.5e-3, 0.3, 0.05).unwrap();
        let l = loss_supervised(&p, &r, &LossWeights::unit());
        assert!((l - 0.010001).abs() < 1e-15, "{l}");
        let w = LossWeights { alpha_f: 0.0, ..LossWeights::unit() };
        let only_f = IvimParams::new(1.5e-3, 0.6, 0.05).unwrap();
        assert_eq!(loss_supervised(&only_f, &r, &w), 0.0);
    }

    #[test]
    fn dc_examples() {
        let s = schedule(&[0.0, 50.0, 200.0, 800.0]);
        let truth = IvimParams::new(1.5e-3, 0.2, 0.05).unwrap();
        let clean = ivim_curve(&truth, 1.0, &s).unwrap();
        assert_eq!(loss_dc(&truth, &clean, 1.0, &s).unwrap(), 0.0);

        // single b-value: residual by hand from the forward model
        let one = schedule(&[100.0]);
        let obs = SignalCurve::new(vec![0.7], one.clone()).unwrap();
        let p = IvimParams::new(1e-3, 0.1, 0.02).unwrap();
        let model = 0.1 * (-100.0f64 * 0.021).exp() + 0.9 * (-0.1f64).exp();
        let r = model - 0.7;
        assert!((loss_dc(&p, &obs, 1.0, &one).unwrap() - r * r).abs() < 1e-15);

        let noise = [0.01, -0.02, 0.005, 0.03];
        let noisy: Vec<f64> = clean.samples().iter().zip(noise).map(|(c, n)| c + n).collect();
        let noisy = SignalCurve::new(noisy, s.clone()).unwrap();
        let expected: f64 = noise.iter().map(|n| n * n).sum();
        assert!((loss_dc(&truth, &noisy, 1.0, &s).unwrap() - expected).abs() < 1e-15);

        let other = schedule(&[0.0, 100.0, 200.0, 800.0]);
        assert!(matches!(loss_dc(&truth, &clean, 1.0, &other), Err(IvimError::Shape(_))));
        assert!(matches!(loss_unsupervised(&truth, &clean, 1.0, &other), Err(IvimError::Shape(_))));
    }

    #[test]
    fn total_examples() {
        let s = schedule(&[0.0, 100.0, 400.0]);
        let truth = IvimParams::new(1.5e-3, 0.2, 0.05).unwrap();
        let clean = ivim_curve(&truth, 1.0, &s).unwrap();
        assert_eq!(loss_total(&truth, &truth, &clean, 1.0, &LossWeights::default()).unwrap(), 0.0);

        let p = IvimParams::new(1e-3, 0.3, 0.02).unwrap();
        let w0 = LossWeights { alpha_dc: 0.0, ..LossWeights::default() };
        assert_eq!(
            loss_total(&p, &truth, &clean, 1.0, &w0).unwrap(),
            loss_supervised(&p, &truth, &w0)
        );

        // L_s = 0.01 (unit alphas, f off by 0.1), L_dc = 0.5 via a curve
        // offset chosen so the squared residuals sum to 0.5
        let one = schedule(&[100.0]);
        let pred = IvimParams::new(1e-3, 0.3, 0.02).unwrap();
        let refp = IvimParams::new(1e-3, 0.2, 0.02).unwrap();
        let m = signal(1e-3, 0.3, 0.02, 1.0, 100.0);
        let curve = SignalCurve::new(vec![m + 0.5f64.sqrt()], one).unwrap();
        let w = LossWeights { alpha_dc: 0.1, ..LossWeights::unit() };
        let l = loss_total(&pred, &refp, &curve, 1.0, &w).unwrap();
        assert!((l - 0.06).abs() < 1e-12, "{l}");
    }

    #[test]
    fn unsupervised_matches_independent_implementation() {
        let s = schedule(&[0.0, 15.0, 90.0, 200.0, 600.0]);
        let curve = SignalCurve::new(vec![1.02, 0.93, 0.81, 0.66, 0.38], s.clone()).unwrap();
        let p = IvimParams::new(1.1e-3, 0.17, 0.034).unwrap();
        let s0 = 0.98;
        let mut expected = 0.0;
        for (b, obs) in [0.0f64, 15.0, 90.0, 200.0, 600.0].iter().zip([1.02, 0.93, 0.81, 0.66, 0.38]) {
            let fast = (-b * (0.034 + 1.1e-3f64)).exp();
            let slow = (-b * 1.1e-3f64).exp();
            let model = s0 * (0.17 * fast + 0.83 * slow);
            expected += (model - obs) * (model - obs);
        }
        let got = loss_unsupervised(&p, &curve, s0, &s).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mode_parsing_roundtrip() {
        for m in TrainingMode::ALL {
            assert_eq!(m.to_string().parse::<TrainingMode>().unwrap(), m);
        }
        assert!("nope".parse::<TrainingMode>().is_err());
        assert_eq!("alpha_dc".parse::<LossAxis>().unwrap(), LossAxis::AlphaDc);
    }
}
