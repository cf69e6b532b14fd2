//! Synthetic IVIM datasets: parameter sampling, Rician noise and b-value
//! subsampling.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};
use crate::model::{ivim_curve, BValueSchedule, IvimParams, SignalCurve};
use crate::rng::{derive_seed, rng_from_seed};

/// Low b-values (s/mm²) of the simulation protocol.
pub const LOW_B_VALUES: [f64; 12] = [
    0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0, 105.0, 120.0, 135.0, 150.0, 175.0,
];
/// High b-values (s/mm²) appended to every subsampled schedule.
pub const HIGH_B_VALUES: [f64; 4] = [200.0, 400.0, 600.0, 800.0];
/// b-values kept regardless of the stride, when present in the inputs.
pub const RETAINED_B_VALUES: [f64; 2] = [0.0, 200.0];

/// Uniform sampling box for simulated parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    #[serde(rename = "D_min")]
    pub d_min: f64,
    #[serde(rename = "D_max")]
    pub d_max: f64,
    pub f_min: f64,
    pub f_max: f64,
    #[serde(rename = "Dstar_min")]
    pub d_star_min: f64,
    #[serde(rename = "Dstar_max")]
    pub d_star_max: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            d_min: 0.0005,
            d_max: 0.003,
            f_min: 0.05,
            f_max: 0.5,
            d_star_min: 0.005,
            d_star_max: 0.1,
        }
    }
}

impl ParamRanges {
    /// Degenerate intervals (`min == max`) are accepted and pin the value.
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("D", self.d_min, self.d_max),
            ("f", self.f_min, self.f_max),
            ("Dstar", self.d_star_min, self.d_star_max),
        ];
        for (name, lo, hi) in pairs {
            if !lo.is_finite() || !hi.is_finite() || lo < 0.0 || lo > hi {
                return Err(IvimError::InvalidArgument(format!(
                    "invalid range for {name}: [{lo}, {hi}]"
                )));
            }
        }
        if self.f_max > 1.0 {
            return Err(IvimError::InvalidArgument("f_max must be <= 1".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &IvimParams) -> bool {
        (self.d_min..=self.d_max).contains(&p.d)
            && (self.f_min..=self.f_max).contains(&p.f)
            && (self.d_star_min..=self.d_star_max).contains(&p.d_star)
    }
}

pub(crate) mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDatasetConfig {
    pub count: usize,
    pub ranges: ParamRanges,
    pub schedule: BValueSchedule,
    /// `s0 / sigma`; `inf` gives noiseless curves.
    #[serde(with = "snr_serde")]
    pub snr: f64,
    pub seed: u64,
    pub s0: f64,
}

impl SimDatasetConfig {
    pub fn new(count: usize, schedule: BValueSchedule, snr: f64, seed: u64) -> Self {
        SimDatasetConfig {
            count,
            ranges: ParamRanges::default(),
            schedule,
            snr,
            seed,
            s0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(IvimError::InvalidArgument("dataset count must be >= 1".into()));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(IvimError::InvalidArgument(format!("snr must be > 0, got {}", self.snr)));
        }
        if !self.s0.is_finite() || self.s0 <= 0.0 {
            return Err(IvimError::InvalidArgument(format!("s0 must be > 0, got {}", self.s0)));
        }
        self.ranges.validate()
    }
}

/// Noisy curves with optional ground-truth labels. Unlabeled datasets come
/// from measured data and can only train the unsupervised objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub schedule: Arc<BValueSchedule>,
    pub curves: Vec<SignalCurve>,
    pub labels: Option<Vec<IvimParams>>,
}

impl LabeledDataset {
    pub fn new(
        schedule: Arc<BValueSchedule>,
        curves: Vec<SignalCurve>,
        labels: Option<Vec<IvimParams>>,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != curves.len() {
                return Err(IvimError::Shape(format!(
                    "{} labels for {} curves",
                    l.len(),
                    curves.len()
                )));
            }
        }
        if let Some(c) = curves.iter().find(|c| !c.same_schedule(&schedule)) {
            return Err(IvimError::ScheduleMismatch(format!(
                "curve schedule {:?} differs from dataset schedule {:?}",
                c.b_values(),
                schedule.values()
            )));
        }
        Ok(LabeledDataset {
            schedule,
            curves,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn labels(&self) -> Result<&[IvimParams]> {
        self.labels
            .as_deref()
            .ok_or_else(|| IvimError::MissingLabels("dataset has no D,f,Dstar columns".into()))
    }
}

pub fn sample_parameters<R: Rng + ?Sized>(ranges: &ParamRanges, rng: &mut R) -> IvimParams {
    let mut draw = |lo: f64, hi: f64| lo + rng.random::<f64>() * (hi - lo);
    let d = draw(ranges.d_min, ranges.d_max);
    let f = draw(ranges.f_min, ranges.f_max);
    let d_star = draw(ranges.d_star_min, ranges.d_star_max);
    IvimParams { d, f, d_star }
}

/// Magnitude of a complex sample with Gaussian noise of std `sigma` on each
/// channel.
#[inline]
pub fn rician_sample<R: Rng + ?Sized>(s: f64, sigma: f64, rng: &mut R) -> f64 {
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    let re = s + sigma * n1;
    let im = sigma * n2;
    re.hypot(im)
}

pub fn add_rician_noise<R: Rng + ?Sized>(
    curve: &SignalCurve,
    snr: f64,
    s0: f64,
    rng: &mut R,
) -> Result<SignalCurve> {
    if snr.is_nan() || snr <= 0.0 {
        return Err(IvimError::InvalidArgument(format!("snr must be > 0, got {snr}")));
    }
    if !s0.is_finite() || s0 <= 0.0 {
        return Err(IvimError::InvalidArgument(format!("s0 must be > 0, got {s0}")));
    }
    let sigma = s0 / snr;
    if sigma == 0.0 {
        return Ok(curve.clone());
    }
    let samples = curve
        .samples()
        .iter()
        .map(|&s| rician_sample(s, sigma, rng))
        .collect();
    SignalCurve::new(samples, Arc::clone(curve.schedule()))
}

/// Keeps every `k`-th low b-value (starting at index 0), re-inserts the
/// retained b-values the stride dropped, and appends the high b-values.
pub fn subsample_schedule(
    low: &BValueSchedule,
    high: &BValueSchedule,
    k: usize,
) -> Result<BValueSchedule> {
    if k < 1 {
        return Err(IvimError::InvalidArgument("sampling factor must be >= 1".into()));
    }
    if !low.is_anchored() {
        return Err(IvimError::InvalidArgument(
            "low b-value schedule must start at b=0".into(),
        ));
    }
    let mut out: Vec<f64> = low.values().iter().step_by(k).copied().collect();
    out.extend_from_slice(high.values());
    for b in RETAINED_B_VALUES {
        let present = low.values().contains(&b) || high.values().contains(&b);
        if present && !out.contains(&b) {
            out.push(b);
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    BValueSchedule::new(out)
}

/// Schedule of the simulation protocol at sampling factor `k`.
pub fn protocol_schedule(k: usize) -> Result<BValueSchedule> {
    let low = BValueSchedule::new(LOW_B_VALUES.to_vec())?;
    let high = BValueSchedule::new(HIGH_B_VALUES.to_vec())?;
    subsample_schedule(&low, &high, k)
}

/// Curve `i` uses its own stream derived from `(seed, i)`, so generation
/// can be split across workers and still match a serial run.
pub fn generate_dataset(config: &SimDatasetConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let schedule = Arc::new(config.schedule.clone());
    let pairs = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(config.seed, &[i as u64]));
            let label = sample_parameters(&config.ranges, &mut rng);
            let clean = ivim_curve(&label, config.s0, &schedule)?;
            let noisy = add_rician_noise(&clean, config.snr, config.s0, &mut rng)?;
            Ok((noisy, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let (curves, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    LabeledDataset::new(schedule, curves, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::IvimRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sched(v: &[f64]) -> BValueSchedule {
        BValueSchedule::new(v.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_ranges_pin_values() {
        let a = 0.01;
        let r = ParamRanges {
            d_min: a,
            d_max: a,
            f_min: a,
            f_max: a,
            d_star_min: a,
            d_star_max: a,
        };
        let mut rng = IvimRng::seed_from_u64(3);
        let p = sample_parameters(&r, &mut rng);
        assert_eq!((p.d, p.f, p.d_star), (a, a, a));
    }

    #[test]
    fn sampled_mean_matches_uniform() {
        let r = ParamRanges {
            d_min: 1e-3,
            d_max: 3e-3,
            ..ParamRanges::default()
        };
        let mut rng = IvimRng::seed_from_u64(11);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_parameters(&r, &mut rng).d).sum::<f64>() / n as f64;
        assert!((mean - 2e-3).abs() < 0.01 * 2e-3, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let r = ParamRanges::default();
        let mut a = IvimRng::seed_from_u64(5);
        let mut b = IvimRng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(sample_parameters(&r, &mut a), sample_parameters(&r, &mut b));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let r = ParamRanges { f_max: 1.5, ..Default::default() };
        assert!(r.validate().is_err());
        let r = ParamRanges { d_min: 0.01, ..Default::default() };
        assert!(r.validate().is_err());
    }

    #[test]
    fn infinite_snr_leaves_curve_unchanged() {
        let s = Arc::new(sched(&[0.0, 100.0]));
        let c = SignalCurve::new(vec![1.0, 0.5], s).unwrap();
        let mut rng = IvimRng::seed_from_u64(1);
        assert_eq!(add_rician_noise(&c, f64::INFINITY, 1.0, &mut rng).unwrap(), c);
        assert!(add_rician_noise(&c, 0.0, 1.0, &mut rng).is_err());
        assert!(add_rician_noise(&c, -2.0, 1.0, &mut rng).is_err());
    }

    fn moments(nu: f64, sigma: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = IvimRng::seed_from_u64(seed);
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rician_sample(nu, sigma, &mut rng);
            m1 += x;
            m2 += x * x;
        }
        (m1 / n as f64, m2 / n as f64)
    }

    #[test]
    fn rician_moments() {
        // Rayleigh mean sigma * sqrt(pi / 2)
        let (m1, _) = moments(0.0, 1.0, 1_000_000, 21);
        let expected = (std::f64::consts::PI / 2.0).sqrt();
        assert!((m1 - expected).abs() < 0.01 * expected, "mean {m1}");
        // E[M^2] = nu^2 + 2 sigma^2
        let (_, m2) = moments(10.0, 1.0, 1_000_000, 22);
        assert!((m2 - 102.0).abs() < 0.01 * 102.0, "second moment {m2}");
    }

    #[test]
    fn noisy_samples_nonnegative() {
        let s = Arc::new(sched(&[0.0, 100.0, 1000.0]));
        let c = SignalCurve::new(vec![1.0, 0.1, 0.0], s).unwrap();
        let mut rng = IvimRng::seed_from_u64(2);
        for _ in 0..1000 {
            let n = add_rician_noise(&c, 2.0, 1.0, &mut rng).unwrap();
            assert!(n.samples().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn subsample_examples() {
        let low = sched(&LOW_B_VALUES);
        let high = sched(&HIGH_B_VALUES);
        let full = subsample_schedule(&low, &high, 1).unwrap();
        assert_eq!(full.len(), 16);
        let mut all = LOW_B_VALUES.to_vec();
        all.extend(HIGH_B_VALUES);
        assert_eq!(full.values(), all.as_slice());

        let k2 = subsample_schedule(&low, &high, 2).unwrap();
        assert_eq!(
            k2.values(),
            &[0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 200.0, 400.0, 600.0, 800.0]
        );
        let k6 = subsample_schedule(&low, &high, 6).unwrap();
        assert_eq!(k6.values(), &[0.0, 90.0, 200.0, 400.0, 600.0, 800.0]);

        assert!(subsample_schedule(&low, &high, 0).is_err());
        assert!(subsample_schedule(&sched(&[10.0, 20.0]), &high, 1).is_err());
    }

    #[test]
    fn subsample_reinserts_200_from_low() {
        let low = sched(&[0.0, 50.0, 100.0, 200.0]);
        let high = sched(&[400.0, 600.0]);
        let s = subsample_schedule(&low, &high, 2).unwrap();
        assert_eq!(s.values(), &[0.0, 100.0, 200.0, 400.0, 600.0]);
    }

    proptest! {
        #[test]
        fn subsample_always_keeps_anchors(k in 1usize..=12) {
            let s = protocol_schedule(k).unwrap();
            prop_assert!(s.values().contains(&0.0));
            prop_assert!(s.values().contains(&200.0));
            prop_assert!(s.values().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn noiseless_single_curve_matches_model() {
        let mut cfg = SimDatasetConfig::new(1, protocol_schedule(1).unwrap(), f64::INFINITY, 9);
        cfg.s0 = 1.0;
        let ds = generate_dataset(&cfg).unwrap();
        let label = ds.labels().unwrap()[0];
        let clean = ivim_curve(&label, 1.0, &ds.schedule).unwrap();
        assert_eq!(ds.curves[0], clean);
        assert!(cfg.ranges.contains(&label));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimDatasetConfig::new(500, protocol_schedule(3).unwrap(), 10.0, 77);
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 78;
        assert_ne!(generate_dataset(&cfg).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn parallel_generation_matches_single_thread() {
        let cfg = SimDatasetConfig::new(2000, protocol_schedule(2).unwrap(), 10.0, 4);
        let pooled = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = pooled.install(|| generate_dataset(&cfg).unwrap());
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(|| generate_dataset(&cfg).unwrap());
        assert_eq!(a, b);
    }

    /// Box-Muller over a xorshift stream; shares nothing with the
    /// library's noise path.
    struct Oracle(u64);
    impl Oracle {
        fn uniform(&mut self) -> f64 {
            self.0 ^= self.0 << 13;
            self.0 ^= self.0 >> 7;
            self.0 ^= self.0 << 17;
            ((self.0 >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        }
        fn gauss(&mut self) -> f64 {
            let (u1, u2) = (self.uniform(), self.uniform());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    #[test]
    fn dataset_noise_level_matches_independent_simulation() {
        let cfg = SimDatasetConfig::new(10_000, protocol_schedule(1).unwrap(), 10.0, 123);
        let ds = generate_dataset(&cfg).unwrap();
        let sigma = cfg.s0 / cfg.snr;
        let mut oracle = Oracle(0x1234_5678_9abc_def1);
        let (mut lib_rms, mut ref_rms) = (0.0, 0.0);
        for (curve, label) in ds.curves.iter().zip(ds.labels().unwrap()) {
            let clean = ivim_curve(label, cfg.s0, &ds.schedule).unwrap();
            let n = clean.len() as f64;
            let (mut a, mut b) = (0.0, 0.0);
            for (&noisy, &s) in curve.samples().iter().zip(clean.samples()) {
                a += (noisy - s).powi(2);
                let m = ((s + sigma * oracle.gauss()).powi(2) + (sigma * oracle.gauss()).powi(2)).sqrt();
                b += (m - s).powi(2);
            }
            lib_rms += (a / n).sqrt();
            ref_rms += (b / n).sqrt();
        }
        let rel = (lib_rms - ref_rms).abs() / ref_rms;
        assert!(rel < 0.10, "relative difference {rel}");
    }
}
