//! IVIM bi-exponential forward model and signal-curve algebra.
//!
//! The signal at diffusion weighting `b` is
//!
//! ```text
//! s(b) = s0 * ( f * exp(-b (D* + D)) + (1 - f) * exp(-b D) )
//! ```
//!
//! Note the pseudo-diffusion compartment decays with `D* + D`, not `D*` alone.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{IvimError, Result};

/// Parameter triple of the IVIM model. Diffusivities are in mm²/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvimParams {
    #[serde(rename = "D")]
    pub d: f64,
    pub f: f64,
    #[serde(rename = "Dstar")]
    pub d_star: f64,
}

impl IvimParams {
    pub fn new(d: f64, f: f64, d_star: f64) -> Result<Self> {
        let params = IvimParams { d, f, d_star };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d.is_finite() && self.f.is_finite() && self.d_star.is_finite()) {
            return Err(IvimError::InvalidArgument(format!(
                "non-finite IVIM parameters {self:?}"
            )));
        }
        if self.d < 0.0 || self.d_star < 0.0 || !(0.0..=1.0).contains(&self.f) {
            return Err(IvimError::InvalidArgument(format!(
                "IVIM parameters out of domain {self:?}"
            )));
        }
        Ok(())
    }

    /// `[D, f, D*]`
    pub fn to_array(self) -> [f64; 3] {
        [self.d, self.f, self.d_star]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        IvimParams {
            d: a[0],
            f: a[1],
            d_star: a[2],
        }
    }
}

/// Ordered diffusion weightings in s/mm².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BValueSchedule(Vec<f64>);

impl BValueSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(IvimError::InvalidArgument("empty b-value schedule".into()));
        }
        if values.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(IvimError::InvalidArgument(format!(
                "b-values must be finite and non-negative: {values:?}"
            )));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IvimError::InvalidArgument(format!(
                "b-values must be strictly increasing: {values:?}"
            )));
        }
        Ok(BValueSchedule(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when the first b-value is 0.
    pub fn is_anchored(&self) -> bool {
        self.0[0] == 0.0
    }

    pub fn count_at_or_above(&self, threshold: f64) -> usize {
        self.0.iter().filter(|&&b| b >= threshold).count()
    }
}

impl TryFrom<Vec<f64>> for BValueSchedule {
    type Error = IvimError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        BValueSchedule::new(values)
    }
}

impl From<BValueSchedule> for Vec<f64> {
    fn from(s: BValueSchedule) -> Self {
        s.0
    }
}

/// Signal magnitudes sampled on a schedule. The schedule is shared so that
/// large datasets do not duplicate it per curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalCurve {
    samples: Vec<f64>,
    schedule: Arc<BValueSchedule>,
}

impl SignalCurve {
    pub fn new(samples: Vec<f64>, schedule: Arc<BValueSchedule>) -> Result<Self> {
        if samples.len() != schedule.len() {
            return Err(IvimError::Shape(format!(
                "curve has {} samples but schedule has {} b-values",
                samples.len(),
                schedule.len()
            )));
        }
        if samples.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(IvimError::InvalidArgument(
                "signal samples must be finite and non-negative".into(),
            ));
        }
        Ok(SignalCurve { samples, schedule })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn schedule(&self) -> &Arc<BValueSchedule> {
        &self.schedule
    }

    pub fn b_values(&self) -> &[f64] {
        self.schedule.values()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Same b-values as `other`, either by shared pointer or by value.
    pub fn same_schedule(&self, other: &BValueSchedule) -> bool {
        std::ptr::eq(self.schedule.as_ref(), other) || self.schedule.as_ref() == other
    }
}

/// Eq. for a single b-value; panics nowhere, returns an error on non-finite
/// or out-of-domain input.
pub fn ivim_signal(params: &IvimParams, s0: f64, b: f64) -> Result<f64> {
    params.validate()?;
    if !s0.is_finite() || !b.is_finite() || s0 < 0.0 || b < 0.0 {
        return Err(IvimError::InvalidArgument(format!(
            "s0 and b must be finite and non-negative (s0={s0}, b={b})"
        )));
    }
    Ok(signal(params.d, params.f, params.d_star, s0, b))
}

/// Unchecked forward model used in inner loops.
#[inline]
pub fn signal(d: f64, f: f64, d_star: f64, s0: f64, b: f64) -> f64 {
    s0 * (f * (-b * (d_star + d)).exp() + (1.0 - f) * (-b * d).exp())
}

/// Forward model and its partial derivatives with respect to
/// `[D, f, D*, s0]`.
#[inline]
pub fn signal_with_gradient(d: f64, f: f64, d_star: f64, s0: f64, b: f64) -> (f64, [f64; 4]) {
    let fast = (-b * (d_star + d)).exp();
    let slow = (-b * d).exp();
    let shape = f * fast + (1.0 - f) * slow;
    let value = s0 * shape;
    let grad = [
        -b * value,
        s0 * (fast - slow),
        -b * s0 * f * fast,
        shape,
    ];
    (value, grad)
}

pub fn ivim_curve(params: &IvimParams, s0: f64, schedule: &Arc<BValueSchedule>) -> Result<SignalCurve> {
    let samples = schedule
        .values()
        .iter()
        .map(|&b| ivim_signal(params, s0, b))
        .collect::<Result<Vec<_>>>()?;
    SignalCurve::new(samples, Arc::clone(schedule))
}

/// Divides every sample by the b=0 sample.
pub fn normalize_curve(curve: &SignalCurve) -> Result<SignalCurve> {
    if !curve.schedule.is_anchored() {
        return Err(IvimError::InvalidArgument(
            "normalization requires a schedule anchored at b=0".into(),
        ));
    }
    let s0 = curve.samples[0];
    if s0 <= 0.0 {
        return Err(IvimError::DegenerateSignal("b=0 sample is zero".into()));
    }
    let samples = curve.samples.iter().map(|s| s / s0).collect();
    Ok(SignalCurve {
        samples,
        schedule: Arc::clone(&curve.schedule),
    })
}

/// Per-b-value geometric mean over diffusion directions (trace weighting).
pub fn geometric_trace_average(direction_curves: &[SignalCurve]) -> Result<SignalCurve> {
    let first = direction_curves
        .first()
        .ok_or_else(|| IvimError::InvalidArgument("no direction curves given".into()))?;
    for c in direction_curves {
        if !c.same_schedule(&first.schedule) {
            return Err(IvimError::ScheduleMismatch(
                "direction curves have different schedules".into(),
            ));
        }
        if c.samples.iter().any(|&s| s <= 0.0) {
            return Err(IvimError::DegenerateSignal(
                "geometric averaging requires positive samples".into(),
            ));
        }
    }
    if direction_curves.len() == 1 {
        return Ok(first.clone());
    }
    let n = direction_curves.len() as f64;
    let samples = (0..first.len())
        .map(|i| {
            // sorted summation keeps the result independent of input order
            let mut logs: Vec<f64> = direction_curves.iter().map(|c| c.samples[i].ln()).collect();
            logs.sort_by(f64::total_cmp);
            (logs.iter().sum::<f64>() / n).exp()
        })
        .collect();
    Ok(SignalCurve {
        samples,
        schedule: Arc::clone(&first.schedule),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sched(v: &[f64]) -> Arc<BValueSchedule> {
        Arc::new(BValueSchedule::new(v.to_vec()).unwrap())
    }

    #[test]
    fn signal_examples() {
        let p = IvimParams::new(1e-3, 0.3, 1e-2).unwrap();
        assert_eq!(ivim_signal(&p, 1.0, 0.0).unwrap(), 1.0);

        let p = IvimParams::new(1e-3, 0.0, 0.7).unwrap();
        assert_relative_eq!(ivim_signal(&p, 1.0, 1000.0).unwrap(), (-1.0f64).exp(), max_relative = 1e-15);

        // mpmath, 40 digits: 66.67397619230646513595...
        let p = IvimParams::new(1.5e-3, 0.1, 5e-2).unwrap();
        assert!((ivim_signal(&p, 100.0, 200.0).unwrap() - 66.673_976_192_306_47).abs() < 1e-12);
    }

    #[test]
    fn signal_rejects_bad_input() {
        let p = IvimParams { d: f64::NAN, f: 0.1, d_star: 0.01 };
        assert!(matches!(ivim_signal(&p, 1.0, 0.0), Err(IvimError::InvalidArgument(_))));
        let p = IvimParams::new(1e-3, 0.1, 1e-2).unwrap();
        assert!(ivim_signal(&p, f64::INFINITY, 0.0).is_err());
        assert!(ivim_signal(&p, 1.0, -1.0).is_err());
        assert!(IvimParams::new(1e-3, 1.1, 1e-2).is_err());
    }

    #[test]
    fn curve_examples() {
        let p = IvimParams::new(1e-3, 0.2, 1e-2).unwrap();
        let c = ivim_curve(&p, 3.5, &sched(&[0.0])).unwrap();
        assert_eq!(c.samples(), &[3.5]);

        let p = IvimParams::new(1e-3, 0.0, 0.05).unwrap();
        let s = sched(&[0.0, 1000.0]);
        let c = ivim_curve(&p, 1.0, &s).unwrap();
        assert_eq!(c.samples()[0], 1.0);
        assert_relative_eq!(c.samples()[1], (-1.0f64).exp(), max_relative = 1e-15);
        assert!(Arc::ptr_eq(c.schedule(), &s));

        let p = IvimParams::new(1.5e-3, 0.1, 5e-2).unwrap();
        let c = ivim_curve(&p, 100.0, &sched(&[0.0, 200.0])).unwrap();
        assert_eq!(c.samples()[0], 100.0);
        assert!((c.samples()[1] - 66.673_976_192_306_47).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(BValueSchedule::new(vec![]).is_err());
        assert!(BValueSchedule::new(vec![0.0, 0.0]).is_err());
        assert!(BValueSchedule::new(vec![10.0, 5.0]).is_err());
        assert!(BValueSchedule::new(vec![-1.0, 5.0]).is_err());
        let s = BValueSchedule::new(vec![50.0, 100.0]).unwrap();
        assert!(!s.is_anchored());
        assert!(SignalCurve::new(vec![1.0], Arc::new(s)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = sched(&[0.0, 100.0]);
        let c = SignalCurve::new(vec![2.0, 1.0], s.clone()).unwrap();
        let n = normalize_curve(&c).unwrap();
        assert_eq!(n.samples(), &[1.0, 0.5]);
        assert_eq!(normalize_curve(&n).unwrap(), n);

        let s3 = sched(&[0.0, 100.0, 400.0]);
        let c = SignalCurve::new(vec![100.0, 66.674, 30.1], s3).unwrap();
        let n = normalize_curve(&c).unwrap();
        assert_eq!(n.samples()[0], 1.0);
        assert_relative_eq!(n.samples()[1], 0.66674, max_relative = 1e-15);
        assert_relative_eq!(n.samples()[2], 0.301, max_relative = 1e-15);

        let z = SignalCurve::new(vec![0.0, 1.0], s).unwrap();
        assert!(matches!(normalize_curve(&z), Err(IvimError::DegenerateSignal(_))));
        let unanchored = SignalCurve::new(vec![1.0, 0.5], sched(&[10.0, 100.0])).unwrap();
        assert!(normalize_curve(&unanchored).is_err());
    }

    #[test]
    fn trace_average_examples() {
        let s = sched(&[0.0, 100.0]);
        let a = SignalCurve::new(vec![4.0, 1.0], s.clone()).unwrap();
        let b = SignalCurve::new(vec![1.0, 1.0], s.clone()).unwrap();
        assert_eq!(geometric_trace_average(std::slice::from_ref(&a)).unwrap(), a);
        let g = geometric_trace_average(&[a.clone(), b]).unwrap();
        assert_relative_eq!(g.samples()[0], 2.0, max_relative = 1e-15);
        assert_eq!(g.samples()[1], 1.0);

        let c = SignalCurve::new(vec![0.37, 0.37], s.clone()).unwrap();
        let g = geometric_trace_average(&vec![c; 6]).unwrap();
        for v in g.samples() {
            assert_relative_eq!(*v, 0.37, max_relative = 1e-14);
        }

        let other = SignalCurve::new(vec![1.0, 1.0], sched(&[0.0, 200.0])).unwrap();
        assert!(matches!(
            geometric_trace_average(&[a.clone(), other]),
            Err(IvimError::ScheduleMismatch(_))
        ));
        let zero = SignalCurve::new(vec![1.0, 0.0], s).unwrap();
        assert!(matches!(
            geometric_trace_average(&[a, zero]),
            Err(IvimError::DegenerateSignal(_))
        ));
        assert!(geometric_trace_average(&[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = [1.2e-3, 0.25, 4e-2, 1.3];
        let b = 150.0;
        let (_, g) = signal_with_gradient(x[0], x[1], x[2], x[3], b);
        for j in 0..4 {
            let h = 1e-6 * x[j];
            let mut up = x;
            let mut dn = x;
            up[j] += h;
            dn[j] -= h;
            let fd = (signal(up[0], up[1], up[2], up[3], b) - signal(dn[0], dn[1], dn[2], dn[3], b)) / (2.0 * h);
            assert_relative_eq!(g[j], fd, max_relative = 1e-7);
        }
    }

    fn params() -> impl Strategy<Value = IvimParams> {
        (1e-5f64..5e-3, 0.0f64..=1.0, 0.0f64..0.5).prop_map(|(d, f, d_star)| IvimParams { d, f, d_star })
    }

    proptest! {
        #[test]
        fn decreasing_in_b(p in params(), s0 in 0.1f64..1e3, b in 0.0f64..2000.0, db in 1.0f64..200.0) {
            let lo = ivim_signal(&p, s0, b).unwrap();
            let hi = ivim_signal(&p, s0, b + db).unwrap();
            prop_assert!(hi < lo);
        }

        #[test]
        fn bounded_by_s0(p in params(), s0 in 0.0f64..1e3, b in 0.0f64..5000.0) {
            let s = ivim_signal(&p, s0, b).unwrap();
            prop_assert!(s >= 0.0 && s <= s0);
        }

        #[test]
        fn biexponential_identity(p in params(), s0 in 0.1f64..1e3, b in 0.0f64..2000.0) {
            let fast = IvimParams { d: p.d + p.d_star, f: 0.0, d_star: 0.0 };
            let slow = IvimParams { d: p.d, f: 0.0, d_star: 0.0 };
            let lhs = ivim_signal(&p, s0, b).unwrap();
            let rhs = p.f * ivim_signal(&fast, s0, b).unwrap() + (1.0 - p.f) * ivim_signal(&slow, s0, b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * s0);
        }

        #[test]
        fn trace_average_permutation_invariant(rows in prop::collection::vec(prop::collection::vec(0.01f64..100.0, 3), 1..7), seed in any::<u64>()) {
            let s = sched(&[0.0, 100.0, 500.0]);
            let curves: Vec<_> = rows.iter().map(|r| SignalCurve::new(r.clone(), s.clone()).unwrap()).collect();
            let mut shuffled = curves.clone();
            let n = shuffled.len();
            for i in (1..n).rev() {
                let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            prop_assert_eq!(geometric_trace_average(&curves).unwrap(), geometric_trace_average(&shuffled).unwrap());
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(0.01f64..1e4, 1..20)) {
            let b: Vec<f64> = (0..v.len()).map(|i| 10.0 * i as f64).collect();
            let c = SignalCurve::new(v, sched(&b)).unwrap();
            let once = normalize_curve(&c).unwrap();
            prop_assert_eq!(once.samples()[0], 1.0);
            prop_assert_eq!(normalize_curve(&once).unwrap(), once);
        }
    }
}
