//! Device conductance-update models and the weight/conductance/pulse conversions
//! that route a gradient step through a device.
//!
//! All models are stateless: each call takes the current conductance and an
//! explicit random stream, and no per-device memory survives between calls.

mod analytical;
mod tabular;

pub use analytical::AnalyticalModel;
pub use tabular::{
    build_tabular_model, make_fefet_preset, Polarity, Sample, TabularModel, FEFET_NONLINEARITY,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stochastic_round;
use crate::Scalar;

/// Conductance interval `[g_min, g_max]` in microsiemens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConductanceRange<T> {
    pub g_min: T,
    pub g_max: T,
}

impl<T: Scalar> ConductanceRange<T> {
    pub fn new(g_min: T, g_max: T) -> Result<Self> {
        if !(g_min > T::zero() && g_max > g_min && g_max.is_finite()) {
            return Err(Error::Config(format!(
                "conductance range needs g_max > g_min > 0, got ({g_min}, {g_max})"
            )));
        }
        Ok(Self { g_min, g_max })
    }

    #[inline]
    pub fn span(&self) -> T {
        self.g_max - self.g_min
    }

    #[inline]
    pub fn clip(&self, g: T) -> T {
        g.max(self.g_min).min(self.g_max)
    }

    #[inline]
    pub fn contains(&self, g: T) -> bool {
        g >= self.g_min && g <= self.g_max
    }
}

/// Weight interval `[w_min, w_max]` a layer is constrained to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRange<T> {
    pub w_min: T,
    pub w_max: T,
}

impl<T: Scalar> WeightRange<T> {
    pub fn new(w_min: T, w_max: T) -> Result<Self> {
        if !(w_max > w_min && w_min.is_finite() && w_max.is_finite()) {
            return Err(Error::Config(format!(
                "weight range needs w_max > w_min, got ({w_min}, {w_max})"
            )));
        }
        Ok(Self { w_min, w_max })
    }

    /// The symmetric default range (-1, +1).
    pub fn unit() -> Self {
        Self { w_min: -T::one(), w_max: T::one() }
    }

    #[inline]
    pub fn clip(&self, w: T) -> T {
        w.max(self.w_min).min(self.w_max)
    }

    #[inline]
    pub fn span(&self) -> T {
        self.w_max - self.w_min
    }
}

/// Signed pulse count: positive is SET, negative is RESET.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PulseCount(pub i64);

impl PulseCount {
    pub fn magnitude(self) -> u64 {
        self.0.unsigned_abs()
    }
}

/// Counters for silent corrections made during conversions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Conductances that fell outside `[g_min, g_max]` and were clipped.
    pub clipped_conductances: u64,
    pub pulses_applied: u64,
}

/// Linear map of a weight onto the conductance range; out-of-range weights are
/// clipped first.
pub fn weight_to_conductance<T: Scalar>(
    theta: T,
    wr: &WeightRange<T>,
    cr: &ConductanceRange<T>,
) -> Result<T> {
    if !theta.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite weight {theta}")));
    }
    let t = wr.clip(theta);
    Ok(cr.clip((t - wr.w_min) / wr.span() * cr.span() + cr.g_min))
}

/// Inverse of [`weight_to_conductance`]. Out-of-range conductances are clipped.
pub fn conductance_to_weight<T: Scalar>(g: T, wr: &WeightRange<T>, cr: &ConductanceRange<T>) -> T {
    let g = cr.clip(g);
    (g - cr.g_min) / cr.span() * wr.span() + wr.w_min
}

/// Like [`conductance_to_weight`], counting clipped inputs in `diag`.
pub fn conductance_to_weight_checked<T: Scalar>(
    g: T,
    wr: &WeightRange<T>,
    cr: &ConductanceRange<T>,
    diag: &mut Diagnostics,
) -> T {
    if !cr.contains(g) {
        diag.clipped_conductances += 1;
    }
    conductance_to_weight(g, wr, cr)
}

/// Stochastically rounds `p_max * grad_step` to an integer pulse count, then
/// clamps to `[-p_max, p_max]`.
pub fn gradient_to_pulses<T: Scalar, R: Rng + ?Sized>(
    grad_step: T,
    p_max: u32,
    rng: &mut R,
) -> Result<PulseCount> {
    if !grad_step.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite gradient step {grad_step}")));
    }
    if p_max == 0 {
        return Err(Error::Config("p_max must be at least 1".into()));
    }
    let pm = T::of(p_max as f64);
    let raw = stochastic_round(pm * grad_step, rng);
    let clamped = raw.max(-pm).min(pm);
    Ok(PulseCount(clamped.to_i64().unwrap_or(0)))
}

/// A stateless conductance-update law.
#[derive(Debug, Clone, PartialEq)]
pub enum DeviceModel<T> {
    Analytical(AnalyticalModel<T>),
    Tabular(TabularModel<T>),
}

impl<T: Scalar> DeviceModel<T> {
    pub fn range(&self) -> &ConductanceRange<T> {
        match self {
            DeviceModel::Analytical(m) => &m.range,
            DeviceModel::Tabular(m) => &m.range,
        }
    }

    pub fn p_max(&self) -> u32 {
        match self {
            DeviceModel::Analytical(m) => m.p_max,
            DeviceModel::Tabular(m) => m.p_max,
        }
    }

    /// Applies `|p|` single pulses in the polarity of `p`, one at a time.
    pub fn apply_pulses<R: Rng + ?Sized>(&self, g: T, p: PulseCount, rng: &mut R) -> T {
        match self {
            DeviceModel::Analytical(m) => m.apply_pulses(g, p, rng),
            DeviceModel::Tabular(m) => m.apply_pulses(g, p, rng),
        }
    }
}

impl<T> From<AnalyticalModel<T>> for DeviceModel<T> {
    fn from(m: AnalyticalModel<T>) -> Self {
        DeviceModel::Analytical(m)
    }
}

impl<T> From<TabularModel<T>> for DeviceModel<T> {
    fn from(m: TabularModel<T>) -> Self {
        DeviceModel::Tabular(m)
    }
}

/// Free-function form of [`DeviceModel::apply_pulses`].
pub fn apply_pulses<T: Scalar, R: Rng + ?Sized>(
    model: &DeviceModel<T>,
    g: T,
    p: PulseCount,
    rng: &mut R,
) -> T {
    model.apply_pulses(g, p, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn ranges() -> (WeightRange<f64>, ConductanceRange<f64>) {
        (WeightRange::unit(), ConductanceRange::new(133.0, 233.0).unwrap())
    }

    #[test]
    fn weight_conductance_examples() {
        let (wr, cr) = ranges();
        assert_eq!(weight_to_conductance(-1.0, &wr, &cr).unwrap(), 133.0);
        assert_eq!(weight_to_conductance(0.0, &wr, &cr).unwrap(), 183.0);
        assert_eq!(conductance_to_weight(233.0, &wr, &cr), 1.0);
        assert_eq!(conductance_to_weight(183.0, &wr, &cr), 0.0);
        assert!(weight_to_conductance(f64::NAN, &wr, &cr).is_err());
        assert_eq!(weight_to_conductance(7.0, &wr, &cr).unwrap(), 233.0);
    }

    #[test]
    fn out_of_range_conductance_is_counted() {
        let (wr, cr) = ranges();
        let mut d = Diagnostics::default();
        assert_eq!(conductance_to_weight_checked(300.0, &wr, &cr, &mut d), 1.0);
        assert!((conductance_to_weight_checked(150.0, &wr, &cr, &mut d) + 0.66).abs() < 1e-12);
        assert_eq!(d.clipped_conductances, 1);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(ConductanceRange::new(0.0, 1.0).is_err());
        assert!(ConductanceRange::new(2.0, 1.0).is_err());
        assert!(WeightRange::new(1.0, 1.0).is_err());
    }

    #[test]
    fn pulse_conversion_exact_cases() {
        let mut rng = stream(1, Stream::Device);
        for _ in 0..1000 {
            assert_eq!(gradient_to_pulses(0.0, 100, &mut rng).unwrap(), PulseCount(0));
            assert_eq!(gradient_to_pulses(0.5, 100, &mut rng).unwrap(), PulseCount(50));
            assert_eq!(gradient_to_pulses(-7.0, 100, &mut rng).unwrap(), PulseCount(-100));
        }
        assert!(gradient_to_pulses(f64::INFINITY, 100, &mut rng).is_err());
    }

    #[test]
    fn pulse_conversion_monte_carlo() {
        // P(p = 1) = frac(100 * 0.004) = 0.4
        let mut rng = stream(2, Stream::Device);
        let n = 100_000;
        let mut ones = 0u32;
        for _ in 0..n {
            let p = gradient_to_pulses(0.004, 100, &mut rng).unwrap();
            assert!(p.0 == 0 || p.0 == 1);
            ones += p.0 as u32;
        }
        let mean = ones as f64 / n as f64;
        assert!((mean - 0.4).abs() <= 0.005, "mean {mean}");
    }

    #[test]
    fn stochastic_rounding_is_unbiased_within_three_sigma() {
        let n = 100_000usize;
        for (i, &x) in [0.13_f64, -2.71, 5.5, 0.999].iter().enumerate() {
            let mut rng = stream(i as u64, Stream::Custom(9));
            let sum: f64 = (0..n).map(|_| stochastic_round(x, &mut rng)).sum();
            let f = x - x.floor();
            let bound = 3.0 * (f * (1.0 - f) / n as f64).sqrt();
            assert!((sum / n as f64 - x).abs() <= bound, "x={x}");
        }
    }

    proptest! {
        #[test]
        fn weight_round_trip(theta in -1.0f64..=1.0) {
            let (wr, cr) = ranges();
            let back = conductance_to_weight(weight_to_conductance(theta, &wr, &cr).unwrap(), &wr, &cr);
            prop_assert!((back - theta).abs() <= 1e-12 * theta.abs().max(1.0));
        }

        #[test]
        fn weight_round_trip_arbitrary_ranges(
            lo in -5.0f64..0.0, width in 0.1f64..10.0, gmin in 1.0f64..100.0, gw in 1.0f64..500.0, u in 0.0f64..=1.0
        ) {
            let wr = WeightRange::new(lo, lo + width).unwrap();
            let cr = ConductanceRange::new(gmin, gmin + gw).unwrap();
            let theta = lo + u * width;
            let back = conductance_to_weight(weight_to_conductance(theta, &wr, &cr).unwrap(), &wr, &cr);
            prop_assert!((back - theta).abs() <= 1e-12 * theta.abs().max(width));
        }
    }
}
