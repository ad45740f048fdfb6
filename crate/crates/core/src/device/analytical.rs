use rand::Rng;

use super::{ConductanceRange, PulseCount};
use crate::error::{Error, Result};
use crate::rng::normal;
use crate::Scalar;

// Nonlinearities below this are treated as the linear limit.
const LINEAR_EPS: f64 = 1e-9;

/// Exponential-saturation update law.
///
/// A SET pulse from conductance `G` moves along `G(p) = B (1 - e^{-p/A}) + g_min`
/// by one step of `p`, with `A = p_max / nonlinearity` and `B` chosen so that
/// `p_max` pulses traverse the full range. RESET mirrors the curve from `g_max`.
/// A nonlinearity of zero gives a constant step of `(g_max - g_min) / p_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticalModel<T> {
    pub range: ConductanceRange<T>,
    pub p_max: u32,
    pub nonlinearity_set: T,
    pub nonlinearity_reset: T,
    /// Relative std of the per-pulse multiplicative noise.
    pub c2c_sigma: T,
    /// Relative std of the per-call perturbation of the curve constant `A`.
    pub d2d_sigma: T,
}

impl<T: Scalar> AnalyticalModel<T> {
    pub fn new(
        range: ConductanceRange<T>,
        p_max: u32,
        nonlinearity_set: T,
        nonlinearity_reset: T,
        c2c_sigma: T,
        d2d_sigma: T,
    ) -> Result<Self> {
        if p_max == 0 {
            return Err(Error::Config("p_max must be at least 1".into()));
        }
        for (name, v) in [
            ("nonlinearity_set", nonlinearity_set),
            ("nonlinearity_reset", nonlinearity_reset),
            ("c2c_sigma", c2c_sigma),
            ("d2d_sigma", d2d_sigma),
        ] {
            if !(v >= T::zero() && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { range, p_max, nonlinearity_set, nonlinearity_reset, c2c_sigma, d2d_sigma })
    }

    /// Linear and noise-free.
    pub fn ideal(range: ConductanceRange<T>, p_max: u32) -> Self {
        Self::new(range, p_max, T::zero(), T::zero(), T::zero(), T::zero())
            .expect("ideal preset parameters are valid")
    }

    /// Asymmetric nonlinear update with cycle-to-cycle noise, in the style of
    /// measured filamentary ReRAM.
    pub fn real(range: ConductanceRange<T>, p_max: u32) -> Self {
        Self::new(range, p_max, T::of(2.4), T::of(4.88), T::of(0.035), T::zero())
            .expect("real preset parameters are valid")
    }

    fn curve_constant<R: Rng + ?Sized>(&self, nonlinearity: T, rng: &mut R) -> Option<T> {
        if nonlinearity <= T::of(LINEAR_EPS) {
            return None;
        }
        let mut a = T::of(self.p_max as f64) / nonlinearity;
        if self.d2d_sigma > T::zero() {
            let f = T::one() + self.d2d_sigma * normal::<T, _>(rng);
            a = a * f.max(T::of(1e-3));
        }
        Some(a)
    }

    pub fn apply_pulses<R: Rng + ?Sized>(&self, g: T, p: PulseCount, rng: &mut R) -> T {
        let r = &self.range;
        let mut g = r.clip(g);
        if p.0 == 0 {
            return g;
        }
        let set = p.0 > 0;
        let nl = if set { self.nonlinearity_set } else { self.nonlinearity_reset };
        let pm = T::of(self.p_max as f64);
        // None: linear law. Some((b, k)): step = (b - travelled) * k.
        let law = self.curve_constant(nl, rng).map(|a| {
            (r.span() / (T::one() - (-pm / a).exp()), T::one() - (-T::one() / a).exp())
        });
        for _ in 0..p.magnitude() {
            let travelled = if set { g - r.g_min } else { r.g_max - g };
            let mut d = match law {
                None => r.span() / pm,
                Some((b, k)) => (b - travelled) * k,
            };
            if self.c2c_sigma > T::zero() {
                d = d * (T::one() + self.c2c_sigma * normal::<T, _>(rng));
            }
            g = r.clip(if set { g + d } else { g - d });
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn cr() -> ConductanceRange<f64> {
        ConductanceRange::new(133.0, 233.0).unwrap()
    }

    #[test]
    fn ideal_full_and_single_step() {
        let m = AnalyticalModel::ideal(cr(), 100);
        let mut rng = stream(0, Stream::Device);
        let full = m.apply_pulses(133.0, PulseCount(100), &mut rng);
        assert!((full - 233.0).abs() < 1e-9);
        assert_eq!(m.apply_pulses(133.0, PulseCount(1), &mut rng), 134.0);
        assert_eq!(m.apply_pulses(150.0, PulseCount(0), &mut rng), 150.0);
        assert_eq!(m.apply_pulses(183.0, PulseCount(-3), &mut rng), 180.0);
    }

    #[test]
    fn nonlinear_curve_reaches_gmax_in_p_max_pulses() {
        let m = AnalyticalModel::new(cr(), 50, 3.0, 3.0, 0.0, 0.0).unwrap();
        let mut rng = stream(0, Stream::Device);
        let top = m.apply_pulses(133.0, PulseCount(50), &mut rng);
        assert!((top - 233.0).abs() < 1e-9);
        let bottom = m.apply_pulses(233.0, PulseCount(-50), &mut rng);
        assert!((bottom - 133.0).abs() < 1e-9);
        // steps shrink as the device saturates
        let a = m.apply_pulses(133.0, PulseCount(1), &mut rng) - 133.0;
        let b = m.apply_pulses(200.0, PulseCount(1), &mut rng) - 200.0;
        assert!(a > b);
    }

    #[test]
    fn rejects_negative_noise() {
        assert!(AnalyticalModel::new(cr(), 10, 0.0, 0.0, -0.1, 0.0).is_err());
        assert!(AnalyticalModel::new(cr(), 0, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn ideal_pulses_compose(a in 0i64..40, b in 0i64..40, start in 133.0f64..150.0) {
            // no clipping: at most 80 steps of 1 uS from below 150
            let m = AnalyticalModel::ideal(cr(), 100);
            let mut rng = stream(0, Stream::Device);
            let once = m.apply_pulses(start, PulseCount(a + b), &mut rng);
            let mid = m.apply_pulses(start, PulseCount(a), &mut rng);
            let twice = m.apply_pulses(mid, PulseCount(b), &mut rng);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn noisy_output_stays_in_range(g in 133.0f64..=233.0, p in -500i64..500, seed in 0u64..1000) {
            let mut m = AnalyticalModel::real(cr(), 100);
            m.c2c_sigma = 0.8;
            m.d2d_sigma = 0.5;
            let mut rng = stream(seed, Stream::Device);
            let out = m.apply_pulses(g, PulseCount(p), &mut rng);
            prop_assert!((133.0..=233.0).contains(&out));
        }
    }
}
