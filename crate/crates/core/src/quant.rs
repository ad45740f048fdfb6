//! Uniform low-bit quantizers for weights, activations, gradients and errors.
//!
//! The grid is symmetric and mid-tread: `2^k - 1` evenly spaced levels on
//! `[-1, 1]` including `0` and `±1`, so `k = 2` gives `{-1, 0, +1}`.

use ndarray::{Array, ArrayBase, Data, Dimension};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::uniform;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rounding {
    /// Closest level, ties toward zero.
    #[default]
    Nearest,
    /// Neighbouring level with probability proportional to proximity.
    Stochastic,
}

/// Bit-widths for weights, activations, gradients and errors.
/// A width of `0` disables that quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct QuantConfig {
    pub k_w: u32,
    pub k_a: u32,
    pub k_g: u32,
    pub k_e: u32,
    pub rounding: Rounding,
}

impl QuantConfig {
    pub const DISABLED: QuantConfig =
        QuantConfig { k_w: 0, k_a: 0, k_g: 0, k_e: 0, rounding: Rounding::Nearest };

    pub fn new(k_w: u32, k_a: u32, k_g: u32, k_e: u32, rounding: Rounding) -> Result<Self> {
        let cfg = QuantConfig { k_w, k_a, k_g, k_e, rounding };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Ternary weights with 8-bit activations, gradients and errors.
    pub fn wage_2888() -> Self {
        QuantConfig { k_w: 2, k_a: 8, k_g: 8, k_e: 8, rounding: Rounding::Nearest }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("k_w", self.k_w), ("k_a", self.k_a), ("k_g", self.k_g), ("k_e", self.k_e)] {
            if k == 1 || k > 52 {
                return Err(Error::Config(format!(
                    "{name} = {k}: bit-widths must be 0 (disabled) or between 2 and 52"
                )));
            }
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.k_w == 0 && self.k_a == 0 && self.k_g == 0 && self.k_e == 0
    }
}

/// Number of positive levels of the `k`-bit grid, `2^(k-1) - 1`.
#[inline]
pub fn half_levels(k: u32) -> u64 {
    (1u64 << (k - 1)) - 1
}

/// Spacing between adjacent levels of the `k`-bit grid.
pub fn grid_step<T: Scalar>(k: u32) -> T {
    T::one() / T::of(half_levels(k) as f64)
}

fn check_bits(k: u32) -> Result<()> {
    if !(2..=52).contains(&k) {
        return Err(Error::Config(format!("quantizer bit-width must be in 2..=52, got {k}")));
    }
    Ok(())
}

#[inline]
fn snap<T: Scalar, R: Rng + ?Sized>(x: T, n: T, mode: Rounding, rng: &mut R) -> T {
    let y = x.max(-T::one()).min(T::one()) * n;
    let a = y.abs();
    let lo = a.floor();
    let frac = a - lo;
    let mag = match mode {
        Rounding::Nearest => {
            if frac > T::of(0.5) {
                lo + T::one()
            } else {
                lo
            }
        }
        Rounding::Stochastic => {
            if frac > T::zero() && uniform::<T, _>(rng) < frac {
                lo + T::one()
            } else {
                lo
            }
        }
    };
    let q = mag / n;
    if y < T::zero() {
        -q
    } else {
        q
    }
}

/// Quantizes one value onto the `k`-bit grid.
pub fn quantize_scalar<T: Scalar, R: Rng + ?Sized>(x: T, k: u32, mode: Rounding, rng: &mut R) -> Result<T> {
    check_bits(k)?;
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("cannot quantize non-finite value {x}")));
    }
    Ok(snap(x, T::of(half_levels(k) as f64), mode, rng))
}

/// Clips every entry to `[-1, 1]` and snaps it to the `k`-bit grid.
pub fn quantize_uniform<T, S, D, R>(
    x: &ArrayBase<S, D>,
    k: u32,
    mode: Rounding,
    rng: &mut R,
) -> Result<Array<T, D>>
where
    T: Scalar,
    S: Data<Elem = T>,
    D: Dimension,
    R: Rng + ?Sized,
{
    let mut out = x.to_owned();
    quantize_in_place(&mut out, k, mode, rng)?;
    Ok(out)
}

/// In-place form of [`quantize_uniform`].
pub fn quantize_in_place<T, D, R>(x: &mut Array<T, D>, k: u32, mode: Rounding, rng: &mut R) -> Result<()>
where
    T: Scalar,
    D: Dimension,
    R: Rng + ?Sized,
{
    check_bits(k)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("cannot quantize non-finite values".into()));
    }
    let n = T::of(half_levels(k) as f64);
    x.mapv_inplace(|v| snap(v, n, mode, rng));
    Ok(())
}

/// Scales by `1 / max|x|`, quantizes at `k` bits, and scales back.
/// `k = 0` is the identity and an all-zero tensor passes through unchanged.
pub fn quantize_scaled<T, S, D, R>(
    x: &ArrayBase<S, D>,
    k: u32,
    mode: Rounding,
    rng: &mut R,
) -> Result<Array<T, D>>
where
    T: Scalar,
    S: Data<Elem = T>,
    D: Dimension,
    R: Rng + ?Sized,
{
    let mut out = x.to_owned();
    if k == 0 {
        return Ok(out);
    }
    check_bits(k)?;
    let scale = out.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if !scale.is_finite() {
        return Err(Error::InvalidInput("cannot quantize non-finite values".into()));
    }
    if scale == T::zero() {
        return Ok(out);
    }
    let n = T::of(half_levels(k) as f64);
    out.mapv_inplace(|v| snap(v / scale, n, mode, rng) * scale);
    Ok(out)
}

/// Error-signal quantizer (per-tensor max-abs scaling).
pub fn quantize_error<T, S, D, R>(e: &ArrayBase<S, D>, k_e: u32, mode: Rounding, rng: &mut R) -> Result<Array<T, D>>
where
    T: Scalar,
    S: Data<Elem = T>,
    D: Dimension,
    R: Rng + ?Sized,
{
    quantize_scaled(e, k_e, mode, rng)
}

/// Gradient quantizer (per-tensor max-abs scaling).
pub fn quantize_gradient<T, S, D, R>(g: &ArrayBase<S, D>, k_g: u32, mode: Rounding, rng: &mut R) -> Result<Array<T, D>>
where
    T: Scalar,
    S: Data<Elem = T>,
    D: Dimension,
    R: Rng + ?Sized,
{
    quantize_scaled(g, k_g, mode, rng)
}
