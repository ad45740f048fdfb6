use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use super::LowRankGradient;
use crate::error::{Error, Result};
use crate::rng::{stream, uniform, Stream};
use crate::Scalar;

/// Nonnegative factors `P ≈ W · H` and, optionally, the objective after each update.
#[derive(Debug, Clone)]
pub struct NmfFactors<T> {
    pub w: Array2<T>,
    pub h: Array2<T>,
    /// `‖P − WH‖_F²` after every iteration when tracing was requested.
    pub objective: Vec<T>,
}

impl<T: Scalar> NmfFactors<T> {
    /// Normalised form: unit-norm columns of `W` and rows of `H`, magnitudes in the weights.
    pub fn to_low_rank(&self) -> LowRankGradient<T> {
        let k = self.w.ncols();
        let mut left = self.w.clone();
        let mut right = self.h.t().to_owned();
        let mut weights = Array1::zeros(k);
        for j in 0..k {
            let a = left.column(j).dot(&left.column(j)).sqrt();
            let b = right.column(j).dot(&right.column(j)).sqrt();
            if a > T::zero() && b > T::zero() {
                left.column_mut(j).mapv_inplace(|v| v / a);
                right.column_mut(j).mapv_inplace(|v| v / b);
                weights[j] = a * b;
            } else {
                left.column_mut(j).fill(T::zero());
                right.column_mut(j).fill(T::zero());
            }
        }
        LowRankGradient { left, weights, right }
    }
}

fn objective_value<T: Scalar>(p: &ArrayView2<'_, T>, w: &Array2<T>, h: &Array2<T>) -> T {
    let r = w.dot(h);
    p.iter().zip(r.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// Multiplicative-update (Lee–Seung) NMF of a nonnegative matrix at rank `k`.
/// An all-zero input short-circuits to zero factors.
pub fn nmf_factorize<T: Scalar, R: Rng + ?Sized>(
    p: ArrayView2<'_, T>,
    k: usize,
    iters: usize,
    trace: bool,
    rng: &mut R,
) -> Result<NmfFactors<T>> {
    let (m, n) = p.dim();
    if k == 0 || iters == 0 {
        return Err(Error::Config("NMF needs rank >= 1 and iters >= 1".into()));
    }
    if p.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::InvalidInput("NMF input must be finite and nonnegative".into()));
    }
    let mean = p.iter().copied().sum::<T>() / T::of_usize(p.len().max(1));
    if mean == T::zero() {
        return Ok(NmfFactors { w: Array2::zeros((m, k)), h: Array2::zeros((k, n)), objective: vec![T::zero(); if trace { iters } else { 0 }] });
    }
    let scale = (mean / T::of_usize(k)).sqrt();
    let mut w = Array2::from_shape_simple_fn((m, k), || (uniform::<T, _>(rng) + T::of(1e-3)) * scale);
    let mut h = Array2::from_shape_simple_fn((k, n), || (uniform::<T, _>(rng) + T::of(1e-3)) * scale);
    let tiny = T::min_positive_value().sqrt();
    let mut objective = Vec::with_capacity(if trace { iters } else { 0 });
    for _ in 0..iters {
        let num_h = w.t().dot(&p);
        let den_h = w.t().dot(&w).dot(&h);
        ndarray::Zip::from(&mut h).and(&num_h).and(&den_h).for_each(|h, &a, &b| *h = *h * a / (b + tiny));
        let num_w = p.dot(&h.t());
        let den_w = w.dot(&h.dot(&h.t()));
        ndarray::Zip::from(&mut w).and(&num_w).and(&den_w).for_each(|w, &a, &b| *w = *w * a / (b + tiny));
        if trace {
            objective.push(objective_value(&p, &w, &h));
        }
    }
    Ok(NmfFactors { w, h, objective })
}

/// Splits `grad` into `max(grad, 0)` and `max(-grad, 0)` and factorizes each part
/// at rank `k`. The gradient is approximated by `pos.reconstruct() - neg.reconstruct()`.
pub fn nmf<T: Scalar>(
    grad: ArrayView2<'_, T>,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(LowRankGradient<T>, LowRankGradient<T>)> {
    let mut rng = stream(seed, Stream::Decomp);
    nmf_split(grad, k, iters, &mut rng)
}

pub(crate) fn nmf_split<T: Scalar, R: Rng + ?Sized>(
    grad: ArrayView2<'_, T>,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<(LowRankGradient<T>, LowRankGradient<T>)> {
    let (m, n) = grad.dim();
    if k > m.min(n) {
        return Err(Error::Config(format!("rank {k} exceeds min({m}, {n})")));
    }
    let pos = grad.mapv(|v| v.max(T::zero()));
    let neg = grad.mapv(|v| (-v).max(T::zero()));
    let fp = nmf_factorize(pos.view(), k, iters, false, rng)?;
    let fn_ = nmf_factorize(neg.view(), k, iters, false, rng)?;
    Ok((fp.to_low_rank(), fn_.to_low_rank()))
}
