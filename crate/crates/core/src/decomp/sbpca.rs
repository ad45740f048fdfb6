use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::LowRankGradient;
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_basis, svd};
use crate::rng::{normal, stream, SimRng, Stream};
use crate::Scalar;

/// Streaming batch PCA of a sequence of gradient contributions.
///
/// The estimator keeps the running mean `M` of the contributions pushed since
/// the last [`reset`](Self::reset) and an `m × k` orthonormal basis `Q` that
/// survives resets (a warm start). Each push stacks `Q` with a random sketch of
/// the new contribution, orthonormalizes, runs `iters` subspace iterations
/// against `M Mᵀ`, and keeps the top `k` Ritz vectors.
#[derive(Debug, Clone)]
pub struct StreamingPca<T> {
    k: usize,
    iters: usize,
    basis: Option<Array2<T>>,
    mean: Option<Array2<T>>,
    count: usize,
    rng: SimRng,
}

impl<T: Scalar> StreamingPca<T> {
    pub fn new(k: usize, iters: usize, seed: u64) -> Result<Self> {
        if k == 0 || iters == 0 {
            return Err(Error::Config("SBPCA needs rank >= 1 and iters >= 1".into()));
        }
        Ok(Self { k, iters, basis: None, mean: None, count: 0, rng: stream(seed, Stream::Decomp) })
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    /// Current orthonormal basis, if any contribution has been seen.
    pub fn basis(&self) -> Option<&Array2<T>> {
        self.basis.as_ref()
    }

    /// Forgets the accumulated mean but keeps the basis.
    pub fn reset(&mut self) {
        self.mean = None;
        self.count = 0;
    }

    pub fn push(&mut self, g: ArrayView2<'_, T>) -> Result<()> {
        let (m, n) = g.dim();
        if let Some(mean) = &self.mean {
            if mean.dim() != (m, n) {
                return Err(Error::Shape(format!("stream element {m}x{n} after {:?}", mean.dim())));
            }
        }
        if self.k > m.min(n) {
            return Err(Error::Config(format!("rank {} exceeds min({m}, {n})", self.k)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("stream element has non-finite entries".into()));
        }
        self.count += 1;
        let w = T::one() / T::of_usize(self.count);
        match &mut self.mean {
            None => self.mean = Some(g.to_owned()),
            Some(mean) => mean.zip_mut_with(&g, |a, &b| *a = *a + (b - *a) * w),
        }
        let mean = self.mean.as_ref().expect("mean set above");

        let k = self.k;
        let omega = Array2::from_shape_simple_fn((n, k), || normal::<T, _>(&mut self.rng));
        let sketch = g.dot(&omega);
        let stacked = match &self.basis {
            Some(q) if q.nrows() == m => concatenate(Axis(1), &[q.view(), sketch.view()]).expect("same row count"),
            _ => sketch,
        };
        let width = stacked.ncols().min(m);
        let mut z = orthonormal_basis(stacked.view(), width);
        for _ in 0..self.iters {
            let y = mean.dot(&mean.t().dot(&z));
            z = orthonormal_basis(y.view(), width);
        }
        // Rayleigh-Ritz: rotate Z onto the dominant directions of M within span(Z)
        let small = z.t().dot(mean);
        let f = svd(small.view());
        self.basis = Some(z.dot(&f.u.slice(s![.., ..k])));
        Ok(())
    }

    /// Rank-`k` approximation of the accumulated mean within the current basis.
    pub fn estimate(&self) -> Result<LowRankGradient<T>> {
        let (q, mean) = match (&self.basis, &self.mean) {
            (Some(q), Some(m)) => (q, m),
            _ => return Err(Error::Usage("SBPCA estimate requested before any stream element".into())),
        };
        let small = q.t().dot(mean);
        let f = svd(small.view());
        Ok(LowRankGradient { left: q.dot(&f.u), weights: f.s, right: f.v })
    }
}

/// Rank-`k` approximation of the mean of `stream`, from a fresh estimator.
pub fn sbpca<T: Scalar>(
    grad_batch_stream: &[Array2<T>],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<LowRankGradient<T>> {
    if grad_batch_stream.is_empty() {
        return Err(Error::InvalidInput("SBPCA stream is empty".into()));
    }
    let mut est = StreamingPca::new(k, iters, seed)?;
    for g in grad_batch_stream {
        est.push(g.view())?;
    }
    est.estimate()
}
