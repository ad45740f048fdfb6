//! Low-rank gradient approximations `Δ · diag(Σ) · Xᵀ`.

mod nmf;
mod sbpca;

pub use nmf::{nmf, nmf_factorize, NmfFactors};
pub use sbpca::{sbpca, StreamingPca};

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Svd,
    Nmf,
    Sbpca,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svd" => Ok(Algorithm::Svd),
            "nmf" => Ok(Algorithm::Nmf),
            "sbpca" => Ok(Algorithm::Sbpca),
            other => Err(Error::Config(format!("unknown decomposition algorithm {other:?} (svd, nmf, sbpca)"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Svd => "svd",
            Algorithm::Nmf => "nmf",
            Algorithm::Sbpca => "sbpca",
        })
    }
}

/// Which low-rank approximation to apply to every layer gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DecompositionSpec {
    pub algorithm: Algorithm,
    pub rank: usize,
    /// Multiplicative-update steps (NMF) or subspace iterations (SBPCA).
    pub iters: usize,
    pub seed: u64,
}

impl DecompositionSpec {
    pub fn new(algorithm: Algorithm, rank: usize, iters: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("decomposition rank must be at least 1".into()));
        }
        if iters == 0 {
            return Err(Error::Config("decomposition iteration budget must be at least 1".into()));
        }
        Ok(Self { algorithm, rank, iters, seed })
    }

    /// The rank used for an `m × n` gradient and whether it had to be clamped.
    pub fn rank_for(&self, m: usize, n: usize) -> (usize, bool) {
        let cap = m.min(n);
        if self.rank > cap {
            (cap, true)
        } else {
            (self.rank, false)
        }
    }
}

/// Factored gradient: `left` is `m × k`, `weights` has length `k`, `right` is `n × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGradient<T> {
    pub left: Array2<T>,
    pub weights: Array1<T>,
    pub right: Array2<T>,
}

const LOW_RANK_MAGIC: &[u8; 4] = b"XBLR";
const DENSE_MAGIC: &[u8; 4] = b"XBDN";

impl<T: Scalar> LowRankGradient<T> {
    pub fn zeros(m: usize, n: usize, k: usize) -> Self {
        Self { left: Array2::zeros((m, k)), weights: Array1::zeros(k), right: Array2::zeros((n, k)) }
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.left.nrows(), self.right.nrows())
    }

    /// Dense `Δ · diag(Σ) · Xᵀ`.
    pub fn reconstruct(&self) -> Result<Array2<T>> {
        let k = self.weights.len();
        if self.left.ncols() != k || self.right.ncols() != k {
            return Err(Error::Shape(format!(
                "left has {} columns, weights {k}, right {} columns",
                self.left.ncols(),
                self.right.ncols()
            )));
        }
        let scaled = &self.left * &self.weights;
        Ok(scaled.dot(&self.right.t()))
    }

    /// Stored element count, `k(m + n) + k`.
    pub fn storage_len(&self) -> usize {
        let (m, n) = self.shape();
        self.rank() * (m + n) + self.rank()
    }

    /// Binary form: `XBLR`, then `m`, `n`, `k` as little-endian `u32`, then
    /// left, weights and right as little-endian `f64`, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, n) = self.shape();
        let mut out = Vec::with_capacity(16 + 8 * self.storage_len());
        out.extend_from_slice(LOW_RANK_MAGIC);
        for d in [m, n, self.rank()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.left.iter().chain(self.weights.iter()).chain(self.right.iter()) {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != LOW_RANK_MAGIC {
            return Err(Error::Format("not a low-rank gradient record".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (m, n, k) = (dim(0), dim(1), dim(2));
        let count = k * (m + n) + k;
        if bytes.len() != 16 + 8 * count {
            return Err(Error::Format(format!("low-rank record for {m}x{n} rank {k} has wrong length")));
        }
        let vals: Vec<T> = bytes[16..]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let left = Array2::from_shape_vec((m, k), vals[..m * k].to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        let weights = Array1::from(vals[m * k..m * k + k].to_vec());
        let right = Array2::from_shape_vec((n, k), vals[m * k + k..].to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { left, weights, right })
    }
}

/// Binary form of a dense matrix in the same style: `XBDN`, `m`, `n`, `0`, values.
pub fn dense_to_bytes<T: Scalar>(g: ArrayView2<'_, T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * g.len());
    out.extend_from_slice(DENSE_MAGIC);
    for d in [g.nrows(), g.ncols(), 0] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in g.iter() {
        out.extend_from_slice(&v.f64().to_le_bytes());
    }
    out
}

fn check_rank(m: usize, n: usize, k: usize) -> Result<()> {
    if k == 0 || k > m.min(n) {
        return Err(Error::Config(format!("rank {k} is outside 1..={} for a {m}x{n} matrix", m.min(n))));
    }
    Ok(())
}

/// Best rank-`k` approximation in Frobenius norm (top-`k` singular triplets).
pub fn svd_truncate<T: Scalar>(grad: ArrayView2<'_, T>, k: usize) -> Result<LowRankGradient<T>> {
    let (m, n) = grad.dim();
    check_rank(m, n, k)?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("gradient has non-finite entries".into()));
    }
    let f = linalg::svd(grad);
    Ok(LowRankGradient {
        left: f.u.slice(s![.., ..k]).to_owned(),
        weights: f.s.slice(s![..k]).to_owned(),
        right: f.v.slice(s![.., ..k]).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Stream};
    use ndarray::array;

    fn random(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut r = stream(seed, Stream::Custom(30));
        Array2::from_shape_simple_fn((m, n), || normal(&mut r))
    }

    #[test]
    fn identity_pieces() {
        let lr = LowRankGradient { left: array![[1.0], [0.0]], weights: array![1.0], right: array![[1.0], [0.0], [0.0]] };
        assert_eq!(lr.reconstruct().unwrap(), array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let bad = LowRankGradient { left: array![[1.0, 0.0]], weights: array![1.0], right: array![[1.0]] };
        assert!(matches!(bad.reconstruct(), Err(Error::Shape(_))));
    }

    #[test]
    fn rank_one_is_exact_and_full_rank_is_identity() {
        let u = array![1.0, -2.0, 0.5, 3.0];
        let v = array![0.3, 0.1, -0.7];
        let g = u.view().insert_axis(ndarray::Axis(1)).dot(&v.view().insert_axis(ndarray::Axis(0)));
        let r = svd_truncate(g.view(), 1).unwrap().reconstruct().unwrap();
        assert!((&r - &g).iter().all(|d: &f64| d.abs() < 1e-12));
        let g = random(7, 5, 1);
        let r = svd_truncate(g.view(), 5).unwrap().reconstruct().unwrap();
        assert!((&r - &g).iter().all(|d| d.abs() < 1e-10));
        assert!(svd_truncate(g.view(), 6).is_err());
        assert!(svd_truncate(g.view(), 0).is_err());
    }

    #[test]
    fn rank_clamping() {
        let spec = DecompositionSpec::new(Algorithm::Svd, 20, 1, 0).unwrap();
        assert_eq!(spec.rank_for(150, 10), (10, true));
        assert_eq!(spec.rank_for(784, 150), (20, false));
        assert!(DecompositionSpec::new(Algorithm::Nmf, 0, 1, 0).is_err());
    }

    #[test]
    fn storage_and_bytes() {
        let g = random(30, 20, 2);
        let lr = svd_truncate(g.view(), 3).unwrap();
        assert_eq!(lr.storage_len(), 3 * 50 + 3);
        let bytes = lr.to_bytes();
        assert_eq!(bytes.len(), 16 + 8 * lr.storage_len());
        assert_eq!(LowRankGradient::<f64>::from_bytes(&bytes).unwrap(), lr);
        // k < mn / (m + n + 1) = 600 / 51 makes the factored record smaller
        for k in 1..=11 {
            let lr = svd_truncate(g.view(), k).unwrap();
            assert!(lr.to_bytes().len() < dense_to_bytes(g.view()).len(), "k = {k}");
        }
        let lr = svd_truncate(g.view(), 12).unwrap();
        assert!(lr.to_bytes().len() > dense_to_bytes(g.view()).len());
    }

    #[test]
    fn error_nonincreasing_in_rank() {
        let g = random(12, 9, 3);
        let mut last = f64::INFINITY;
        for k in 1..=9 {
            let r = svd_truncate(g.view(), k).unwrap().reconstruct().unwrap();
            let e = linalg::frobenius((&g - &r).view());
            assert!(e <= last + 1e-12);
            last = e;
        }
    }
}
