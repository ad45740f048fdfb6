//! Loss surfaces over two perturbation directions and projection of a training
//! trajectory onto its leading principal components.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::nn::{Dataset, Network};
use crate::rng::normal;
use crate::Scalar;

/// Evaluation switches for [`loss_surface`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceOptions {
    /// Perturb only these layers; the directions then cover just their weights.
    pub layer_mask: Option<Vec<usize>>,
    /// Rescale every output unit's slice of a direction to the norm of the
    /// corresponding weights instead of normalizing the whole direction.
    pub filter_norm: bool,
    /// Evaluate on the first `n` samples instead of the full dataset.
    pub subsample: Option<usize>,
}

/// Loss values over the `alphas × betas` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[[i, j]]` is the loss at `(alphas[i], betas[j])`.
    pub losses: Array2<f64>,
    /// Normalized directions actually applied (masked length when masked).
    pub delta: Array1<f64>,
    pub eta: Array1<f64>,
}

impl LandscapeGrid {
    /// CSV with header `alpha,beta,loss`, alpha-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let _ = writeln!(out, "{a},{b},{}", self.losses[[i, j]]);
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Indices into the flattened parameter vector covered by `mask`.
pub fn masked_indices<T: Scalar>(net: &Network<T>, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    let offsets = net.layer_offsets();
    match mask {
        None => Ok((0..net.num_params()).collect()),
        Some(layers) => {
            let mut idx = Vec::new();
            for &l in layers {
                let r = offsets
                    .get(l)
                    .ok_or_else(|| Error::InvalidInput(format!("layer mask names layer {l}, network has {}", offsets.len())))?;
                idx.extend(r.clone());
            }
            Ok(idx)
        }
    }
}

/// A direction with independent standard-normal entries.
pub fn random_direction<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || normal::<f64, _>(rng))
}

fn unit(v: ArrayView1<'_, f64>, name: &str) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!("direction {name} is zero or non-finite")));
    }
    Ok(v.mapv(|x| x / n))
}

// Per output unit (column of an in × out layer), scale the direction slice to
// the norm of the matching weights.
fn filter_normalize<T: Scalar>(net: &Network<T>, idx: &[usize], d: ArrayView1<'_, f64>, name: &str) -> Result<Array1<f64>> {
    let theta = net.flatten();
    let mut full = Array1::<f64>::zeros(net.num_params());
    for (k, &i) in idx.iter().enumerate() {
        full[i] = d[k];
    }
    if full.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput(format!("direction {name} is zero")));
    }
    for (layer, range) in net.layers().iter().zip(net.layer_offsets()) {
        let (rows, cols) = layer.weights.dim();
        for c in 0..cols {
            let cells: Vec<usize> = (0..rows).map(|r| range.start + r * cols + c).collect();
            let dn: f64 = cells.iter().map(|&i| full[i] * full[i]).sum::<f64>().sqrt();
            let wn: f64 = cells.iter().map(|&i| theta[i].f64().powi(2)).sum::<f64>().sqrt();
            let f = if dn > 0.0 { wn / dn } else { 0.0 };
            for &i in &cells {
                full[i] *= f;
            }
        }
    }
    Ok(Array1::from_iter(idx.iter().map(|&i| full[i])))
}

/// Evaluates `L(θ + α·δ/‖δ‖ + β·η/‖η‖)` for every `(α, β)` on the grid, where
/// `θ` is the network's current parameter vector and the loss is the mean
/// cross-entropy over `dataset`.
#[allow(clippy::too_many_arguments)]
pub fn loss_surface<T: Scalar>(
    net: &Network<T>,
    delta: ArrayView1<'_, f64>,
    eta: ArrayView1<'_, f64>,
    alphas: &[f64],
    betas: &[f64],
    dataset: &Dataset<T>,
    opts: &SurfaceOptions,
) -> Result<LandscapeGrid> {
    let idx = masked_indices(net, opts.layer_mask.as_deref())?;
    for (name, d) in [("delta", &delta), ("eta", &eta)] {
        if d.len() != idx.len() {
            return Err(Error::Shape(format!(
                "direction {name} has {} entries, the perturbed parameters number {}",
                d.len(),
                idx.len()
            )));
        }
    }
    let (d, e) = if opts.filter_norm {
        (filter_normalize(net, &idx, delta, "delta")?, filter_normalize(net, &idx, eta, "eta")?)
    } else {
        (unit(delta, "delta")?, unit(eta, "eta")?)
    };
    let n = opts.subsample.unwrap_or(dataset.len()).min(dataset.len());
    let images = dataset.images.slice(s![..n, ..]);
    let labels = &dataset.labels[..n];
    let theta: Vec<f64> = net.flatten().iter().map(|v| v.f64()).collect();
    let mut probe = net.clone();
    let mut flat = Array1::<T>::from_iter(theta.iter().map(|&v| T::of(v)));
    let mut losses = Array2::zeros((alphas.len(), betas.len()));
    for (i, &a) in alphas.iter().enumerate() {
        for (j, &b) in betas.iter().enumerate() {
            for (k, &p) in idx.iter().enumerate() {
                flat[p] = T::of(theta[p] + a * d[k] + b * e[k]);
            }
            probe.set_flat(flat.view())?;
            let l = probe.loss(images, labels)?.f64();
            if !l.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite loss at alpha {a}, beta {b}")));
            }
            losses[[i, j]] = l;
        }
    }
    Ok(LandscapeGrid { alphas: alphas.to_vec(), betas: betas.to_vec(), losses, delta: d, eta: e })
}

/// Leading principal directions of a training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryProjection {
    pub pc1: Array1<f64>,
    pub pc2: Array1<f64>,
    /// One row per checkpoint `θ_0 … θ_n`; the last row is the origin.
    pub coords: Array2<f64>,
    /// Variance shares `σ_i² / Σ σ_j²` of the two components.
    pub explained_variance: (f64, f64),
}

impl TrajectoryProjection {
    /// CSV `epoch,pc1,pc2`, one row per checkpoint starting at epoch 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,pc1,pc2\n");
        for (i, r) in self.coords.outer_iter().enumerate() {
            let _ = writeln!(out, "{i},{},{}", r[0], r[1]);
        }
        out
    }

    /// The sidecar line `explained_variance,<v1>,<v2>`.
    pub fn variance_line(&self) -> String {
        format!("explained_variance,{},{}\n", self.explained_variance.0, self.explained_variance.1)
    }
}

/// PCA of `M = [θ_0 − θ_n, …, θ_{n−1} − θ_n]` via its SVD; every checkpoint is
/// projected onto the top two left singular vectors.
pub fn trajectory_pca(checkpoints: &[Array1<f64>]) -> Result<TrajectoryProjection> {
    if checkpoints.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "trajectory PCA needs at least 3 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let p = checkpoints[0].len();
    if checkpoints.iter().any(|c| c.len() != p) {
        return Err(Error::Shape("checkpoints have different lengths".into()));
    }
    if p < 2 {
        return Err(Error::InvalidInput("trajectory PCA needs at least 2 parameters".into()));
    }
    let last = checkpoints.last().expect("nonempty");
    let n = checkpoints.len() - 1;
    let mut m = Array2::<f64>::zeros((p, n));
    for (i, c) in checkpoints[..n].iter().enumerate() {
        m.column_mut(i).assign(&(c - last));
    }
    if m.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateTrajectory);
    }
    // Work with the n x n Gram matrix: the trajectory is long (all parameters)
    // but has few columns (epochs).
    let gram = m.t().dot(&m);
    let eig = svd(gram.view());
    let total: f64 = eig.s.sum();
    let component = |i: usize| -> Option<Array1<f64>> {
        let lambda = *eig.s.get(i)?;
        if !(lambda > eig.s[0] * 1e-24) {
            return None;
        }
        let mut u = m.dot(&eig.v.column(i));
        let norm = u.dot(&u).sqrt();
        u.mapv_inplace(|x| x / norm);
        Some(u)
    };
    let pc1 = component(0).ok_or(Error::DegenerateTrajectory)?;
    let (pc2, s2) = match component(1) {
        Some(u) => (u, eig.s[1]),
        None => {
            let basis = crate::linalg::orthonormal_basis(pc1.view().insert_axis(ndarray::Axis(1)), 2);
            (basis.column(1).to_owned(), 0.0)
        }
    };
    let mut coords = Array2::zeros((n + 1, 2));
    for (i, c) in checkpoints.iter().enumerate() {
        let d = c - last;
        coords[[i, 0]] = d.dot(&pc1);
        coords[[i, 1]] = d.dot(&pc2);
    }
    Ok(TrajectoryProjection {
        pc1,
        pc2,
        coords,
        explained_variance: (eig.s[0] / total, s2 / total),
    })
}

/// Sum of the two explained-variance shares.
pub fn top2_share(p: &TrajectoryProjection) -> f64 {
    p.explained_variance.0 + p.explained_variance.1
}
