//! Dense linear-algebra kernels used by the decomposition and landscape code.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slower than a
//! bidiagonalization-based solver but accurate to working precision and generic
//! over [`Scalar`], which is all the desk-scale matrices here need.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::Scalar;

/// Thin SVD `a = u · diag(s) · vᵀ`, singular values in descending order.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Array2<T>,
    pub s: Array1<T>,
    pub v: Array2<T>,
}

pub fn svd<T: Scalar>(a: ArrayView2<'_, T>) -> Svd<T> {
    let (m, n) = a.dim();
    if m >= n {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(a.t());
        Svd { u: t.v, s: t.s, v: t.u }
    }
}

// Requires m >= n. Works on the transpose so that columns are contiguous rows.
fn jacobi_tall<T: Scalar>(a: ArrayView2<'_, T>) -> Svd<T> {
    let (m, n) = a.dim();
    let mut w: Array2<T> = a.t().to_owned(); // n x m, row j = column j of a
    let mut v: Array2<T> = Array2::eye(n); // row j = column j of V
    let eps = T::epsilon();
    let two = T::of(2.0);

    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let rp = w.row(p);
                    let rq = w.row(q);
                    let mut a_ = T::zero();
                    let mut b_ = T::zero();
                    let mut g_ = T::zero();
                    for (&x, &y) in rp.iter().zip(rq.iter()) {
                        a_ += x * x;
                        b_ += y * y;
                        g_ += x * y;
                    }
                    (a_, b_, g_)
                };
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let sn = c * t;
                rotate_rows(&mut w, p, q, c, sn);
                rotate_rows(&mut v, p, q, c, sn);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<T> = w.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let smax = order.first().map(|&i| norms[i]).unwrap_or_else(T::zero);
    let tiny = smax * eps * T::of_usize(m.max(n));
    let mut u = Array2::<T>::zeros((m, n));
    let mut s_out = Array1::<T>::zeros(n);
    let mut v_out = Array2::<T>::zeros((n, n));
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        v_out.column_mut(k).assign(&v.row(j));
        if sigma > tiny && sigma > T::zero() {
            s_out[k] = sigma;
            u.column_mut(k).assign(&w.row(j).mapv(|x| x / sigma));
        } else {
            deficient.push(k);
        }
    }
    if !deficient.is_empty() {
        complete_columns(&mut u, &deficient);
    }
    Svd { u, s: s_out, v: v_out }
}

#[inline]
fn rotate_rows<T: Scalar>(w: &mut Array2<T>, p: usize, q: usize, c: T, s: T) {
    let (mut rp, mut rq) = w.multi_slice_mut((s![p, ..], s![q, ..]));
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

// Fill the listed (zero) columns with unit vectors orthogonal to the rest.
fn complete_columns<T: Scalar>(u: &mut Array2<T>, slots: &[usize]) {
    let m = u.nrows();
    let mut next_basis = 0usize;
    for &slot in slots {
        loop {
            assert!(next_basis < m, "cannot complete an orthonormal basis");
            let mut cand = Array1::<T>::zeros(m);
            cand[next_basis] = T::one();
            next_basis += 1;
            for _ in 0..2 {
                for j in 0..u.ncols() {
                    if j == slot {
                        continue;
                    }
                    let col = u.column(j);
                    let proj = col.dot(&cand);
                    cand.scaled_add(-proj, &col);
                }
            }
            let nrm = cand.dot(&cand).sqrt();
            if nrm > T::of(1e-6) {
                u.column_mut(slot).assign(&cand.mapv(|x| x / nrm));
                break;
            }
        }
    }
}

/// Orthonormalizes the columns of `z` (modified Gram-Schmidt, two passes),
/// drops numerically dependent columns, and pads with basis vectors so the
/// result has exactly `want` orthonormal columns.
pub fn orthonormal_basis<T: Scalar>(z: ArrayView2<'_, T>, want: usize) -> Array2<T> {
    let m = z.nrows();
    assert!(want <= m, "requested {want} orthonormal columns in dimension {m}");
    let mut q = Array2::<T>::zeros((m, want));
    let mut filled = 0usize;
    let scale = z.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    for col in z.axis_iter(Axis(1)) {
        if filled == want {
            break;
        }
        let mut c = col.to_owned();
        let before = c.dot(&c).sqrt();
        if before == T::zero() {
            continue;
        }
        for _ in 0..2 {
            for j in 0..filled {
                let qj = q.column(j);
                let proj = qj.dot(&c);
                c.scaled_add(-proj, &qj);
            }
        }
        let after = c.dot(&c).sqrt();
        if after > before * (T::epsilon() * T::of(1e3)).max(T::of(1e-10)) && after > scale * T::epsilon() {
            q.column_mut(filled).assign(&c.mapv(|x| x / after));
            filled += 1;
        }
    }
    if filled < want {
        let slots: Vec<usize> = (filled..want).collect();
        complete_columns(&mut q, &slots);
    }
    q
}

pub fn frobenius<T: Scalar>(a: ArrayView2<'_, T>) -> T {
    a.iter().map(|&x| x * x).sum::<T>().sqrt()
}
