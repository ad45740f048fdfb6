use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::{converter, AcceleratorConfig};
use crate::error::{Error, Result};
use crate::rng::uniform;
use crate::nn::Network;
use crate::Scalar;

/// Stateless crossbar product `θᵀ·input` with the input scale set to `max|input|`.
pub fn stateless_infer<T: Scalar, R: Rng + ?Sized>(
    theta: ArrayView2<'_, T>,
    input: ArrayView1<'_, T>,
    cfg: &AcceleratorConfig<T>,
    rng: &mut R,
) -> Result<Array1<T>> {
    let m = input.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    stateless_infer_scaled(theta, input, if m > T::zero() { m } else { T::one() }, cfg, rng)
}

/// Streams the differential encoding of `theta` one input row at a time:
/// each device's conductance is computed on the fly, read with fresh uniform
/// read noise, and accumulated into the column currents. Nothing but the two
/// current vectors and the output is allocated, and no stuck faults apply.
pub fn stateless_infer_scaled<T: Scalar, R: Rng + ?Sized>(
    theta: ArrayView2<'_, T>,
    input: ArrayView1<'_, T>,
    input_scale: T,
    cfg: &AcceleratorConfig<T>,
    rng: &mut R,
) -> Result<Array1<T>> {
    cfg.validate()?;
    let (n_in, n_out) = theta.dim();
    if input.len() != n_in {
        return Err(Error::Shape(format!("input has {} entries, weights have {n_in} rows", input.len())));
    }
    if !(input_scale > T::zero()) {
        return Err(Error::Config(format!("input scale must be positive, got {input_scale}")));
    }
    let s = theta.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let s = if s > T::zero() { s } else { T::one() };
    let cr = cfg.cr;
    let k = cr.span() / s;
    let h = cfg.read_noise_halfwidth;
    let two = T::of(2.0);
    let mut i_pos = Array1::<T>::zeros(n_out);
    let mut i_neg = Array1::<T>::zeros(n_out);
    for (row, &x) in theta.outer_iter().zip(input.iter()) {
        let v = converter(x / input_scale, T::one(), cfg.dac_bits) * cfg.v_read;
        for (j, &t) in row.iter().enumerate() {
            let mut gp = cr.g_min + t.max(T::zero()) * k;
            let mut gn = cr.g_min + (-t).max(T::zero()) * k;
            if h > T::zero() {
                gp += h * (two * uniform::<T, _>(rng) - T::one());
                gn += h * (two * uniform::<T, _>(rng) - T::one());
            }
            i_pos[j] += v * gp;
            i_neg[j] += v * gn;
        }
    }
    let fs = T::of_usize(n_in) * cr.g_max * cfg.v_read;
    let out_scale = s / (cr.span() * cfg.v_read) * input_scale;
    i_pos.zip_mut_with(&i_neg, |p, &n| {
        *p = (converter(*p, fs, cfg.adc_bits) - converter(n, fs, cfg.adc_bits)) * out_scale;
    });
    Ok(i_pos)
}

/// Runs a whole network through the stateless path, one layer at a time.
///
/// Only the current activation vector is kept between layers, so memory use
/// does not grow with depth.
pub fn stateless_forward<T: Scalar, R: Rng + ?Sized>(
    net: &Network<T>,
    input: ArrayView1<'_, T>,
    cfg: &AcceleratorConfig<T>,
    rng: &mut R,
) -> Result<Array1<T>> {
    let mut a = input.to_owned();
    for (l, layer) in net.layers().iter().enumerate() {
        let mut z = stateless_infer(layer.weights.view(), a.view(), cfg, rng)?;
        z.mapv_inplace(|v| v * layer.gain);
        let z = z.insert_axis(Axis(0));
        a = net.hidden_activation(&z, l)?.index_axis_move(Axis(0), 0);
    }
    Ok(a)
}
