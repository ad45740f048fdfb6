//! Dense multilayer perceptron with cross-entropy loss, MNIST ingestion, and
//! the software and device-mediated training loops.

mod mnist;
mod train;

pub use mnist::{load_idx_images, load_idx_labels, load_mnist, load_mnist_dir, Dataset, Split, Standardization};
pub use train::{
    hardware_aware_step, hardware_aware_step_streamed, read_checkpoints, software_step, train,
    write_checkpoints, EpochMetrics, StepProbe, TrainConfig, TrainOutcome, UpdateState,
};

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::device::WeightRange;
use crate::error::{Error, Result};
use crate::quant::{quantize_error, quantize_in_place, QuantConfig};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    None,
}

/// Bias-free dense layer computing `gain * (x · weights)`, then the activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `in_features × out_features`.
    pub weights: Array2<T>,
    pub weight_range: WeightRange<T>,
    pub activation: Activation,
    /// Fixed forward multiplier, for instance a power of two that brings
    /// ternary weights into a useful pre-activation range.
    pub gain: T,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn in_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.weights.ncols()
    }

    /// Effective linear map `gain * weights`, as it would be programmed onto hardware.
    pub fn effective_weights(&self) -> Array2<T> {
        &self.weights * self.gain
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// A stack of dense layers ending in softmax cross-entropy.
#[derive(Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<DenseLayer<T>>,
    pub quant: QuantConfig,
    generation: u64,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self { layers: self.layers.clone(), quant: self.quant, generation: next_generation() }
    }
}

/// Values cached by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer (the batch, then each hidden activation).
    pub inputs: Vec<Array2<T>>,
    /// Pre-activation of each layer; the last one holds the logits.
    pub pre: Vec<Array2<T>>,
    generation: u64,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Random initialisation of one weight matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init<T> {
    /// Independent uniform draws on `[-h, h]`.
    Uniform(T),
    /// Orthonormal columns (or rows, for wide matrices) rescaled so the
    /// root-mean-square entry equals the given value.
    Orthogonal(T),
}

/// Layer sizes plus initialisation and forward-gain choices for an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec<T> {
    pub sizes: Vec<usize>,
    pub init: Vec<Init<T>>,
    pub gains: Vec<T>,
    pub weight_range: WeightRange<T>,
}

impl<T: Scalar> MlpSpec<T> {
    /// Full-precision network. Hidden layers draw uniformly with half-width
    /// `0.5 · sqrt(6 / fan_in)`; the output layer is semi-orthogonal with
    /// entry RMS `2 · sqrt(2 / fan_in)`.
    pub fn software(sizes: &[usize]) -> Self {
        let n = sizes.len().saturating_sub(1);
        let init = (0..n)
            .map(|l| {
                let fan_in = sizes[l] as f64;
                if l + 1 == n && n > 1 {
                    Init::Orthogonal(T::of(2.0 * (2.0 / fan_in).sqrt()))
                } else {
                    Init::Uniform(T::of(0.5 * (6.0 / fan_in).sqrt()))
                }
            })
            .collect();
        Self { sizes: sizes.to_vec(), init, gains: vec![T::one(); n], weight_range: WeightRange::unit() }
    }

    /// Network whose weights span the whole unit weight range (as conductances
    /// do), with power-of-two forward gains near `1 / sqrt(fan_in)` and the
    /// output layer boosted by 4.
    pub fn hardware(sizes: &[usize]) -> Self {
        let n = sizes.len().saturating_sub(1);
        let gains = (0..n)
            .map(|l| {
                let exp = (sizes[l] as f64).sqrt().log2().round();
                let boost = if l + 1 == n && n > 1 { 4.0 } else { 1.0 };
                T::of(boost * 2f64.powf(-exp))
            })
            .collect();
        Self { sizes: sizes.to_vec(), init: vec![Init::Uniform(T::one()); n], gains, weight_range: WeightRange::unit() }
    }

    pub fn with_gains(mut self, gains: Vec<T>) -> Self {
        self.gains = gains;
        self
    }
}

fn init_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, init: Init<T>, rng: &mut R) -> Array2<T> {
    match init {
        Init::Uniform(h) => Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random::<f64>() * 2.0 - 1.0) * h),
        Init::Orthogonal(rms) => {
            let (tall, short) = (rows.max(cols), rows.min(cols));
            let z = Array2::from_shape_simple_fn((tall, short), || crate::rng::normal::<f64, _>(rng));
            let q = crate::linalg::orthonormal_basis(z.view(), short);
            let scale = rms.f64() * (tall as f64).sqrt();
            let q = q.mapv(|v| T::of(v * scale));
            if rows >= cols {
                q
            } else {
                q.t().to_owned()
            }
        }
    }
}

fn weights_to_unit<T: Scalar>(w: T, wr: &WeightRange<T>) -> T {
    (w - wr.w_min) / wr.span() * T::of(2.0) - T::one()
}

fn unit_to_weights<T: Scalar>(u: T, wr: &WeightRange<T>) -> T {
    (u + T::one()) / T::of(2.0) * wr.span() + wr.w_min
}

/// Snaps weights to the `k`-bit grid of their range rescaled to `[-1, 1]`.
pub fn quantize_weights<T: Scalar, R: Rng + ?Sized>(
    weights: &mut Array2<T>,
    wr: &WeightRange<T>,
    k: u32,
    rounding: crate::quant::Rounding,
    rng: &mut R,
) -> Result<()> {
    if k == 0 {
        weights.mapv_inplace(|w| wr.clip(w));
        return Ok(());
    }
    weights.mapv_inplace(|w| weights_to_unit(wr.clip(w), wr));
    quantize_in_place(weights, k, rounding, rng)?;
    weights.mapv_inplace(|u| wr.clip(unit_to_weights(u, wr)));
    Ok(())
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s: T = row.sum();
        row.mapv_inplace(|v| {
            let p = v / s;
            if p < T::min_positive_value() {
                T::zero()
            } else {
                p
            }
        });
    }
    out
}

/// Mean cross-entropy of `logits` against class `labels`.
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[u8]) -> T {
    let mut total = 0.0f64;
    for (row, &y) in logits.outer_iter().zip(labels) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        total += (lse - row[y as usize]).f64();
    }
    T::of(total / labels.len().max(1) as f64)
}

/// Output-layer error `softmax(logits) - onehot(labels)` per sample.
pub fn output_error<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[u8]) -> Array2<T> {
    let mut e = softmax(logits);
    for (mut row, &y) in e.outer_iter_mut().zip(labels) {
        row[y as usize] -= T::one();
    }
    e
}

/// Scores within this fraction of the row's largest magnitude count as tied.
pub const ARGMAX_TIE_TOLERANCE: f64 = 1e-6;

/// Index of the largest entry of each row. Near-ties (see
/// [`ARGMAX_TIE_TOLERANCE`]) resolve to the lowest index, so evaluation orders
/// that differ only by rounding agree on exactly tied classes.
pub fn argmax_rows<T: Scalar>(x: ArrayView2<'_, T>) -> Vec<usize> {
    let tol = T::from(ARGMAX_TIE_TOLERANCE).unwrap();
    x.outer_iter()
        .map(|r| {
            let mut best = 0;
            let mut scale = T::zero();
            for (i, &v) in r.iter().enumerate() {
                scale = scale.max(v.abs());
                if v > r[best] {
                    best = i;
                }
            }
            let floor = r[best] - tol * scale;
            r.iter().position(|&v| v >= floor).unwrap_or(best)
        })
        .collect()
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<DenseLayer<T>>, quant: QuantConfig) -> Result<Self> {
        quant.validate()?;
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_features() != pair[1].in_features() {
                return Err(Error::Shape(format!(
                    "layer {i} produces {} features but layer {} expects {}",
                    pair[0].out_features(),
                    i + 1,
                    pair[1].in_features()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if !l.gain.is_finite() || l.gain <= T::zero() {
                return Err(Error::Config(format!("layer {i} gain must be positive, got {}", l.gain)));
            }
        }
        Ok(Self { layers, quant, generation: next_generation() })
    }

    /// Builds an MLP from `spec` with uniform random weights. Hidden layers use
    /// ReLU, the output layer is linear. When `quant.k_w` is set the initial
    /// weights are snapped to the weight grid.
    pub fn mlp<R: Rng + ?Sized>(spec: &MlpSpec<T>, quant: QuantConfig, rng: &mut R) -> Result<Self> {
        let n = spec.sizes.len();
        if n < 2 || spec.init.len() != n - 1 || spec.gains.len() != n - 1 {
            return Err(Error::Config(format!(
                "MLP spec needs >= 2 sizes and one init width and gain per layer, got {:?}",
                spec.sizes
            )));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for l in 0..n - 1 {
            let mut w = init_matrix(spec.sizes[l], spec.sizes[l + 1], spec.init[l], rng);
            quantize_weights(&mut w, &spec.weight_range, quant.k_w, quant.rounding, rng)?;
            layers.push(DenseLayer {
                weights: w,
                weight_range: spec.weight_range,
                activation: if l + 2 == n { Activation::None } else { Activation::Relu },
                gain: spec.gains[l],
            });
        }
        Self::new(layers, quant)
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map(|l| l.out_features()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Hidden activation: ReLU, then clip to `[-1, 1]` and quantize when `k_a` is set.
    fn activate(&self, z: &Array2<T>, act: Activation) -> Result<Array2<T>> {
        match act {
            Activation::None => Ok(z.clone()),
            Activation::Relu => {
                if self.quant.k_a == 0 {
                    Ok(z.mapv(|v| v.max(T::zero())))
                } else {
                    let mut a = z.mapv(|v| v.max(T::zero()).min(T::one()));
                    // nearest rounding is deterministic, the stream is never drawn from
                    let mut unused = crate::rng::stream(0, crate::rng::Stream::Quant);
                    quantize_in_place(&mut a, self.quant.k_a, crate::quant::Rounding::Nearest, &mut unused)?;
                    Ok(a)
                }
            }
        }
    }

    /// Applies layer `layer`'s activation to pre-activations `z` (identity for
    /// the output layer), including activation quantization.
    pub fn hidden_activation(&self, z: &Array2<T>, layer: usize) -> Result<Array2<T>> {
        let act = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidInput(format!("no layer {layer}")))?
            .activation;
        self.activate(z, act)
    }

    fn activation_grad(&self, z: T, act: Activation) -> T {
        match act {
            Activation::None => T::one(),
            Activation::Relu => {
                let upper_ok = self.quant.k_a == 0 || z < T::one();
                if z > T::zero() && upper_ok {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    fn check_input(&self, batch: &ArrayView2<'_, T>) -> Result<()> {
        if batch.ncols() != self.input_size() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_size()
            )));
        }
        Ok(())
    }

    /// Forward pass returning the logits and the cache needed by [`Self::backward`].
    pub fn forward(&self, batch: ArrayView2<'_, T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = batch.to_owned();
        for layer in &self.layers {
            let mut z = a.dot(&layer.weights);
            if layer.gain != T::one() {
                z *= layer.gain;
            }
            let next = self.activate(&z, layer.activation)?;
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((a, ForwardCache { inputs, pre, generation: self.generation }))
    }

    /// Logits only, without keeping a cache.
    pub fn predict_logits(&self, batch: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_input(&batch)?;
        let mut a = batch.to_owned();
        for layer in &self.layers {
            let mut z = a.dot(&layer.weights);
            if layer.gain != T::one() {
                z *= layer.gain;
            }
            a = self.activate(&z, layer.activation)?;
        }
        Ok(a)
    }

    /// Predicted classes, processed in chunks of `chunk` rows.
    pub fn predict(&self, images: ArrayView2<'_, T>, chunk: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.nrows());
        for block in images.axis_chunks_iter(Axis(0), chunk.max(1)) {
            out.extend(argmax_rows(self.predict_logits(block)?.view()));
        }
        Ok(out)
    }

    pub fn accuracy(&self, data: &Dataset<T>) -> Result<f64> {
        let pred = self.predict(data.images.view(), 2000)?;
        Ok(accuracy_of(&pred, &data.labels))
    }

    /// Mean cross-entropy over a dataset, evaluated in chunks.
    pub fn loss(&self, images: ArrayView2<'_, T>, labels: &[u8]) -> Result<T> {
        let mut total = 0.0f64;
        for (block, lab) in images.axis_chunks_iter(Axis(0), 2000).zip(labels.chunks(2000)) {
            let logits = self.predict_logits(block)?;
            total += cross_entropy(logits.view(), lab).f64() * lab.len() as f64;
        }
        Ok(T::of(total / labels.len().max(1) as f64))
    }

    fn check_cache(&self, cache: &ForwardCache<T>, labels: &[u8]) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::Usage(
                "forward cache is stale: the network changed after the forward pass".into(),
            ));
        }
        if labels.len() != cache.batch_size() {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                cache.batch_size()
            )));
        }
        let classes = self.output_size();
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(())
    }

    /// Per-layer error signals `∂L/∂z` (already divided by the batch size),
    /// each passed through the error quantizer when `k_e` is set.
    pub fn backward_errors<R: Rng + ?Sized>(
        &self,
        cache: &ForwardCache<T>,
        labels: &[u8],
        rng: &mut R,
    ) -> Result<Vec<Array2<T>>> {
        self.check_cache(cache, labels)?;
        let n = self.layers.len();
        let b = T::of_usize(cache.batch_size());
        let mut errors = vec![Array2::zeros((0, 0)); n];
        let mut delta = output_error(cache.pre[n - 1].view(), labels) / b;
        delta = quantize_error(&delta, self.quant.k_e, self.quant.rounding, rng)?;
        for l in (0..n).rev() {
            if l > 0 {
                let layer = &self.layers[l];
                let mut prev = delta.dot(&layer.weights.t());
                if layer.gain != T::one() {
                    prev *= layer.gain;
                }
                let act = self.layers[l - 1].activation;
                ndarray::Zip::from(&mut prev)
                    .and(&cache.pre[l - 1])
                    .for_each(|p, &z| *p *= self.activation_grad(z, act));
                let prev = quantize_error(&prev, self.quant.k_e, self.quant.rounding, rng)?;
                errors[l] = std::mem::replace(&mut delta, prev);
            } else {
                errors[0] = std::mem::replace(&mut delta, Array2::zeros((0, 0)));
            }
        }
        Ok(errors)
    }

    /// Batch-mean weight gradients of the cross-entropy loss, one per layer.
    pub fn backward<R: Rng + ?Sized>(
        &self,
        cache: &ForwardCache<T>,
        labels: &[u8],
        rng: &mut R,
    ) -> Result<Vec<Array2<T>>> {
        let errors = self.backward_errors(cache, labels, rng)?;
        Ok(self
            .layers
            .iter()
            .zip(errors.iter())
            .zip(cache.inputs.iter())
            .map(|((layer, e), a)| {
                let mut g = a.t().dot(e);
                if layer.gain != T::one() {
                    g *= layer.gain;
                }
                g
            })
            .collect())
    }

    /// Splits the batch gradient into `n_chunks` contributions, one per
    /// contiguous slice of the batch, scaled so their plain mean equals the
    /// batch-mean gradient. Returned per layer.
    pub fn backward_stream<R: Rng + ?Sized>(
        &self,
        cache: &ForwardCache<T>,
        labels: &[u8],
        n_chunks: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Array2<T>>>> {
        let errors = self.backward_errors(cache, labels, rng)?;
        let bsz = cache.batch_size();
        let chunks = n_chunks.clamp(1, bsz.max(1));
        let per = bsz.div_ceil(chunks);
        let factor = T::of_usize(chunks);
        let mut out = Vec::with_capacity(self.layers.len());
        for ((layer, e), a) in self.layers.iter().zip(errors.iter()).zip(cache.inputs.iter()) {
            let mut parts = Vec::with_capacity(chunks);
            let mut start = 0;
            while start < bsz {
                let end = (start + per).min(bsz);
                let a_c = a.slice(ndarray::s![start..end, ..]);
                let e_c = e.slice(ndarray::s![start..end, ..]);
                let mut g = a_c.t().dot(&e_c);
                g *= layer.gain * factor;
                parts.push(g);
                start = end;
            }
            // fewer slices than requested (tiny batch): rescale to keep the mean exact
            if parts.len() != chunks {
                let fix = T::of_usize(parts.len()) / factor;
                for g in &mut parts {
                    *g *= fix;
                }
            }
            out.push(parts);
        }
        Ok(out)
    }

    /// All weights concatenated layer by layer, row-major.
    pub fn flatten(&self) -> Array1<T> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend(l.weights.iter().copied());
        }
        Array1::from(v)
    }

    /// Inverse of [`Self::flatten`]. Values are stored as given (not clipped).
    pub fn set_flat(&mut self, flat: ArrayView1<'_, T>) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, network has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let n = l.weights.len();
            for (w, &v) in l.weights.iter_mut().zip(flat.slice(ndarray::s![off..off + n]).iter()) {
                *w = v;
            }
            off += n;
        }
        Ok(())
    }

    /// Offsets of each layer inside the flattened parameter vector.
    pub fn layer_offsets(&self) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = off..off + l.weights.len();
                off = r.end;
                r
            })
            .collect()
    }

    /// Converts to another scalar type (for instance f32 training, f64 analysis).
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                weights: l.weights.mapv(|v| U::of(v.f64())),
                weight_range: WeightRange { w_min: U::of(l.weight_range.w_min.f64()), w_max: U::of(l.weight_range.w_max.f64()) },
                activation: l.activation,
                gain: U::of(l.gain.f64()),
            })
            .collect();
        Network { layers, quant: self.quant, generation: next_generation() }
    }
}

/// Fraction of predictions equal to the labels.
pub fn accuracy_of(pred: &[usize], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(&p, &y)| p == y as usize).count();
    hits as f64 / labels.len() as f64
}
