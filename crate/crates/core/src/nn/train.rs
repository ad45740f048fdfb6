//! Training loops: plain SGD and the device-mediated update pipeline
//! (error quantization, gradient quantization, compression, pulses).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

use super::{cross_entropy, quantize_weights, Dataset, Network};
use crate::decomp::{nmf, Algorithm, DecompositionSpec, StreamingPca};
use crate::device::{
    conductance_to_weight_checked, gradient_to_pulses, weight_to_conductance, DeviceModel, Diagnostics,
};
use crate::error::{Error, Result};
use crate::quant::{quantize_gradient, QuantConfig};
use crate::rng::{stream, SimRng, Stream};
use crate::Scalar;

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig<T> {
    pub lr: T,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` trains in software with plain SGD.
    pub device_model: Option<DeviceModel<T>>,
    pub quant: QuantConfig,
    pub decomposition: Option<DecompositionSpec>,
    /// Pulses that traverse the full conductance range; must match the device model.
    pub p_max: u32,
    pub seed: u64,
    /// Number of batch slices streamed into SBPCA per step.
    pub sbpca_chunks: usize,
    /// Keep a flattened parameter snapshot before training and after every epoch.
    pub keep_checkpoints: bool,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn software(lr: T, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            lr,
            batch_size,
            epochs,
            device_model: None,
            quant: QuantConfig::DISABLED,
            decomposition: None,
            p_max: 1,
            seed,
            sbpca_chunks: 8,
            keep_checkpoints: false,
        }
    }

    pub fn hardware(lr: T, batch_size: usize, epochs: usize, model: DeviceModel<T>, seed: u64) -> Self {
        let p_max = model.p_max();
        Self { device_model: Some(model), p_max, ..Self::software(lr, batch_size, epochs, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > T::zero()) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.p_max == 0 {
            return Err(Error::Config("p_max must be at least 1".into()));
        }
        if let Some(m) = &self.device_model {
            if m.p_max() != self.p_max {
                return Err(Error::Config(format!(
                    "p_max {} does not match the device model's p_max {}",
                    self.p_max,
                    m.p_max()
                )));
            }
        }
        if self.sbpca_chunks == 0 {
            return Err(Error::Config("sbpca_chunks must be at least 1".into()));
        }
        self.quant.validate()
    }
}

/// Observer called with `(layer, gradient)` for every gradient handed to the
/// device, after quantization and decomposition and before learning-rate scaling.
pub type StepProbe<'a, T> = dyn FnMut(usize, &Array2<T>) + 'a;

/// Random streams, warm SBPCA bases and counters carried across update steps.
#[derive(Debug, Clone)]
pub struct UpdateState<T> {
    pub diagnostics: Diagnostics,
    /// Layers whose gradient was too small for the requested rank.
    pub clamped_ranks: Vec<usize>,
    sbpca: Vec<Option<StreamingPca<T>>>,
    device_rng: SimRng,
    quant_rng: SimRng,
    decomp_seed: u64,
    steps: u64,
}

impl<T: Scalar> UpdateState<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            diagnostics: Diagnostics::default(),
            clamped_ranks: Vec::new(),
            sbpca: Vec::new(),
            device_rng: stream(seed, Stream::Device),
            quant_rng: stream(seed, Stream::Quant),
            decomp_seed: crate::rng::splitmix64(seed ^ 0xdec0),
            steps: 0,
        }
    }
}

/// `θ ← θ − lr·∇`, clipped to each layer's weight range.
pub fn software_step<T: Scalar>(net: &mut Network<T>, grads: &[Array2<T>], lr: T) -> Result<()> {
    check_grads(net, grads)?;
    for (layer, g) in net.layers_mut().iter_mut().zip(grads) {
        let wr = layer.weight_range;
        ndarray::Zip::from(&mut layer.weights).and(g).for_each(|w, &g| *w = wr.clip(*w - lr * g));
    }
    Ok(())
}

fn check_grads<T: Scalar>(net: &Network<T>, grads: &[Array2<T>]) -> Result<()> {
    if grads.len() != net.layers().len() {
        return Err(Error::Shape(format!("{} gradients for {} layers", grads.len(), net.layers().len())));
    }
    for (i, (l, g)) in net.layers().iter().zip(grads).enumerate() {
        if l.weights.dim() != g.dim() {
            return Err(Error::Shape(format!("layer {i}: weights {:?}, gradient {:?}", l.weights.dim(), g.dim())));
        }
    }
    Ok(())
}

/// Device-mediated update from batch-mean gradients. SBPCA, when configured,
/// sees each gradient as a one-element stream.
pub fn hardware_aware_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &[Array2<T>],
    cfg: &TrainConfig<T>,
    state: &mut UpdateState<T>,
    probe: Option<&mut StepProbe<'_, T>>,
) -> Result<()> {
    check_grads(net, grads)?;
    let chunks: Vec<Vec<Array2<T>>> = grads.iter().map(|g| vec![g.clone()]).collect();
    hardware_aware_step_streamed(net, &chunks, cfg, state, probe)
}

/// Device-mediated update from per-layer gradient streams whose plain mean is
/// the batch-mean gradient.
///
/// Per layer: (1) quantize the gradient (each stream element) at `k_g`;
/// (2) replace it by its low-rank reconstruction when a decomposition is set;
/// (3)-(4) for every weight, map to conductance, convert `−lr·∇` (as a fraction
/// of the weight range) into stochastically rounded pulses, apply them through
/// the device model and map back; (5) snap to the `k_w` grid when enabled and
/// clip to the weight range. NMF gradients are applied as two device passes,
/// the positive part first and then the negative part.
pub fn hardware_aware_step_streamed<T: Scalar>(
    net: &mut Network<T>,
    streams: &[Vec<Array2<T>>],
    cfg: &TrainConfig<T>,
    state: &mut UpdateState<T>,
    mut probe: Option<&mut StepProbe<'_, T>>,
) -> Result<()> {
    let model = cfg
        .device_model
        .as_ref()
        .ok_or_else(|| Error::Config("hardware-aware step needs a device model".into()))?;
    if streams.len() != net.layers().len() {
        return Err(Error::Shape(format!("{} gradient streams for {} layers", streams.len(), net.layers().len())));
    }
    let quant = cfg.quant;
    state.steps += 1;
    if state.sbpca.len() != streams.len() {
        state.sbpca = vec![None; streams.len()];
    }
    for (l, parts) in streams.iter().enumerate() {
        let dim = net.layers()[l].weights.dim();
        if parts.is_empty() || parts.iter().any(|g| g.dim() != dim) {
            return Err(Error::Shape(format!("layer {l}: gradient stream is empty or mis-shaped")));
        }
        let mut quantized = Vec::with_capacity(parts.len());
        for g in parts {
            quantized.push(quantize_gradient(g, quant.k_g, quant.rounding, &mut state.quant_rng)?);
        }
        let passes: Vec<Array2<T>> = match cfg.decomposition {
            None => vec![mean(&quantized)],
            Some(spec) => {
                let (k, clamped) = spec.rank_for(dim.0, dim.1);
                if clamped && !state.clamped_ranks.contains(&l) {
                    state.clamped_ranks.push(l);
                }
                let seed = spec.seed ^ state.decomp_seed ^ crate::rng::splitmix64(state.steps * 1024 + l as u64);
                match spec.algorithm {
                    Algorithm::Svd => {
                        vec![crate::decomp::svd_truncate(mean(&quantized).view(), k)?.reconstruct()?]
                    }
                    Algorithm::Nmf => {
                        let (pos, neg) = nmf(mean(&quantized).view(), k, spec.iters, seed)?;
                        vec![pos.reconstruct()?, -neg.reconstruct()?]
                    }
                    Algorithm::Sbpca => {
                        let est = match &mut state.sbpca[l] {
                            Some(e) if e.rank() == k => e,
                            slot => slot.insert(StreamingPca::new(k, spec.iters, spec.seed ^ state.decomp_seed ^ l as u64)?),
                        };
                        est.reset();
                        for g in &quantized {
                            est.push(g.view())?;
                        }
                        vec![est.estimate()?.reconstruct()?]
                    }
                }
            }
        };
        for g in &passes {
            if let Some(p) = probe.as_deref_mut() {
                p(l, g);
            }
            device_pass(net, l, g, cfg, model, state)?;
        }
        let layer = &mut net.layers_mut()[l];
        let wr = layer.weight_range;
        quantize_weights(&mut layer.weights, &wr, quant.k_w, quant.rounding, &mut state.quant_rng)?;
    }
    Ok(())
}

fn mean<T: Scalar>(parts: &[Array2<T>]) -> Array2<T> {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc += p;
    }
    acc / T::of_usize(parts.len())
}

fn device_pass<T: Scalar>(
    net: &mut Network<T>,
    l: usize,
    grad: &Array2<T>,
    cfg: &TrainConfig<T>,
    model: &DeviceModel<T>,
    state: &mut UpdateState<T>,
) -> Result<()> {
    let cr = *model.range();
    let layer = &mut net.layers_mut()[l];
    let wr = layer.weight_range;
    let scale = -cfg.lr / wr.span();
    let rng = &mut state.device_rng;
    let diag = &mut state.diagnostics;
    for (w, &g) in layer.weights.iter_mut().zip(grad.iter()) {
        let p = gradient_to_pulses(scale * g, cfg.p_max, rng)?;
        if p.0 == 0 {
            continue;
        }
        diag.pulses_applied += p.magnitude();
        let g0 = weight_to_conductance(*w, &wr, &cr)?;
        let g1 = model.apply_pulses(g0, p, rng);
        *w = conductance_to_weight_checked(g1, &wr, &cr, diag);
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    /// `None` when no test set was supplied.
    pub test_accuracy: Option<f64>,
    pub pulses: u64,
    pub clipped_conductances: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Flattened parameters before training and after each epoch, when kept.
    pub checkpoints: Vec<Array1<f64>>,
    /// Layers whose decomposition rank was clamped.
    pub clamped_ranks: Vec<usize>,
}

/// Trains `net` in place with seeded per-epoch shuffling. Uses plain SGD when
/// `cfg.device_model` is `None`, otherwise the hardware-aware pipeline.
/// `cfg.quant` replaces the network's quantization settings.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &Dataset<T>,
    test_set: Option<&Dataset<T>>,
    cfg: &TrainConfig<T>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.images.ncols() != net.input_size() {
        return Err(Error::Shape(format!(
            "dataset has {} features, network expects {}",
            train_set.images.ncols(),
            net.input_size()
        )));
    }
    net.quant = cfg.quant;
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut state = UpdateState::new(cfg.seed);
    let mut err_rng = stream(cfg.seed, Stream::Custom(0xe));
    let mut checkpoints = Vec::new();
    if cfg.keep_checkpoints {
        checkpoints.push(net.flatten().mapv(|v| v.f64()));
    }
    let streamed = matches!(cfg.decomposition, Some(DecompositionSpec { algorithm: Algorithm::Sbpca, .. }));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let before = state.diagnostics;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let x = train_set.images.select(Axis(0), idx);
            let y: Vec<u8> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let (logits, cache) = net.forward(x.view())?;
            loss_sum += cross_entropy(logits.view(), &y).f64();
            batches += 1;
            match &cfg.device_model {
                None => {
                    let grads = net.backward(&cache, &y, &mut err_rng)?;
                    software_step(net, &grads, cfg.lr)?;
                }
                Some(_) if streamed => {
                    let parts = net.backward_stream(&cache, &y, cfg.sbpca_chunks, &mut err_rng)?;
                    hardware_aware_step_streamed(net, &parts, cfg, &mut state, None)?;
                }
                Some(_) => {
                    let grads = net.backward(&cache, &y, &mut err_rng)?;
                    hardware_aware_step(net, &grads, cfg, &mut state, None)?;
                }
            }
        }
        let test_accuracy = match test_set {
            Some(t) => Some(net.accuracy(t)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            test_accuracy,
            pulses: state.diagnostics.pulses_applied - before.pulses_applied,
            clipped_conductances: state.diagnostics.clipped_conductances - before.clipped_conductances,
        });
        if cfg.keep_checkpoints {
            checkpoints.push(net.flatten().mapv(|v| v.f64()));
        }
    }
    Ok(TrainOutcome { metrics, checkpoints, clamped_ranks: state.clamped_ranks })
}

/// Writes snapshots as `XBT-CKPT v1 <n_params> <n_snapshots>\n` followed by
/// little-endian `f64` values, snapshot-major.
pub fn write_checkpoints(path: impl AsRef<Path>, checkpoints: &[Array1<f64>]) -> Result<()> {
    let n = checkpoints.first().map(|c| c.len()).unwrap_or(0);
    if checkpoints.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("checkpoints have different lengths".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "XBT-CKPT v1 {n} {}", checkpoints.len())?;
    for c in checkpoints {
        for v in c.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_checkpoints(path: impl AsRef<Path>) -> Result<Vec<Array1<f64>>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 4 || f[0] != "XBT-CKPT" || f[1] != "v1" {
        return Err(Error::Format(format!("bad checkpoint header {:?}", header.trim_end())));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad count {s:?}")));
    let (n, count) = (parse(f[2])?, parse(f[3])?);
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != n * count * 8 {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes, header implies {}",
            body.len(),
            n * count * 8
        )));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(vals.chunks(n.max(1)).take(count).map(|c| Array1::from(c.to_vec())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{AnalyticalModel, ConductanceRange, WeightRange};
    use crate::nn::{Init, MlpSpec, Split};
    use rand::Rng;
    use ndarray::array;

    fn cr() -> ConductanceRange<f64> {
        ConductanceRange::new(133.0, 233.0).unwrap()
    }

    fn toy_net(seed: u64, quant: QuantConfig) -> Network<f64> {
        let spec = MlpSpec { sizes: vec![6, 4, 3], init: vec![Init::Uniform(0.5); 2], gains: vec![1.0, 1.0], weight_range: WeightRange::unit() };
        Network::mlp(&spec, quant, &mut stream(seed, Stream::Init)).unwrap()
    }

    fn toy_data(n: usize, seed: u64) -> Dataset<f64> {
        let mut r = stream(seed, Stream::Custom(60));
        let x = Array2::from_shape_simple_fn((n, 6), || r.random::<f64>() * 2.0 - 1.0);
        let y: Vec<u8> = x.outer_iter().map(|row| if row[0] + row[1] > 0.3 { 0 } else if row[2] > 0.0 { 1 } else { 2 }).collect();
        Dataset::new(x, y, Split::Train).unwrap()
    }

    fn grads_for(net: &Network<f64>, data: &Dataset<f64>) -> Vec<Array2<f64>> {
        let (_, c) = net.forward(data.images.view()).unwrap();
        net.backward(&c, &data.labels, &mut stream(0, Stream::Quant)).unwrap()
    }

    #[test]
    fn software_step_arithmetic() {
        let layer = crate::nn::DenseLayer { weights: array![[0.5]], weight_range: WeightRange::unit(), activation: crate::nn::Activation::None, gain: 1.0 };
        let mut net = Network::new(vec![layer], QuantConfig::DISABLED).unwrap();
        software_step(&mut net, &[array![[0.1]]], 0.1).unwrap();
        assert!((net.layers()[0].weights[[0, 0]] - 0.49f64).abs() < 1e-15);
        let before = net.clone();
        software_step(&mut net, &[array![[0.3]]], 0.0).unwrap();
        assert_eq!(net.layers(), before.layers());
    }

    #[test]
    fn ideal_device_approaches_sgd() {
        let data = toy_data(32, 1);
        let net = toy_net(2, QuantConfig::DISABLED);
        let grads = grads_for(&net, &data);
        let lr = 0.5;
        let model: DeviceModel<f64> = AnalyticalModel::ideal(cr(), 1_000_000).into();
        let cfg = TrainConfig::hardware(lr, 32, 1, model, 0);
        let mut hw = net.clone();
        hardware_aware_step(&mut hw, &grads, &cfg, &mut UpdateState::new(0), None).unwrap();
        let mut sw = net.clone();
        software_step(&mut sw, &grads, lr).unwrap();
        for ((h, s), (o, g)) in hw.flatten().iter().zip(sw.flatten().iter()).zip(net.flatten().iter().zip(grads.iter().flat_map(|g| g.iter()))) {
            let want = s - o;
            let got = h - o;
            assert!(
                (got - want).abs() <= 1e-3 * want.abs() + 2.0 / 1e6,
                "step {got} vs {want} (grad {g})"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_network_unchanged() {
        let net = toy_net(3, QuantConfig::DISABLED);
        let zeros: Vec<Array2<f64>> = net.layers().iter().map(|l| Array2::zeros(l.weights.dim())).collect();
        let model: DeviceModel<f64> = AnalyticalModel::real(cr(), 100).into();
        let cfg = TrainConfig::hardware(1.0, 8, 1, model, 0);
        let mut hw = net.clone();
        hardware_aware_step(&mut hw, &zeros, &cfg, &mut UpdateState::new(1), None).unwrap();
        assert_eq!(hw.flatten(), net.flatten());
    }

    #[test]
    fn missing_device_model_is_config_error() {
        let mut net = toy_net(3, QuantConfig::DISABLED);
        let zeros: Vec<Array2<f64>> = net.layers().iter().map(|l| Array2::zeros(l.weights.dim())).collect();
        let cfg = TrainConfig::software(0.1, 8, 1, 0);
        let r = hardware_aware_step(&mut net, &zeros, &cfg, &mut UpdateState::new(1), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn probe_sees_reconstructed_low_rank_gradient() {
        let data = toy_data(40, 4);
        let net = toy_net(5, QuantConfig::DISABLED);
        let grads = grads_for(&net, &data);
        for algorithm in [Algorithm::Svd, Algorithm::Nmf, Algorithm::Sbpca] {
            let model: DeviceModel<f64> = AnalyticalModel::ideal(cr(), 100).into();
            let mut cfg = TrainConfig::hardware(0.5, 40, 1, model, 0);
            cfg.decomposition = Some(DecompositionSpec::new(algorithm, 1, 20, 9).unwrap());
            let mut seen: Vec<(usize, Array2<f64>)> = Vec::new();
            let mut probe = |l: usize, g: &Array2<f64>| seen.push((l, g.clone()));
            let mut hw = net.clone();
            hardware_aware_step(&mut hw, &grads, &cfg, &mut UpdateState::new(0), Some(&mut probe)).unwrap();
            let per_layer = if algorithm == Algorithm::Nmf { 2 } else { 1 };
            assert_eq!(seen.len(), 2 * per_layer);
            for (l, g) in &seen {
                let s = crate::linalg::svd(g.view()).s;
                assert!(s[1] <= 1e-10 * s[0].max(1e-300), "{algorithm}: layer {l} is not rank 1: {s}");
                assert!((g - &grads[*l]).iter().any(|d| d.abs() > 1e-9), "{algorithm}: raw gradient reached the device");
            }
        }
    }

    #[test]
    fn ternary_training_stays_ternary_and_in_range() {
        let data = toy_data(64, 6);
        let quant = QuantConfig::wage_2888();
        let spec = MlpSpec { sizes: vec![6, 4, 3], init: vec![Init::Uniform(1.0); 2], gains: vec![1.0, 1.0], weight_range: WeightRange::unit() };
        let mut net = Network::mlp(&spec, quant, &mut stream(7, Stream::Init)).unwrap();
        assert!(net.flatten().iter().any(|&w| w != 0.0));
        let model: DeviceModel<f64> = crate::device::make_fefet_preset(0.01, cr(), 3).unwrap().into();
        let mut cfg = TrainConfig::hardware(4.76, 16, 3, model, 3);
        cfg.quant = quant;
        let mut state = UpdateState::new(3);
        for _ in 0..5 {
            let grads = grads_for(&net, &data);
            hardware_aware_step(&mut net, &grads, &cfg, &mut state, None).unwrap();
            assert!(net.flatten().iter().all(|&w| w == -1.0 || w == 0.0 || w == 1.0));
        }
        assert!(state.diagnostics.pulses_applied > 0);
    }

    #[test]
    fn training_is_deterministic_and_records_checkpoints() {
        let data = toy_data(50, 8);
        let mut cfg = TrainConfig::software(0.5, 16, 3, 11);
        cfg.keep_checkpoints = true;
        let mut a = toy_net(9, QuantConfig::DISABLED);
        let mut b = toy_net(9, QuantConfig::DISABLED);
        let oa = train(&mut a, &data, Some(&data), &cfg).unwrap();
        let ob = train(&mut b, &data, Some(&data), &cfg).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_eq!(oa.metrics, ob.metrics);
        assert_eq!(oa.checkpoints.len(), 4);
        assert_eq!(oa.checkpoints[3], a.flatten());

        let mut c = toy_net(9, QuantConfig::DISABLED);
        let before = c.flatten();
        cfg.epochs = 0;
        let oc = train(&mut c, &data, None, &cfg).unwrap();
        assert!(oc.metrics.is_empty());
        assert_eq!(c.flatten(), before);
    }

    #[test]
    fn hardware_training_with_every_decomposition_runs() {
        let data = toy_data(48, 10);
        for algorithm in [Algorithm::Svd, Algorithm::Nmf, Algorithm::Sbpca] {
            let model: DeviceModel<f64> = crate::device::make_fefet_preset(0.05, cr(), 100).unwrap().into();
            let mut cfg = TrainConfig::hardware(0.5, 16, 2, model, 1);
            cfg.decomposition = Some(DecompositionSpec::new(algorithm, 8, 5, 0).unwrap());
            let mut net = toy_net(1, QuantConfig::DISABLED);
            let out = train(&mut net, &data, None, &cfg).unwrap();
            assert_eq!(out.clamped_ranks, vec![0, 1], "{algorithm}");
            assert!(net.flatten().iter().all(|w| (-1.0..=1.0).contains(w)));
        }
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let cks = vec![array![1.0, 2.0, 3.0], array![-1.0, 0.5, 1e-300]];
        write_checkpoints(&path, &cks).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"XBT-CKPT v1 3 2\n"));
        assert_eq!(bytes.len(), "XBT-CKPT v1 3 2\n".len() + 48);
        assert_eq!(read_checkpoints(&path).unwrap(), cks);
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_checkpoints(&path).is_err());
    }

    #[test]
    fn software_trajectory_matches_hand_rolled_sgd() {
        // independent SGD: explicit loops, no ndarray products
        let data = toy_data(20, 12);
        let mut net = toy_net(13, QuantConfig::DISABLED);
        let mut w1: Vec<Vec<f64>> = net.layers()[0].weights.outer_iter().map(|r| r.to_vec()).collect();
        let mut w2: Vec<Vec<f64>> = net.layers()[1].weights.outer_iter().map(|r| r.to_vec()).collect();
        let lr = 0.7;
        for _ in 0..10 {
            let grads = grads_for(&net, &data);
            software_step(&mut net, &grads, lr).unwrap();
            let n = data.len() as f64;
            let mut g1 = vec![vec![0.0; 4]; 6];
            let mut g2 = vec![vec![0.0; 3]; 4];
            for (x, &y) in data.images.outer_iter().zip(&data.labels) {
                let z1: Vec<f64> = (0..4).map(|j| (0..6).map(|i| x[i] * w1[i][j]).sum()).collect();
                let h: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
                let z2: Vec<f64> = (0..3).map(|j| (0..4).map(|i| h[i] * w2[i][j]).sum()).collect();
                let m = z2.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z2.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let d2: Vec<f64> = (0..3).map(|j| e[j] / s - if j == y as usize { 1.0 } else { 0.0 }).collect();
                for i in 0..4 {
                    for j in 0..3 {
                        g2[i][j] += h[i] * d2[j] / n;
                    }
                }
                for i in 0..4 {
                    let back: f64 = (0..3).map(|j| d2[j] * w2[i][j]).sum::<f64>() * if z1[i] > 0.0 { 1.0 } else { 0.0 };
                    for k in 0..6 {
                        g1[k][i] += x[k] * back / n;
                    }
                }
            }
            for i in 0..6 {
                for j in 0..4 {
                    w1[i][j] = (w1[i][j] - lr * g1[i][j]).clamp(-1.0, 1.0);
                }
            }
            for i in 0..4 {
                for j in 0..3 {
                    w2[i][j] = (w2[i][j] - lr * g2[i][j]).clamp(-1.0, 1.0);
                }
            }
            for (i, row) in net.layers()[0].weights.outer_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    assert!((v - w1[i][j]).abs() <= 1e-12);
                }
            }
            for (i, row) in net.layers()[1].weights.outer_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    assert!((v - w2[i][j]).abs() <= 1e-12);
                }
            }
        }
    }
}
