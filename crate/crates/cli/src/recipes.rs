//! Recipe execution. Every recipe runs once per seed and records its results
//! as `seed,point,metric,value` rows; recipe-specific dumps go next to
//! `metrics.csv` in the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Axis};
use xbsim::decomp::DecompositionSpec;
use xbsim::device::{make_fefet_preset, AnalyticalModel, ConductanceRange, DeviceModel, TabularModel};
use xbsim::landscape::{loss_surface, masked_indices, random_direction, top2_share, trajectory_pca, SurfaceOptions};
use xbsim::nn::{accuracy_of, load_mnist_dir, read_checkpoints, train, write_checkpoints, Dataset, Init, MlpSpec, Network, TrainConfig, TrainOutcome};
use xbsim::rng::{stream, Stream};
use xbsim::xbar::{
    calibrate_input_scales, infer_network, map_network, stateless_forward, AcceleratorConfig, CrossbarAccelerator, FullScale,
    NetworkMappingOptions,
};
use xbsim::Scalar;

use crate::config::{DeviceKind, ExperimentConfig, Precision, Recipe, TrainMode, TrainSection};
use crate::output::{Metrics, Staging};
use crate::CliError;

/// Training images used to calibrate DAC input scales and ADC full scales.
pub const CALIBRATION_SAMPLES: usize = 1000;

/// Runs the configured recipe for every seed and commits the output
/// directory. Returns the path of the committed directory.
pub fn run(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let staging = Staging::new(&cfg.output_dir)?;
    let metrics = match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, &staging)?,
        Precision::F64 => run_typed::<f64>(cfg, &staging)?,
    };
    std::fs::write(staging.path("metrics.csv"), metrics.to_csv())?;
    Ok(staging.commit()?)
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, staging: &Staging) -> Result<Metrics, CliError> {
    let (train_set, test_set) = load_data::<T>(cfg)?;
    let mut metrics = Metrics::new();
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let summary = match cfg.recipe {
            Recipe::Train => train_recipe(cfg, seed, &train_set, &test_set, staging, &mut metrics)?,
            Recipe::Infer => infer_recipe(cfg, seed, &train_set, &test_set, staging, &mut metrics)?,
            Recipe::Landscape => landscape_recipe(cfg, seed, &train_set, &test_set, staging, &mut metrics)?,
            Recipe::DecompSweep => decomp_recipe(cfg, seed, &train_set, &test_set, &mut metrics)?,
            Recipe::FtSweep => ft_recipe(cfg, seed, &train_set, &test_set, &mut metrics)?,
            Recipe::AdcSweep => adc_recipe(cfg, seed, &train_set, &test_set, &mut metrics)?,
        };
        println!("seed {seed}: {summary} ({:.1} s)", started.elapsed().as_secs_f64());
    }
    Ok(metrics)
}

/// Loads MNIST and truncates it to the configured sample counts.
pub fn load_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>), CliError> {
    let (mut train_set, mut test_set, _) = load_mnist_dir::<T>(&cfg.mnist_dir)?;
    if let Some(n) = cfg.train.train_samples {
        train_set = train_set.head(n);
    }
    if let Some(n) = cfg.train.test_samples {
        test_set = test_set.head(n);
    }
    Ok((train_set, test_set))
}

/// Untrained network for `seed`: the hardware layout (full-range weights,
/// power-of-two gains) when weights are quantized, the software layout otherwise.
pub fn build_network<T: Scalar>(t: &TrainSection, seed: u64) -> Result<Network<T>, CliError> {
    let quant = t.quant()?;
    let mut spec = if quant.k_w > 0 { MlpSpec::<T>::hardware(&t.sizes) } else { MlpSpec::<T>::software(&t.sizes) };
    if let Some(g) = &t.gains {
        spec.gains = g.iter().map(|&v| T::of(v)).collect();
    }
    if let Some(h) = &t.init_half_width {
        spec.init = h.iter().map(|&v| Init::Uniform(T::of(v))).collect();
    }
    Ok(Network::mlp(&spec, quant, &mut stream(seed, Stream::Init))?)
}

/// The device model selected by the train section.
pub fn device_model<T: Scalar>(t: &TrainSection) -> Result<DeviceModel<T>, CliError> {
    let cr = ConductanceRange::new(T::of(t.g_min), T::of(t.g_max))?;
    Ok(match t.device {
        DeviceKind::Fefet => make_fefet_preset(T::of(t.variability), cr, t.pulses())?.into(),
        DeviceKind::AnalyticalIdeal => AnalyticalModel::ideal(cr, t.pulses()).into(),
        DeviceKind::AnalyticalReal => AnalyticalModel::real(cr, t.pulses()).into(),
        DeviceKind::File => {
            let path = t.device_file.as_ref().expect("validated: file devices name a file");
            TabularModel::from_text(&std::fs::read_to_string(path)?)?.into()
        }
    })
}

/// Training hyperparameters for `seed`.
pub fn train_config<T: Scalar>(t: &TrainSection, seed: u64) -> Result<TrainConfig<T>, CliError> {
    let lr = T::of(t.learning_rate());
    let mut tc = match t.mode {
        TrainMode::Software => TrainConfig::software(lr, t.batch_size, t.epochs, seed),
        TrainMode::Hardware => TrainConfig::hardware(lr, t.batch_size, t.epochs, device_model(t)?, seed),
    };
    tc.quant = t.quant()?;
    tc.sbpca_chunks = t.sbpca_chunks;
    if let Some((algorithm, rank, iters)) = t.algorithm()? {
        tc.decomposition = Some(DecompositionSpec::new(algorithm, rank, iters, seed)?);
    }
    Ok(tc)
}

/// Trains a fresh network for `seed`, keeping per-epoch checkpoints.
pub fn train_seed<T: Scalar>(
    t: &TrainSection,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
) -> Result<(Network<T>, TrainOutcome), CliError> {
    let mut net = build_network::<T>(t, seed)?;
    let mut tc = train_config::<T>(t, seed)?;
    tc.keep_checkpoints = true;
    let outcome = train(&mut net, train_set, Some(test_set), &tc)?;
    Ok((net, outcome))
}

/// The network to run inference with: the last snapshot of `train.weights`
/// when given, otherwise a network trained for `seed`.
pub fn trained_network<T: Scalar>(
    t: &TrainSection,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
) -> Result<Network<T>, CliError> {
    match &t.weights {
        Some(path) => load_weights(t, seed, path),
        None => Ok(train_seed(t, seed, train_set, test_set)?.0),
    }
}

fn load_weights<T: Scalar>(t: &TrainSection, seed: u64, path: &Path) -> Result<Network<T>, CliError> {
    let mut net = build_network::<T>(t, seed)?;
    let snaps = read_checkpoints(path)?;
    let last = snaps
        .last()
        .ok_or_else(|| xbsim::Error::Format(format!("{} holds no snapshots", path.display())))?;
    net.set_flat(last.mapv(T::of).view())?;
    Ok(net)
}

/// Crossbar parameters from the accelerator section.
pub fn accelerator_config<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<AcceleratorConfig<T>, CliError> {
    let a = &cfg.accelerator;
    let ac = AcceleratorConfig {
        rows: a.rows,
        cols: a.cols,
        cr: ConductanceRange::new(T::of(a.g_min), T::of(a.g_max))?,
        v_read: T::of(a.v_read),
        read_noise_halfwidth: T::of(a.read_noise),
        write_noise_sigma: T::of(a.write_noise),
        stuck_fraction: a.stuck_percent / 100.0,
        stuck_high_probability: a.stuck_high_probability,
        dac_bits: a.dac_bits,
        adc_bits: a.adc_bits,
        full_scale: a.full_scale.into(),
        exact_read_noise: a.exact_read_noise,
        seed,
    };
    ac.validate()?;
    Ok(ac)
}

/// Maps `net` onto a fresh accelerator and measures test accuracy. Returns
/// the accelerator so its state can be dumped.
pub fn accelerator_accuracy<T: Scalar>(
    net: &Network<T>,
    ac: AcceleratorConfig<T>,
    redundancy: usize,
    polling: xbsim::xbar::Polling,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
) -> Result<(f64, CrossbarAccelerator<T>), CliError> {
    let seed = ac.seed;
    let calibrate = ac.full_scale == FullScale::Calibrated;
    let mut acc = CrossbarAccelerator::new(ac)?;
    let calib = train_set.images.slice(s![..CALIBRATION_SAMPLES.min(train_set.len()), ..]);
    let opts = NetworkMappingOptions {
        redundancy,
        polling,
        input_scales: Some(calibrate_input_scales(net, calib)?),
        calibration: calibrate.then_some(calib),
    };
    let mappings = map_network(&mut acc, net, &opts, &mut stream(seed, Stream::Mapping))?;
    let accuracy = infer_network(&acc, &mappings, net, test_set, &mut stream(seed, Stream::Read))?;
    Ok((accuracy, acc))
}

/// Test accuracy of the stateless streaming path, one sample at a time.
pub fn stateless_accuracy<T: Scalar>(net: &Network<T>, ac: &AcceleratorConfig<T>, test_set: &Dataset<T>) -> Result<f64, CliError> {
    let mut rng = stream(ac.seed, Stream::Read);
    let mut pred = Vec::with_capacity(test_set.len());
    for row in test_set.images.outer_iter() {
        let out = stateless_forward(net, row, ac, &mut rng)?;
        pred.push(xbsim::nn::argmax_rows(out.view().insert_axis(Axis(0)))[0]);
    }
    Ok(accuracy_of(&pred, &test_set.labels))
}

fn final_accuracy(outcome: &TrainOutcome) -> f64 {
    outcome.metrics.last().and_then(|m| m.test_accuracy).unwrap_or(f64::NAN)
}

/// Writes checkpoints and, when there are enough of them, the trajectory
/// projection with its variance sidecar. Returns the top-2 variance share.
fn dump_trajectory(staging: &Staging, seed: u64, checkpoints: &[Array1<f64>]) -> Result<Option<f64>, CliError> {
    write_checkpoints(staging.path(&format!("checkpoints_seed{seed}.bin")), checkpoints)?;
    if checkpoints.len() < 3 {
        return Ok(None);
    }
    match trajectory_pca(checkpoints) {
        Ok(p) => {
            std::fs::write(staging.path(&format!("trajectory_seed{seed}.csv")), p.to_csv())?;
            std::fs::write(staging.path(&format!("trajectory_seed{seed}.variance.csv")), p.variance_line())?;
            Ok(Some(top2_share(&p)))
        }
        Err(xbsim::Error::DegenerateTrajectory) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn train_recipe<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    staging: &Staging,
    metrics: &mut Metrics,
) -> Result<String, CliError> {
    let (_, outcome) = train_seed(&cfg.train, seed, train_set, test_set)?;
    for m in &outcome.metrics {
        let point = format!("epoch{}", m.epoch);
        metrics.push(seed, &point, "train_loss", m.train_loss);
        if let Some(a) = m.test_accuracy {
            metrics.push(seed, &point, "test_accuracy", a);
        }
        if cfg.train.mode == TrainMode::Hardware {
            metrics.push(seed, &point, "pulses", m.pulses as f64);
            metrics.push(seed, &point, "clipped_conductances", m.clipped_conductances as f64);
        }
    }
    let acc = final_accuracy(&outcome);
    metrics.push(seed, "final", "test_accuracy", acc);
    let top2 = dump_trajectory(staging, seed, &outcome.checkpoints)?;
    if let Some(v) = top2 {
        metrics.push(seed, "final", "top2_variance", v);
    }
    Ok(match top2 {
        Some(v) => format!("test accuracy {acc:.4}, top-2 trajectory variance {v:.3}"),
        None => format!("test accuracy {acc:.4}"),
    })
}

fn infer_recipe<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    staging: &Staging,
    metrics: &mut Metrics,
) -> Result<String, CliError> {
    let net = trained_network(&cfg.train, seed, train_set, test_set)?;
    let software = net.accuracy(test_set)?;
    let ac = accelerator_config::<T>(cfg, seed)?;
    let a = &cfg.accelerator;
    let accuracy = if a.stateless {
        stateless_accuracy(&net, &ac, test_set)?
    } else {
        let (accuracy, acc) = accelerator_accuracy(&net, ac, a.redundancy, a.polling.into(), train_set, test_set)?;
        if a.dump_maps {
            acc.save_state(staging.path(&format!("accelerator_seed{seed}.state")))?;
        }
        accuracy
    };
    metrics.push(seed, "infer", "accuracy", accuracy);
    metrics.push(seed, "infer", "software_accuracy", software);
    Ok(format!("accelerator accuracy {accuracy:.4} (software {software:.4})"))
}

fn landscape_recipe<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    staging: &Staging,
    metrics: &mut Metrics,
) -> Result<String, CliError> {
    let (net, outcome) = match &cfg.train.weights {
        Some(path) => (load_weights::<T>(&cfg.train, seed, path)?, None),
        None => {
            let (net, outcome) = train_seed(&cfg.train, seed, train_set, test_set)?;
            (net, Some(outcome))
        }
    };
    let l = &cfg.landscape;
    let opts = SurfaceOptions { layer_mask: l.layers.clone(), filter_norm: l.filter_norm, subsample: l.samples };
    let n = masked_indices(&net, opts.layer_mask.as_deref())?.len();
    let mut rng = stream(seed, Stream::Landscape);
    let delta = random_direction(n, &mut rng);
    let eta = random_direction(n, &mut rng);
    let axis: Vec<f64> = (0..l.points).map(|i| -l.span + 2.0 * l.span * i as f64 / (l.points - 1) as f64).collect();
    let grid = loss_surface(&net, delta.view(), eta.view(), &axis, &axis, test_set, &opts)?;
    grid.write_csv(staging.path(&format!("landscape_seed{seed}.csv")))?;
    let centre = grid.losses[[l.points / 2, l.points / 2]];
    let min = grid.losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    metrics.push(seed, "landscape", "center_loss", centre);
    metrics.push(seed, "landscape", "min_loss", min);
    metrics.push(seed, "landscape", "max_loss", max);
    if let Some(o) = outcome {
        metrics.push(seed, "landscape", "test_accuracy", final_accuracy(&o));
        if let Some(v) = dump_trajectory(staging, seed, &o.checkpoints)? {
            metrics.push(seed, "landscape", "top2_variance", v);
        }
    }
    Ok(format!("loss at centre {centre:.4}, grid range [{min:.4}, {max:.4}]"))
}

fn decomp_recipe<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    metrics: &mut Metrics,
) -> Result<String, CliError> {
    let mut parts = Vec::new();
    for algo in &cfg.sweep.algorithms {
        for &rank in &cfg.sweep.ranks {
            let mut t = cfg.train.clone();
            let iters = t.decomp.as_ref().and_then(|d| d.iters);
            t.decomp = Some(crate::config::DecompKey { algo: algo.clone(), rank, iters });
            let (_, outcome) = train_seed(&t, seed, train_set, test_set)?;
            let acc = final_accuracy(&outcome);
            let point = format!("{algo}_r{rank}");
            metrics.push(seed, &point, "test_accuracy", acc);
            parts.push(format!("{point} {acc:.4}"));
        }
    }
    Ok(parts.join(", "))
}

fn ft_recipe<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    metrics: &mut Metrics,
) -> Result<String, CliError> {
    let net = trained_network(&cfg.train, seed, train_set, test_set)?;
    let mut parts = Vec::new();
    for &r in &cfg.sweep.redundancy {
        for &p in &cfg.sweep.stuck_percent {
            let mut ac = accelerator_config::<T>(cfg, seed)?;
            ac.stuck_fraction = p / 100.0;
            let (acc, _) = accelerator_accuracy(&net, ac, r, cfg.accelerator.polling.into(), train_set, test_set)?;
            let point = format!("r{r}_stuck{p}");
            metrics.push(seed, &point, "accuracy", acc);
            parts.push(format!("{point} {acc:.4}"));
        }
    }
    Ok(parts.join(", "))
}

fn adc_recipe<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    metrics: &mut Metrics,
) -> Result<String, CliError> {
    let net = trained_network(&cfg.train, seed, train_set, test_set)?;
    let a = &cfg.accelerator;
    let mut parts = Vec::new();
    for &bits in &cfg.sweep.bits {
        let mut ac = accelerator_config::<T>(cfg, seed)?;
        ac.adc_bits = bits;
        ac.dac_bits = bits;
        let (acc, _) = accelerator_accuracy(&net, ac, a.redundancy, a.polling.into(), train_set, test_set)?;
        let point = format!("bits{bits}");
        metrics.push(seed, &point, "accuracy", acc);
        parts.push(format!("{point} {acc:.4}"));
    }
    let ideal = AcceleratorConfig::<T>::ideal(a.rows, a.cols, seed);
    let (acc, _) = accelerator_accuracy(&net, ideal, a.redundancy, a.polling.into(), train_set, test_set)?;
    metrics.push(seed, "ideal", "accuracy", acc);
    parts.push(format!("ideal {acc:.4}"));
    Ok(parts.join(", "))
}
