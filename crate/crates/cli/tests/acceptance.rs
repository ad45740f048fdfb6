//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits nonzero if any criterion fails.
//!
//! Environment:
//! - `XBT_MNIST`: directory with the four MNIST IDX files (default `/root/data/mnist`).
//! - `XBT_ACCEPT_SEEDS`: number of seeds for the multi-seed criteria (default 10).

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use xbsim::decomp::{svd_truncate, nmf_factorize, StreamingPca};
use xbsim::device::{
    conductance_to_weight, gradient_to_pulses, weight_to_conductance, AnalyticalModel, ConductanceRange, DeviceModel, PulseCount,
    WeightRange,
};
use xbsim::linalg::orthonormal_basis;
use xbsim::nn::{cross_entropy, quantize_weights, Dataset, MlpSpec, Network, TrainOutcome};
use xbsim::quant::{quantize_scalar, QuantConfig, Rounding};
use xbsim::rng::{normal, stream, Stream};
use xbsim::xbar::{
    calibrate_input_scales, map_network, predict_network, stateless_forward, AcceleratorConfig, CrossbarAccelerator, FullScale,
    NetworkMappingOptions, Polling,
};
use xbsim_cli::config::{DecompKey, RoundingKey, TrainMode, TrainSection};
use xbsim_cli::output::mean_std;
use xbsim_cli::recipes::{accelerator_accuracy, load_data, train_seed};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: String) -> Verdict {
    println!("criterion {id:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, pass, detail }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

// ---------------------------------------------------------------- criterion 1

fn check(name: &str, ok: bool, note: String, failures: &mut Vec<String>) {
    println!("    {} {name}: {note}", if ok { "ok  " } else { "FAIL" });
    if !ok {
        failures.push(name.to_string());
    }
}

fn max_principal_angle_deg(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let c = a.t().dot(b);
    let d = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[[i, j]]);
    let smallest = d.svd(false, false).singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    smallest.clamp(-1.0, 1.0).acos().to_degrees()
}

fn unit_property_suite() -> Verdict {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut r = stream(1, Stream::Custom(100));
    let cr = ConductanceRange::new(133.0f64, 233.0).unwrap();
    let wr = WeightRange::unit();

    let worst = (0..100_000)
        .map(|_| {
            let w = r.random_range(-1.0..=1.0);
            (conductance_to_weight(weight_to_conductance(w, &wr, &cr).unwrap(), &wr, &cr) - w).abs()
        })
        .fold(0.0, f64::max);
    check("weight/conductance round trip", worst <= 1e-12, format!("max error {worst:.2e}"), &mut failures);

    let n = 100_000;
    let hits: i64 = (0..n).map(|_| gradient_to_pulses(0.004f64, 100, &mut r).unwrap().0).sum();
    let mean = hits as f64 / n as f64;
    let bound = 3.0 * (0.4f64 * 0.6 / n as f64).sqrt();
    check("stochastic rounding unbiased", (mean - 0.4).abs() <= bound, format!("mean {mean:.4} vs 0.4 +- {bound:.4}"), &mut failures);

    let ideal: DeviceModel<f64> = AnalyticalModel::ideal(cr, 100).into();
    let linear = (0..10_000).all(|_| {
        let a = r.random_range(0..40i64);
        let b = r.random_range(0..40i64);
        let g0 = 133.0 + r.random_range(0..20) as f64;
        let one = ideal.apply_pulses(g0, PulseCount(a + b), &mut r);
        let two = ideal.apply_pulses(ideal.apply_pulses(g0, PulseCount(a), &mut r), PulseCount(b), &mut r);
        (one - two).abs() <= 1e-12 * one
    });
    check("ideal device linearity", linear, "10^4 split pulse trains".into(), &mut failures);

    let idempotent = (0..10_000).all(|_| {
        let x = r.random_range(-1.5..1.5);
        let q = quantize_scalar(x, 8, Rounding::Nearest, &mut r).unwrap();
        quantize_scalar(q, 8, Rounding::Nearest, &mut r).unwrap() == q
    });
    let mut w = Array2::from_shape_simple_fn((50, 40), || r.random_range(-1.0..1.0));
    quantize_weights(&mut w, &wr, 2, Rounding::Nearest, &mut r).unwrap();
    let ternary = w.iter().all(|&v| v == -1.0 || v == 0.0 || v == 1.0);
    check("quantizer idempotent, 2-bit weights ternary", idempotent && ternary, format!("idempotent {idempotent}, ternary {ternary}"), &mut failures);

    let a = Array2::from_shape_simple_fn((30, 20), || normal::<f64, _>(&mut r));
    let sv = DMatrix::from_fn(30, 20, |i, j| a[[i, j]]).svd(false, false).singular_values;
    let mut ey = 0.0f64;
    for k in 1..=19 {
        let approx = svd_truncate(a.view(), k).unwrap().reconstruct().unwrap();
        let err: f64 = (&a - &approx).iter().map(|v| v * v).sum();
        let tail: f64 = sv.iter().skip(k).map(|s| s * s).sum();
        ey = ey.max((err - tail).abs() / tail.max(1e-300));
    }
    check("Eckart-Young vs full SVD oracle", ey <= 1e-8, format!("max relative tail mismatch {ey:.2e}"), &mut failures);

    let p = Array2::from_shape_simple_fn((10, 10), || r.random::<f64>());
    let f = nmf_factorize(p.view(), 3, 300, true, &mut r).unwrap();
    let monotone = f.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    check("NMF objective nonincreasing", monotone, format!("{:.3e} -> {:.3e}", f.objective[0], f.objective[299]), &mut failures);

    let (m, nn) = (40, 30);
    let left = orthonormal_basis(Array2::from_shape_simple_fn((m, 3), || normal::<f64, _>(&mut r)).view(), 3);
    let right = orthonormal_basis(Array2::from_shape_simple_fn((nn, 3), || normal::<f64, _>(&mut r)).view(), 3);
    let core = Array2::from_diag(&Array1::from(vec![3.0, 2.0, 1.0]));
    let mut pca = StreamingPca::<f64>::new(3, 2, 5).unwrap();
    let mut ortho = true;
    for _ in 0..16 {
        let mix = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 + 0.3 * normal::<f64, _>(&mut r) } else { 0.0 });
        let mut g = left.dot(&core.dot(&mix)).dot(&right.t());
        let sd = 0.01 * 3.0 / ((m * nn) as f64).sqrt();
        g.mapv_inplace(|v| v + sd * normal::<f64, _>(&mut r));
        pca.push(g.view()).unwrap();
        let q = pca.basis().unwrap();
        ortho &= (&q.t().dot(q) - &Array2::<f64>::eye(3)).iter().all(|d| d.abs() < 1e-10);
    }
    let est = orthonormal_basis(pca.estimate().unwrap().left.view(), 3);
    let angle = max_principal_angle_deg(&left, &est);
    check("SBPCA orthonormal, rank-3 subspace angle <= 5 deg", ortho && angle <= 5.0, format!("angle {angle:.3} deg"), &mut failures);

    let spec = MlpSpec { sizes: vec![12, 7, 4], ..MlpSpec::<f64>::software(&[12, 7, 4]) };
    let net = Network::mlp(&spec, QuantConfig::DISABLED, &mut r).unwrap();
    let x = Array2::from_shape_simple_fn((9, 12), || normal::<f64, _>(&mut r));
    let y: Vec<u8> = (0..9).map(|i| (i % 4) as u8).collect();
    let (_, cache) = net.forward(x.view()).unwrap();
    let grads = net.backward(&cache, &y, &mut r).unwrap();
    let loss = |n: &Network<f64>| cross_entropy(n.predict_logits(x.view()).unwrap().view(), &y);
    let mut worst_fd = 0.0f64;
    for l in 0..2 {
        for idx in ndarray::indices(net.layers()[l].weights.dim()) {
            let (mut plus, mut minus) = (net.clone(), net.clone());
            plus.layers_mut()[l].weights[idx] += 1e-5;
            minus.layers_mut()[l].weights[idx] -= 1e-5;
            let fd = (loss(&plus) - loss(&minus)) / 2e-5;
            let g = grads[l][idx];
            worst_fd = worst_fd.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-3));
        }
    }
    check("finite-difference gradient check", worst_fd <= 1e-4, format!("max relative error {worst_fd:.2e}"), &mut failures);

    let (rows, cols) = (120, 90);
    let mut acc = CrossbarAccelerator::new(AcceleratorConfig::<f64>::ideal(rows, cols, 0)).unwrap();
    let mut live = Vec::new();
    let mut disjoint = true;
    for step in 0..10_000 {
        if !live.is_empty() && r.random::<f64>() < 0.45 {
            let i = r.random_range(0..live.len());
            acc.unmap(&live.swap_remove(i));
        }
        let (red, h, w) = (r.random_range(1..=3), r.random_range(1..=30), r.random_range(1..=25));
        if let Ok(mapping) = acc.map_random(step, h, w, red, 1.0, &mut r) {
            live.push(mapping);
        }
        let rects = acc.allocations();
        disjoint &= rects.iter().enumerate().all(|(i, a)| {
            a.row + a.height <= rows && a.col + a.width <= cols && rects[i + 1..].iter().all(|b| !a.intersects(b))
        });
        disjoint &= rects.iter().map(|r| r.area()).sum::<usize>() + acc.free_devices() == rows * cols;
    }
    check("allocation disjointness fuzz", disjoint, "10^4 random map/unmap operations".into(), &mut failures);

    let elapsed = started.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    verdict(1, pass, format!("{} checks, {} failed, {:.1} s (limit 120 s)", 9, failures.len(), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------- trained networks

struct Run {
    net: Network<f32>,
    outcome: TrainOutcome,
    seconds: f64,
}

impl Run {
    fn final_accuracy(&self) -> f64 {
        self.outcome.metrics.last().and_then(|m| m.test_accuracy).unwrap_or(f64::NAN)
    }

    fn best_accuracy(&self) -> f64 {
        self.outcome.metrics.iter().filter_map(|m| m.test_accuracy).fold(f64::NAN, f64::max)
    }

    fn top2(&self) -> f64 {
        xbsim::landscape::trajectory_pca(&self.outcome.checkpoints).map(|p| xbsim::landscape::top2_share(&p)).unwrap_or(f64::NAN)
    }
}

fn train_runs(label: &str, t: &TrainSection, seeds: &[u64], train: &Dataset<f32>, test: &Dataset<f32>) -> Vec<Run> {
    seeds
        .iter()
        .map(|&seed| {
            let started = Instant::now();
            let (net, outcome) = train_seed(t, seed, train, test).expect("training failed");
            let run = Run { net, outcome, seconds: started.elapsed().as_secs_f64() };
            println!(
                "    {label} seed {seed}: final {} best {} top-2 share {:.3} ({:.1} s)",
                pct(run.final_accuracy()),
                pct(run.best_accuracy()),
                run.top2(),
                run.seconds
            );
            run
        })
        .collect()
}

fn software_section() -> TrainSection {
    TrainSection::default()
}

fn hardware_section() -> TrainSection {
    TrainSection { mode: TrainMode::Hardware, wage: Some([2, 8, 8, 8]), wage_rounding: RoundingKey::Nearest, ..TrainSection::default() }
}

fn mean(v: &[f64]) -> f64 {
    mean_std(v).0
}

fn software_baseline(sw: &[Run]) -> Verdict {
    let best: Vec<f64> = sw.iter().map(Run::best_accuracy).collect();
    let finals: Vec<f64> = sw.iter().map(Run::final_accuracy).collect();
    let slowest = sw.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let pass = mean(&best) >= 0.97 && slowest < 300.0;
    verdict(
        2,
        pass,
        format!(
            "mean best-epoch accuracy {} (final {}) over {} seeds, slowest run {:.0} s (limit 300 s)",
            pct(mean(&best)),
            pct(mean(&finals)),
            sw.len(),
            slowest
        ),
    )
}

fn is_ternary(c: &Array1<f64>) -> bool {
    c.iter().all(|&w| w == -1.0 || w == 0.0 || w == 1.0)
}

fn hardware_training(sw: &[Run], hw: &[Run]) -> Verdict {
    let hw_final: Vec<f64> = hw.iter().map(Run::final_accuracy).collect();
    let sw_final: Vec<f64> = sw.iter().map(Run::final_accuracy).collect();
    let ternary = hw.iter().all(|r| r.outcome.checkpoints.iter().all(is_ternary));
    let total: f64 = hw.iter().map(|r| r.seconds).sum();
    let budget = 900.0 * hw.len() as f64 / 10.0;
    let (m_hw, m_sw) = (mean(&hw_final), mean(&sw_final));
    let pass = m_hw >= 0.90 && m_hw < m_sw && ternary && total < budget;
    verdict(
        3,
        pass,
        format!(
            "hardware-aware {} vs software {} over {} seeds, ternary at every epoch: {ternary}, {:.0} s (limit {budget:.0} s)",
            pct(m_hw),
            pct(m_sw),
            hw.len(),
            total
        ),
    )
}

fn trajectory_ordering(sw: &[Run], hw: &[Run]) -> Verdict {
    let pairs: Vec<(f64, f64)> = sw.iter().zip(hw).map(|(s, h)| (s.top2(), h.top2())).collect();
    let wins = pairs.iter().filter(|(s, h)| h < s).count();
    let need = (pairs.len() * 8).div_ceil(10);
    let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let h: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    verdict(
        4,
        wins >= need,
        format!(
            "hardware top-2 share below software in {wins}/{} seeds (need {need}); mean {:.3} vs {:.3}",
            pairs.len(),
            mean(&h),
            mean(&s)
        ),
    )
}

fn decomposition_sweep(seeds: &[u64], train: &Dataset<f32>, test: &Dataset<f32>) -> Verdict {
    let acc = |algo: &str, rank: usize| -> f64 {
        let t = TrainSection {
            mode: TrainMode::Hardware,
            variability: 0.05,
            lr: Some(0.1),
            decomp: Some(DecompKey { algo: algo.into(), rank, iters: None }),
            ..TrainSection::default()
        };
        let runs = train_runs(&format!("{algo} rank {rank}"), &t, seeds, train, test);
        mean(&runs.iter().map(Run::final_accuracy).collect::<Vec<_>>())
    };
    let (s1, n1) = (acc("sbpca", 1), acc("nmf", 1));
    let (s4, n4) = (acc("sbpca", 4), acc("nmf", 4));
    let pass = s1 > n1 && (s4 - n4).abs() <= 0.02;
    verdict(
        5,
        pass,
        format!(
            "rank 1: SBPCA {} vs NMF {}; rank 4: SBPCA {} vs NMF {} (|diff| {:.2} points, limit 2)",
            pct(s1),
            pct(n1),
            pct(s4),
            pct(n4),
            100.0 * (s4 - n4).abs()
        ),
    )
}

// ------------------------------------------------------- inference criteria

fn ideal_equivalence(net: &Network<f32>, train: &Dataset<f32>, test: &Dataset<f32>) -> Verdict {
    let net = net.cast::<f64>();
    let test = test.cast::<f64>();
    let calib = train.cast::<f64>().images.slice(s![..1000, ..]).to_owned();
    let software = net.predict(test.images.view(), 1000).unwrap();
    let mut acc = CrossbarAccelerator::new(AcceleratorConfig::<f64>::ideal(2500, 2500, 0)).unwrap();
    let opts = NetworkMappingOptions {
        redundancy: 1,
        polling: Polling::Average,
        input_scales: Some(calibrate_input_scales(&net, calib.view()).unwrap()),
        calibration: None,
    };
    let mappings = map_network(&mut acc, &net, &opts, &mut stream(0, Stream::Mapping)).unwrap();
    let hardware = predict_network(&acc, &mappings, &net, test.images.view(), &mut stream(0, Stream::Read)).unwrap();
    let same = software.iter().zip(&hardware).filter(|(a, b)| a == b).count();
    verdict(6, same == software.len(), format!("{same}/{} identical predictions", software.len()))
}

fn converter_sweep(hw: &[Run], seeds: &[u64], train: &Dataset<f32>, test: &Dataset<f32>) -> Verdict {
    let bits = [2u32, 4, 8, 12];
    let mut by_bits: Vec<Vec<f64>> = vec![Vec::new(); bits.len()];
    let mut ideal = Vec::new();
    for (run, &seed) in hw.iter().zip(seeds) {
        for (i, &b) in bits.iter().enumerate() {
            let mut ac = AcceleratorConfig::<f32>::reference(seed);
            ac.adc_bits = b;
            ac.dac_bits = b;
            by_bits[i].push(accelerator_accuracy(&run.net, ac, 1, Polling::Average, train, test).unwrap().0);
        }
        ideal.push(accelerator_accuracy(&run.net, AcceleratorConfig::ideal(2500, 2500, seed), 1, Polling::Average, train, test).unwrap().0);
    }
    let stats: Vec<(f64, f64)> = by_bits.iter().map(|v| mean_std(v)).collect();
    let nondecreasing = stats.windows(2).all(|w| w[1].0 >= w[0].0 - w[0].1.max(w[1].1));
    let ideal_mean = mean(&ideal);
    let below = stats[3].0 < ideal_mean;
    let table: Vec<String> = bits.iter().zip(&stats).map(|(b, (m, s))| format!("{b}b {} +- {:.2}", pct(*m), 100.0 * s)).collect();
    verdict(
        7,
        nondecreasing && below,
        format!("{}; ideal {}; nondecreasing within 1 std: {nondecreasing}, 12-bit below ideal: {below}", table.join(", "), pct(ideal_mean)),
    )
}

fn lea_sweep(hw: &[Run], seeds: &[u64], train: &Dataset<f32>, test: &Dataset<f32>, full_scale: FullScale) -> [f64; 4] {
    let mut cells: [Vec<f64>; 4] = Default::default();
    for (run, &seed) in hw.iter().zip(seeds) {
        for (i, (r, stuck)) in [(1, 0.0), (1, 0.2), (6, 0.0), (6, 0.2)].into_iter().enumerate() {
            let mut ac = AcceleratorConfig::<f32>::reference(seed);
            ac.stuck_fraction = stuck;
            ac.full_scale = full_scale;
            cells[i].push(accelerator_accuracy(&run.net, ac, r, Polling::Average, train, test).unwrap().0);
        }
    }
    [mean(&cells[0]), mean(&cells[1]), mean(&cells[2]), mean(&cells[3])]
}

fn lea_recovery(hw: &[Run], seeds: &[u64], train: &Dataset<f32>, test: &Dataset<f32>) -> Verdict {
    let started = Instant::now();
    let [r1_0, r1_20, r6_0, r6_20] = lea_sweep(hw, seeds, train, test, FullScale::WorstCase);
    let elapsed = started.elapsed().as_secs_f64();
    let cal = lea_sweep(hw, seeds, train, test, FullScale::Calibrated);
    println!(
        "    note: with calibrated ADC full scale: r1 {} -> {}, r6 {} -> {}",
        pct(cal[0]),
        pct(cal[1]),
        pct(cal[2]),
        pct(cal[3])
    );
    let recovered = r6_0 - r6_20 <= 0.05;
    let degraded = r1_0 - r1_20 >= 0.20;
    verdict(
        8,
        recovered && degraded && elapsed < 1800.0,
        format!(
            "r=6: {} at 0% vs {} at 20% stuck (gap {:.2}, limit 5); r=1: {} at 0% vs {} at 20% (drop {:.2}, need 20); {elapsed:.0} s",
            pct(r6_0),
            pct(r6_20),
            100.0 * (r6_0 - r6_20),
            pct(r1_0),
            pct(r1_20),
            100.0 * (r1_0 - r1_20)
        ),
    )
}

fn variance_law() -> Verdict {
    let mut r = stream(3, Stream::Custom(200));
    let theta = Array2::from_shape_simple_fn((64, 32), || r.random_range(-1.0..1.0));
    let x = Array1::from_shape_simple_fn(64, || r.random_range(-1.0..1.0));
    let exact = theta.t().dot(&x);
    let cr = ConductanceRange::new(133.0, 233.0).unwrap();
    let enc = xbsim::xbar::encode_differential(theta.view(), &cr, None).unwrap();
    let trials = 400;
    let mut stds = Vec::new();
    for red in [1usize, 2, 4, 6] {
        let mut errs = Array2::<f64>::zeros((trials, 32));
        for t in 0..trials {
            let mut cfg = AcceleratorConfig::<f64>::ideal(400, 400, (red * 10_000 + t) as u64);
            cfg.write_noise_sigma = 50.0;
            let mut acc = CrossbarAccelerator::new(cfg).unwrap();
            let mut rng = stream((red * 10_000 + t) as u64, Stream::Write);
            let mut m = acc.map_random(0, 64, 32, red, enc.scale, &mut rng).unwrap();
            m.polling = Polling::Average;
            acc.write(&m, enc.pos.view(), enc.neg.view(), &mut rng).unwrap();
            let y = acc.mvm_infer(&m, x.view(), &mut rng).unwrap();
            errs.row_mut(t).assign(&(&y - &exact));
        }
        let centred = &errs - &errs.mean_axis(Axis(0)).unwrap();
        let var = centred.mapv(|e| e * e).sum() / ((trials - 1) * 32) as f64;
        stds.push((red, var.sqrt()));
    }
    let base = stds[0].1;
    let ratios: Vec<(usize, f64)> = stds.iter().map(|&(red, s)| (red, s / base * (red as f64).sqrt())).collect();
    let pass = ratios.iter().all(|&(_, q)| (q - 1.0).abs() <= 0.2);
    let shown: Vec<String> = ratios.iter().map(|(red, q)| format!("r={red}: {q:.3}")).collect();
    verdict(9, pass, format!("std(r)*sqrt(r)/std(1): {} (tolerance 20%)", shown.join(", ")))
}

// ------------------------------------------------------------ capacity & CLI

fn write_idx(dir: &Path, name: &str, n: usize, labels: bool) {
    let mut bytes = Vec::new();
    if labels {
        bytes.extend(2049u32.to_be_bytes());
        bytes.extend((n as u32).to_be_bytes());
        bytes.extend((0..n).map(|i| (i % 10) as u8));
    } else {
        bytes.extend(2051u32.to_be_bytes());
        for d in [n as u32, 28, 28] {
            bytes.extend(d.to_be_bytes());
        }
        bytes.extend((0..n * 784).map(|i| (i % 251) as u8));
    }
    std::fs::write(dir.join(name), bytes).unwrap();
}

fn capacity() -> Verdict {
    let mut acc = CrossbarAccelerator::new(AcceleratorConfig::<f64>::ideal(100, 100, 0)).unwrap();
    let lib = matches!(
        acc.map_random(0, 80, 80, 1, 1.0, &mut stream(0, Stream::Mapping)),
        Err(xbsim::Error::OutOfDevices(o)) if o.required == 12_800 && o.free == 10_000
    );

    let dir = tempfile::tempdir().unwrap();
    let mnist = dir.path().join("mnist");
    std::fs::create_dir(&mnist).unwrap();
    write_idx(&mnist, "train-images-idx3-ubyte", 64, false);
    write_idx(&mnist, "train-labels-idx1-ubyte", 64, true);
    write_idx(&mnist, "t10k-images-idx3-ubyte", 16, false);
    write_idx(&mnist, "t10k-labels-idx1-ubyte", 16, true);
    let cfg = dir.path().join("lea.toml");
    std::fs::write(
        &cfg,
        "recipe = \"INFER\"\nseeds = [0]\noutput_dir = \"out\"\nmnist_dir = \"mnist\"\n\
         [train]\nmode = \"hardware\"\nwage = [2, 8, 8, 8]\nepochs = 1\nbatch_size = 32\n\
         [accelerator]\nrows = 1000\ncols = 1000\nredundancy = 6\n",
    )
    .unwrap();
    let xbsim = |cmd: &str| {
        Command::new(env!("CARGO_BIN_EXE_xbsim")).args([cmd, cfg.to_str().unwrap()]).env_remove("XBT_SEED").env_remove("XBT_OUT").output().unwrap()
    };
    let validate = xbsim("validate");
    let report = String::from_utf8_lossy(&validate.stdout).into_owned();
    let predicted = validate.status.code() == Some(3) && report.contains("1429200 devices required, 1000000 available");
    let run = xbsim("run");
    let exit3 = run.status.code() == Some(3) && !dir.path().join("out").exists();
    verdict(
        10,
        lib && predicted && exit3,
        format!(
            "library OutOfDevices: {lib}; validate predicts it (exit {:?}): {predicted}; run exits {:?} with no output: {exit3}",
            validate.status.code(),
            run.status.code()
        ),
    )
}

fn deep_net(depth: usize, width: usize) -> Network<f64> {
    let mut r = stream(depth as u64, Stream::Init);
    let mut sizes = vec![width; depth + 1];
    sizes[depth] = 10;
    let mut net = Network::mlp(&MlpSpec::<f64>::software(&sizes), QuantConfig::DISABLED, &mut r).unwrap();
    for l in net.layers_mut() {
        l.weights.mapv_inplace(|w| w * 2.0);
    }
    net
}

fn stateless_peak(net: &Network<f64>, x: &Array1<f64>, cfg: &AcceleratorConfig<f64>) -> usize {
    let mut rng = stream(0, Stream::Read);
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let y = stateless_forward(net, x.view(), cfg, &mut rng).unwrap();
    let peak = PEAK.load(Ordering::SeqCst) - base;
    drop(y);
    peak
}

fn stateless_mode() -> Verdict {
    let mut r = stream(11, Stream::Custom(300));
    let net = Network::mlp(&MlpSpec::<f64>::hardware(&[784, 150, 10]), QuantConfig::wage_2888(), &mut r).unwrap();
    let mut cfg = AcceleratorConfig::<f64>::ideal(2500, 2500, 0);
    cfg.dac_bits = 30;
    cfg.adc_bits = 30;
    let inputs = Array2::from_shape_simple_fn((50, 784), || r.random_range(-0.4..2.8));
    let mut acc = CrossbarAccelerator::new(cfg.clone()).unwrap();
    let opts = NetworkMappingOptions { redundancy: 1, polling: Polling::Single, input_scales: None, calibration: None };
    let mappings = map_network(&mut acc, &net, &opts, &mut stream(0, Stream::Mapping)).unwrap();
    let mut worst = 0.0f64;
    let mut rng = stream(0, Stream::Read);
    for row in inputs.outer_iter() {
        let mut a = row.to_owned().insert_axis(Axis(0));
        for (l, m) in mappings.iter().enumerate() {
            let mut m = m.clone();
            m.input_scale = a.iter().fold(0.0f64, |s: f64, v: &f64| s.max(v.abs()));
            let z = acc.mvm_batch(&m, a.view(), &mut rng).unwrap();
            a = net.hidden_activation(&z, l).unwrap();
        }
        let stateful = a.index_axis(Axis(0), 0).to_owned();
        let stateless = stateless_forward(&net, row, &cfg, &mut rng).unwrap();
        let norm = stateful.dot(&stateful).sqrt().max(1e-12);
        let diff = &stateless - &stateful;
        worst = worst.max(diff.dot(&diff).sqrt() / norm);
    }
    let reference = AcceleratorConfig::<f64>::reference(0);
    let x = Array1::from_shape_fn(256, |i| (i as f64 * 0.37).sin());
    let shallow = deep_net(2, 256);
    let deep = deep_net(24, 256);
    stateless_peak(&shallow, &x, &reference);
    let one = stateless_peak(&shallow, &x, &reference);
    let many = stateless_peak(&deep, &x, &reference);
    let pass = worst <= 1e-3 && one == many;
    verdict(
        11,
        pass,
        format!("max relative deviation {worst:.2e} (limit 1e-3); peak heap 2 layers {one} B, 24 layers {many} B"),
    )
}

fn main() {
    let started = Instant::now();
    let mnist = PathBuf::from(std::env::var("XBT_MNIST").unwrap_or_else(|_| "/root/data/mnist".into()));
    let n_seeds: u64 = std::env::var("XBT_ACCEPT_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(10);
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let mut verdicts = vec![unit_property_suite()];

    let cfg_text = format!("recipe = \"TRAIN\"\nseeds = [0]\noutput_dir = \"unused\"\nmnist_dir = {:?}\n", mnist.display().to_string());
    let data = xbsim_cli::config::ExperimentConfig::parse(&cfg_text, Path::new("."), &Default::default())
        .map_err(|e| e.to_string())
        .and_then(|cfg| load_data::<f32>(&cfg).map_err(|e| e.to_string()));
    match data {
        Ok((train, test)) => {
            let sw = train_runs("software", &software_section(), &seeds, &train, &test);
            verdicts.push(software_baseline(&sw));
            let hw = train_runs("hardware-aware", &hardware_section(), &seeds, &train, &test);
            verdicts.push(hardware_training(&sw, &hw));
            verdicts.push(trajectory_ordering(&sw, &hw));
            drop(sw);
            verdicts.push(ideal_equivalence(&hw[0].net, &train, &test));
            verdicts.push(converter_sweep(&hw, &seeds, &train, &test));
            verdicts.push(lea_recovery(&hw, &seeds, &train, &test));
            drop(hw);
            verdicts.push(decomposition_sweep(&seeds, &train, &test));
        }
        Err(e) => {
            for id in 2..=8 {
                verdicts.push(verdict(id, false, format!("MNIST unavailable at {}: {e}", mnist.display())));
            }
        }
    }
    verdicts.push(variance_law());
    verdicts.push(capacity());
    verdicts.push(stateless_mode());
    verdicts.sort_by_key(|v| v.id);

    println!("\nacceptance summary ({:.1} min)", started.elapsed().as_secs_f64() / 60.0);
    for v in &verdicts {
        println!("criterion {:>2}: {} {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
