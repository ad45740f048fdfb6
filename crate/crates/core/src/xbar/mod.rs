//! Stateful crossbar inference accelerator and the stateless streaming mode.
//!
//! Conductances are in microsiemens and voltages in volts, so currents are in
//! microamperes.

mod stateless;

pub use stateless::{stateless_forward, stateless_infer, stateless_infer_scaled};

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::device::ConductanceRange;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Dataset, Network};
use crate::rng::{normal, stream, uniform, Stream};
use crate::Scalar;

/// Axis-aligned block of devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.row < o.row + o.height && o.row < self.row + self.height && self.col < o.col + o.width && o.col < self.col + self.width
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        self.row + self.height <= rows && self.col + self.width <= cols
    }
}

/// Why a mapping could not be placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityFailure {
    /// Fewer free devices than the request needs.
    InsufficientArea,
    /// Enough free devices, but no free block of the needed shape.
    Fragmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutOfDevices {
    pub required: usize,
    pub free: usize,
    pub kind: CapacityFailure,
}

impl fmt::Display for OutOfDevices {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CapacityFailure::InsufficientArea => write!(
                f,
                "out of devices: mapping needs {} devices but only {} are free",
                self.required, self.free
            ),
            CapacityFailure::Fragmentation => write!(
                f,
                "out of devices: {} free devices cover the {} required, but no free block has the needed shape",
                self.free, self.required
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StuckState {
    None,
    Low,
    High,
}

/// How replica outputs of a layer are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Polling {
    /// Replica 0 only.
    Single,
    /// Mean over all replicas (layer ensemble averaging).
    #[default]
    Average,
}

/// ADC full-scale current.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FullScale {
    /// `in_features · g_max · v_read`, the largest possible current.
    #[default]
    WorstCase,
    /// 1.1 × the largest current seen on calibration inputs.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceleratorConfig<T> {
    pub rows: usize,
    pub cols: usize,
    pub cr: ConductanceRange<T>,
    pub v_read: T,
    /// Half-width of the uniform read noise (μS).
    pub read_noise_halfwidth: T,
    /// Standard deviation of the Gaussian write noise (μS).
    pub write_noise_sigma: T,
    pub stuck_fraction: f64,
    pub stuck_high_probability: f64,
    pub dac_bits: u32,
    pub adc_bits: u32,
    pub full_scale: FullScale,
    /// Draw read noise per device even in batched inference. Otherwise the
    /// summed noise current of each column is drawn as one Gaussian with the
    /// same mean and variance.
    pub exact_read_noise: bool,
    pub seed: u64,
}

impl<T: Scalar> AcceleratorConfig<T> {
    /// 2500 × 2500 devices, 133–233 μS, 0.3 V reads, ±10 μS read noise,
    /// σ = 50 μS write noise, 8-bit converters, no stuck devices.
    pub fn reference(seed: u64) -> Self {
        Self {
            rows: 2500,
            cols: 2500,
            cr: ConductanceRange { g_min: T::of(133.0), g_max: T::of(233.0) },
            v_read: T::of(0.3),
            read_noise_halfwidth: T::of(10.0),
            write_noise_sigma: T::of(50.0),
            stuck_fraction: 0.0,
            stuck_high_probability: 0.5,
            dac_bits: 8,
            adc_bits: 8,
            full_scale: FullScale::WorstCase,
            exact_read_noise: false,
            seed,
        }
    }

    /// Noise-free, fault-free, 30-bit converters.
    pub fn ideal(rows: usize, cols: usize, seed: u64) -> Self {
        Self {
            rows,
            cols,
            read_noise_halfwidth: T::zero(),
            write_noise_sigma: T::zero(),
            dac_bits: 30,
            adc_bits: 30,
            ..Self::reference(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ConductanceRange::new(self.cr.g_min, self.cr.g_max)?;
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!("crossbar must be at least 1x1, got {}x{}", self.rows, self.cols)));
        }
        if !(self.v_read > T::zero()) || !self.v_read.is_finite() {
            return Err(Error::Config(format!("read voltage must be positive, got {}", self.v_read)));
        }
        if !(self.read_noise_halfwidth >= T::zero() && self.write_noise_sigma >= T::zero()) {
            return Err(Error::Config("noise parameters must be >= 0".into()));
        }
        for (name, p) in [("stuck fraction", self.stuck_fraction), ("stuck-high probability", self.stuck_high_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, b) in [("dac_bits", self.dac_bits), ("adc_bits", self.adc_bits)] {
            if !(2..=52).contains(&b) {
                return Err(Error::Config(format!("{name} must be in 2..=52, got {b}")));
            }
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.rows * self.cols
    }
}

/// Mid-tread uniform quantizer with `2^bits − 1` levels over `[−fs, fs]`;
/// inputs beyond the range saturate.
#[inline]
pub fn converter<T: Scalar>(x: T, fs: T, bits: u32) -> T {
    let n = T::of(((1u64 << (bits - 1)) - 1) as f64);
    let u = (x / fs).max(-T::one()).min(T::one());
    (u * n).round() / n * fs
}

/// Two nonnegative conductance matrices whose difference encodes a weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialEncoding<T> {
    pub pos: Array2<T>,
    pub neg: Array2<T>,
    pub scale: T,
}

/// `G_pos = g_min + max(θ, 0)/s · span`, `G_neg = g_min + max(−θ, 0)/s · span`.
/// `scale = None` uses `s = max|θ|` (or 1 for an all-zero matrix).
pub fn encode_differential<T: Scalar>(
    theta: ArrayView2<'_, T>,
    cr: &ConductanceRange<T>,
    scale: Option<T>,
) -> Result<DifferentialEncoding<T>> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("weights contain non-finite values".into()));
    }
    let max = theta.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let s = match scale {
        Some(s) => {
            if !(s > T::zero()) || s < max {
                return Err(Error::Config(format!("encoding scale {s} must be positive and >= max|theta| = {max}")));
            }
            s
        }
        None if max > T::zero() => max,
        None => T::one(),
    };
    let k = cr.span() / s;
    let pos = theta.mapv(|t| cr.g_min + t.max(T::zero()) * k);
    let neg = theta.mapv(|t| cr.g_min + (-t).max(T::zero()) * k);
    Ok(DifferentialEncoding { pos, neg, scale: s })
}

/// `θ = s · (G_pos − G_neg) / span`.
pub fn decode_differential<T: Scalar>(
    pos: ArrayView2<'_, T>,
    neg: ArrayView2<'_, T>,
    cr: &ConductanceRange<T>,
    scale: T,
) -> Array2<T> {
    (&pos - &neg) * (scale / cr.span())
}

/// Placement of one layer: `replicas[i] = (positive block, negative block)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMapping<T> {
    pub layer_id: usize,
    pub replicas: Vec<(Rect, Rect)>,
    pub scale: T,
    pub polling: Polling,
    /// Inputs are divided by this before the DAC and outputs multiplied back.
    pub input_scale: T,
    /// ADC full scale (μA) when calibrated; `None` uses the worst case.
    pub full_scale: Option<T>,
    owner: u64,
}

impl<T: Scalar> LayerMapping<T> {
    pub fn in_features(&self) -> usize {
        self.replicas[0].0.height
    }

    pub fn out_features(&self) -> usize {
        self.replicas[0].0.width
    }

    pub fn redundancy(&self) -> usize {
        self.replicas.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Allocation {
    rect: Rect,
    owner: u64,
}

/// Crossbar with persistent conductances, stuck faults and an allocation registry.
#[derive(Debug, Clone)]
pub struct CrossbarAccelerator<T> {
    config: AcceleratorConfig<T>,
    conductances: Array2<T>,
    stuck: Array2<u8>,
    allocated: Array2<bool>,
    registry: Vec<Allocation>,
    next_owner: u64,
}

const STUCK_NONE: u8 = 0;
const STUCK_LOW: u8 = 1;
const STUCK_HIGH: u8 = 2;

const RANDOM_ATTEMPTS: usize = 1000;

impl<T: Scalar> CrossbarAccelerator<T> {
    /// All devices start at `g_min`; `⌊stuck_fraction · rows · cols⌋` devices
    /// chosen uniformly at random are stuck, each high with probability
    /// `stuck_high_probability`.
    pub fn new(config: AcceleratorConfig<T>) -> Result<Self> {
        config.validate()?;
        let (r, c) = (config.rows, config.cols);
        let mut conductances = Array2::from_elem((r, c), config.cr.g_min);
        let mut stuck = Array2::from_elem((r, c), STUCK_NONE);
        let total = r * c;
        let count = ((config.stuck_fraction * total as f64).floor() as usize).min(total);
        if count > 0 {
            let mut rng = stream(config.seed, Stream::Faults);
            let picks = rand::seq::index::sample(&mut rng, total, count);
            let g = conductances.as_slice_mut().expect("standard layout");
            let st = stuck.as_slice_mut().expect("standard layout");
            for i in picks.iter() {
                if rng.random::<f64>() < config.stuck_high_probability {
                    st[i] = STUCK_HIGH;
                    g[i] = config.cr.g_max;
                } else {
                    st[i] = STUCK_LOW;
                }
            }
        }
        Ok(Self {
            allocated: Array2::from_elem((r, c), false),
            config,
            conductances,
            stuck,
            registry: Vec::new(),
            next_owner: 1,
        })
    }

    pub fn config(&self) -> &AcceleratorConfig<T> {
        &self.config
    }

    pub fn conductances(&self) -> &Array2<T> {
        &self.conductances
    }

    pub fn stuck_state(&self, row: usize, col: usize) -> StuckState {
        match self.stuck[[row, col]] {
            STUCK_LOW => StuckState::Low,
            STUCK_HIGH => StuckState::High,
            _ => StuckState::None,
        }
    }

    pub fn stuck_count(&self) -> usize {
        self.stuck.iter().filter(|&&s| s != STUCK_NONE).count()
    }

    /// Every registered rectangle.
    pub fn allocations(&self) -> Vec<Rect> {
        self.registry.iter().map(|a| a.rect).collect()
    }

    pub fn free_devices(&self) -> usize {
        self.config.capacity() - self.registry.iter().map(|a| a.rect.area()).sum::<usize>()
    }

    fn collides(&self, r: &Rect) -> Option<Rect> {
        self.registry.iter().find(|a| a.rect.intersects(r)).map(|a| a.rect)
    }

    fn first_fit(&self, h: usize, w: usize) -> Option<Rect> {
        let (rows, cols) = (self.config.rows, self.config.cols);
        if h > rows || w > cols {
            return None;
        }
        for row in 0..=rows - h {
            let mut col = 0;
            while col + w <= cols {
                let cand = Rect { row, col, height: h, width: w };
                match self.collides(&cand) {
                    None => return Some(cand),
                    Some(hit) => col = hit.col + hit.width,
                }
            }
        }
        None
    }

    fn place<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Option<Rect> {
        let (rows, cols) = (self.config.rows, self.config.cols);
        if h == 0 || w == 0 || h > rows || w > cols {
            return None;
        }
        for _ in 0..RANDOM_ATTEMPTS {
            let cand = Rect { row: rng.random_range(0..=rows - h), col: rng.random_range(0..=cols - w), height: h, width: w };
            if self.collides(&cand).is_none() {
                return Some(cand);
            }
        }
        self.first_fit(h, w)
    }

    fn register(&mut self, rect: Rect, owner: u64) {
        self.allocated.slice_mut(s![rect.row..rect.row + rect.height, rect.col..rect.col + rect.width]).fill(true);
        self.registry.push(Allocation { rect, owner });
    }

    fn unregister_owner(&mut self, owner: u64) {
        let gone: Vec<Rect> = self.registry.iter().filter(|a| a.owner == owner).map(|a| a.rect).collect();
        self.registry.retain(|a| a.owner != owner);
        for r in gone {
            self.allocated.slice_mut(s![r.row..r.row + r.height, r.col..r.col + r.width]).fill(false);
        }
    }

    /// Places `2·redundancy` blocks of shape `in × out` at random
    /// non-overlapping positions (falling back to a row-major first-fit scan)
    /// and registers them. On failure nothing is registered.
    pub fn map_random<R: Rng + ?Sized>(
        &mut self,
        layer_id: usize,
        in_features: usize,
        out_features: usize,
        redundancy: usize,
        scale: T,
        rng: &mut R,
    ) -> Result<LayerMapping<T>> {
        if redundancy == 0 {
            return Err(Error::Config("redundancy must be at least 1".into()));
        }
        if in_features == 0 || out_features == 0 {
            return Err(Error::Shape("cannot map an empty layer".into()));
        }
        if !(scale > T::zero()) {
            return Err(Error::Config(format!("encoding scale must be positive, got {scale}")));
        }
        let required = 2 * redundancy * in_features * out_features;
        let free = self.free_devices();
        let owner = self.next_owner;
        self.next_owner += 1;
        let mut placed = Vec::with_capacity(2 * redundancy);
        for _ in 0..2 * redundancy {
            match self.place(in_features, out_features, rng) {
                Some(r) => {
                    self.register(r, owner);
                    placed.push(r);
                }
                None => {
                    self.unregister_owner(owner);
                    let kind = if free < required { CapacityFailure::InsufficientArea } else { CapacityFailure::Fragmentation };
                    return Err(Error::OutOfDevices(OutOfDevices { required, free, kind }));
                }
            }
        }
        let replicas = placed.chunks(2).map(|p| (p[0], p[1])).collect();
        Ok(LayerMapping {
            layer_id,
            replicas,
            scale,
            polling: Polling::Average,
            input_scale: T::one(),
            full_scale: None,
            owner,
        })
    }

    /// Releases a mapping's devices (their conductances are left as written).
    pub fn unmap(&mut self, mapping: &LayerMapping<T>) {
        self.unregister_owner(mapping.owner);
    }

    fn check_registered(&self, mapping: &LayerMapping<T>) -> Result<()> {
        let ok = mapping.replicas.iter().all(|(p, n)| {
            [p, n].iter().all(|r| self.registry.iter().any(|a| a.owner == mapping.owner && a.rect == **r))
        });
        if ok && !mapping.replicas.is_empty() {
            Ok(())
        } else {
            Err(Error::Usage(format!("layer {} mapping is not registered on this accelerator", mapping.layer_id)))
        }
    }

    /// Programs every replica: target plus Gaussian write noise, clipped to the
    /// conductance range. Stuck devices keep their stuck value.
    pub fn write<R: Rng + ?Sized>(
        &mut self,
        mapping: &LayerMapping<T>,
        g_pos: ArrayView2<'_, T>,
        g_neg: ArrayView2<'_, T>,
        rng: &mut R,
    ) -> Result<()> {
        self.check_registered(mapping)?;
        let shape = (mapping.in_features(), mapping.out_features());
        if g_pos.dim() != shape || g_neg.dim() != shape {
            return Err(Error::Shape(format!("targets {:?}/{:?} for blocks {shape:?}", g_pos.dim(), g_neg.dim())));
        }
        let cr = self.config.cr;
        let sigma = self.config.write_noise_sigma;
        for (p, n) in mapping.replicas.clone() {
            for (rect, target) in [(p, &g_pos), (n, &g_neg)] {
                for i in 0..rect.height {
                    for j in 0..rect.width {
                        let (r, c) = (rect.row + i, rect.col + j);
                        if self.stuck[[r, c]] != STUCK_NONE {
                            continue;
                        }
                        let mut g = target[[i, j]];
                        if sigma > T::zero() {
                            g += sigma * normal::<T, _>(rng);
                        }
                        self.conductances[[r, c]] = cr.clip(g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Conductance map of `region` (whole array by default): stored value plus
    /// fresh uniform read noise on allocated devices, 0 on disabled devices.
    pub fn read_map<R: Rng + ?Sized>(&self, region: Option<Rect>, rng: &mut R) -> Result<Array2<T>> {
        let (rows, cols) = (self.config.rows, self.config.cols);
        let reg = region.unwrap_or(Rect { row: 0, col: 0, height: rows, width: cols });
        if !reg.fits(rows, cols) {
            return Err(Error::Bounds(reg));
        }
        let h = self.config.read_noise_halfwidth;
        let mut out = Array2::zeros((reg.height, reg.width));
        for i in 0..reg.height {
            for j in 0..reg.width {
                let (r, c) = (reg.row + i, reg.col + j);
                if self.allocated[[r, c]] {
                    let mut g = self.conductances[[r, c]];
                    if h > T::zero() {
                        g += h * (T::of(2.0) * uniform::<T, _>(rng) - T::one());
                    }
                    out[[i, j]] = g;
                }
            }
        }
        Ok(out)
    }

    fn block(&self, r: &Rect) -> ArrayView2<'_, T> {
        self.conductances.slice(s![r.row..r.row + r.height, r.col..r.col + r.width])
    }

    fn dac(&self, x: T, input_scale: T) -> T {
        converter(x / input_scale, T::one(), self.config.dac_bits) * self.config.v_read
    }

    fn full_scale(&self, mapping: &LayerMapping<T>) -> T {
        match (self.config.full_scale, mapping.full_scale) {
            (FullScale::Calibrated, Some(fs)) => fs,
            _ => T::of_usize(mapping.in_features()) * self.config.cr.g_max * self.config.v_read,
        }
    }

    fn assemble(&self, mapping: &LayerMapping<T>, ip: T, in_: T, fs: T) -> T {
        let bits = self.config.adc_bits;
        let d = converter(ip, fs, bits) - converter(in_, fs, bits);
        d * mapping.scale / (self.config.cr.span() * self.config.v_read) * mapping.input_scale
    }

    /// One noisy matrix-vector product through the mapped layer, with read
    /// noise drawn independently for every device.
    pub fn mvm_infer<R: Rng + ?Sized>(&self, mapping: &LayerMapping<T>, input: ArrayView1<'_, T>, rng: &mut R) -> Result<Array1<T>> {
        self.check_registered(mapping)?;
        if input.len() != mapping.in_features() {
            return Err(Error::Shape(format!("input has {} entries, layer expects {}", input.len(), mapping.in_features())));
        }
        let v: Array1<T> = input.mapv(|x| self.dac(x, mapping.input_scale));
        let h = self.config.read_noise_halfwidth;
        let fs = self.full_scale(mapping);
        let out_n = mapping.out_features();
        let used = match mapping.polling {
            Polling::Single => 1,
            Polling::Average => mapping.replicas.len(),
        };
        let mut acc = Array1::zeros(out_n);
        for (p, n) in &mapping.replicas[..used] {
            let mut currents = [Array1::<T>::zeros(out_n), Array1::<T>::zeros(out_n)];
            for (cur, rect) in currents.iter_mut().zip([p, n]) {
                let g = self.block(rect);
                for (i, &vi) in v.iter().enumerate() {
                    for j in 0..out_n {
                        let mut gij = g[[i, j]];
                        if h > T::zero() {
                            gij += h * (T::of(2.0) * uniform::<T, _>(rng) - T::one());
                        }
                        cur[j] += vi * gij;
                    }
                }
            }
            for j in 0..out_n {
                acc[j] += self.assemble(mapping, currents[0][j], currents[1][j], fs);
            }
        }
        Ok(acc / T::of_usize(used))
    }

    /// Batched form of [`Self::mvm_infer`] (one row per input vector).
    pub fn mvm_batch<R: Rng + ?Sized>(&self, mapping: &LayerMapping<T>, inputs: ArrayView2<'_, T>, rng: &mut R) -> Result<Array2<T>> {
        self.check_registered(mapping)?;
        if inputs.ncols() != mapping.in_features() {
            return Err(Error::Shape(format!("inputs have {} columns, layer expects {}", inputs.ncols(), mapping.in_features())));
        }
        if self.config.exact_read_noise {
            let mut out = Array2::zeros((inputs.nrows(), mapping.out_features()));
            for (i, row) in inputs.outer_iter().enumerate() {
                out.row_mut(i).assign(&self.mvm_infer(mapping, row, rng)?);
            }
            return Ok(out);
        }
        let v = inputs.mapv(|x| self.dac(x, mapping.input_scale));
        let h = self.config.read_noise_halfwidth;
        // std of Σ_i v_i·u_i with u_i ~ U(−h, h) is h·sqrt(Σ v_i² / 3)
        let noise_std: Array1<T> = v.map_axis(Axis(1), |r| h * (r.dot(&r) / T::of(3.0)).sqrt());
        let fs = self.full_scale(mapping);
        let used = match mapping.polling {
            Polling::Single => 1,
            Polling::Average => mapping.replicas.len(),
        };
        let mut acc = Array2::zeros((inputs.nrows(), mapping.out_features()));
        for (p, n) in &mapping.replicas[..used] {
            let mut ip = v.dot(&self.block(p));
            let mut in_ = v.dot(&self.block(n));
            if h > T::zero() {
                for cur in [&mut ip, &mut in_] {
                    for (mut row, &sd) in cur.outer_iter_mut().zip(noise_std.iter()) {
                        row.mapv_inplace(|c| c + sd * normal::<T, _>(rng));
                    }
                }
            }
            ndarray::Zip::from(&mut acc).and(&ip).and(&in_).for_each(|a, &x, &y| *a += self.assemble(mapping, x, y, fs));
        }
        Ok(acc / T::of_usize(used))
    }

    /// Noise-free column currents `(I_pos, I_neg)` of replica 0, used to calibrate the ADC.
    fn ideal_currents(&self, mapping: &LayerMapping<T>, inputs: ArrayView2<'_, T>) -> (Array2<T>, Array2<T>) {
        let v = inputs.mapv(|x| self.dac(x, mapping.input_scale));
        let (p, n) = mapping.replicas[0];
        (v.dot(&self.block(&p)), v.dot(&self.block(&n)))
    }

    /// Text dump `XBT-MAP v1 <rows> <cols>` then one line per row of stored
    /// conductances, 0 for disabled devices. No read noise is applied.
    pub fn write_map(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "XBT-MAP v1 {} {}", self.config.rows, self.config.cols)?;
        let mut line = String::new();
        for (grow, arow) in self.conductances.outer_iter().zip(self.allocated.outer_iter()) {
            line.clear();
            for (j, (&g, &a)) in grow.iter().zip(arow.iter()).enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                if a {
                    line.push_str(&g.to_string());
                } else {
                    line.push('0');
                }
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Binary state: a header line
    /// `XBT-STATE v1 <rows> <cols> <g_min> <g_max> <n_rects>`, then `n_rects`
    /// lines `row col height width owner`, then per device a little-endian
    /// `f64` conductance and a stuck byte (0 none, 1 low, 2 high).
    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let c = &self.config;
        writeln!(f, "XBT-STATE v1 {} {} {} {} {}", c.rows, c.cols, c.cr.g_min, c.cr.g_max, self.registry.len())?;
        for a in &self.registry {
            writeln!(f, "{} {} {} {} {}", a.rect.row, a.rect.col, a.rect.height, a.rect.width, a.owner)?;
        }
        for (g, s) in self.conductances.iter().zip(self.stuck.iter()) {
            f.write_all(&g.f64().to_le_bytes())?;
            f.write_all(&[*s])?;
        }
        f.flush()?;
        Ok(())
    }

    /// Restores a state saved by [`Self::save_state`]; noise parameters take
    /// the reference defaults.
    pub fn load_state(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("state file truncated in header".into()))?;
            let line = String::from_utf8_lossy(&bytes[pos..pos + end]).into_owned();
            pos += end + 1;
            Ok(line)
        };
        let header = next_line(&bytes)?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 7 || h[0] != "XBT-STATE" || h[1] != "v1" {
            return Err(Error::Format(format!("bad state header {header:?}")));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
        let num = |s: &str| s.parse::<T>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        let (rows, cols) = (int(h[2])?, int(h[3])?);
        let mut cfg = AcceleratorConfig::reference(0);
        cfg.rows = rows;
        cfg.cols = cols;
        cfg.cr = ConductanceRange::new(num(h[4])?, num(h[5])?)?;
        let n_rects = int(h[6])?;
        let mut acc = Self {
            allocated: Array2::from_elem((rows, cols), false),
            conductances: Array2::from_elem((rows, cols), cfg.cr.g_min),
            stuck: Array2::from_elem((rows, cols), STUCK_NONE),
            config: cfg,
            registry: Vec::new(),
            next_owner: 1,
        };
        for _ in 0..n_rects {
            let line = next_line(&bytes)?;
            let v: Vec<usize> = line.split_whitespace().map(int).collect::<Result<_>>()?;
            if v.len() != 5 {
                return Err(Error::Format(format!("bad allocation line {line:?}")));
            }
            let rect = Rect { row: v[0], col: v[1], height: v[2], width: v[3] };
            if !rect.fits(rows, cols) {
                return Err(Error::Bounds(rect));
            }
            acc.register(rect, v[4] as u64);
            acc.next_owner = acc.next_owner.max(v[4] as u64 + 1);
        }
        let body = &bytes[pos..];
        if body.len() != rows * cols * 9 {
            return Err(Error::Format(format!("state body has {} bytes, expected {}", body.len(), rows * cols * 9)));
        }
        for (k, rec) in body.chunks_exact(9).enumerate() {
            let g = f64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
            acc.conductances[[k / cols, k % cols]] = T::of(g);
            acc.stuck[[k / cols, k % cols]] = rec[8];
        }
        Ok(acc)
    }
}

/// Largest |input| seen by each layer when `net` runs on `calibration` in
/// software; used as the DAC input scale.
pub fn calibrate_input_scales<T: Scalar>(net: &Network<T>, calibration: ArrayView2<'_, T>) -> Result<Vec<T>> {
    let mut scales = Vec::with_capacity(net.layers().len());
    let mut a = calibration.to_owned();
    for (l, layer) in net.layers().iter().enumerate() {
        let m = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        scales.push(if m > T::zero() { m } else { T::one() });
        let mut z = a.dot(&layer.weights);
        z *= layer.gain;
        a = net.hidden_activation(&z, l)?;
    }
    Ok(scales)
}

/// Options for [`map_network`].
#[derive(Debug, Clone)]
pub struct NetworkMappingOptions<'a, T> {
    pub redundancy: usize,
    pub polling: Polling,
    /// Per-layer DAC input scales; `None` means 1.
    pub input_scales: Option<Vec<T>>,
    /// Inputs for ADC full-scale calibration (used with [`FullScale::Calibrated`]).
    pub calibration: Option<ArrayView2<'a, T>>,
}

/// Encodes every layer's effective weights, maps them at random and writes them.
pub fn map_network<T: Scalar, R: Rng + ?Sized>(
    acc: &mut CrossbarAccelerator<T>,
    net: &Network<T>,
    opts: &NetworkMappingOptions<'_, T>,
    rng: &mut R,
) -> Result<Vec<LayerMapping<T>>> {
    let mut mappings = Vec::with_capacity(net.layers().len());
    let cr = acc.config().cr;
    let mut calib = opts.calibration.map(|c| c.to_owned());
    for (l, layer) in net.layers().iter().enumerate() {
        let theta = layer.effective_weights();
        let enc = encode_differential(theta.view(), &cr, None)?;
        let mut m = acc.map_random(l, layer.in_features(), layer.out_features(), opts.redundancy, enc.scale, rng)?;
        m.polling = opts.polling;
        if let Some(s) = &opts.input_scales {
            m.input_scale = *s.get(l).ok_or_else(|| Error::Config(format!("no input scale for layer {l}")))?;
        }
        acc.write(&m, enc.pos.view(), enc.neg.view(), rng)?;
        if let Some(x) = &calib {
            let (ip, in_) = acc.ideal_currents(&m, x.view());
            let peak = ip.iter().chain(in_.iter()).fold(T::zero(), |a, v| a.max(v.abs()));
            m.full_scale = Some(if peak > T::zero() { peak * T::of(1.1) } else { T::one() });
            let mut z = x.dot(&layer.weights);
            z *= layer.gain;
            calib = Some(net.hidden_activation(&z, l)?);
        }
        mappings.push(m);
    }
    Ok(mappings)
}

/// Runs `images` through the mapped layers, applying each layer's activation
/// digitally between crossbar reads. Returns predicted classes.
pub fn predict_network<T: Scalar, R: Rng + ?Sized>(
    acc: &CrossbarAccelerator<T>,
    mappings: &[LayerMapping<T>],
    net: &Network<T>,
    images: ArrayView2<'_, T>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if mappings.len() != net.layers().len() {
        return Err(Error::Shape(format!("{} mappings for {} layers", mappings.len(), net.layers().len())));
    }
    let mut pred = Vec::with_capacity(images.nrows());
    for block in images.axis_chunks_iter(Axis(0), 1000) {
        let mut a = block.to_owned();
        for (l, m) in mappings.iter().enumerate() {
            let z = acc.mvm_batch(m, a.view(), rng)?;
            a = net.hidden_activation(&z, l)?;
        }
        pred.extend(argmax_rows(a.view()));
    }
    Ok(pred)
}

/// Test accuracy of the mapped network on `dataset`.
pub fn infer_network<T: Scalar, R: Rng + ?Sized>(
    acc: &CrossbarAccelerator<T>,
    mappings: &[LayerMapping<T>],
    net: &Network<T>,
    dataset: &Dataset<T>,
    rng: &mut R,
) -> Result<f64> {
    let pred = predict_network(acc, mappings, net, dataset.images.view(), rng)?;
    Ok(crate::nn::accuracy_of(&pred, &dataset.labels))
}
