//! Jump-table device models: per conductance bin, an inverse CDF of the
//! conductance change caused by one pulse of each polarity.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;

use super::{ConductanceRange, PulseCount};
use crate::error::{Error, Result};
use crate::rng::{normal, stream, uniform, Stream};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Set,
    Reset,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Set => "SET",
            Polarity::Reset => "RESET",
        }
    }
}

/// One measured pulse response: starting conductance and the change it caused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<T> {
    pub g: T,
    pub delta_g: T,
    pub polarity: Polarity,
}

/// Tabular device model. `cdf_set[b][j]` is the ΔG at probability level
/// `j / (n_quantiles - 1)` for a SET pulse applied in conductance bin `b`;
/// `cdf_reset` is the same for RESET (values are signed, typically negative).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel<T> {
    pub range: ConductanceRange<T>,
    pub p_max: u32,
    pub cdf_set: Array2<T>,
    pub cdf_reset: Array2<T>,
}

impl<T: Scalar> TabularModel<T> {
    pub fn new(
        range: ConductanceRange<T>,
        p_max: u32,
        cdf_set: Array2<T>,
        cdf_reset: Array2<T>,
    ) -> Result<Self> {
        if p_max == 0 {
            return Err(Error::Config("p_max must be at least 1".into()));
        }
        if cdf_set.dim() != cdf_reset.dim() {
            return Err(Error::Shape(format!(
                "SET table {:?} and RESET table {:?} differ",
                cdf_set.dim(),
                cdf_reset.dim()
            )));
        }
        let (bins, quantiles) = cdf_set.dim();
        if bins < 2 || quantiles < 2 {
            return Err(Error::Config(format!(
                "tabular model needs >= 2 bins and >= 2 quantiles, got {bins}x{quantiles}"
            )));
        }
        for (name, table) in [("SET", &cdf_set), ("RESET", &cdf_reset)] {
            for (b, row) in table.outer_iter().enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("{name} bin {b} has non-finite entries")));
                }
                if row.windows(2).into_iter().any(|w| w[1] < w[0]) {
                    return Err(Error::InvalidInput(format!("{name} bin {b} is not nondecreasing")));
                }
            }
        }
        Ok(Self { range, p_max, cdf_set, cdf_reset })
    }

    pub fn n_bins(&self) -> usize {
        self.cdf_set.nrows()
    }

    pub fn n_quantiles(&self) -> usize {
        self.cdf_set.ncols()
    }

    pub fn bin_of(&self, g: T) -> usize {
        let n = self.n_bins();
        let x = (g - self.range.g_min) / self.range.span() * T::of_usize(n);
        x.floor().to_usize().unwrap_or(0).min(n - 1)
    }

    /// Inverse-CDF lookup at probability `u` in `[0, 1)`.
    pub fn quantile(&self, polarity: Polarity, bin: usize, u: T) -> T {
        let table = match polarity {
            Polarity::Set => &self.cdf_set,
            Polarity::Reset => &self.cdf_reset,
        };
        let row = table.row(bin);
        let pos = u * T::of_usize(row.len() - 1);
        let i = pos.floor().to_usize().unwrap_or(0).min(row.len() - 2);
        let frac = pos - T::of_usize(i);
        row[i] + (row[i + 1] - row[i]) * frac
    }

    pub fn apply_pulses<R: Rng + ?Sized>(&self, g: T, p: PulseCount, rng: &mut R) -> T {
        let mut g = self.range.clip(g);
        let polarity = if p.0 > 0 { Polarity::Set } else { Polarity::Reset };
        for _ in 0..p.magnitude() {
            let bin = self.bin_of(g);
            let d = self.quantile(polarity, bin, uniform::<T, _>(rng));
            g = self.range.clip(g + d);
        }
        g
    }

    /// Text form: a header line
    /// `XBT-TAB v1 <g_min> <g_max> <p_max> <n_bins> <n_quantiles>`, then one
    /// line per SET bin, then one line per RESET bin.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "XBT-TAB v1 {} {} {} {} {}\n",
            self.range.g_min,
            self.range.g_max,
            self.p_max,
            self.n_bins(),
            self.n_quantiles()
        );
        for table in [&self.cdf_set, &self.cdf_reset] {
            for row in table.outer_iter() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty tabular model".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 || fields[0] != "XBT-TAB" || fields[1] != "v1" {
            return Err(Error::Format(format!("bad tabular header: {header:?}")));
        }
        let num = |s: &str| -> Result<T> {
            s.parse::<T>().map_err(|_| Error::Format(format!("bad number {s:?}")))
        };
        let int = |s: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        let range = ConductanceRange::new(num(fields[2])?, num(fields[3])?)?;
        let p_max = int(fields[4])? as u32;
        let bins = int(fields[5])?;
        let quantiles = int(fields[6])?;
        let mut read_table = |name: &str| -> Result<Array2<T>> {
            let mut t = Array2::zeros((bins, quantiles));
            for b in 0..bins {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Format(format!("{name} table truncated at bin {b}")))?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() != quantiles {
                    return Err(Error::Format(format!(
                        "{name} bin {b}: expected {quantiles} values, got {}",
                        vals.len()
                    )));
                }
                for (j, v) in vals.iter().enumerate() {
                    t[[b, j]] = num(v)?;
                }
            }
            Ok(t)
        };
        let set = read_table("SET")?;
        let reset = read_table("RESET")?;
        Self::new(range, p_max, set, reset)
    }
}

// Linear-interpolated empirical quantile of sorted data (type 7).
fn empirical_quantile<T: Scalar>(sorted: &[T], p: T) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * T::of_usize(n - 1);
    let i = pos.floor().to_usize().unwrap_or(0).min(n - 2);
    let frac = pos - T::of_usize(i);
    sorted[i] + (sorted[i + 1] - sorted[i]) * frac
}

/// Builds a tabular model from measured `(G, ΔG, polarity)` samples: samples are
/// binned by starting conductance, each (bin, polarity) gets the empirical
/// inverse CDF at `n_quantiles` evenly spaced levels, and empty bins copy the
/// nearest populated bin.
pub fn build_tabular_model<T: Scalar>(
    samples: &[Sample<T>],
    n_bins: usize,
    n_quantiles: usize,
    cr: ConductanceRange<T>,
    p_max: u32,
) -> Result<TabularModel<T>> {
    if n_bins < 2 || n_quantiles < 2 {
        return Err(Error::Config(format!(
            "tabular model needs >= 2 bins and >= 2 quantiles, got {n_bins}x{n_quantiles}"
        )));
    }
    let bin_of = |g: T| -> usize {
        let x = (g - cr.g_min) / cr.span() * T::of_usize(n_bins);
        x.floor().to_usize().unwrap_or(0).min(n_bins - 1)
    };
    let mut tables = Vec::with_capacity(2);
    for polarity in [Polarity::Set, Polarity::Reset] {
        let mut buckets: Vec<Vec<T>> = vec![Vec::new(); n_bins];
        let mut total = 0usize;
        for s in samples.iter().filter(|s| s.polarity == polarity) {
            if !cr.contains(s.g) || !s.delta_g.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "sample with G = {} uS, dG = {} is outside the conductance range or non-finite",
                    s.g, s.delta_g
                )));
            }
            buckets[bin_of(s.g)].push(s.delta_g);
            total += 1;
        }
        if total == 0 {
            return Err(Error::MissingPolarity { polarity: polarity.name() });
        }
        if total < n_quantiles {
            return Err(Error::InvalidInput(format!(
                "{} has {total} samples, fewer than the {n_quantiles} quantiles requested",
                polarity.name()
            )));
        }
        let mut table = Array2::<T>::zeros((n_bins, n_quantiles));
        let populated: Vec<usize> = (0..n_bins).filter(|&b| !buckets[b].is_empty()).collect();
        for b in 0..n_bins {
            // nearest populated bin, ties toward the lower bin
            let src = *populated
                .iter()
                .min_by_key(|&&p| (p as isize - b as isize).unsigned_abs())
                .expect("at least one populated bin");
            let mut data = buckets[src].clone();
            data.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            for j in 0..n_quantiles {
                let level = T::of_usize(j) / T::of_usize(n_quantiles - 1);
                table[[b, j]] = empirical_quantile(&data, level);
            }
        }
        tables.push(table);
    }
    let reset = tables.pop().expect("two tables");
    let set = tables.pop().expect("two tables");
    TabularModel::new(cr, p_max, set, reset)
}

/// Nonlinearity of the ground-truth switching curve used by the FeFET presets.
pub const FEFET_NONLINEARITY: f64 = 1.0;
const FEFET_BINS: usize = 32;
const FEFET_QUANTILES: usize = 33;
const FEFET_SAMPLES_PER_BIN: usize = 2000;
const FEFET_SEED: u64 = 0xFEFE_7000;

/// Synthesizes a FeFET-style jump table.
///
/// The ground truth is an exponential-saturation switching curve (nonlinearity
/// [`FEFET_NONLINEARITY`]); each synthetic pulse response at a bin center is the
/// curve's step times `1 + variability * n` with `n` standard normal. The sample
/// set uses a fixed seed, so the preset is deterministic.
pub fn make_fefet_preset<T: Scalar>(
    variability: T,
    cr: ConductanceRange<T>,
    p_max: u32,
) -> Result<TabularModel<T>> {
    if !(variability >= T::zero()) {
        return Err(Error::Config(format!("variability must be >= 0, got {variability}")));
    }
    if p_max == 0 {
        return Err(Error::Config("p_max must be at least 1".into()));
    }
    let pm = T::of(p_max as f64);
    let a = pm / T::of(FEFET_NONLINEARITY);
    let b = cr.span() / (T::one() - (-pm / a).exp());
    let k = T::one() - (-T::one() / a).exp();
    let mut rng = stream(FEFET_SEED, Stream::Device);
    let width = cr.span() / T::of_usize(FEFET_BINS);
    let mut samples = Vec::with_capacity(FEFET_BINS * FEFET_SAMPLES_PER_BIN * 2);
    for bin in 0..FEFET_BINS {
        let g = cr.g_min + width * (T::of_usize(bin) + T::of(0.5));
        let set_step = (b - (g - cr.g_min)) * k;
        let reset_step = -(b - (cr.g_max - g)) * k;
        for _ in 0..FEFET_SAMPLES_PER_BIN {
            let spread = T::one() + variability * normal::<T, _>(&mut rng);
            samples.push(Sample { g, delta_g: set_step * spread, polarity: Polarity::Set });
            let spread = T::one() + variability * normal::<T, _>(&mut rng);
            samples.push(Sample { g, delta_g: reset_step * spread, polarity: Polarity::Reset });
        }
    }
    build_tabular_model(&samples, FEFET_BINS, FEFET_QUANTILES, cr, p_max)
}
