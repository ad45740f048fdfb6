use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Long-format metrics table with `seed,point,metric,value` rows.
#[derive(Debug, Default, Clone)]
pub struct Metrics {
    rows: Vec<(u64, String, String, f64)>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, seed: u64, point: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.push((seed, point.into(), metric.into(), value));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of one `(point, metric)` pair across seeds, in insertion order.
    pub fn values(&self, point: &str, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.1 == point && r.2 == metric).map(|r| r.3).collect()
    }

    /// Per-seed rows, then a `mean` and a `std` row for every `(point, metric)`
    /// pair in first-seen order. `std` is the sample standard deviation (0 for
    /// a single seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,point,metric,value\n");
        let mut order: Vec<(&str, &str)> = Vec::new();
        let mut groups: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
        for (seed, point, metric, value) in &self.rows {
            let _ = writeln!(out, "{seed},{point},{metric},{value}");
            let key = (point.as_str(), metric.as_str());
            groups.entry(key).or_insert_with(|| {
                order.push(key);
                Vec::new()
            });
            groups.get_mut(&key).expect("inserted").push(*value);
        }
        for key in order {
            let v = &groups[&key];
            let (mean, std) = mean_std(v);
            let _ = writeln!(out, "mean,{},{},{mean}", key.0, key.1);
            let _ = writeln!(out, "std,{},{},{std}", key.0, key.1);
        }
        out
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// A scratch directory next to the final output directory. Files are written
/// here and the whole directory is renamed into place by [`Staging::commit`];
/// if the run fails the scratch directory is removed on drop.
#[derive(Debug)]
pub struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> std::io::Result<Self> {
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)?;
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir(&tmp)?;
        Ok(Self { tmp, target: target.to_path_buf(), committed: false })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.tmp.join(file)
    }

    /// Moves the staged files into the target directory, replacing any
    /// previous contents.
    pub fn commit(mut self) -> std::io::Result<PathBuf> {
        if self.target.exists() {
            let old = self.tmp.with_extension("old");
            std::fs::rename(&self.target, &old)?;
            std::fs::rename(&self.tmp, &self.target)?;
            std::fs::remove_dir_all(&old)?;
        } else {
            std::fs::rename(&self.tmp, &self.target)?;
        }
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}
