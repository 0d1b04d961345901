//! Series ingestion, chronological splitting, standardization and windowing.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PfrpError, Result};

/// A raw univariate series in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub freq_label: Option<String>,
    pub name: String,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(PfrpError::data(format!(
                "a series needs at least 2 values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PfrpError::data(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            values,
            freq_label: None,
            name: name.into(),
        })
    }

    pub fn with_freq(mut self, freq: impl Into<String>) -> Self {
        self.freq_label = Some(freq.into());
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl SplitSpec {
    pub fn new(train_ratio: f64, val_ratio: f64, test_ratio: f64) -> Result<Self> {
        let spec = Self {
            train_ratio,
            val_ratio,
            test_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train", self.train_ratio),
            ("val", self.val_ratio),
            ("test", self.test_ratio),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(PfrpError::invalid(format!(
                    "{name} ratio {r} must lie strictly between 0 and 1"
                )));
            }
        }
        let sum = self.train_ratio + self.val_ratio + self.test_ratio;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(PfrpError::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
        }
    }
}

/// Contiguous index ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// One (lookback, horizon) pair cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Position of `x[0]` in the parent series.
    pub start_index: usize,
}

/// Global z-score fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Population mean/std of `train`.
    pub fn fit(train: &[f64]) -> Result<Self> {
        if train.is_empty() {
            return Err(PfrpError::data("cannot fit a standardizer on an empty split"));
        }
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 {
            return Err(PfrpError::data("training split is constant (std <= 1e-12)"));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.std + self.mean).collect()
    }
}

/// Reads one column of a comma-separated file.
///
/// `column` may be a header name or a zero-based index. Without a selector
/// the last numeric column is used. A header row is detected when the first
/// row does not parse as a number in the selected column.
pub fn load_csv(path: &Path, column: Option<&str>) -> Result<TimeSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| PfrpError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| PfrpError::data(format!("{}: {e}", path.display())))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push(rec);
    }
    if rows.is_empty() {
        return Err(PfrpError::data(format!("{} is empty", path.display())));
    }

    let parses = |s: &str| s.parse::<f64>().is_ok();
    let col = match column {
        Some(sel) => {
            if let Some(i) = rows[0].iter().position(|h| h == sel) {
                i
            } else if let Ok(i) = sel.parse::<usize>() {
                i
            } else {
                return Err(PfrpError::data(format!(
                    "column {sel:?} not found in {}",
                    path.display()
                )));
            }
        }
        None => {
            let probe = rows.last().expect("non-empty");
            (0..probe.len())
                .rev()
                .find(|&i| parses(&probe[i]))
                .ok_or_else(|| PfrpError::data(format!("no numeric column in {}", path.display())))?
        }
    };

    let has_header = !rows[0].get(col).is_some_and(parses);
    let mut values = Vec::with_capacity(rows.len());
    for (i, rec) in rows.iter().enumerate().skip(usize::from(has_header)) {
        let row = i + 1;
        let field = rec.get(col).ok_or_else(|| {
            PfrpError::data(format!("row {row} of {} has no column {col}", path.display()))
        })?;
        let v: f64 = field.parse().map_err(|_| {
            PfrpError::data(format!(
                "row {row} of {}: {field:?} is not a number",
                path.display()
            ))
        })?;
        if !v.is_finite() {
            return Err(PfrpError::NonFinite {
                path: path.to_path_buf(),
                row,
            });
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(PfrpError::data(format!("no numeric column in {}", path.display())));
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TimeSeries::new(name, values)
}

/// Splits `[0, len)` at `floor(len*train)` and `floor(len*(train+val))`.
///
/// Every split must hold at least `min_len` points (one full window).
pub fn chronological_split(len: usize, spec: &SplitSpec, min_len: usize) -> Result<Splits> {
    spec.validate()?;
    // The nudge keeps e.g. 100 * (0.7 + 0.1) = 79.999... on 80.
    let cut = |r: f64| ((len as f64) * r + 1e-9).floor() as usize;
    let a = cut(spec.train_ratio).min(len);
    let b = cut(spec.train_ratio + spec.val_ratio).clamp(a, len);
    let splits = Splits {
        train: 0..a,
        val: a..b,
        test: b..len,
    };
    for (name, r) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if r.len() < min_len.max(1) {
            return Err(PfrpError::data(format!(
                "{name} split holds {} points, fewer than one window ({min_len})",
                r.len()
            )));
        }
    }
    Ok(splits)
}

/// Number of windows `make_windows` yields.
pub fn window_count(range_len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || range_len < lookback + horizon {
        0
    } else {
        (range_len - lookback - horizon) / stride + 1
    }
}

/// Sliding windows over `values[range]`. Windows never leave the range.
pub fn make_windows(
    values: &[f64],
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(PfrpError::invalid("lookback, horizon and stride must be >= 1"));
    }
    if range.end > values.len() {
        return Err(PfrpError::invalid(format!(
            "range end {} exceeds series length {}",
            range.end,
            values.len()
        )));
    }
    let n = window_count(range.len(), lookback, horizon, stride);
    if n == 0 {
        return Err(PfrpError::data(format!(
            "range of {} points is shorter than one window ({})",
            range.len(),
            lookback + horizon
        )));
    }
    Ok((0..n)
        .map(|i| {
            let s = range.start + i * stride;
            WindowSample {
                x: values[s..s + lookback].to_vec(),
                y: values[s + lookback..s + lookback + horizon].to_vec(),
                start_index: s,
            }
        })
        .collect())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(PfrpError::Shape {
            context: "metric inputs",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
