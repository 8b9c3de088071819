//! Fixed-length single-channel series and the preprocessing shared by every
//! other module: linear resampling, min-max scaling and trend direction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real-valued signal with an identifier. Always at least two finite samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    id: String,
    values: Vec<f64>,
}

impl Series {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "series {id:?} has {} samples, need at least 2",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "series {id:?} has a non-finite sample at index {i}"
            )));
        }
        Ok(Self { id, values })
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(id: String, values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2 && values.iter().all(|v| v.is_finite()));
        Self { id, values }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Endpoint-preserving linear resampling to `n` points.
///
/// Input index `i` sits at position `i / (len - 1)`, output index `j` at
/// `j / (n - 1)`.
pub fn resample_linear(s: &Series, n: usize) -> Result<Series> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "resample target length {n} < 2"
        )));
    }
    let src = s.values();
    if n == src.len() {
        return Ok(s.clone());
    }
    let last = (src.len() - 1) as f64;
    let out = (0..n)
        .map(|j| {
            if j == 0 {
                return src[0];
            }
            if j == n - 1 {
                return src[src.len() - 1];
            }
            let pos = j as f64 * last / (n - 1) as f64;
            let lo = (pos.floor() as usize).min(src.len() - 2);
            let frac = pos - lo as f64;
            src[lo] + (src[lo + 1] - src[lo]) * frac
        })
        .collect();
    Ok(Series::from_parts_unchecked(s.id.clone(), out))
}

/// Min-max scaling into `[0, 1]`. A constant series maps to 0.5 everywhere.
pub fn minmax_scale(s: &Series) -> Series {
    Series::from_parts_unchecked(s.id.clone(), minmax_values(s.values()))
}

pub(crate) fn minmax_values(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range > 0.0 {
        values.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.5; values.len()]
    }
}

/// Least-squares slope of `values` against uniformly spaced positions.
pub fn ls_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let v_mean = values.iter().sum::<f64>() / n;
    let (num, den) = values
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (i, &v)| {
            let dt = i as f64 - t_mean;
            (num + dt * (v - v_mean), den + dt * dt)
        });
    num / den
}

/// Sign of the least-squares trend: -1, 0 or +1.
pub fn slope_sign(s: &Series) -> i8 {
    let slope = ls_slope(s.values());
    if slope > 0.0 {
        1
    } else if slope < 0.0 {
        -1
    } else {
        0
    }
}

/// Read series from CSV text: one series per row, optional leading id column
/// (recognized by non-numeric content). Rows may differ in length.
pub fn read_csv_series<R: std::io::Read>(reader: R) -> Result<Vec<Series>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("csv row {row}: {e}")))?;
        let fields: Vec<&str> = record.iter().filter(|f| !f.is_empty()).collect();
        if fields.is_empty() {
            continue;
        }
        let (id, samples) = match fields[0].parse::<f64>() {
            Ok(_) => (format!("csv-{row:06}"), &fields[..]),
            Err(_) => (fields[0].to_string(), &fields[1..]),
        };
        let values = samples
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>().map_err(|_| {
                    Error::Data(format!("csv row {row} column {col}: {f:?} is not a number"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Series::new(id, values).map_err(|e| Error::Data(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_csv_series(path: &Path) -> Result<Vec<Series>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_series(std::io::BufReader::new(file))
}
