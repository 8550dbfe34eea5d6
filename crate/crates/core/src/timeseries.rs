//! Hourly demand series: CSV loading, gap filling, outlier clipping,
//! scaling, chronological splitting and supervised windowing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Gap fill lag for long gaps: one week of hours.
pub const WEEKLY_LAG: usize = 168;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("series has no observed values")]
    EmptySeries,
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("window error: series of length {len} too short for timesteps {timesteps} + horizon {horizon}")]
    Window {
        len: usize,
        timesteps: usize,
        horizon: usize,
    },
}

/// A data row that could not be parsed. Skipped rows are not fatal unless
/// they exceed 1% of the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub timestamp: NaiveDateTime,
    /// `None` marks a missing observation.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub zone: String,
    pub points: Vec<Point>,
}

impl TimeSeries {
    pub fn new(zone: impl Into<String>, points: Vec<Point>) -> Self {
        Self {
            zone: zone.into(),
            points,
        }
    }

    /// Series of observed values starting at `start`, one per hour.
    pub fn hourly(zone: impl Into<String>, start: NaiveDateTime, values: &[f64]) -> Self {
        let points = values
            .iter()
            .enumerate()
            .map(|(i, &v)| Point {
                timestamp: start + Duration::hours(i as i64),
                value: Some(v),
            })
            .collect();
        Self::new(zone, points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        self.points.iter().map(|p| p.timestamp).collect()
    }

    /// Observed values; missing points are skipped.
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().filter_map(|p| p.value).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.points.iter().all(|p| p.value.is_some())
    }

    /// Keep only the last `n` points.
    pub fn tail(&self, n: usize) -> TimeSeries {
        let start = self.points.len().saturating_sub(n);
        TimeSeries::new(self.zone.clone(), self.points[start..].to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub series: TimeSeries,
    /// Data rows in the file, excluding the header.
    pub raw_rows: usize,
    pub duplicates_merged: usize,
    pub row_errors: Vec<RowError>,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT).ok()
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn load_csv(path: impl AsRef<Path>, zone: &str) -> Result<LoadReport, SeriesError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| SeriesError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, zone)
}

/// Parse a `Datetime,<ZONE>_MW` CSV from any reader.
pub fn read_csv<R: Read>(reader: R, zone: &str) -> Result<LoadReport, SeriesError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| SeriesError::Format(format!("unreadable header: {e}")))?
        .clone();
    let expected_value = format!("{zone}_MW");
    let header_ok = header.len() == 2
        && header.get(0).map(|h| h.trim_start_matches('\u{feff}').trim()) == Some("Datetime")
        && header.get(1).map(str::trim) == Some(expected_value.as_str());
    if !header_ok {
        return Err(SeriesError::Format(format!(
            "expected header `Datetime,{expected_value}`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut raw_rows = 0usize;
    let mut row_errors = Vec::new();
    // timestamp -> (sum, count, missing seen)
    let mut acc: BTreeMap<NaiveDateTime, (f64, usize)> = BTreeMap::new();
    let mut parsed_rows = 0usize;
    for (idx, record) in rdr.records().enumerate() {
        raw_rows += 1;
        // header is line 1
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position().map(|p| p.line()))
            .unwrap_or(idx as u64 + 2);
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                row_errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&record) {
            Ok((ts, value)) => {
                parsed_rows += 1;
                let entry = acc.entry(ts).or_insert((0.0, 0));
                if let Some(v) = value {
                    entry.0 += v;
                    entry.1 += 1;
                }
            }
            Err(message) => row_errors.push(RowError { line, message }),
        }
    }
    if raw_rows > 0 && row_errors.len() * 100 > raw_rows {
        return Err(SeriesError::Format(format!(
            "{} of {raw_rows} rows unparseable (first at line {})",
            row_errors.len(),
            row_errors[0].line
        )));
    }
    let duplicates_merged = parsed_rows - acc.len();
    let points = acc
        .into_iter()
        .map(|(timestamp, (sum, n))| Point {
            timestamp,
            value: (n > 0).then(|| sum / n as f64),
        })
        .collect();
    Ok(LoadReport {
        series: TimeSeries::new(zone, points),
        raw_rows,
        duplicates_merged,
        row_errors,
    })
}

fn parse_row(record: &csv::StringRecord) -> Result<(NaiveDateTime, Option<f64>), String> {
    if record.len() != 2 {
        return Err(format!("expected 2 fields, found {}", record.len()));
    }
    let ts = parse_timestamp(&record[0]).ok_or_else(|| format!("bad timestamp `{}`", &record[0]))?;
    let raw = record[1].trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
        return Ok((ts, None));
    }
    let v: f64 = raw.parse().map_err(|_| format!("bad value `{raw}`"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("value out of range `{raw}`"));
    }
    Ok((ts, Some(v)))
}

/// Write a complete or partial series in the input CSV schema. Missing
/// values are written as empty fields.
pub fn write_csv<W: Write>(series: &TimeSeries, mut out: W) -> io::Result<()> {
    writeln!(out, "Datetime,{}_MW", series.zone)?;
    for p in &series.points {
        match p.value {
            Some(v) => writeln!(out, "{},{}", format_timestamp(p.timestamp), v)?,
            None => writeln!(out, "{},", format_timestamp(p.timestamp))?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapReport {
    pub interpolated: usize,
    pub weekly_filled: usize,
    pub median_filled: usize,
}

impl GapReport {
    pub fn total(&self) -> usize {
        self.interpolated + self.weekly_filled + self.median_filled
    }
}

/// Put the series on a complete hourly grid and fill every missing hour.
///
/// Interior gaps of at most `max_gap` hours are linearly interpolated.
/// Longer gaps (and leading/trailing ones) copy the value one week earlier
/// when it exists, otherwise the median of the observed values.
pub fn handle_missing(ts: &TimeSeries, max_gap: usize) -> Result<(TimeSeries, GapReport), SeriesError> {
    let observed: Vec<f64> = ts.values();
    if observed.is_empty() {
        return Err(SeriesError::EmptySeries);
    }
    let start = ts.points[0].timestamp;
    let end = ts.points[ts.points.len() - 1].timestamp;
    let span = (end - start).num_hours() as usize + 1;

    let mut grid: Vec<Option<f64>> = vec![None; span];
    for p in &ts.points {
        let offset = (p.timestamp - start).num_hours();
        // off-grid timestamps (non-zero minutes) are dropped
        if (p.timestamp - start) == Duration::hours(offset) {
            if let Some(v) = p.value {
                grid[offset as usize] = Some(v);
            }
        }
    }

    let median = percentile(&observed, 0.5);
    let mut report = GapReport::default();
    let mut filled: Vec<f64> = Vec::with_capacity(span);
    let mut i = 0;
    while i < span {
        if let Some(v) = grid[i] {
            filled.push(v);
            i += 1;
            continue;
        }
        let gap_start = i;
        while i < span && grid[i].is_none() {
            i += 1;
        }
        let gap_len = i - gap_start;
        let interior = gap_start > 0 && i < span;
        if interior && gap_len <= max_gap {
            let left = filled[gap_start - 1];
            let right = grid[i].expect("gap bounded on the right");
            for k in 1..=gap_len {
                let frac = k as f64 / (gap_len + 1) as f64;
                filled.push(left + (right - left) * frac);
            }
            report.interpolated += gap_len;
        } else {
            for t in gap_start..gap_start + gap_len {
                if t >= WEEKLY_LAG {
                    filled.push(filled[t - WEEKLY_LAG]);
                    report.weekly_filled += 1;
                } else {
                    filled.push(median);
                    report.median_filled += 1;
                }
            }
        }
    }

    let points = filled
        .into_iter()
        .enumerate()
        .map(|(k, v)| Point {
            timestamp: start + Duration::hours(k as i64),
            value: Some(v),
        })
        .collect();
    Ok((TimeSeries::new(ts.zone.clone(), points), report))
}

/// Percentile with linear interpolation between order statistics
/// (position `q * (n - 1)` in the sorted sample).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub lower: f64,
    pub upper: f64,
    pub clipped: usize,
}

/// Clip values outside `[Q1 - k·IQR, Q3 + k·IQR]` to the violated bound.
/// Missing points are left untouched.
pub fn handle_outliers(ts: &TimeSeries, k: f64) -> (TimeSeries, OutlierReport) {
    let values = ts.values();
    if values.is_empty() {
        return (
            ts.clone(),
            OutlierReport {
                lower: f64::NAN,
                upper: f64::NAN,
                clipped: 0,
            },
        );
    }
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    let q1 = percentile_sorted(&sorted, 0.25);
    let q3 = percentile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lower = q1 - k * iqr;
    let upper = q3 + k * iqr;
    let mut clipped = 0;
    let points = ts
        .points
        .iter()
        .map(|p| {
            let value = p.value.map(|v| {
                if v < lower {
                    clipped += 1;
                    lower
                } else if v > upper {
                    clipped += 1;
                    upper
                } else {
                    v
                }
            });
            Point {
                timestamp: p.timestamp,
                value,
            }
        })
        .collect();
    (
        TimeSeries::new(ts.zone.clone(), points),
        OutlierReport {
            lower,
            upper,
            clipped,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    Zscore,
    Minmax,
}

impl std::str::FromStr for ScalerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zscore" => Ok(ScalerKind::Zscore),
            "minmax" => Ok(ScalerKind::Minmax),
            other => Err(format!("unknown scaler `{other}` (expected zscore|minmax)")),
        }
    }
}

impl std::fmt::Display for ScalerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScalerKind::Zscore => "zscore",
            ScalerKind::Minmax => "minmax",
        })
    }
}

/// Affine scaler fitted on the training split, parameters in MW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scaler {
    /// Population standard deviation (divide by n).
    Zscore { mean: f64, std: f64 },
    Minmax { min: f64, max: f64 },
}

impl Scaler {
    pub fn fit(values: &[f64], kind: ScalerKind) -> Result<Scaler, SeriesError> {
        if values.is_empty() {
            return Err(SeriesError::DegenerateScale("empty fit set".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SeriesError::DegenerateScale("non-finite value in fit set".into()));
        }
        match kind {
            ScalerKind::Zscore => {
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                if std <= 0.0 {
                    return Err(SeriesError::DegenerateScale("constant series (std = 0)".into()));
                }
                Scaler::zscore(mean, std)
            }
            ScalerKind::Minmax => {
                let min = values.iter().copied().fold(f64::INFINITY, f64::min);
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Scaler::minmax(min, max)
            }
        }
    }

    pub fn zscore(mean: f64, std: f64) -> Result<Scaler, SeriesError> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(SeriesError::DegenerateScale(format!("invalid zscore params ({mean}, {std})")));
        }
        Ok(Scaler::Zscore { mean, std })
    }

    pub fn minmax(min: f64, max: f64) -> Result<Scaler, SeriesError> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(SeriesError::DegenerateScale(format!("invalid minmax params ({min}, {max})")));
        }
        Ok(Scaler::Minmax { min, max })
    }

    pub fn kind(&self) -> ScalerKind {
        match self {
            Scaler::Zscore { .. } => ScalerKind::Zscore,
            Scaler::Minmax { .. } => ScalerKind::Minmax,
        }
    }

    /// `(offset, scale)` such that `scaled = (x - offset) / scale`.
    pub fn params(&self) -> (f64, f64) {
        match *self {
            Scaler::Zscore { mean, std } => (mean, std),
            Scaler::Minmax { min, max } => (min, max - min),
        }
    }

    /// The raw parameter pair as stored: `(mean, std)` or `(min, max)`.
    pub fn raw_params(&self) -> (f64, f64) {
        match *self {
            Scaler::Zscore { mean, std } => (mean, std),
            Scaler::Minmax { min, max } => (min, max),
        }
    }

    pub fn from_raw(kind: ScalerKind, a: f64, b: f64) -> Result<Scaler, SeriesError> {
        match kind {
            ScalerKind::Zscore => Scaler::zscore(a, b),
            ScalerKind::Minmax => Scaler::minmax(a, b),
        }
    }

    /// Multiplicative factor from scaled units to MW.
    pub fn unit_scale(&self) -> f64 {
        self.params().1
    }

    pub fn scale_value(&self, x: f64) -> f64 {
        let (offset, scale) = self.params();
        (x - offset) / scale
    }

    pub fn invert_value(&self, y: f64) -> f64 {
        let (offset, scale) = self.params();
        y * scale + offset
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.scale_value(v)).collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.invert_value(v)).collect()
    }
}

/// Chronological split: the first `floor(ratio * n)` items train.
pub fn split<T>(items: &[T], ratio: f64) -> Result<(&[T], &[T]), SeriesError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SeriesError::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let n = items.len();
    let train = (ratio * n as f64).floor() as usize;
    if train == 0 || train == n {
        return Err(SeriesError::Split(format!(
            "ratio {ratio} on {n} points leaves an empty side"
        )));
    }
    Ok(items.split_at(train))
}

/// Supervised pairs: window `i` covers `[i, i + timesteps)` and its target
/// sits at `i + timesteps + horizon - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    target_indices: Vec<usize>,
    timesteps: usize,
    horizon: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.timesteps..(i + 1) * self.timesteps]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Index of each target in the source series.
    pub fn target_indices(&self) -> &[usize] {
        &self.target_indices
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.chunks_exact(self.timesteps)
    }

    /// Sub-dataset over the given window indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> WindowedDataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.timesteps);
        let mut targets = Vec::with_capacity(indices.len());
        let mut target_indices = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            targets.push(self.targets[i]);
            target_indices.push(self.target_indices[i]);
        }
        WindowedDataset {
            inputs,
            targets,
            target_indices,
            timesteps: self.timesteps,
            horizon: self.horizon,
        }
    }

    /// Contiguous range of windows.
    pub fn slice(&self, range: std::ops::Range<usize>) -> WindowedDataset {
        let idx: Vec<usize> = range.collect();
        self.select(&idx)
    }
}

pub fn make_windows(values: &[f64], timesteps: usize, horizon: usize) -> Result<WindowedDataset, SeriesError> {
    make_windows_from(values, timesteps, horizon, 0)
}

/// Windows whose target index is at least `first_target`; inputs may reach
/// back before it. Used to score a test split with history from the train
/// split.
pub fn make_windows_from(
    values: &[f64],
    timesteps: usize,
    horizon: usize,
    first_target: usize,
) -> Result<WindowedDataset, SeriesError> {
    let n = values.len();
    if timesteps == 0 || horizon == 0 || n < timesteps + horizon {
        return Err(SeriesError::Window {
            len: n,
            timesteps,
            horizon,
        });
    }
    let lead = timesteps + horizon - 1;
    let first_window = first_target.saturating_sub(lead);
    let count = n - lead;
    if first_window >= count {
        return Err(SeriesError::Window {
            len: n - first_target.min(n),
            timesteps,
            horizon,
        });
    }
    let mut inputs = Vec::with_capacity((count - first_window) * timesteps);
    let mut targets = Vec::with_capacity(count - first_window);
    let mut target_indices = Vec::with_capacity(count - first_window);
    for i in first_window..count {
        inputs.extend_from_slice(&values[i..i + timesteps]);
        targets.push(values[i + lead]);
        target_indices.push(i + lead);
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        target_indices,
        timesteps,
        horizon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub max_gap: usize,
    pub outlier_k: f64,
    pub split_ratio: f64,
    pub scaler: ScalerKind,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            max_gap: 6,
            outlier_k: 3.0,
            split_ratio: 0.8,
            scaler: ScalerKind::Zscore,
        }
    }
}

/// Output of the full cleaning pipeline: complete hourly MW series, the
/// scaler fitted on the training split, and the split boundary.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub series: TimeSeries,
    pub scaler: Scaler,
    pub train_len: usize,
    pub gaps: GapReport,
    pub outliers: OutlierReport,
}

impl Prepared {
    pub fn values(&self) -> Vec<f64> {
        self.series.values()
    }

    pub fn scaled(&self) -> Vec<f64> {
        self.scaler.apply(&self.series.values())
    }
}

/// Missing values, then outliers, then a chronological split with the
/// scaler fitted on the training side.
pub fn preprocess(raw: &TimeSeries, cfg: &PrepConfig) -> Result<Prepared, SeriesError> {
    let (filled, gaps) = handle_missing(raw, cfg.max_gap)?;
    let (clean, outliers) = handle_outliers(&filled, cfg.outlier_k);
    let values = clean.values();
    let (train, _) = split(&values, cfg.split_ratio)?;
    let scaler = Scaler::fit(train, cfg.scaler)?;
    let train_len = train.len();
    Ok(Prepared {
        series: clean,
        scaler,
        train_len,
        gaps,
        outliers,
    })
}
