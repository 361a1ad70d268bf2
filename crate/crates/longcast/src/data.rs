//! Series ingestion, chronological splitting, rolling windows and
//! normalization.
//!
//! Frames are immutable after load. Windows are index triples over one
//! frame, so windows of different splits can never straddle a split
//! boundary. The normalizer is fit through [`Normalizer::fit`], which
//! only sees the train split of a [`SplitFrames`].

use std::path::Path;

use chrono::{Months, NaiveDateTime};

use crate::embedding::{stamp_features, Granularity, StampVector};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
        .map_err(|e| Error::Data(format!("unparseable timestamp {s:?}: {e}")))
}

/// Univariate (target only) or multivariate (all columns) mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Univariate,
    Multivariate,
}

impl FeatureMode {
    pub fn flag(&self) -> &'static str {
        match self {
            FeatureMode::Univariate => "S",
            FeatureMode::Multivariate => "M",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(FeatureMode::Univariate),
            "M" | "m" => Ok(FeatureMode::Multivariate),
            _ => Err(Error::Config(format!(
                "features {s:?} not recognized (expected S or M)"
            ))),
        }
    }
}

/// An equispaced multivariate series with one designated target column.
#[derive(Clone, Debug)]
pub struct SeriesFrame {
    pub timestamps: Vec<NaiveDateTime>,
    values: Vec<f64>,
    pub columns: Vec<String>,
    pub target: usize,
    pub granularity: Granularity,
}

impl SeriesFrame {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        columns: Vec<String>,
        target: usize,
        granularity: Granularity,
    ) -> Result<Self> {
        if columns.is_empty() || target >= columns.len() {
            return Err(Error::Data(format!(
                "target index {target} out of range for {} columns",
                columns.len()
            )));
        }
        if values.len() != timestamps.len() * columns.len() {
            return Err(Error::Data(format!(
                "{} values for {} rows x {} columns",
                values.len(),
                timestamps.len(),
                columns.len()
            )));
        }
        let frame = SeriesFrame {
            timestamps,
            values,
            columns,
            target,
            granularity,
        };
        frame.check_timeline()?;
        Ok(frame)
    }

    fn check_timeline(&self) -> Result<()> {
        let step = self.granularity.step_seconds();
        let mut offenders = Vec::new();
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            let dt = (pair[1] - pair[0]).num_seconds();
            if dt != step {
                offenders.push(format!(
                    "row {}: {} -> {} ({}s, expected {step}s)",
                    i + 2,
                    pair[0],
                    pair[1],
                    dt
                ));
            }
            if offenders.len() >= 5 {
                break;
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing and equispaced: {}",
                offenders.join("; ")
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width()..(row + 1) * self.width()]
    }

    pub fn target_name(&self) -> &str {
        &self.columns[self.target]
    }

    fn slice(&self, start: usize, end: usize) -> SeriesFrame {
        SeriesFrame {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * self.width()..end * self.width()].to_vec(),
            columns: self.columns.clone(),
            target: self.target,
            granularity: self.granularity,
        }
    }
}

/// Load a CSV with a header whose first column is `date` (formatted
/// `YYYY-MM-DD HH:MM:SS`) and numeric remaining columns. Gaps, duplicate
/// or reordered timestamps, and missing cells are hard errors naming the
/// offending rows.
pub fn load_csv(
    path: impl AsRef<Path>,
    target_column: &str,
    granularity: Granularity,
) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header in {}: {e}", path.display())))?
        .clone();
    if headers.is_empty() || !headers[0].eq_ignore_ascii_case("date") {
        return Err(Error::Data(format!(
            "first column must be 'date', got {:?}",
            headers.iter().next().unwrap_or("")
        )));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if columns.is_empty() {
        return Err(Error::Data("no value columns after 'date'".into()));
    }
    let target = columns
        .iter()
        .position(|c| c == target_column)
        .ok_or_else(|| {
            Error::Data(format!(
                "target column {target_column:?} not in header {columns:?}"
            ))
        })?;

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let rownum = i + 2; // header is row 1
        let record = record.map_err(|e| Error::Data(format!("row {rownum}: {e}")))?;
        if record.len() != columns.len() + 1 {
            return Err(Error::Data(format!(
                "row {rownum}: {} fields, expected {}",
                record.len(),
                columns.len() + 1
            )));
        }
        let ts = parse_timestamp(&record[0])
            .map_err(|e| Error::Data(format!("row {rownum}: {e}")))?;
        timestamps.push(ts);
        for (j, field) in record.iter().skip(1).enumerate() {
            if field.is_empty() {
                return Err(Error::Data(format!(
                    "row {rownum}: missing value in column {:?}",
                    columns[j]
                )));
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "row {rownum}: non-numeric value {field:?} in column {:?}",
                    columns[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {rownum}: non-finite value in column {:?}",
                    columns[j]
                )));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    SeriesFrame::new(timestamps, values, columns, target, granularity)
}

/// How to carve a frame into train/val/test.
#[derive(Clone, Copy, Debug)]
pub enum SplitRule {
    /// Fractions of the row count, in order.
    Ratios(f64, f64, f64),
    /// Calendar months from the first timestamp.
    Months(u32, u32, u32),
}

#[derive(Clone, Debug)]
pub struct SplitFrames {
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
}

/// Contiguous, ordered, non-overlapping partitions of a frame.
pub fn split_chronological(frame: &SeriesFrame, rule: SplitRule) -> Result<SplitFrames> {
    let t = frame.len();
    let (end_train, end_val, end_test) = match rule {
        SplitRule::Ratios(a, b, c) => {
            if a <= 0.0 || b < 0.0 || c < 0.0 || a + b + c > 1.0 + 1e-9 {
                return Err(Error::Config(format!(
                    "split ratios {a}/{b}/{c} must be non-negative and sum to at most 1"
                )));
            }
            let at = |f: f64| (((t as f64) * f).round() as usize).min(t);
            (at(a), at(a + b), at(a + b + c))
        }
        SplitRule::Months(a, b, c) => {
            let t0 = frame.timestamps[0];
            let boundary = |months: u32| -> Result<usize> {
                let edge = t0
                    .checked_add_months(Months::new(months))
                    .ok_or_else(|| Error::Config(format!("month arithmetic overflow: {months}")))?;
                Ok(frame.timestamps.partition_point(|ts| *ts < edge))
            };
            (boundary(a)?, boundary(a + b)?, boundary(a + b + c)?)
        }
    };
    if end_train == 0 {
        return Err(Error::Config("train split is empty".into()));
    }
    Ok(SplitFrames {
        train: frame.slice(0, end_train),
        val: frame.slice(end_train, end_val),
        test: frame.slice(end_val, end_test),
    })
}

/// Per-column standardization statistics, fit on the train split only.
#[derive(Clone, Debug)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fit on the train split. Taking the full [`SplitFrames`] (rather
    /// than an arbitrary frame) is the leakage guard: statistics can only
    /// come from the training partition.
    pub fn fit(split: &SplitFrames) -> Result<Self> {
        Self::fit_frame(&split.train)
    }

    fn fit_frame(frame: &SeriesFrame) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::Data("cannot fit normalizer on an empty frame".into()));
        }
        let d = frame.width();
        let t = frame.len() as f64;
        let mut mean = vec![0.0; d];
        for r in 0..frame.len() {
            for (m, v) in mean.iter_mut().zip(frame.row(r)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= t;
        }
        let mut var = vec![0.0; d];
        for r in 0..frame.len() {
            for c in 0..d {
                let dlt = frame.value(r, c) - mean[c];
                var[c] += dlt * dlt;
            }
        }
        let mut std = vec![0.0; d];
        for c in 0..d {
            std[c] = (var[c] / t).sqrt();
            if std[c] <= 0.0 {
                return Err(Error::Data(format!(
                    "column {:?} is constant on the train split; cannot normalize",
                    frame.columns[c]
                )));
            }
        }
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        self.map_frame(frame, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        self.map_frame(frame, |v, m, s| v * s + m)
    }

    pub fn denormalize_value(&self, col: usize, v: f64) -> f64 {
        v * self.std[col] + self.mean[col]
    }

    fn map_frame(
        &self,
        frame: &SeriesFrame,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<SeriesFrame> {
        if self.mean.len() != frame.width() {
            return Err(Error::Data(format!(
                "normalizer fitted on {} columns, frame has {}",
                self.mean.len(),
                frame.width()
            )));
        }
        let d = frame.width();
        let mut values = Vec::with_capacity(frame.len() * d);
        for r in 0..frame.len() {
            for c in 0..d {
                values.push(f(frame.value(r, c), self.mean[c], self.std[c]));
            }
        }
        SeriesFrame::new(
            frame.timestamps.clone(),
            values,
            frame.columns.clone(),
            frame.target,
            frame.granularity,
        )
    }
}

/// Rolling-window geometry: encoder length, decoder start-token length,
/// prediction length, and the roll stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub seq_len: usize,
    pub label_len: usize,
    pub pred_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(seq_len: usize, label_len: usize, pred_len: usize) -> Self {
        WindowSpec {
            seq_len,
            label_len,
            pred_len,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.pred_len == 0 || self.stride == 0 {
            return Err(Error::Config(
                "seq_len, pred_len and stride must be positive".into(),
            ));
        }
        if self.label_len > self.seq_len {
            return Err(Error::Config(format!(
                "label_len {} exceeds seq_len {}",
                self.label_len, self.seq_len
            )));
        }
        Ok(())
    }

    /// Decoder input length: start token plus placeholder.
    pub fn decoder_len(&self) -> usize {
        self.label_len + self.pred_len
    }
}

/// One rolling-forecast sample, as index ranges into a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
}

impl Window {
    pub fn encoder_range(&self, spec: &WindowSpec) -> std::ops::Range<usize> {
        self.start..self.start + spec.seq_len
    }

    pub fn token_range(&self, spec: &WindowSpec) -> std::ops::Range<usize> {
        self.start + spec.seq_len - spec.label_len..self.start + spec.seq_len
    }

    pub fn target_range(&self, spec: &WindowSpec) -> std::ops::Range<usize> {
        self.start + spec.seq_len..self.start + spec.seq_len + spec.pred_len
    }
}

/// Exhaustive, duplicate-free window list at the configured stride.
pub fn make_windows(frame_len: usize, spec: &WindowSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    if frame_len < spec.seq_len + spec.pred_len {
        return Err(Error::Data(format!(
            "frame length {frame_len} shorter than seq_len {} + pred_len {}",
            spec.seq_len, spec.pred_len
        )));
    }
    let count = frame_len - spec.seq_len - spec.pred_len + 1;
    Ok((0..count)
        .step_by(spec.stride)
        .map(|start| Window { start })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Sum of three incommensurate unit-amplitude sinusoids per column.
    Multisine,
    /// Linear trend plus Gaussian noise.
    TrendNoise,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multisine" => Ok(SynthKind::Multisine),
            "trend-noise" | "trend+noise" => Ok(SynthKind::TrendNoise),
            _ => Err(Error::Config(format!(
                "unknown synthetic kind {s:?} (expected multisine or trend-noise)"
            ))),
        }
    }
}

/// Deterministic synthetic series for CI and smoke runs: hourly
/// timestamps from a fixed origin, last column named `OT` as the target.
pub fn synth_series(kind: SynthKind, t: usize, d_x: usize, seed: u64) -> Result<SeriesFrame> {
    if t == 0 || d_x == 0 {
        return Err(Error::Config("synthetic series needs t >= 1 and d_x >= 1".into()));
    }
    let mut rng = Rng::seeded(seed);
    let origin = parse_timestamp("2016-07-01 00:00:00")?;
    let timestamps: Vec<NaiveDateTime> = (0..t)
        .map(|i| origin + chrono::Duration::hours(i as i64))
        .collect();
    let mut values = vec![0.0; t * d_x];
    match kind {
        SynthKind::Multisine => {
            let base = [1.0 / 57.3, 1.0 / 19.1, 1.0 / 8.7];
            for c in 0..d_x {
                let freqs: Vec<f64> = base.iter().map(|f| f * (1.0 + 0.2 * rng.unit())).collect();
                let phases: Vec<f64> = (0..3)
                    .map(|_| rng.uniform(0.0, 2.0 * std::f64::consts::PI))
                    .collect();
                for (i, row) in values.chunks_mut(d_x).enumerate() {
                    let x = i as f64;
                    row[c] = freqs
                        .iter()
                        .zip(&phases)
                        .map(|(f, p)| (2.0 * std::f64::consts::PI * f * x + p).sin())
                        .sum();
                }
            }
        }
        SynthKind::TrendNoise => {
            for c in 0..d_x {
                let slope = rng.uniform(-2.0, 2.0) / t as f64;
                let level = rng.uniform(-1.0, 1.0);
                for (i, row) in values.chunks_mut(d_x).enumerate() {
                    row[c] = level + slope * i as f64 + 0.25 * rng.standard_normal();
                }
            }
        }
    }
    let columns: Vec<String> = (0..d_x)
        .map(|c| {
            if c + 1 == d_x {
                "OT".to_string()
            } else {
                format!("F{c}")
            }
        })
        .collect();
    SeriesFrame::new(timestamps, values, columns, d_x - 1, Granularity::Hourly)
}

/// Write a frame back to the CSV layout accepted by [`load_csv`].
pub fn write_csv(frame: &SeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut header = vec!["date".to_string()];
    header.extend(frame.columns.iter().cloned());
    wtr.write_record(&header)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in 0..frame.len() {
        let mut rec = vec![frame.timestamps[r].format(TIMESTAMP_FORMAT).to_string()];
        rec.extend(frame.row(r).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// One materialized window: encoder values and stamps, decoder token
/// values and stamps (token plus future), and the target block.
#[derive(Clone, Debug)]
pub struct WindowSample<S: Scalar> {
    pub enc_x: Tensor<S>,
    pub enc_stamps: Vec<StampVector>,
    /// Start-token values; `None` for a zero-length token.
    pub token_x: Option<Tensor<S>>,
    /// Stamps for the whole decoder input: token steps then future steps.
    pub dec_stamps: Vec<StampVector>,
    pub target: Tensor<S>,
    pub target_times: Vec<NaiveDateTime>,
}

fn gather_values<S: Scalar>(
    frame: &SeriesFrame,
    range: std::ops::Range<usize>,
    features: FeatureMode,
) -> Result<Tensor<S>> {
    let rows = range.len();
    match features {
        FeatureMode::Univariate => {
            let data = range
                .clone()
                .map(|r| S::from_f64(frame.value(r, frame.target)))
                .collect();
            Tensor::from_vec(&[rows, 1], data)
        }
        FeatureMode::Multivariate => {
            let mut data = Vec::with_capacity(rows * frame.width());
            for r in range {
                data.extend(frame.row(r).iter().map(|&v| S::from_f64(v)));
            }
            Tensor::from_vec(&[rows, frame.width()], data)
        }
    }
}

pub fn sample_window<S: Scalar>(
    frame: &SeriesFrame,
    window: &Window,
    spec: &WindowSpec,
    features: FeatureMode,
) -> Result<WindowSample<S>> {
    let enc = window.encoder_range(spec);
    let token = window.token_range(spec);
    let target = window.target_range(spec);
    if target.end > frame.len() {
        return Err(Error::Data(format!(
            "window at {} runs past frame of length {}",
            window.start,
            frame.len()
        )));
    }
    let stamps = |range: std::ops::Range<usize>| -> Vec<StampVector> {
        range
            .map(|r| stamp_features(frame.timestamps[r], frame.granularity))
            .collect()
    };
    let mut dec_stamps = stamps(token.clone());
    dec_stamps.extend(stamps(target.clone()));
    let token_x = if token.is_empty() {
        None
    } else {
        Some(gather_values(frame, token, features)?)
    };
    Ok(WindowSample {
        enc_x: gather_values(frame, enc.clone(), features)?,
        enc_stamps: stamps(enc),
        token_x,
        dec_stamps,
        target: gather_values(frame, target.clone(), features)?,
        target_times: target.map(|r| frame.timestamps[r]).collect(),
    })
}

/// A frame bound to a window spec and feature mode; the unit consumed by
/// training and evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frame: SeriesFrame,
    pub spec: WindowSpec,
    pub features: FeatureMode,
    pub windows: Vec<Window>,
}

impl Dataset {
    pub fn new(frame: SeriesFrame, spec: WindowSpec, features: FeatureMode) -> Result<Self> {
        let windows = make_windows(frame.len(), &spec)?;
        Ok(Dataset {
            frame,
            spec,
            features,
            windows,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn sample<S: Scalar>(&self, i: usize) -> Result<WindowSample<S>> {
        sample_window(&self.frame, &self.windows[i], &self.spec, self.features)
    }
}
