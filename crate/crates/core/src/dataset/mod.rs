//! Labeled (envelope window, finger angle) data.
//!
//! Repetitions 1–4 train, 5 validates, 6 tests. Envelope frames are
//! z-scored per channel with statistics fitted on the training windows only.

mod synth;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sigproc::{self, EnvelopeStream, PreprocessConfig, RawEmgRecording, Window};

pub use synth::{synthesize, SyntheticConfig, SyntheticSession};

pub const N_ANGLES: usize = 6;
pub const ANGLE_MIN: f64 = 90.0;
pub const ANGLE_MAX: f64 = 180.0;
/// Lower bound applied to every per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Five finger flexions and thumb opposition, degrees.
pub type AngleTarget = [f64; N_ANGLES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Repetitions 1–4 → train, 5 → val, 6 → test.
pub fn split_for_repetition(rep: u32) -> Result<Split> {
    match rep {
        1..=4 => Ok(Split::Train),
        5 => Ok(Split::Val),
        6 => Ok(Split::Test),
        _ => Err(Error::Protocol(format!(
            "repetition id {rep} outside 1..=6"
        ))),
    }
}

pub fn split_by_repetition(rep_ids: &[u32]) -> Result<Vec<Split>> {
    rep_ids.iter().map(|&r| split_for_repetition(r)).collect()
}

/// Finger-angle stream: time column plus six angle columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleStream {
    pub times: Vec<f64>,
    /// `[time × 6]`, degrees.
    pub values: Matrix,
}

impl AngleStream {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub fn write_angles_csv(path: &Path, angles: &AngleStream) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::from("t,f0,f1,f2,f3,f4,f5\n");
    for (r, t) in angles.times.iter().enumerate() {
        write!(line, "{t}").unwrap();
        for v in angles.values.row(r) {
            write!(line, ",{v}").unwrap();
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        line.clear();
    }
    out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_angles_csv(path: &Path) -> Result<AngleStream> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let expected = ["t", "f0", "f1", "f2", "f3", "f4", "f5"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(path, "expected header t,f0,f1,f2,f3,f4,f5"));
    }
    let mut times = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let mut vals = rec.iter().map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path, format!("row {}: bad number {s:?}", i + 1)))
        });
        times.push(vals.next().expect("7 fields")?);
        for v in vals {
            data.push(v?);
        }
    }
    if times.is_empty() {
        return Err(Error::format(path, "angle file has no samples"));
    }
    let n = times.len();
    Ok(AngleStream {
        times,
        values: Matrix::from_vec(n, N_ANGLES, data),
    })
}

/// Nearest-sample resampling of `angles` onto `frame_times`.
///
/// Fails when the two streams' end points disagree by more than one frame
/// (or one angle sample period, if coarser).
pub fn align_angles(angles: &AngleStream, frame_times: &[f64], frame_period: f64) -> Result<Matrix> {
    if angles.is_empty() || frame_times.is_empty() {
        return Err(Error::Alignment("empty stream".into()));
    }
    let n = angles.len();
    let angle_period = if n > 1 {
        (angles.times[n - 1] - angles.times[0]) / (n - 1) as f64
    } else {
        frame_period
    };
    let tol = frame_period.max(angle_period) + 1e-9;
    let start_gap = (angles.times[0] - frame_times[0]).abs();
    let end_gap = (angles.times[n - 1] - frame_times[frame_times.len() - 1]).abs();
    if start_gap > tol || end_gap > tol {
        return Err(Error::Alignment(format!(
            "angle stream spans [{}, {}] s but envelope spans [{}, {}] s",
            angles.times[0],
            angles.times[n - 1],
            frame_times[0],
            frame_times[frame_times.len() - 1]
        )));
    }
    if angles.times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Alignment("angle timestamps are not sorted".into()));
    }
    let mut out = Matrix::zeros(frame_times.len(), N_ANGLES);
    let mut j = 0;
    for (k, &t) in frame_times.iter().enumerate() {
        while j + 1 < n && (angles.times[j + 1] - t).abs() <= (angles.times[j] - t).abs() {
            j += 1;
        }
        out.row_mut(k).copy_from_slice(angles.values.row(j));
    }
    Ok(out)
}

/// Clamps every angle into `[90, 180]`; returns how many were changed.
pub fn clamp_angles(values: &mut Matrix) -> usize {
    let mut clamped = 0;
    for v in values.as_mut_slice() {
        let c = v.clamp(ANGLE_MIN, ANGLE_MAX);
        if c != *v {
            clamped += 1;
            *v = c;
        }
    }
    clamped
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Population mean and standard deviation over the given frames.
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a [f64]>, channels: usize) -> Result<Self> {
        let rows: Vec<&[f64]> = frames.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::Dataset("cannot fit normalization on an empty training split".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; channels];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for r in &rows {
            for ((s, &v), &m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(NormalizationStats { mean, std })
    }

    pub fn apply_frame(&self, frame: &mut [f64]) {
        for ((v, &m), &s) in frame.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    /// Normalized copy of a window's frames.
    pub fn apply_window(&self, window: &Window<'_>) -> Vec<f64> {
        let mut out = window.data.to_vec();
        for frame in out.chunks_exact_mut(window.channels) {
            self.apply_frame(frame);
        }
        out
    }
}

pub fn fit_normalization(dataset_frames: &Matrix, train_rows: &BTreeSet<usize>) -> Result<NormalizationStats> {
    NormalizationStats::fit(train_rows.iter().map(|&r| dataset_frames.row(r)), dataset_frames.cols())
}

/// Window geometry in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub window_samples: usize,
    pub hop: usize,
}

impl Default for WindowGeometry {
    fn default() -> Self {
        WindowGeometry {
            window_samples: 20,
            hop: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Item {
    pub end_index: usize,
    pub split: Split,
    pub target: AngleTarget,
}

/// Normalized envelope stream plus the labeled windows cut from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// z-scored `[time × channels]` frames.
    pub frames: Matrix,
    pub repetition: Vec<u32>,
    pub start_time_s: f64,
    pub sample_rate_hz: f64,
    pub geometry: WindowGeometry,
    pub items: Vec<Item>,
    pub normalization: NormalizationStats,
    pub chain: PreprocessConfig,
    /// Angle values that were outside `[90, 180]` and got clamped.
    pub clamped: usize,
}

impl LabeledDataset {
    /// Pairs each window with the angle at its newest frame, tags splits,
    /// fits normalization on training windows and applies it everywhere.
    pub fn from_stream(
        stream: EnvelopeStream,
        targets: Matrix,
        geometry: WindowGeometry,
    ) -> Result<Self> {
        Self::from_stream_with(stream, targets, geometry, None)
    }

    /// As [`LabeledDataset::from_stream`], but normalizes with `stats` (for
    /// example a trained model's) instead of fitting new statistics.
    pub fn from_stream_with(
        stream: EnvelopeStream,
        mut targets: Matrix,
        geometry: WindowGeometry,
        stats: Option<&NormalizationStats>,
    ) -> Result<Self> {
        if targets.rows() != stream.len() || targets.cols() != N_ANGLES {
            return Err(Error::Alignment(format!(
                "{}x{} targets for {} frames",
                targets.rows(),
                targets.cols(),
                stream.len()
            )));
        }
        let clamped = clamp_angles(&mut targets);
        let windows = sigproc::window_stream(&stream, geometry.window_samples, geometry.hop);
        let mut items = Vec::with_capacity(windows.len());
        let mut train_rows = BTreeSet::new();
        for w in &windows {
            let split = split_for_repetition(stream.repetition[w.end_index])?;
            if split == Split::Train {
                train_rows.extend(w.end_index + 1 - geometry.window_samples..=w.end_index);
            }
            let mut target = [0.0; N_ANGLES];
            target.copy_from_slice(targets.row(w.end_index));
            items.push(Item {
                end_index: w.end_index,
                split,
                target,
            });
        }
        drop(windows);
        let normalization = match stats {
            Some(s) if s.mean.len() == stream.channels() && s.std.len() == stream.channels() => s.clone(),
            Some(s) => {
                return Err(Error::Config(format!(
                    "normalization covers {} channels but the recording has {}",
                    s.mean.len(),
                    stream.channels()
                )))
            }
            None => fit_normalization(&stream.frames, &train_rows)?,
        };
        let mut frames = stream.frames;
        for r in 0..frames.rows() {
            normalization.apply_frame(frames.row_mut(r));
        }
        Ok(LabeledDataset {
            frames,
            repetition: stream.repetition,
            start_time_s: stream.start_time_s,
            sample_rate_hz: stream.sample_rate_hz,
            geometry,
            items,
            normalization,
            chain: stream.chain,
            clamped,
        })
    }

    /// Preprocesses a raw recording and aligns an angle stream to it.
    pub fn build(
        rec: &RawEmgRecording,
        angles: &AngleStream,
        chain: &PreprocessConfig,
        geometry: WindowGeometry,
    ) -> Result<Self> {
        Self::build_with(rec, angles, chain, geometry, None)
    }

    pub fn build_with(
        rec: &RawEmgRecording,
        angles: &AngleStream,
        chain: &PreprocessConfig,
        geometry: WindowGeometry,
        stats: Option<&NormalizationStats>,
    ) -> Result<Self> {
        let stream = sigproc::preprocess(rec, chain)?;
        let times: Vec<f64> = (0..stream.len()).map(|k| stream.time_of(k)).collect();
        let targets = align_angles(angles, &times, stream.period_s())?;
        Self::from_stream_with(stream, targets, geometry, stats)
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Normalized window of item `i`.
    pub fn window(&self, i: usize) -> Window<'_> {
        let end = self.items[i].end_index;
        Window {
            data: self
                .frames
                .row_range(end + 1 - self.geometry.window_samples, end + 1),
            channels: self.frames.cols(),
            end_index: end,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }

    pub fn targets(&self, split: Split) -> Vec<AngleTarget> {
        self.items
            .iter()
            .filter(|it| it.split == split)
            .map(|it| it.target)
            .collect()
    }
}

/// Reads both CSV files and builds the dataset.
pub fn load_dataset(
    emg_csv: &Path,
    angles_csv: &Path,
    chain: &PreprocessConfig,
    geometry: WindowGeometry,
) -> Result<LabeledDataset> {
    let rec = sigproc::read_raw_csv(emg_csv)?;
    let angles = read_angles_csv(angles_csv)?;
    LabeledDataset::build(&rec, &angles, chain, geometry)
}
