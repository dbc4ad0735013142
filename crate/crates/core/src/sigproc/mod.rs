//! Raw EMG to 100 Hz envelope streams and fixed-geometry windows.
//!
//! The chain is band-pass, line-noise notch, rectify + low-pass envelope,
//! then integer decimation. Every filter is causal with zero initial state
//! so the same chain can run sample-by-sample in a real-time loop
//! ([`StreamingPreprocessor`]) with bit-identical output.

mod filter;
mod io;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use filter::{apply_filter, design_filter, Biquad, FilterCoefficients, FilterSpec, FilterState};
pub use io::{read_raw_csv, write_raw_csv};

/// Envelope stream rate the decoder is built around.
pub const ENVELOPE_RATE_HZ: f64 = 100.0;
/// Order of the Butterworth envelope low-pass.
pub const ENVELOPE_ORDER: usize = 2;

/// Multichannel raw EMG at acquisition rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmgRecording {
    pub sample_rate_hz: f64,
    pub start_time_s: f64,
    /// `[time × channels]`, microvolts.
    pub samples: Matrix,
    /// Repetition id of every time step.
    pub repetition: Vec<u32>,
}

impl RawEmgRecording {
    pub fn new(
        sample_rate_hz: f64,
        start_time_s: f64,
        samples: Matrix,
        repetition: Vec<u32>,
    ) -> Result<Self> {
        let rec = RawEmgRecording {
            sample_rate_hz,
            start_time_s,
            samples,
            repetition,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn channels(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Signal(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.samples.cols() == 0 || self.samples.rows() == 0 {
            return Err(Error::Signal(
                "recording needs at least one channel and one time step".into(),
            ));
        }
        if !self.samples.is_finite() {
            return Err(Error::Signal("recording contains non-finite samples".into()));
        }
        if self.repetition.len() != self.samples.rows() {
            return Err(Error::Signal(format!(
                "{} repetition labels for {} time steps",
                self.repetition.len(),
                self.samples.rows()
            )));
        }
        check_contiguous(&self.repetition)
    }
}

/// Each repetition id must occupy one contiguous time range.
fn check_contiguous(reps: &[u32]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    let mut prev = None;
    for &r in reps {
        if prev != Some(r) {
            if !seen.insert(r) {
                return Err(Error::Signal(format!(
                    "repetition {r} appears in more than one time range"
                )));
            }
            prev = Some(r);
        }
    }
    Ok(())
}

/// Preprocessing chain parameters. Loaded from a `key = value` file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub bandpass_low_hz: f64,
    pub bandpass_high_hz: f64,
    pub bandpass_order: usize,
    pub notch_hz: f64,
    pub notch_q: f64,
    pub envelope_cutoff_hz: f64,
    pub decim_factor: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bandpass_low_hz: 5.0,
            bandpass_high_hz: 500.0,
            bandpass_order: 4,
            notch_hz: 50.0,
            notch_q: 30.0,
            envelope_cutoff_hz: 5.0,
            decim_factor: 24,
        }
    }
}

impl PreprocessConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn bandpass(&self) -> FilterSpec {
        FilterSpec::Bandpass {
            low_hz: self.bandpass_low_hz,
            high_hz: self.bandpass_high_hz,
            order: self.bandpass_order,
        }
    }

    pub fn notch(&self) -> FilterSpec {
        FilterSpec::Notch {
            center_hz: self.notch_hz,
            q: self.notch_q,
        }
    }

    pub fn envelope_lowpass(&self) -> FilterSpec {
        FilterSpec::Lowpass {
            cutoff_hz: self.envelope_cutoff_hz,
            order: ENVELOPE_ORDER,
        }
    }

    /// Checks every filter against `sample_rate_hz` and that decimation lands
    /// on the 100 Hz envelope rate.
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        self.bandpass().validate(sample_rate_hz)?;
        self.notch().validate(sample_rate_hz)?;
        self.envelope_lowpass().validate(sample_rate_hz)?;
        if self.decim_factor == 0 {
            return Err(Error::Config("decim_factor must be >= 1".into()));
        }
        let out_rate = sample_rate_hz / self.decim_factor as f64;
        if (out_rate - ENVELOPE_RATE_HZ).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{sample_rate_hz} Hz / decim_factor {} = {out_rate} Hz, expected {ENVELOPE_RATE_HZ} Hz",
                self.decim_factor
            )));
        }
        Ok(())
    }
}

/// 100 Hz envelope frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeStream {
    pub sample_rate_hz: f64,
    pub start_time_s: f64,
    /// `[time × channels]`, nonnegative.
    pub frames: Matrix,
    pub repetition: Vec<u32>,
    /// Chain that produced the frames.
    pub chain: PreprocessConfig,
}

impl EnvelopeStream {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    pub fn period_s(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        self.start_time_s + frame as f64 / self.sample_rate_hz
    }
}

/// `T` consecutive frames ending at `end_index`, borrowed from a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    /// Row-major `[T × channels]`, oldest frame first.
    pub data: &'a [f64],
    pub channels: usize,
    pub end_index: usize,
}

impl<'a> Window<'a> {
    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &'a [f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }
}

/// Rectify, low-pass, clip at zero.
pub fn envelope(signal: &Matrix, lowpass: &FilterSpec, sample_rate_hz: f64) -> Result<Matrix> {
    let coeffs = design_filter(lowpass, sample_rate_hz)?;
    let rectified = signal.map(f64::abs);
    let smoothed = apply_filter(&coeffs, &rectified)?;
    Ok(smoothed.map(|v| v.max(0.0)))
}

/// Keeps every `factor`-th row starting at row 0.
pub fn decimate(stream: &Matrix, factor: usize) -> Result<Matrix> {
    if factor == 0 {
        return Err(Error::Signal("decimation factor must be >= 1".into()));
    }
    Ok(stream.select_rows((0..stream.rows()).step_by(factor)))
}

/// Sliding windows of `window_samples` frames whose end indices advance by
/// `hop`. Windows whose frames span two repetitions are dropped.
pub fn window_stream(stream: &EnvelopeStream, window_samples: usize, hop: usize) -> Vec<Window<'_>> {
    sliding_windows(&stream.frames, &stream.repetition, window_samples, hop)
}

pub(crate) fn sliding_windows<'a>(
    frames: &'a Matrix,
    repetition: &[u32],
    window_samples: usize,
    hop: usize,
) -> Vec<Window<'a>> {
    let len = frames.rows();
    if window_samples == 0 || hop == 0 || window_samples > len {
        return Vec::new();
    }
    (window_samples - 1..len)
        .step_by(hop)
        .filter(|&end| repetition[end + 1 - window_samples] == repetition[end])
        .map(|end| Window {
            data: frames.row_range(end + 1 - window_samples, end + 1),
            channels: frames.cols(),
            end_index: end,
        })
        .collect()
}

fn filter_in_place(coeffs: &FilterCoefficients, signal: &mut Matrix) {
    let mut state = FilterState::new(coeffs.clone(), signal.cols());
    for r in 0..signal.rows() {
        state.process_row(signal.row_mut(r));
    }
}

/// Band-pass, notch, envelope, decimate.
pub fn preprocess(rec: &RawEmgRecording, chain: &PreprocessConfig) -> Result<EnvelopeStream> {
    rec.validate()?;
    chain.validate(rec.sample_rate_hz)?;
    let fs = rec.sample_rate_hz;
    let bandpass = design_filter(&chain.bandpass(), fs)?;
    let notch = design_filter(&chain.notch(), fs)?;
    let lowpass = design_filter(&chain.envelope_lowpass(), fs)?;

    let mut x = rec.samples.clone();
    filter_in_place(&bandpass, &mut x);
    filter_in_place(&notch, &mut x);
    x.as_mut_slice().iter_mut().for_each(|v| *v = v.abs());
    filter_in_place(&lowpass, &mut x);
    x.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    if !x.is_finite() {
        return Err(Error::Signal("preprocessing produced non-finite values".into()));
    }
    let frames = decimate(&x, chain.decim_factor)?;
    let repetition = rec
        .repetition
        .iter()
        .step_by(chain.decim_factor)
        .copied()
        .collect();
    Ok(EnvelopeStream {
        sample_rate_hz: fs / chain.decim_factor as f64,
        start_time_s: rec.start_time_s,
        frames,
        repetition,
        chain: *chain,
    })
}

/// Sample-at-a-time version of [`preprocess`].
#[derive(Debug, Clone)]
pub struct StreamingPreprocessor {
    front: FilterState,
    lowpass: FilterState,
    decim_factor: usize,
    phase: usize,
}

impl StreamingPreprocessor {
    pub fn new(chain: &PreprocessConfig, sample_rate_hz: f64, channels: usize) -> Result<Self> {
        chain.validate(sample_rate_hz)?;
        let bandpass = design_filter(&chain.bandpass(), sample_rate_hz)?;
        let notch = design_filter(&chain.notch(), sample_rate_hz)?;
        let mut front = bandpass;
        front.sections.extend(notch.sections);
        let lowpass = design_filter(&chain.envelope_lowpass(), sample_rate_hz)?;
        Ok(StreamingPreprocessor {
            front: FilterState::new(front, channels),
            lowpass: FilterState::new(lowpass, channels),
            decim_factor: chain.decim_factor,
            phase: 0,
        })
    }

    /// Consumes one raw sample (modified in place) and returns true when it
    /// is an output frame; the frame is then left in `row`.
    pub fn push(&mut self, row: &mut [f64]) -> bool {
        self.front.process_row(row);
        row.iter_mut().for_each(|v| *v = v.abs());
        self.lowpass.process_row(row);
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        let emit = self.phase == 0;
        self.phase = (self.phase + 1) % self.decim_factor;
        emit
    }

    pub fn reset(&mut self) {
        self.front.reset();
        self.lowpass.reset();
        self.phase = 0;
    }
}
