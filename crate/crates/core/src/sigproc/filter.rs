//! Recursive (IIR) filter design and causal application as cascaded
//! second-order sections.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// What to build. Cutoffs are in Hz and must sit strictly inside
/// `(0, sample_rate / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    /// Butterworth high-pass at `low_hz` cascaded with a Butterworth
    /// low-pass at `high_hz`, each of the given order.
    Bandpass { low_hz: f64, high_hz: f64, order: usize },
    /// Second-order notch with quality factor `q`.
    Notch { center_hz: f64, q: f64 },
    /// Butterworth low-pass.
    Lowpass { cutoff_hz: f64, order: usize },
}

impl FilterSpec {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidFilter(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        let nyquist = sample_rate_hz / 2.0;
        let check = |name: &str, f: f64| {
            if f.is_finite() && f > 0.0 && f < nyquist {
                Ok(())
            } else {
                Err(Error::InvalidFilter(format!(
                    "{name} = {f} Hz must lie strictly inside (0, {nyquist}) Hz"
                )))
            }
        };
        let check_order = |order: usize| {
            if order >= 1 {
                Ok(())
            } else {
                Err(Error::InvalidFilter("order must be >= 1".into()))
            }
        };
        match *self {
            FilterSpec::Bandpass {
                low_hz,
                high_hz,
                order,
            } => {
                check("low cutoff", low_hz)?;
                check("high cutoff", high_hz)?;
                check_order(order)?;
                if low_hz >= high_hz {
                    return Err(Error::InvalidFilter(format!(
                        "bandpass low cutoff {low_hz} Hz must be below high cutoff {high_hz} Hz"
                    )));
                }
            }
            FilterSpec::Notch { center_hz, q } => {
                check("notch center", center_hz)?;
                if !(q.is_finite() && q > 0.0) {
                    return Err(Error::InvalidFilter(format!("notch q must be positive, got {q}")));
                }
            }
            FilterSpec::Lowpass { cutoff_hz, order } => {
                check("cutoff", cutoff_hz)?;
                check_order(order)?;
            }
        }
        Ok(())
    }
}

/// One normalized second-order section:
/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Biquad {
        Biquad {
            b0: b[0] / a[0],
            b1: b[1] / a[0],
            b2: b[2] / a[0],
            a1: a[1] / a[0],
            a2: a[2] / a[0],
        }
    }

    /// Poles of `1 + a1 z^-1 + a2 z^-2`, as (re, im) pairs.
    pub fn poles(&self) -> [(f64, f64); 2] {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc >= 0.0 {
            let s = disc.sqrt();
            [((-self.a1 + s) / 2.0, 0.0), ((-self.a1 - s) / 2.0, 0.0)]
        } else {
            let s = (-disc).sqrt();
            [(-self.a1 / 2.0, s / 2.0), (-self.a1 / 2.0, -s / 2.0)]
        }
    }
}

/// Cascade of second-order sections, applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
}

impl FilterCoefficients {
    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .flat_map(|s| s.poles())
            .all(|(re, im)| (re * re + im * im).sqrt() < 1.0)
    }

    /// |H(e^{jω})| at `freq_hz`.
    pub fn magnitude_at(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let (c1, s1) = (w.cos(), w.sin());
        let (c2, s2) = ((2.0 * w).cos(), (2.0 * w).sin());
        self.sections
            .iter()
            .map(|s| {
                let nr = s.b0 + s.b1 * c1 + s.b2 * c2;
                let ni = -(s.b1 * s1 + s.b2 * s2);
                let dr = 1.0 + s.a1 * c1 + s.a2 * c2;
                let di = -(s.a1 * s1 + s.a2 * s2);
                ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
            })
            .product()
    }
}

/// Quality factors of the conjugate pole pairs of an order-`n` Butterworth
/// prototype; a trailing first-order section exists when `n` is odd.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / (2 * order) as f64).sin()))
        .collect()
}

fn butterworth_sections(order: usize, cutoff_hz: f64, fs: f64, highpass: bool) -> Vec<Biquad> {
    let w0 = 2.0 * PI * cutoff_hz / fs;
    let (cw, sw) = (w0.cos(), w0.sin());
    let mut sections: Vec<Biquad> = butterworth_qs(order)
        .into_iter()
        .map(|q| {
            let alpha = sw / (2.0 * q);
            let a = [1.0 + alpha, -2.0 * cw, 1.0 - alpha];
            let b = if highpass {
                [(1.0 + cw) / 2.0, -(1.0 + cw), (1.0 + cw) / 2.0]
            } else {
                [(1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0]
            };
            Biquad::normalized(b, a)
        })
        .collect();
    if order % 2 == 1 {
        let k = (w0 / 2.0).tan();
        let a = [1.0 + k, k - 1.0, 0.0];
        let b = if highpass { [1.0, -1.0, 0.0] } else { [k, k, 0.0] };
        sections.push(Biquad::normalized(b, a));
    }
    sections
}

/// Designs a causal, stable cascade for `spec` at `sample_rate_hz`.
///
/// Butterworth sections come from the bilinear transform with the cutoff
/// pre-warped, so the -3 dB point lands exactly on the requested frequency.
pub fn design_filter(spec: &FilterSpec, sample_rate_hz: f64) -> Result<FilterCoefficients> {
    spec.validate(sample_rate_hz)?;
    let sections = match *spec {
        FilterSpec::Bandpass {
            low_hz,
            high_hz,
            order,
        } => {
            let mut s = butterworth_sections(order, low_hz, sample_rate_hz, true);
            s.extend(butterworth_sections(order, high_hz, sample_rate_hz, false));
            s
        }
        FilterSpec::Notch { center_hz, q } => {
            let w0 = 2.0 * PI * center_hz / sample_rate_hz;
            let alpha = w0.sin() / (2.0 * q);
            let cw = w0.cos();
            vec![Biquad::normalized(
                [1.0, -2.0 * cw, 1.0],
                [1.0 + alpha, -2.0 * cw, 1.0 - alpha],
            )]
        }
        FilterSpec::Lowpass { cutoff_hz, order } => {
            butterworth_sections(order, cutoff_hz, sample_rate_hz, false)
        }
    };
    let coeffs = FilterCoefficients { sections };
    debug_assert!(coeffs.is_stable());
    Ok(coeffs)
}

/// Per-channel delay lines for a cascade, transposed direct form II.
///
/// Feeding samples one row at a time gives the same output as
/// [`apply_filter`] over the whole block.
#[derive(Debug, Clone)]
pub struct FilterState {
    coeffs: FilterCoefficients,
    channels: usize,
    // [channel][section] -> (s1, s2)
    state: Vec<[f64; 2]>,
}

impl FilterState {
    pub fn new(coeffs: FilterCoefficients, channels: usize) -> Self {
        let n = coeffs.sections.len() * channels;
        FilterState {
            coeffs,
            channels,
            state: vec![[0.0; 2]; n],
        }
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = [0.0; 2]);
    }

    /// Filters one multichannel sample in place.
    pub fn process_row(&mut self, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.channels);
        let n_sec = self.coeffs.sections.len();
        for (ch, x) in row.iter_mut().enumerate() {
            let mut v = *x;
            let st = &mut self.state[ch * n_sec..(ch + 1) * n_sec];
            for (sec, s) in self.coeffs.sections.iter().zip(st.iter_mut()) {
                let y = sec.b0 * v + s[0];
                s[0] = sec.b1 * v - sec.a1 * y + s[1];
                s[1] = sec.b2 * v - sec.a2 * y;
                v = y;
            }
            *x = v;
        }
    }
}

/// Causal per-channel filtering with zero initial state.
pub fn apply_filter(coeffs: &FilterCoefficients, signal: &Matrix) -> Result<Matrix> {
    if !signal.is_finite() {
        return Err(Error::Signal("apply_filter: non-finite input sample".into()));
    }
    let mut out = signal.clone();
    let mut state = FilterState::new(coeffs.clone(), signal.cols());
    for r in 0..out.rows() {
        state.process_row(out.row_mut(r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    #[test]
    fn butterworth_qs_match_known_tables() {
        let q2 = butterworth_qs(2);
        assert!((q2[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let q4 = butterworth_qs(4);
        assert!((q4[0] - 1.306563).abs() < 1e-6);
        assert!((q4[1] - 0.541196).abs() < 1e-6);
        let q5 = butterworth_qs(5);
        assert!((q5[0] - 1.618034).abs() < 1e-6);
        assert!((q5[1] - 0.618034).abs() < 1e-6);
    }

    #[test]
    fn lowpass_is_three_db_down_at_cutoff() {
        for order in 1..=5 {
            let c = design_filter(
                &FilterSpec::Lowpass {
                    cutoff_hz: 40.0,
                    order,
                },
                1000.0,
            )
            .unwrap();
            assert!((db(c.magnitude_at(40.0, 1000.0)) + 3.0103).abs() < 1e-3, "order {order}");
            assert!((c.magnitude_at(0.0, 1000.0) - 1.0).abs() < 1e-12);
            assert!(c.is_stable());
        }
    }

    #[test]
    fn rejects_cutoff_at_or_above_nyquist() {
        let err = design_filter(
            &FilterSpec::Lowpass {
                cutoff_hz: 1300.0,
                order: 2,
            },
            2400.0,
        );
        assert!(matches!(err, Err(Error::InvalidFilter(_))));
        let err = design_filter(
            &FilterSpec::Notch {
                center_hz: 1200.0,
                q: 30.0,
            },
            2400.0,
        );
        assert!(err.is_err());
        let err = design_filter(
            &FilterSpec::Bandpass {
                low_hz: 500.0,
                high_hz: 5.0,
                order: 4,
            },
            2400.0,
        );
        assert!(err.is_err());
        let err = design_filter(
            &FilterSpec::Lowpass {
                cutoff_hz: 10.0,
                order: 0,
            },
            2400.0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn row_streaming_matches_block() {
        let c = design_filter(
            &FilterSpec::Bandpass {
                low_hz: 5.0,
                high_hz: 500.0,
                order: 3,
            },
            2400.0,
        )
        .unwrap();
        let sig = Matrix::from_fn(300, 2, |r, ch| ((r * 7 + ch * 3) % 11) as f64 - 5.0);
        let block = apply_filter(&c, &sig).unwrap();
        let mut st = FilterState::new(c, 2);
        for r in 0..sig.rows() {
            let mut row = sig.row(r).to_vec();
            st.process_row(&mut row);
            assert_eq!(row.as_slice(), block.row(r));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let c = design_filter(&FilterSpec::Notch { center_hz: 50.0, q: 30.0 }, 2400.0).unwrap();
        let mut sig = Matrix::zeros(4, 1);
        sig.set(2, 0, f64::NAN);
        assert!(apply_filter(&c, &sig).is_err());
    }
}
