//! Seeded synthetic EMG/finger-angle sessions.
//!
//! Each finger holds plateaus at a few levels of its own, drawn from a fixed
//! set, and moves between them with raised-cosine transitions. A flexor and
//! an extensor per finger are driven by convex functions of the angle,
//! multiplied by a velocity term while the muscle shortens. Muscle
//! activations mix nonnegatively onto an electrode grid and modulate
//! white-noise carriers at acquisition rate. Every repetition replays the
//! same level script with jittered timing.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use super::{AngleStream, ANGLE_MAX, ANGLE_MIN, N_ANGLES};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sigproc::{RawEmgRecording, ENVELOPE_RATE_HZ};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub n_channels: usize,
    pub n_repetitions: u32,
    pub repetition_s: f64,
    /// Plateau angles, degrees.
    pub levels: Vec<f64>,
    /// How many distinct plateau levels each finger uses, drawn per finger
    /// from `levels` (capped at its length).
    pub levels_per_finger: usize,
    pub hold_min_s: f64,
    pub hold_max_s: f64,
    pub transition_ms: f64,
    /// Relative per-repetition jitter of every hold duration.
    pub timing_jitter: f64,
    /// Activation floor of every muscle.
    pub tonic: f64,
    /// Convexity of the angle-to-drive curves; near 0 the drives are linear
    /// in angle, larger values concentrate each drive near its end of range.
    pub nonlinearity_gain: f64,
    /// Relative activation boost per 90°/s of shortening velocity.
    pub velocity_gain: f64,
    pub amplitude_uv: f64,
    /// Additive white sensor noise, microvolts.
    pub noise_std: f64,
    /// 50 Hz power-line interference amplitude, microvolts.
    pub line_noise_uv: f64,
    /// Spatial spread of a muscle over the electrode grid, in electrode pitches.
    pub mixing_width: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 42,
            sample_rate_hz: 2400.0,
            n_channels: 64,
            n_repetitions: 6,
            repetition_s: 15.0,
            levels: vec![90.0, 112.5, 135.0, 157.5, 180.0],
            levels_per_finger: 2,
            hold_min_s: 0.6,
            hold_max_s: 1.6,
            transition_ms: 300.0,
            timing_jitter: 0.15,
            tonic: 0.05,
            nonlinearity_gain: 5.0,
            velocity_gain: 4.0,
            amplitude_uv: 50.0,
            noise_std: 2.0,
            line_noise_uv: 10.0,
            mixing_width: 1.5,
        }
    }
}

impl SyntheticConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SyntheticConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if !(self.sample_rate_hz > 0.0) || self.sample_rate_hz % ENVELOPE_RATE_HZ != 0.0 {
            return bad("sample_rate_hz must be a positive multiple of 100");
        }
        if self.levels_per_finger == 0 {
            return bad("levels_per_finger must be at least 1");
        }
        if self.n_channels == 0 {
            return bad("n_channels must be at least 1");
        }
        if !(1..=6).contains(&self.n_repetitions) {
            return bad("n_repetitions must be in 1..=6");
        }
        if self.levels.is_empty()
            || self
                .levels
                .iter()
                .any(|l| !(ANGLE_MIN..=ANGLE_MAX).contains(l))
        {
            return bad("levels must be non-empty and within [90, 180]");
        }
        let positive = [
            self.repetition_s,
            self.hold_min_s,
            self.hold_max_s,
            self.transition_ms,
            self.mixing_width,
            self.nonlinearity_gain,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("durations, mixing_width and nonlinearity_gain must be positive");
        }
        if self.hold_max_s < self.hold_min_s {
            return bad("hold_max_s < hold_min_s");
        }
        let nonneg = [
            self.timing_jitter,
            self.tonic,
            self.velocity_gain,
            self.amplitude_uv,
            self.noise_std,
            self.line_noise_uv,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("gains, spreads and noise levels must be nonnegative");
        }
        if self.timing_jitter >= 1.0 {
            return bad("timing_jitter must be < 1");
        }
        Ok(())
    }
}

/// A synthesized session.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub recording: RawEmgRecording,
    /// Angles at every envelope frame time.
    pub angles: AngleStream,
    /// `[channels × muscles]` nonnegative mixing matrix; muscle `2f` flexes
    /// finger `f`, muscle `2f + 1` extends it.
    pub mixing: Matrix,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: f64,
    from: f64,
    to: f64,
}

/// Piecewise trajectory of one finger within one repetition.
#[derive(Debug, Clone)]
struct Trajectory {
    segments: Vec<Segment>,
    transition_s: f64,
}

impl Trajectory {
    /// Angle and angular velocity (deg/s) at time `t` from the repetition
    /// start.
    fn eval(&self, t: f64) -> (f64, f64) {
        let k = self
            .segments
            .partition_point(|s| s.start <= t)
            .saturating_sub(1);
        let s = &self.segments[k];
        let tau = t - s.start;
        if tau >= self.transition_s || tau < 0.0 {
            return (s.to, 0.0);
        }
        let x = PI * tau / self.transition_s;
        let w = 0.5 * (1.0 - x.cos());
        let dw = 0.5 * PI / self.transition_s * x.sin();
        (s.from + (s.to - s.from) * w, (s.to - s.from) * dw)
    }
}

/// Level script of one finger, shared across repetitions.
struct Script {
    levels: Vec<f64>,
    holds: Vec<f64>,
}

fn make_script(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Script {
    let k = cfg.levels_per_finger.min(cfg.levels.len());
    let own: Vec<f64> = cfg.levels.choose_multiple(rng, k).copied().collect();
    let mut levels = vec![own[rng.random_range(0..own.len())]];
    let mut holds = Vec::new();
    let span = cfg.repetition_s * (1.0 + cfg.timing_jitter) + 1.0;
    let mut t = 0.0;
    while t < span {
        let h = rng.random_range(cfg.hold_min_s..=cfg.hold_max_s);
        holds.push(h);
        t += h + cfg.transition_ms / 1000.0;
        let cur = *levels.last().unwrap();
        let next = if own.len() == 1 {
            cur
        } else {
            loop {
                let l = own[rng.random_range(0..own.len())];
                if l != cur {
                    break l;
                }
            }
        };
        levels.push(next);
    }
    Script { levels, holds }
}

fn realize(cfg: &SyntheticConfig, script: &Script, rng: &mut ChaCha8Rng) -> Trajectory {
    let transition_s = cfg.transition_ms / 1000.0;
    let mut segments = vec![Segment {
        start: f64::NEG_INFINITY,
        from: script.levels[0],
        to: script.levels[0],
    }];
    let mut t = 0.0;
    for (k, h) in script.holds.iter().enumerate() {
        t += h * (1.0 + cfg.timing_jitter * rng.random_range(-1.0..=1.0));
        let from = segments.last().unwrap().to;
        segments.push(Segment {
            start: t,
            from,
            to: script.levels[k + 1],
        });
        t += transition_s;
    }
    Trajectory {
        segments,
        transition_s,
    }
}

/// Flexor and extensor activations for one finger.
fn activations(cfg: &SyntheticConfig, angle: f64, velocity: f64) -> (f64, f64) {
    let u = (angle - ANGLE_MIN) / (ANGLE_MAX - ANGLE_MIN);
    let v = velocity / (ANGLE_MAX - ANGLE_MIN);
    // smaller angle means more flexed
    let k = cfg.nonlinearity_gain;
    let curve = |x: f64| (k * x).exp_m1() / k.exp_m1();
    let flex_drive = curve(1.0 - u);
    let ext_drive = curve(u);
    let flex = cfg.tonic + flex_drive * (1.0 + cfg.velocity_gain * (-v).max(0.0));
    let ext = cfg.tonic + ext_drive * (1.0 + cfg.velocity_gain * v.max(0.0));
    (flex, ext)
}

fn mixing_matrix(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Matrix {
    let muscles = 2 * N_ANGLES;
    let side = (cfg.n_channels as f64).sqrt().ceil().max(1.0) as usize;
    let centers: Vec<(f64, f64)> = (0..muscles)
        .map(|_| {
            (
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
            )
        })
        .collect();
    let two_w2 = 2.0 * cfg.mixing_width * cfg.mixing_width;
    Matrix::from_fn(cfg.n_channels, muscles, |ch, m| {
        let (x, y) = ((ch % side) as f64, (ch / side) as f64);
        let d2 = (x - centers[m].0).powi(2) + (y - centers[m].1).powi(2);
        0.02 + (-d2 / two_w2).exp()
    })
}

/// Generates a full session. The same config always yields the same session.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticSession> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mixing = mixing_matrix(cfg, &mut rng);
    let scripts: Vec<Script> = (0..N_ANGLES).map(|_| make_script(cfg, &mut rng)).collect();
    let line_phase: Vec<f64> = (0..cfg.n_channels)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();

    let fs = cfg.sample_rate_hz;
    let decim = (fs / ENVELOPE_RATE_HZ).round() as usize;
    let per_rep = (cfg.repetition_s * ENVELOPE_RATE_HZ).round() as usize * decim;
    let n = per_rep * cfg.n_repetitions as usize;
    let c = cfg.n_channels;
    let muscles = 2 * N_ANGLES;

    let mut samples = Vec::with_capacity(n * c);
    let mut repetition = Vec::with_capacity(n);
    let mut angle_times = Vec::with_capacity(n / decim);
    let mut angle_values = Vec::with_capacity(n / decim * N_ANGLES);
    let mut act = vec![0.0; muscles];
    let mut env = vec![0.0; c];

    for rep in 0..cfg.n_repetitions {
        let trajectories: Vec<Trajectory> =
            scripts.iter().map(|s| realize(cfg, s, &mut rng)).collect();
        for i in 0..per_rep {
            let global = rep as usize * per_rep + i;
            let t_rep = i as f64 / fs;
            let t = global as f64 / fs;
            for (f, traj) in trajectories.iter().enumerate() {
                let (angle, vel) = traj.eval(t_rep);
                let (fl, ex) = activations(cfg, angle, vel);
                act[2 * f] = fl;
                act[2 * f + 1] = ex;
                if global.is_multiple_of(decim) {
                    if f == 0 {
                        angle_times.push(global as f64 / fs);
                    }
                    angle_values.push(angle);
                }
            }
            for (ch, e) in env.iter_mut().enumerate() {
                *e = mixing
                    .row(ch)
                    .iter()
                    .zip(&act)
                    .map(|(m, a)| m * a)
                    .sum::<f64>();
            }
            for (ch, e) in env.iter().enumerate() {
                let carrier: f64 = rng.sample(StandardNormal);
                let mut x = cfg.amplitude_uv * e * carrier;
                if cfg.noise_std > 0.0 {
                    let noise: f64 = rng.sample(StandardNormal);
                    x += cfg.noise_std * noise;
                }
                if cfg.line_noise_uv > 0.0 {
                    x += cfg.line_noise_uv * (2.0 * PI * 50.0 * t + line_phase[ch]).sin();
                }
                samples.push(x);
            }
            repetition.push(rep + 1);
        }
    }

    let frames = angle_times.len();
    let recording = RawEmgRecording::new(fs, 0.0, Matrix::from_vec(n, c, samples), repetition)?;
    Ok(SyntheticSession {
        recording,
        angles: AngleStream {
            times: angle_times,
            values: Matrix::from_vec(frames, N_ANGLES, angle_values),
        },
        mixing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigproc::{preprocess, PreprocessConfig};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_channels: 8,
            repetition_s: 3.0,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn seeded_and_shaped() {
        let cfg = small();
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.recording.len(), 6 * 3 * 2400);
        assert_eq!(a.recording.channels(), 8);
        assert_eq!(a.angles.len(), 6 * 300);
        assert_eq!(a.recording.repetition[0], 1);
        assert_eq!(*a.recording.repetition.last().unwrap(), 6);
        assert!(a.mixing.as_slice().iter().all(|&m| m >= 0.0));
        let other = synthesize(&SyntheticConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.recording.samples, other.recording.samples);
    }

    #[test]
    fn angles_stay_in_range_and_visit_levels() {
        let s = synthesize(&small()).unwrap();
        let v = s.angles.values.as_slice();
        assert!(v.iter().all(|a| (90.0..=180.0).contains(a)));
        let at_level = v
            .iter()
            .filter(|a| small().levels.iter().any(|l| (*a - l).abs() < 1e-9))
            .count();
        assert!(at_level > v.len() / 2);
        for f in 0..6 {
            let mut seen: Vec<f64> = s.angles.values.column(f);
            seen.retain(|a| small().levels.contains(a));
            seen.sort_by(f64::total_cmp);
            seen.dedup();
            assert!(seen.len() <= 2, "finger {f} visits {seen:?}");
        }
    }

    #[test]
    fn transitions_are_smooth_and_timed() {
        let traj = Trajectory {
            segments: vec![
                Segment {
                    start: f64::NEG_INFINITY,
                    from: 90.0,
                    to: 90.0,
                },
                Segment {
                    start: 1.0,
                    from: 90.0,
                    to: 180.0,
                },
            ],
            transition_s: 0.4,
        };
        assert_eq!(traj.eval(0.5), (90.0, 0.0));
        let (a, v) = traj.eval(1.2);
        assert!((a - 135.0).abs() < 1e-9);
        assert!((v - 90.0 * PI / 0.8).abs() < 1e-9);
        assert_eq!(traj.eval(1.4).0, 180.0);
        // velocity matches a central difference of the angle
        let h = 1e-6;
        let fd = (traj.eval(1.1 + h).0 - traj.eval(1.1 - h).0) / (2.0 * h);
        assert!((fd - traj.eval(1.1).1).abs() < 1e-4);
    }

    #[test]
    fn frozen_plateau_gives_constant_envelope() {
        let cfg = SyntheticConfig {
            n_repetitions: 1,
            repetition_s: 12.0,
            levels: vec![135.0],
            noise_std: 0.0,
            line_noise_uv: 0.0,
            ..SyntheticConfig::default()
        };
        let s = synthesize(&cfg).unwrap();
        let env = preprocess(&s.recording, &PreprocessConfig::default()).unwrap();
        // two-second block means, averaged over channels, after settling
        let blocks: Vec<f64> = (1..6)
            .map(|b| {
                let rows = b * 200..(b + 1) * 200;
                let n = (rows.len() * env.channels()) as f64;
                rows.map(|r| env.frames.row(r).iter().sum::<f64>()).sum::<f64>() / n
            })
            .collect();
        let m = blocks.iter().sum::<f64>() / blocks.len() as f64;
        for b in &blocks {
            assert!((b - m).abs() / m < 0.01, "{blocks:?}");
        }
    }

    #[test]
    fn activations_follow_angle() {
        let cfg = SyntheticConfig::default();
        let (f90, e90) = activations(&cfg, 90.0, 0.0);
        let (f180, e180) = activations(&cfg, 180.0, 0.0);
        assert!(f90 > f180 && e180 > e90);
        let (f_moving, _) = activations(&cfg, 120.0, -90.0);
        let (f_still, _) = activations(&cfg, 120.0, 0.0);
        assert!(f_moving > f_still);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SyntheticConfig { n_channels: 0, ..small() },
            SyntheticConfig { levels: vec![], ..small() },
            SyntheticConfig { levels: vec![200.0], ..small() },
            SyntheticConfig { n_repetitions: 7, ..small() },
            SyntheticConfig { levels_per_finger: 0, ..small() },
            SyntheticConfig { sample_rate_hz: 2450.0, ..small() },
            SyntheticConfig { noise_std: -1.0, ..small() },
        ] {
            assert!(matches!(synthesize(&cfg), Err(Error::Config(_))));
        }
    }
}
