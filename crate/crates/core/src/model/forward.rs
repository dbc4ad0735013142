use std::collections::VecDeque;

use crate::autodiff::kernels;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sigproc::Window;

use super::{Dense, DparsParams, RefinementInput};

/// Every intermediate of one prediction.
///
/// `z_enc` rows run oldest to newest; `scores` and `alpha` are indexed by lag
/// `j` (0 = newest frame).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub z_enc: Matrix,
    pub scores: Vec<f64>,
    pub alpha: Vec<f64>,
    pub z_atn: Vec<f64>,
    pub expansion: Vec<f64>,
    /// Per finger, probabilities over that finger's attractor support.
    pub probs: Vec<Vec<f64>>,
    pub y_attr: Vec<f64>,
    pub y_refn: Vec<f64>,
    pub y: Vec<f64>,
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Geometry(format!("{what}: expected {want} values, got {got}")))
    }
}

fn dense(params: &DparsParams, layer: Dense, x: &[f64]) -> Vec<f64> {
    let w = params.store().get(layer.w);
    let (m, n) = w.value.dims();
    let mut h = vec![0.0; m];
    kernels::matvec(w.value.data(), m, n, x, &mut h);
    let mut out = vec![0.0; m];
    kernels::add(&h, params.value(layer.b), &mut out);
    out
}

fn tanh_vec(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::tanh(x, &mut out);
    out
}

/// `W_enc x`.
pub fn encode(x: &[f64], params: &DparsParams) -> Result<Vec<f64>> {
    let c = params.config();
    check_len("encode input", x.len(), c.c_in)?;
    let mut z = vec![0.0; c.d_enc];
    kernels::matvec(params.value(params.layout_ref().enc), c.d_enc, c.c_in, x, &mut z);
    Ok(z)
}

/// Shared scorer on `[z_prev; z_now]`.
pub fn attention_score(z_prev: &[f64], z_now: &[f64], params: &DparsParams) -> Result<f64> {
    let d = params.config().d_enc;
    check_len("attention z_prev", z_prev.len(), d)?;
    check_len("attention z_now", z_now.len(), d)?;
    Ok(score_unchecked(z_prev, z_now, params))
}

fn score_unchecked(z_prev: &[f64], z_now: &[f64], params: &DparsParams) -> f64 {
    let l = params.layout_ref();
    let mut cat = Vec::with_capacity(z_prev.len() * 2);
    cat.extend_from_slice(z_prev);
    cat.extend_from_slice(z_now);
    let h = tanh_vec(&dense(params, l.atn1, &cat));
    dense(params, l.atn2, &h)[0]
}

/// Scores, normalized coefficients and context vector over an encoding
/// history given oldest first.
pub fn attention_context<'a>(
    history: impl DoubleEndedIterator<Item = &'a [f64]> + ExactSizeIterator + Clone,
    params: &DparsParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let c = params.config();
    if history.len() != c.t_seq {
        return Err(Error::Geometry(format!(
            "attention needs {} encodings, got {}",
            c.t_seq,
            history.len()
        )));
    }
    let now = history.clone().last().expect("t_seq >= 1");
    check_len("encoding", now.len(), c.d_enc)?;
    let mut scores = Vec::with_capacity(c.t_seq);
    for z in history.clone().rev() {
        check_len("encoding", z.len(), c.d_enc)?;
        scores.push(score_unchecked(z, now, params));
    }
    let mut alpha = vec![0.0; c.t_seq];
    kernels::softmax(&scores, &mut alpha);
    let mut z_atn = vec![0.0; c.d_enc];
    kernels::weighted_sum(&alpha, history.rev(), &mut z_atn);
    Ok((scores, alpha, z_atn))
}

/// `tanh(W_exp z_atn + b)`.
pub fn expand(z_atn: &[f64], params: &DparsParams) -> Result<Vec<f64>> {
    check_len("expand input", z_atn.len(), params.config().d_enc)?;
    Ok(tanh_vec(&dense(params, params.layout_ref().exp, z_atn)))
}

fn state_range(states: &[f64]) -> (f64, f64) {
    states
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)))
}

/// State probabilities and probability-weighted angle for one finger.
pub fn attractor_head(e: &[f64], finger: usize, params: &DparsParams) -> Result<(Vec<f64>, f64)> {
    let c = params.config();
    check_len("attractor input", e.len(), c.d_exp)?;
    if finger >= c.n_fingers {
        return Err(Error::Model(format!("finger {finger} out of range")));
    }
    let l = params.layout_ref();
    let h = tanh_vec(&dense(params, l.attr1[finger], e));
    let logits = dense(params, l.attr2[finger], &h);
    let mut p = vec![0.0; logits.len()];
    kernels::softmax(&logits, &mut p);
    let states = params.support_values(finger);
    let mut y = [0.0];
    kernels::matvec(states, 1, states.len(), &p, &mut y);
    // a convex combination of the states, up to rounding
    let (lo, hi) = state_range(states);
    let mut clamped = [0.0];
    kernels::clamp(&y, lo, hi, &mut clamped);
    Ok((p, clamped[0]))
}

/// Unbounded correction for one finger.
pub fn refine(input: &[f64], finger: usize, params: &DparsParams) -> Result<f64> {
    let c = params.config();
    let want = match c.refinement_input {
        RefinementInput::Context => c.d_enc,
        RefinementInput::Expansion => c.d_exp,
    };
    check_len("refinement input", input.len(), want)?;
    if finger >= c.n_fingers {
        return Err(Error::Model(format!("finger {finger} out of range")));
    }
    let l = params.layout_ref();
    let h = tanh_vec(&dense(params, l.refn1[finger], input));
    Ok(dense(params, l.refn2[finger], &h)[0])
}

fn finish(z_enc: Matrix, params: &DparsParams) -> Result<ForwardTrace> {
    let c = params.config();
    let (scores, alpha, z_atn) =
        attention_context((0..z_enc.rows()).map(|r| z_enc.row(r)), params)?;
    let expansion = expand(&z_atn, params)?;
    let refn_in = match c.refinement_input {
        RefinementInput::Context => &z_atn,
        RefinementInput::Expansion => &expansion,
    };
    let mut probs = Vec::with_capacity(c.n_fingers);
    let mut y_attr = Vec::with_capacity(c.n_fingers);
    let mut y_refn = Vec::with_capacity(c.n_fingers);
    for f in 0..c.n_fingers {
        let (p, ya) = attractor_head(&expansion, f, params)?;
        probs.push(p);
        y_attr.push(ya);
    }
    for f in 0..c.n_fingers {
        y_refn.push(refine(refn_in, f, params)?);
    }
    let mut y = vec![0.0; c.n_fingers];
    kernels::add(&y_attr, &y_refn, &mut y);
    let trace = ForwardTrace {
        z_enc,
        scores,
        alpha,
        z_atn,
        expansion,
        probs,
        y_attr,
        y_refn,
        y,
    };
    if trace.y.iter().chain(&trace.alpha).any(|v| !v.is_finite()) {
        return Err(Error::Model("forward produced non-finite values".into()));
    }
    Ok(trace)
}

/// Forward over `t_seq` frames given row-major, oldest first.
pub fn forward_frames(frames: &[f64], params: &DparsParams) -> Result<ForwardTrace> {
    let c = params.config();
    check_len("window", frames.len(), c.t_seq * c.c_in)?;
    let mut z_enc = Matrix::zeros(c.t_seq, c.d_enc);
    for (t, x) in frames.chunks_exact(c.c_in).enumerate() {
        kernels::matvec(
            params.value(params.layout_ref().enc),
            c.d_enc,
            c.c_in,
            x,
            z_enc.row_mut(t),
        );
    }
    finish(z_enc, params)
}

pub fn forward(window: &Window<'_>, params: &DparsParams) -> Result<ForwardTrace> {
    let c = params.config();
    if window.channels != c.c_in || window.len() != c.t_seq {
        return Err(Error::Geometry(format!(
            "window is {}x{}, model expects {}x{}",
            window.len(),
            window.channels,
            c.t_seq,
            c.c_in
        )));
    }
    forward_frames(window.data, params)
}

/// Ring buffer of the most recent encodings.
#[derive(Debug, Clone, Default)]
pub struct StreamState {
    ring: VecDeque<Vec<f64>>,
}

impl StreamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.ring.clear();
    }

    pub fn filled(&self) -> usize {
        self.ring.len()
    }
}

/// Encodes `frame` once, pushes it, and predicts once `t_seq` encodings are
/// buffered.
pub fn streaming_step(
    frame: &[f64],
    state: &mut StreamState,
    params: &DparsParams,
) -> Result<Option<ForwardTrace>> {
    let c = params.config();
    let z = encode(frame, params)?;
    if state.ring.len() == c.t_seq {
        state.ring.pop_front();
    }
    state.ring.push_back(z);
    if state.ring.len() < c.t_seq {
        return Ok(None);
    }
    let mut z_enc = Matrix::zeros(c.t_seq, c.d_enc);
    for (t, z) in state.ring.iter().enumerate() {
        z_enc.row_mut(t).copy_from_slice(z);
    }
    finish(z_enc, params).map(Some)
}

/// Node handles of a forward recorded on a [`Tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub y: NodeId,
    pub y_attr: NodeId,
    pub y_refn: NodeId,
    pub alpha: NodeId,
    pub probs: Vec<NodeId>,
}

/// Records the forward over `frames` (row-major `[t_seq × c_in]`) on `tape`.
pub fn forward_on_tape(tape: &mut Tape, params: &DparsParams, frames: &[f64]) -> Result<TapeForward> {
    let c = params.config();
    check_len("window", frames.len(), c.t_seq * c.c_in)?;
    let l = params.layout_ref();
    let store = params.store();
    let p = |tape: &mut Tape, d: Dense| (tape.param(store, d.w), tape.param(store, d.b));

    let enc = tape.param(store, l.enc);
    let mut zs = Vec::with_capacity(c.t_seq);
    for x in frames.chunks_exact(c.c_in) {
        let xn = tape.try_constant(x)?;
        zs.push(tape.matvec(enc, xn)?);
    }

    let (a1w, a1b) = p(tape, l.atn1);
    let (a2w, a2b) = p(tape, l.atn2);
    let now = *zs.last().expect("t_seq >= 1");
    let lags: Vec<NodeId> = zs.iter().rev().copied().collect();
    let mut scores = Vec::with_capacity(c.t_seq);
    for &z in &lags {
        let cat = tape.concat(&[z, now])?;
        let h = tape.matvec(a1w, cat)?;
        let h = tape.add(h, a1b)?;
        let h = tape.tanh(h)?;
        let s = tape.matvec(a2w, h)?;
        scores.push(tape.add(s, a2b)?);
    }
    let scores = tape.concat(&scores)?;
    let alpha = tape.softmax(scores)?;
    let z_atn = tape.weighted_sum(alpha, &lags)?;

    let (ew, eb) = p(tape, l.exp);
    let e = tape.matvec(ew, z_atn)?;
    let e = tape.add(e, eb)?;
    let e = tape.tanh(e)?;

    let mut probs = Vec::with_capacity(c.n_fingers);
    let mut y_attr = Vec::with_capacity(c.n_fingers);
    for f in 0..c.n_fingers {
        let (w1, b1) = p(tape, l.attr1[f]);
        let (w2, b2) = p(tape, l.attr2[f]);
        let h = tape.matvec(w1, e)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h)?;
        let logits = tape.matvec(w2, h)?;
        let logits = tape.add(logits, b2)?;
        let prob = tape.softmax(logits)?;
        let states = params.support_values(f);
        let sv = tape.constant_matrix(1, states.len(), states)?;
        let ya = tape.matvec(sv, prob)?;
        let (lo, hi) = state_range(states);
        y_attr.push(tape.clamp(ya, lo, hi)?);
        probs.push(prob);
    }
    let refn_in = match c.refinement_input {
        RefinementInput::Context => z_atn,
        RefinementInput::Expansion => e,
    };
    let mut y_refn = Vec::with_capacity(c.n_fingers);
    for f in 0..c.n_fingers {
        let (w1, b1) = p(tape, l.refn1[f]);
        let (w2, b2) = p(tape, l.refn2[f]);
        let h = tape.matvec(w1, refn_in)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h)?;
        let r = tape.matvec(w2, h)?;
        y_refn.push(tape.add(r, b2)?);
    }
    let y_attr = tape.concat(&y_attr)?;
    let y_refn = tape.concat(&y_refn)?;
    let y = tape.add(y_attr, y_refn)?;
    Ok(TapeForward {
        y,
        y_attr,
        y_refn,
        alpha,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DparsConfig;
    use proptest::prelude::*;

    fn small() -> DparsConfig {
        DparsConfig {
            c_in: 5,
            d_enc: 3,
            t_seq: 6,
            h_atn: 4,
            d_exp: 5,
            h_attr: 4,
            h_refn: 3,
            ..DparsConfig::default()
        }
    }

    fn frames(n: usize, c: usize, phase: f64) -> Vec<f64> {
        (0..n * c).map(|k| (k as f64 * 0.29 + phase).sin() * 2.0).collect()
    }

    #[test]
    fn zero_params_predict_the_mean_state() {
        let params = DparsParams::zeros(&small()).unwrap();
        let t = forward_frames(&frames(6, 5, 0.0), &params).unwrap();
        for a in &t.alpha {
            assert!((a - 1.0 / 6.0).abs() < 1e-15);
        }
        for p in t.probs.iter().flatten() {
            assert!((p - 1.0 / 11.0).abs() < 1e-15);
        }
        for f in 0..6 {
            assert!((t.y_attr[f] - 135.0).abs() < 1e-12);
            assert_eq!(t.y_refn[f], 0.0);
            assert_eq!(t.y[f], t.y_attr[f]);
        }
    }

    #[test]
    fn streaming_matches_batch_bit_for_bit() {
        let c = small();
        let params = DparsParams::init(&c, 5).unwrap();
        let stream = frames(40, c.c_in, 1.3);
        let mut state = StreamState::new();
        for (i, x) in stream.chunks_exact(c.c_in).enumerate() {
            let got = streaming_step(x, &mut state, &params).unwrap();
            if i + 1 < c.t_seq {
                assert!(got.is_none());
                continue;
            }
            let start = (i + 1 - c.t_seq) * c.c_in;
            let want = forward_frames(&stream[start..(i + 1) * c.c_in], &params).unwrap();
            assert_eq!(got.unwrap(), want, "frame {i}");
        }
        state.reset();
        assert_eq!(state.filled(), 0);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let c = DparsConfig {
            refinement_input: RefinementInput::Expansion,
            ..small()
        };
        let params = DparsParams::init(&c, 8).unwrap();
        let x = frames(6, 5, 0.4);
        let plain = forward_frames(&x, &params).unwrap();
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, &params, &x).unwrap();
        assert_eq!(tape.value(out.y), &plain.y[..]);
        assert_eq!(tape.value(out.y_attr), &plain.y_attr[..]);
        assert_eq!(tape.value(out.y_refn), &plain.y_refn[..]);
        assert_eq!(tape.value(out.alpha), &plain.alpha[..]);
        for (f, &p) in out.probs.iter().enumerate() {
            assert_eq!(tape.value(p), &plain.probs[f][..]);
        }
    }

    #[test]
    fn wrong_window_shape_is_a_geometry_error() {
        let params = DparsParams::zeros(&small()).unwrap();
        let e = forward_frames(&[0.0; 7], &params).unwrap_err();
        assert!(matches!(e, Error::Geometry(_)));
        let data = vec![0.0; 6 * 4];
        let w = Window { data: &data, channels: 4, end_index: 5 };
        assert!(matches!(forward(&w, &params), Err(Error::Geometry(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn trace_invariants(seed in 0u64..1000, scale in 0.01f64..20.0, phase in -3.0f64..3.0) {
            let c = small();
            let params = DparsParams::init(&c, seed).unwrap();
            let x: Vec<f64> = frames(6, 5, phase).iter().map(|v| v * scale).collect();
            let t = forward_frames(&x, &params).unwrap();
            prop_assert!((t.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(t.alpha.iter().all(|&a| a >= 0.0));
            for f in 0..6 {
                prop_assert!((t.probs[f].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(t.y_attr[f] >= 90.0 - 1e-9 && t.y_attr[f] <= 180.0 + 1e-9);
                prop_assert_eq!(t.y[f], t.y_attr[f] + t.y_refn[f]);
            }
            prop_assert!(t.expansion.iter().all(|e| e.abs() <= 1.0));
        }
    }
}
