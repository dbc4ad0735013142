//! Dense numeric kernels shared by the tape and by tape-free inference.
//!
//! Both paths call exactly these functions in the same order, which is what
//! makes streaming and batch predictions bit-identical.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
fn count(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

/// Runs `f` and returns how many multiply-accumulates the kernels in this
/// module performed on the current thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(Cell::get);
    let r = f();
    let after = MACS.with(Cell::get);
    (r, after - before)
}

/// `out = W x` for row-major `W` of shape `[m × n]`.
pub fn matvec(w: &[f64], m: usize, n: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(out.len(), m);
    for (row, o) in w.chunks_exact(n).zip(out.iter_mut()) {
        *o = dot_unrolled(row, x);
    }
    count(m * n);
}

#[inline]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = i * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `Σ a_i b_i`.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    count(a.len());
    dot_unrolled(a, b)
}

/// `gx += Wᵀ g`.
pub fn matvec_t_acc(w: &[f64], m: usize, n: usize, g: &[f64], gx: &mut [f64]) {
    for (row, &gi) in w.chunks_exact(n).zip(g.iter().take(m)) {
        if gi != 0.0 {
            for (o, &wij) in gx.iter_mut().zip(row) {
                *o += gi * wij;
            }
        }
    }
}

/// `gw += g xᵀ`.
pub fn outer_acc(g: &[f64], x: &[f64], gw: &mut [f64]) {
    let n = x.len();
    for (row, &gi) in gw.chunks_exact_mut(n).zip(g) {
        if gi != 0.0 {
            for (o, &xj) in row.iter_mut().zip(x) {
                *o += gi * xj;
            }
        }
    }
}

pub fn add(a: &[f64], b: &[f64], out: &mut [f64]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

/// Elementwise `clamp(lo, hi)`.
pub fn clamp(x: &[f64], lo: f64, hi: f64, out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.clamp(lo, hi);
    }
}

pub fn tanh(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.tanh();
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `out = Σ_j weights[j] · vectors[j]`, vectors laid out back to back.
pub fn weighted_sum<'a>(
    weights: &[f64],
    vectors: impl IntoIterator<Item = &'a [f64]>,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut k = 0;
    for (&w, v) in weights.iter().zip(vectors) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
        k += 1;
    }
    count(k * out.len());
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
        .sum::<f64>()
}

/// `Σ |a − b|`.
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
