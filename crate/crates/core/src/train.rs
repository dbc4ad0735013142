//! Entropy-regularized L1 training with plain minibatch SGD.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, NodeId, ParamStore, Tape};
use crate::dataset::{AngleTarget, LabeledDataset, Split, N_ANGLES};
use crate::error::{Error, Result};
use crate::model::forward::{forward_frames, forward_on_tape, ForwardTrace};
use crate::model::{DparsConfig, DparsParams};

/// How many times the learning rate is halved when the first epoch fails to
/// reduce the training loss.
pub const MAX_LR_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            lambda: 0.02,
            batch_size: 64,
            epochs: 100,
            seed: 42,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_r2: f64,
    /// Mean attractor entropy per finger over the validation windows.
    pub mean_entropy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss of the initial parameters, before any step.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Learning rate of the run that was kept.
    pub learning_rate: f64,
    pub lr_retries: u32,
    /// Excluded from equality-sensitive outputs such as CSV files.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_r2");
        for f in 0..N_ANGLES {
            write!(s, ",mean_entropy_f{f}").unwrap();
        }
        s.push('\n');
        for r in &self.epochs {
            write!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_r2).unwrap();
            for h in &r.mean_entropy {
                write!(s, ",{h}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `‖y − target‖₁ + λ Σ_c H(P_c)` for one plain forward trace.
pub fn loss(trace: &ForwardTrace, target: &AngleTarget, lambda: f64) -> f64 {
    let l1 = kernels::l1(&trace.y, target);
    if lambda == 0.0 {
        return l1;
    }
    l1 + lambda * trace.probs.iter().map(|p| kernels::entropy(p)).sum::<f64>()
}

/// Records the per-window objective on `tape` and returns its node.
pub fn loss_on_tape(
    tape: &mut Tape,
    params: &DparsParams,
    frames: &[f64],
    target: &AngleTarget,
    lambda: f64,
) -> Result<NodeId> {
    let out = forward_on_tape(tape, params, frames)?;
    let t = tape.try_constant(target)?;
    let l1 = tape.l1_loss(out.y, t)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    let mut hs = Vec::with_capacity(out.probs.len());
    for &p in &out.probs {
        hs.push(tape.entropy(p)?);
    }
    let ones = tape.constant_matrix(1, hs.len(), &vec![1.0; hs.len()])?;
    let h = tape.concat(&hs)?;
    let h = tape.matvec(ones, h)?;
    let h = tape.scale(lambda, h)?;
    tape.add(l1, h)
}

/// Worst agreement between tape gradients and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// Scalars compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and index of the worst entry.
    pub worst: (String, usize),
}

/// Finite-difference formula used by [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(h) − f(−h)) / 2h`, error O(h²).
    Central,
    /// `(8(f(h) − f(−h)) − (f(2h) − f(−2h))) / 12h`, error O(h⁴).
    Central4,
}

/// Compares the tape gradient of the per-window objective with central
/// differences of step `h`, for every scalar parameter.
///
/// Relative error is `|g − g_fd| / max(|g|, |g_fd|, floor)`; the floor keeps
/// entries whose true gradient is ~0 from dividing by noise.
pub fn gradient_check(
    params: &DparsParams,
    frames: &[f64],
    target: &AngleTarget,
    lambda: f64,
    stencil: Stencil,
    h: f64,
    floor: f64,
) -> Result<GradientCheck> {
    let mut work = params.clone();
    work.store_mut().zero_grad();
    let mut tape = Tape::new();
    let l = loss_on_tape(&mut tape, &work, frames, target, lambda)?;
    tape.backward(l, work.store_mut())?;
    let grads: Vec<Vec<f64>> = work.store().iter().map(|p| p.grad.data().to_vec()).collect();
    let names: Vec<String> = work.store().iter().map(|p| p.name.clone()).collect();

    let mut out = GradientCheck { checked: 0, max_rel_err: 0.0, worst: (String::new(), 0) };
    for (grad, name) in grads.iter().zip(&names) {
        for (k, &g) in grad.iter().enumerate() {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let t = work.get_mut(name).expect("name from the store");
                let orig = t.data()[k];
                t.data_mut()[k] = orig + delta;
                let v = loss(&forward_frames(frames, &work)?, target, lambda);
                work.get_mut(name).expect("name from the store").data_mut()[k] = orig;
                Ok(v)
            };
            let d1 = eval_at(h)? - eval_at(-h)?;
            let fd = match stencil {
                Stencil::Central => d1 / (2.0 * h),
                Stencil::Central4 => {
                    let d2 = eval_at(2.0 * h)? - eval_at(-2.0 * h)?;
                    (8.0 * d1 - d2) / (12.0 * h)
                }
            };
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
            if rel > out.max_rel_err || !rel.is_finite() {
                out.max_rel_err = rel;
                out.worst = (name.clone(), k);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// `θ ← θ − lr ∇θ` over every parameter.
pub fn sgd_step(store: &mut ParamStore, learning_rate: f64) -> Result<()> {
    for p in store.iter() {
        if p.grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::Train(format!("non-finite gradient in {}", p.name)));
        }
    }
    if learning_rate == 0.0 {
        return Ok(());
    }
    for p in store.iter_mut() {
        let g = p.grad.data().to_vec();
        for (v, gi) in p.value.data_mut().iter_mut().zip(g) {
            *v -= learning_rate * gi;
        }
    }
    Ok(())
}

/// Seeded uniform `±1/√fan_in` weights, zero biases.
pub fn init_params(config: &DparsConfig, seed: u64) -> Result<DparsParams> {
    DparsParams::init(config, seed)
}

/// Loss, R² and per-finger entropy of `params` on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEval {
    pub loss: f64,
    pub mean_r2: f64,
    pub mean_entropy: Vec<f64>,
    pub predictions: Vec<[f64; N_ANGLES]>,
}

pub fn evaluate_split(
    dataset: &LabeledDataset,
    params: &DparsParams,
    split: Split,
    lambda: f64,
) -> Result<SplitEval> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Dataset(format!("{split:?} split is empty")));
    }
    let nf = params.config().n_fingers;
    let mut total = 0.0;
    let mut ent = vec![0.0; nf];
    let mut predictions = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    for &i in &idx {
        let trace = forward_frames(dataset.window(i).data, params)?;
        let target = dataset.items[i].target;
        total += loss(&trace, &target, lambda);
        for (e, p) in ent.iter_mut().zip(&trace.probs) {
            *e += kernels::entropy(p);
        }
        let mut y = [0.0; N_ANGLES];
        y.copy_from_slice(&trace.y);
        predictions.push(y);
        targets.push(target);
    }
    let n = idx.len() as f64;
    ent.iter_mut().for_each(|e| *e /= n);
    let mean_r2 = crate::eval::r2(&predictions, &targets)?.mean;
    Ok(SplitEval {
        loss: total / n,
        mean_r2,
        mean_entropy: ent,
        predictions,
    })
}

fn mean_train_loss(dataset: &LabeledDataset, params: &DparsParams, lambda: f64) -> Result<f64> {
    let idx = dataset.indices(Split::Train);
    let mut total = 0.0;
    for &i in &idx {
        let trace = forward_frames(dataset.window(i).data, params)?;
        total += loss(&trace, &dataset.items[i].target, lambda);
    }
    Ok(total / idx.len() as f64)
}

fn check_dataset(dataset: &LabeledDataset, config: &DparsConfig) -> Result<()> {
    if dataset.channels() != config.c_in {
        return Err(Error::Config(format!(
            "dataset has {} channels but the model expects c_in = {}",
            dataset.channels(),
            config.c_in
        )));
    }
    if dataset.geometry.window_samples != config.t_seq {
        return Err(Error::Config(format!(
            "dataset windows have {} frames but the model expects t_seq = {}",
            dataset.geometry.window_samples, config.t_seq
        )));
    }
    for split in [Split::Train, Split::Val] {
        if dataset.indices(split).is_empty() {
            return Err(Error::Dataset(format!("{split:?} split is empty")));
        }
    }
    Ok(())
}

/// Mean-over-batch gradient of the objective, accumulated into `params`.
fn accumulate_batch(
    tape: &mut Tape,
    dataset: &LabeledDataset,
    params: &mut DparsParams,
    batch: &[usize],
    lambda: f64,
) -> Result<f64> {
    params.store_mut().zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        tape.reset();
        let l = loss_on_tape(tape, params, dataset.window(i).data, &dataset.items[i].target, lambda)?;
        total += tape.scalar(l);
        tape.backward_scaled(l, scale, params.store_mut())?;
    }
    Ok(total)
}

struct Attempt {
    best: DparsParams,
    report: TrainReport,
}

enum Outcome {
    Done(Box<Attempt>),
    /// The first epoch did not lower the training loss.
    Stalled,
}

fn run(
    dataset: &LabeledDataset,
    config: &DparsConfig,
    tc: &TrainConfig,
    lr: f64,
    retries: u32,
    may_retry: bool,
) -> Result<Outcome> {
    let mut params = init_params(config, tc.seed)?;
    let initial = mean_train_loss(dataset, &params, tc.lambda)?;
    let mut order = dataset.indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_5eed);
    let mut tape = Tape::new();
    let mut records = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, DparsParams)> = None;

    for epoch in 1..=tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let mut train_total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let step = accumulate_batch(&mut tape, dataset, &mut params, batch, tc.lambda)
                .and_then(|t| sgd_step(params.store_mut(), lr).map(|_| t));
            match step {
                Ok(t) => train_total += t,
                Err(e @ (Error::NonFinite { .. } | Error::Tape(_) | Error::Train(_))) => {
                    if epoch == 1 && may_retry {
                        return Ok(Outcome::Stalled);
                    }
                    return Err(Error::Diverged {
                        epoch,
                        detail: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = train_total / order.len() as f64;
        if epoch == 1 && !(train_loss < initial) && may_retry {
            return Ok(Outcome::Stalled);
        }
        let val = match evaluate_split(dataset, &params, Split::Val, tc.lambda) {
            Ok(v) if v.loss.is_finite() => v,
            Ok(v) => {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("validation loss {}", v.loss),
                })
            }
            Err(Error::NonFinite { op }) => {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite {op} on validation"),
                })
            }
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(l, _, _)| val.loss < *l) {
            best = Some((val.loss, epoch, params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_r2: val.mean_r2,
            mean_entropy: val.mean_entropy,
        });
    }
    let (_, best_epoch, best) = best.expect("epochs >= 1");
    Ok(Outcome::Done(Box::new(Attempt {
        best,
        report: TrainReport {
            initial_train_loss: initial,
            epochs: records,
            best_epoch,
            learning_rate: lr,
            lr_retries: retries,
            wall_clock_s: 0.0,
        },
    })))
}

/// Trains from a seeded initialization and returns the parameters of the
/// epoch with the lowest validation loss.
///
/// If the first epoch does not lower the training loss (or blows up), the
/// learning rate is halved and training restarts, at most
/// [`MAX_LR_RETRIES`] times.
pub fn train_loop(
    dataset: &LabeledDataset,
    config: &DparsConfig,
    tc: &TrainConfig,
) -> Result<(DparsParams, TrainReport)> {
    config.validate()?;
    tc.validate()?;
    check_dataset(dataset, config)?;
    let start = Instant::now();
    let mut lr = tc.learning_rate;
    // lr = 0 cannot make progress; retrying would only shrink it further
    let retryable = lr > 0.0;
    for retry in 0..=MAX_LR_RETRIES {
        let may_retry = retryable && retry < MAX_LR_RETRIES;
        match run(dataset, config, tc, lr, retry, may_retry)? {
            Outcome::Done(mut a) => {
                a.report.wall_clock_s = start.elapsed().as_secs_f64();
                return Ok((a.best, a.report));
            }
            Outcome::Stalled => lr *= 0.5,
        }
    }
    unreachable!("the last attempt never reports a stall")
}
