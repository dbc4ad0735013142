//! Accuracy, attractor sparsity, hardware cost and baselines.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::autodiff::kernels;
use crate::dataset::{AngleTarget, LabeledDataset, Split, N_ANGLES};
use crate::error::{Error, Result};
use crate::model::forward::{forward_frames, ForwardTrace};
use crate::model::{param_count, DparsConfig, DparsParams, ParamCount};
use crate::train::{train_loop, TrainConfig};

/// Default probability threshold for attractor supports.
pub const SUPPORT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `None` where the truth has zero variance.
    pub r2: Vec<Option<f64>>,
    /// Mean over the defined fingers.
    pub mean: f64,
    /// One R² over all outputs pooled together.
    pub pooled: f64,
    pub mae: Vec<f64>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("finger,r2,mae\n");
        for (f, (r, m)) in self.r2.iter().zip(&self.mae).enumerate() {
            match r {
                Some(r) => writeln!(s, "f{f},{r},{m}").unwrap(),
                None => writeln!(s, "f{f},,{m}").unwrap(),
            }
        }
        writeln!(s, "mean,{},{}", self.mean, mean(&self.mae)).unwrap();
        writeln!(s, "pooled,{},", self.pooled).unwrap();
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (f, (r, m)) in self.r2.iter().zip(&self.mae).enumerate() {
            let r = r.map_or("undefined".to_string(), |r| format!("{r:.4}"));
            writeln!(s, "  f{f}: R2 {r}  MAE {m:.2} deg").unwrap();
        }
        writeln!(s, "  mean R2 {:.4} (pooled {:.4})", self.mean, self.pooled).unwrap();
        for w in &self.warnings {
            writeln!(s, "  warning: {w}").unwrap();
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-finger coefficient of determination.
pub fn r2(pred: &[AngleTarget], truth: &[AngleTarget]) -> Result<MetricsReport> {
    if pred.len() != truth.len() || truth.len() < 2 {
        return Err(Error::Eval(format!(
            "R2 needs equal lengths >= 2, got {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mut r2 = Vec::with_capacity(N_ANGLES);
    let mut mae = Vec::with_capacity(N_ANGLES);
    let mut warnings = Vec::new();
    let (mut ss_res_all, mut ss_tot_all) = (0.0, 0.0);
    let grand = truth.iter().flat_map(|t| t.iter()).sum::<f64>() / (n * N_ANGLES as f64);
    for f in 0..N_ANGLES {
        let m = truth.iter().map(|t| t[f]).sum::<f64>() / n;
        let (mut res, mut tot, mut abs) = (0.0, 0.0, 0.0);
        for (p, t) in pred.iter().zip(truth) {
            res += (p[f] - t[f]).powi(2);
            tot += (t[f] - m).powi(2);
            abs += (p[f] - t[f]).abs();
            ss_tot_all += (t[f] - grand).powi(2);
        }
        ss_res_all += res;
        mae.push(abs / n);
        if tot > 0.0 {
            r2.push(Some(1.0 - res / tot));
        } else {
            warnings.push(format!("finger {f} has constant truth; R2 undefined and excluded"));
            r2.push(None);
        }
    }
    let defined: Vec<f64> = r2.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Eval("every finger has constant truth; R2 undefined".into()));
    }
    let pooled = if ss_tot_all > 0.0 {
        1.0 - ss_res_all / ss_tot_all
    } else {
        f64::NAN
    };
    Ok(MetricsReport {
        mean: mean(&defined),
        r2,
        pooled,
        mae,
        warnings,
    })
}

/// Plain forward pass over every window of one split.
pub fn predict_split(
    dataset: &LabeledDataset,
    params: &DparsParams,
    split: Split,
) -> Result<Vec<ForwardTrace>> {
    dataset
        .indices(split)
        .into_iter()
        .map(|i| forward_frames(dataset.window(i).data, params))
        .collect()
}

/// Test-set metrics of a trained model.
pub fn evaluate(dataset: &LabeledDataset, params: &DparsParams, split: Split) -> Result<(MetricsReport, Vec<ForwardTrace>)> {
    let traces = predict_split(dataset, params, split)?;
    let pred: Vec<AngleTarget> = traces.iter().map(to_target).collect();
    let report = r2(&pred, &dataset.targets(split))?;
    Ok((report, traces))
}

fn to_target(t: &ForwardTrace) -> AngleTarget {
    let mut y = [0.0; N_ANGLES];
    y.copy_from_slice(&t.y);
    y
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub mean_entropy: Vec<f64>,
    pub top1_mass: Vec<f64>,
    pub top2_mass: Vec<f64>,
    /// Per finger, average probability of each state in the head.
    pub mean_probs: Vec<Vec<f64>>,
    pub epsilon: f64,
    /// Per finger, head-state indices whose mean probability exceeds `epsilon`.
    pub supports: Vec<Vec<usize>>,
}

impl EntropyReport {
    pub fn supports_at(&self, epsilon: f64) -> Vec<Vec<usize>> {
        self.mean_probs
            .iter()
            .map(|p| (0..p.len()).filter(|&k| p[k] > epsilon).collect())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("finger,mean_entropy,top1_mass,top2_mass,support\n");
        for f in 0..self.mean_entropy.len() {
            let sup: Vec<String> = self.supports[f].iter().map(|k| k.to_string()).collect();
            writeln!(
                s,
                "f{f},{},{},{},{}",
                self.mean_entropy[f],
                self.top1_mass[f],
                self.top2_mass[f],
                sup.join(" ")
            )
            .unwrap();
        }
        s
    }

    pub fn summary(&self, states: &[Vec<f64>]) -> String {
        let mut s = String::new();
        for f in 0..self.mean_entropy.len() {
            let sup: Vec<String> = self.supports[f]
                .iter()
                .map(|&k| states.get(f).and_then(|v| v.get(k)).map_or(k.to_string(), |v| v.to_string()))
                .collect();
            writeln!(
                s,
                "  f{f}: H {:.3}  top1 {:.3}  top2 {:.3}  support {{{}}}",
                self.mean_entropy[f],
                self.top1_mass[f],
                self.top2_mass[f],
                sup.join(", ")
            )
            .unwrap();
        }
        s
    }
}

/// Entropy and concentration of the attractor distributions over `traces`.
pub fn entropy_stats(traces: &[ForwardTrace], epsilon: f64) -> Result<EntropyReport> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Eval("entropy statistics need at least one trace".into()))?;
    let nf = first.probs.len();
    let n = traces.len() as f64;
    let mut h = vec![0.0f64; nf];
    let mut top1 = vec![0.0f64; nf];
    let mut top2 = vec![0.0f64; nf];
    let mut mp: Vec<Vec<f64>> = first.probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut sorted = Vec::new();
    for t in traces {
        for (f, p) in t.probs.iter().enumerate() {
            h[f] += kernels::entropy(p);
            sorted.clear();
            sorted.extend_from_slice(p);
            sorted.sort_by(|a, b| b.total_cmp(a));
            top1[f] += sorted[0];
            top2[f] += sorted[0] + sorted.get(1).copied().unwrap_or(0.0);
            for (acc, v) in mp[f].iter_mut().zip(p) {
                *acc += v;
            }
        }
    }
    for f in 0..nf {
        h[f] /= n;
        top1[f] = (top1[f] / n).min(1.0);
        top2[f] = (top2[f] / n).min(1.0);
        mp[f].iter_mut().for_each(|v| *v /= n);
    }
    let mut report = EntropyReport {
        mean_entropy: h,
        top1_mass: top1,
        top2_mass: top2,
        mean_probs: mp,
        epsilon,
        supports: Vec::new(),
    };
    report.supports = report.supports_at(epsilon);
    Ok(report)
}

/// Multiply–accumulates per streaming prediction, by stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacBreakdown {
    pub encoder: u64,
    pub attention: u64,
    pub context: u64,
    pub expansion: u64,
    pub attractor_hidden: u64,
    /// `h_attr·S + S` summed over fingers.
    pub attractor_output: u64,
    pub refinement: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub params: ParamCount,
    pub dense: MacBreakdown,
    pub pruned: Option<MacBreakdown>,
    pub support_sizes: Option<Vec<usize>>,
    /// `c_in / d_enc`.
    pub input_compression: f64,
    /// `t_seq`: one context vector summarizes the whole window.
    pub temporal_compression: f64,
    pub reduction_factor: f64,
}

impl CostReport {
    /// Dense over pruned attractor output-stage MACs.
    pub fn attractor_output_ratio(&self) -> Option<f64> {
        self.pruned
            .map(|p| self.dense.attractor_output as f64 / p.attractor_output as f64)
    }

    pub fn total_ratio(&self) -> Option<f64> {
        self.pruned.map(|p| self.dense.total as f64 / p.total as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,params,dense_macs,pruned_macs\n");
        let p = &self.params;
        let d = &self.dense;
        let q = self.pruned;
        let pr = |f: fn(&MacBreakdown) -> u64| q.as_ref().map_or(String::new(), |m| f(m).to_string());
        let rows: [(&str, String, u64, String); 8] = [
            ("encoder", p.encoder.to_string(), d.encoder, pr(|m| m.encoder)),
            ("attention", p.attention.to_string(), d.attention, pr(|m| m.attention)),
            ("context", String::new(), d.context, pr(|m| m.context)),
            ("expansion", p.expansion.to_string(), d.expansion, pr(|m| m.expansion)),
            ("attractor_hidden", String::new(), d.attractor_hidden, pr(|m| m.attractor_hidden)),
            ("attractor_output", p.attractor.to_string(), d.attractor_output, pr(|m| m.attractor_output)),
            ("refinement", p.refinement.to_string(), d.refinement, pr(|m| m.refinement)),
            ("total", p.total.to_string(), d.total, pr(|m| m.total)),
        ];
        for (name, params, dense, pruned) in rows {
            writeln!(s, "{name},{params},{dense},{pruned}").unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        writeln!(
            s,
            "parameters: {} (encoder {}, attention {}, expansion {}, attractor {}, refinement {})",
            p.total, p.encoder, p.attention, p.expansion, p.attractor, p.refinement
        )
        .unwrap();
        let d = &self.dense;
        writeln!(
            s,
            "MACs per prediction: {} (encoder {}, attention {}, context {}, expansion {}, attractor {} + {}, refinement {})",
            d.total, d.encoder, d.attention, d.context, d.expansion, d.attractor_hidden, d.attractor_output, d.refinement
        )
        .unwrap();
        writeln!(
            s,
            "input compression {}x, temporal compression {}x, reduction factor {}x",
            fmt_ratio(self.input_compression),
            fmt_ratio(self.temporal_compression),
            fmt_ratio(self.reduction_factor)
        )
        .unwrap();
        if let (Some(q), Some(sizes)) = (&self.pruned, &self.support_sizes) {
            writeln!(
                s,
                "pruned supports {:?}: {} MACs, attractor output stage {} -> {} ({:.2}x), total {:.2}x",
                sizes,
                q.total,
                d.attractor_output,
                q.attractor_output,
                self.attractor_output_ratio().unwrap(),
                self.total_ratio().unwrap()
            )
            .unwrap();
        }
        s
    }
}

fn fmt_ratio(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

fn breakdown(c: &DparsConfig, support: &[usize]) -> MacBreakdown {
    let u = |v: usize| v as u64;
    let encoder = u(c.c_in * c.d_enc);
    let attention = u(c.t_seq * (2 * c.d_enc * c.h_atn + c.h_atn));
    let context = u(c.t_seq * c.d_enc);
    let expansion = u(c.d_enc * c.d_exp);
    let attractor_hidden = u(c.n_fingers * c.d_exp * c.h_attr);
    let attractor_output = support.iter().map(|&s| u(c.h_attr * s + s)).sum();
    let refinement = u(c.n_fingers * (c.refn_in() * c.h_refn + c.h_refn));
    MacBreakdown {
        encoder,
        attention,
        context,
        expansion,
        attractor_hidden,
        attractor_output,
        refinement,
        total: encoder + attention + context + expansion + attractor_hidden + attractor_output + refinement,
    }
}

/// Closed-form cost of one streaming prediction; `support_sizes` adds the
/// pruned variant.
pub fn mac_count(config: &DparsConfig, support_sizes: Option<&[usize]>) -> Result<CostReport> {
    config.validate()?;
    let dense = breakdown(config, &vec![config.n_states; config.n_fingers]);
    let pruned = match support_sizes {
        None => None,
        Some(s) => {
            if s.len() != config.n_fingers {
                return Err(Error::Eval(format!(
                    "{} support sizes for {} fingers",
                    s.len(),
                    config.n_fingers
                )));
            }
            if let Some(&bad) = s.iter().find(|&&k| k == 0 || k > config.n_states) {
                return Err(Error::Eval(format!(
                    "support size {bad} outside 1..={}",
                    config.n_states
                )));
            }
            Some(breakdown(config, s))
        }
    };
    let input_compression = config.c_in as f64 / config.d_enc as f64;
    let temporal_compression = config.t_seq as f64;
    Ok(CostReport {
        params: param_count(config),
        dense,
        pruned,
        support_sizes: support_sizes.map(<[usize]>::to_vec),
        input_compression,
        temporal_compression,
        reduction_factor: input_compression * temporal_compression,
    })
}

/// Keeps only the listed attractor states per finger; the softmax
/// renormalizes over what remains.
pub fn prune_attractor_heads(
    params: &DparsParams,
    supports: &[Vec<usize>],
) -> Result<(DparsParams, CostReport)> {
    if let Some(f) = supports.iter().position(Vec::is_empty) {
        return Err(Error::Eval(format!("empty support set for finger {f}")));
    }
    let pruned = params.with_supports(supports)?;
    let sizes: Vec<usize> = supports.iter().map(Vec::len).collect();
    let cost = mac_count(params.config(), Some(&sizes))?;
    Ok((pruned, cost))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub d_enc: usize,
    pub mean_r2: f64,
    /// Sample variance of the mean test R² across seeds.
    pub var_r2: f64,
    pub per_seed: Vec<f64>,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("d_enc,mean_r2,var_r2\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.d_enc, r.mean_r2, r.var_r2).unwrap();
    }
    s
}

/// Trains one model per (encoding size, seed) and reports test R².
pub fn encoding_size_sweep(
    dataset: &LabeledDataset,
    base: &DparsConfig,
    train: &TrainConfig,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.len() < 2 {
        return Err(Error::Config("the encoding sweep needs at least two seeds".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &d_enc in sizes {
        let config = DparsConfig { d_enc, ..base.clone() };
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let tc = TrainConfig { seed, ..train.clone() };
            let (params, _) = train_loop(dataset, &config, &tc)?;
            per_seed.push(evaluate(dataset, &params, Split::Test)?.0.mean);
        }
        let m = mean(&per_seed);
        let var = per_seed.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (per_seed.len() - 1) as f64;
        rows.push(SweepRow {
            d_enc,
            mean_r2: m,
            var_r2: var,
            per_seed,
        });
    }
    Ok(rows)
}

/// Values tried by the λ sweep when none are given.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.005, 0.02, 0.05, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub val_r2: f64,
    pub test_r2: f64,
    /// Per-finger mean attractor entropy on the test split.
    pub mean_entropy: Vec<f64>,
    pub top2_mass: f64,
    pub best_epoch: usize,
}

/// One trained model per λ, in the order given.
#[derive(Debug, Clone)]
pub struct LambdaSweep {
    pub rows: Vec<LambdaRow>,
    pub models: Vec<DparsParams>,
    /// Row with the highest validation R² (ties go to the earlier row).
    pub selected: usize,
}

impl LambdaSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,val_r2,test_r2,top2_mass,best_epoch,selected");
        for f in 0..N_ANGLES {
            write!(s, ",mean_entropy_f{f}").unwrap();
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            write!(
                s,
                "{},{},{},{},{},{}",
                r.lambda,
                r.val_r2,
                r.test_r2,
                r.top2_mass,
                r.best_epoch,
                u8::from(i == self.selected)
            )
            .unwrap();
            for h in &r.mean_entropy {
                write!(s, ",{h}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn find(&self, lambda: f64) -> Option<usize> {
        self.rows.iter().position(|r| r.lambda == lambda)
    }
}

/// Trains one model per entropy weight and picks the best on validation R²
/// (validation loss itself is not comparable across λ).
pub fn lambda_sweep(
    dataset: &LabeledDataset,
    config: &DparsConfig,
    train: &TrainConfig,
    lambdas: &[f64],
) -> Result<LambdaSweep> {
    if lambdas.is_empty() {
        return Err(Error::Config("the lambda sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut models = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let tc = TrainConfig { lambda, ..train.clone() };
        let (params, report) = train_loop(dataset, config, &tc)?;
        let val = evaluate(dataset, &params, Split::Val)?.0;
        let (test, traces) = evaluate(dataset, &params, Split::Test)?;
        let ent = entropy_stats(&traces, SUPPORT_EPSILON)?;
        rows.push(LambdaRow {
            lambda,
            val_r2: val.mean,
            test_r2: test.mean,
            top2_mass: mean(&ent.top2_mass),
            mean_entropy: ent.mean_entropy,
            best_epoch: report.best_epoch,
        });
        models.push(params);
    }
    let mut selected = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.val_r2 > rows[selected].val_r2 {
            selected = i;
        }
    }
    Ok(LambdaSweep { rows, models, selected })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineReport {
    pub lambda: f64,
    pub val_r2: f64,
    pub test: MetricsReport,
}

/// Ridge strengths tried, relative to the mean diagonal of the Gram matrix.
const RIDGE_GRID: [f64; 9] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

fn design(dataset: &LabeledDataset, idx: &[usize]) -> DMatrix<f64> {
    let p = dataset.geometry.window_samples * dataset.channels();
    DMatrix::from_fn(idx.len(), p, |r, c| dataset.window(idx[r]).data[c])
}

fn targets_matrix(dataset: &LabeledDataset, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), N_ANGLES, |r, c| dataset.items[idx[r]].target[c])
}

fn ridge_predict(x: &DMatrix<f64>, w: &DMatrix<f64>, x_mean: &DVector<f64>, y_mean: &DVector<f64>) -> Vec<AngleTarget> {
    let mut y = x * w;
    let offset = y_mean - w.transpose() * x_mean;
    (0..y.nrows())
        .map(|r| {
            let mut t = [0.0; N_ANGLES];
            for (c, v) in t.iter_mut().enumerate() {
                y[(r, c)] += offset[c];
                *v = y[(r, c)];
            }
            t
        })
        .collect()
}

/// Ridge regression from the flattened window to the six angles, with the
/// ridge strength picked on the validation split.
pub fn baseline_linear(dataset: &LabeledDataset) -> Result<BaselineReport> {
    let (tr, va, te) = (
        dataset.indices(Split::Train),
        dataset.indices(Split::Val),
        dataset.indices(Split::Test),
    );
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        return Err(Error::Dataset("ridge baseline needs non-empty train, val and test splits".into()));
    }
    let x = design(dataset, &tr);
    let y = targets_matrix(dataset, &tr);
    let x_mean = x.row_mean().transpose();
    let y_mean = y.row_mean().transpose();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= x_mean.transpose();
    }
    let mut yc = y;
    for mut row in yc.row_iter_mut() {
        row -= y_mean.transpose();
    }
    let gram = xc.tr_mul(&xc);
    let rhs = xc.tr_mul(&yc);
    drop(xc);
    let scale = gram.trace() / gram.nrows() as f64;
    let xv = design(dataset, &va);
    let yv = dataset.targets(Split::Val);

    let mut best: Option<(f64, f64, DMatrix<f64>)> = None;
    for rel in RIDGE_GRID {
        let lambda = rel * scale.max(f64::MIN_POSITIVE);
        let mut a = gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let Some(chol) = a.cholesky() else { continue };
        let w = chol.solve(&rhs);
        let val = r2(&ridge_predict(&xv, &w, &x_mean, &y_mean), &yv)?.mean;
        if best.as_ref().is_none_or(|(_, b, _)| val > *b) {
            best = Some((lambda, val, w));
        }
    }
    let (lambda, val_r2, w) =
        best.ok_or_else(|| Error::Eval("ridge system is not positive definite".into()))?;
    let xt = design(dataset, &te);
    let test = r2(&ridge_predict(&xt, &w, &x_mean, &y_mean), &dataset.targets(Split::Test))?;
    Ok(BaselineReport { lambda, val_r2, test })
}
