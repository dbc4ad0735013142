//! Entropy-regularized training, then pruning each attractor head to the
//! states it actually uses on validation data.
//!
//!     cargo run --release --example prune_attractors -- [epochs] [epsilon]

use dpars::dataset::{synthesize, LabeledDataset, Split, SyntheticConfig, WindowGeometry};
use dpars::eval::{entropy_stats, evaluate, prune_attractor_heads, SUPPORT_EPSILON};
use dpars::model::DparsConfig;
use dpars::sigproc::PreprocessConfig;
use dpars::train::{train_loop, TrainConfig};

fn main() -> dpars::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(30, |a| a.parse().expect("epochs"));
    let epsilon = args.next().map_or(SUPPORT_EPSILON, |a| a.parse().expect("epsilon"));

    let session = synthesize(&SyntheticConfig::default())?;
    let dataset = LabeledDataset::build(
        &session.recording,
        &session.angles,
        &PreprocessConfig::default(),
        WindowGeometry::default(),
    )?;
    let tc = TrainConfig { epochs, lambda: 0.05, ..TrainConfig::default() };
    let (params, _) = train_loop(&dataset, &DparsConfig::default(), &tc)?;

    let (_, val) = evaluate(&dataset, &params, Split::Val)?;
    let report = entropy_stats(&val, epsilon)?;
    let states: Vec<Vec<f64>> = (0..6).map(|f| params.support_values(f).to_vec()).collect();
    print!("{}", report.summary(&states));
    for f in 0..6 {
        let probs: Vec<String> = report.mean_probs[f].iter().map(|p| format!("{p:.3}")).collect();
        println!("  f{f} mean P: {}", probs.join(" "));
    }

    let (pruned, cost) = prune_attractor_heads(&params, &report.supports)?;
    print!("{}", cost.summary());
    let dense = evaluate(&dataset, &params, Split::Test)?.0.mean;
    let after = evaluate(&dataset, &pruned, Split::Test)?.0.mean;
    println!("test R2 dense {dense:.4}, pruned {after:.4}");
    Ok(())
}
