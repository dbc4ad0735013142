//! Train the default decoder on the synthetic benchmark and compare with the
//! ridge baseline.
//!
//!     cargo run --release --example train_synthetic -- [epochs] [lambda]

use dpars::dataset::{synthesize, LabeledDataset, Split, SyntheticConfig, WindowGeometry};
use dpars::eval::{baseline_linear, entropy_stats, evaluate, SUPPORT_EPSILON};
use dpars::model::DparsConfig;
use dpars::sigproc::PreprocessConfig;
use dpars::train::{train_loop, TrainConfig};

fn main() -> dpars::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(20, |a| a.parse().expect("epochs"));
    let lambda = args.next().map_or(TrainConfig::default().lambda, |a| a.parse().expect("lambda"));

    let session = synthesize(&SyntheticConfig::default())?;
    let dataset = LabeledDataset::build(
        &session.recording,
        &session.angles,
        &PreprocessConfig::default(),
        WindowGeometry::default(),
    )?;
    println!(
        "{} windows: {} train, {} val, {} test",
        dataset.len(),
        dataset.indices(Split::Train).len(),
        dataset.indices(Split::Val).len(),
        dataset.indices(Split::Test).len()
    );

    let tc = TrainConfig { epochs, lambda, ..TrainConfig::default() };
    let config = DparsConfig::default();
    let (params, report) = train_loop(&dataset, &config, &tc)?;
    for e in &report.epochs {
        println!("epoch {:>3}  train {:>8.3}  val {:>8.3}  val R2 {:.4}", e.epoch, e.train_loss, e.val_loss, e.val_r2);
    }
    println!("best epoch {} ({:.1} s)", report.best_epoch, report.wall_clock_s);

    let (test, traces) = evaluate(&dataset, &params, Split::Test)?;
    print!("{}", test.summary());
    let states: Vec<Vec<f64>> = (0..6).map(|f| params.support_values(f).to_vec()).collect();
    print!("{}", entropy_stats(&traces, SUPPORT_EPSILON)?.summary(&states));
    let ridge = baseline_linear(&dataset)?;
    println!("ridge baseline test R2 {:.4}", ridge.test.mean);
    Ok(())
}
