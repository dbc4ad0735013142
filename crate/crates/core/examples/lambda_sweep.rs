//! Train across entropy weights and keep the best on validation R².
//!
//!     cargo run --release --example lambda_sweep -- [epochs]

use dpars::dataset::{synthesize, LabeledDataset, SyntheticConfig, WindowGeometry};
use dpars::eval::{lambda_sweep, DEFAULT_LAMBDAS};
use dpars::model::DparsConfig;
use dpars::sigproc::PreprocessConfig;
use dpars::train::TrainConfig;

fn main() -> dpars::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |a| a.parse().expect("epochs"));
    let session = synthesize(&SyntheticConfig::default())?;
    let dataset = LabeledDataset::build(
        &session.recording,
        &session.angles,
        &PreprocessConfig::default(),
        WindowGeometry::default(),
    )?;
    let tc = TrainConfig { epochs, ..TrainConfig::default() };
    let sweep = lambda_sweep(&dataset, &DparsConfig::default(), &tc, &DEFAULT_LAMBDAS)?;
    print!("{}", sweep.to_csv());
    let best = &sweep.rows[sweep.selected];
    println!("selected lambda {} (val R2 {:.4}, test R2 {:.4})", best.lambda, best.val_r2, best.test_r2);
    Ok(())
}
