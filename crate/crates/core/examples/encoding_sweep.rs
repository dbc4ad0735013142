//! Test accuracy against encoding size, averaged over seeds.
//!
//!     cargo run --release --example encoding_sweep -- [epochs]

use dpars::dataset::{synthesize, LabeledDataset, SyntheticConfig, WindowGeometry};
use dpars::eval::{encoding_size_sweep, sweep_to_csv};
use dpars::model::DparsConfig;
use dpars::sigproc::PreprocessConfig;
use dpars::train::TrainConfig;

fn main() -> dpars::Result<()> {
    let epochs = std::env::args().nth(1).map_or(5, |a| a.parse().expect("epochs"));
    let session = synthesize(&SyntheticConfig::default())?;
    let dataset = LabeledDataset::build(
        &session.recording,
        &session.angles,
        &PreprocessConfig::default(),
        WindowGeometry::default(),
    )?;
    let tc = TrainConfig { epochs, ..TrainConfig::default() };
    let rows = encoding_size_sweep(&dataset, &DparsConfig::default(), &tc, &[1, 2, 5, 10], &[1, 2])?;
    print!("{}", sweep_to_csv(&rows));
    Ok(())
}
