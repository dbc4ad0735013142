//! Sample-by-sample decoding: raw EMG in, one prediction per envelope frame
//! out, split into attractor and refinement parts.
//!
//!     cargo run --release --example streaming_decode

use dpars::dataset::{synthesize, LabeledDataset, SyntheticConfig, WindowGeometry};
use dpars::model::{streaming_step, DparsConfig, StreamState};
use dpars::sigproc::{PreprocessConfig, StreamingPreprocessor};
use dpars::train::{train_loop, TrainConfig};

fn main() -> dpars::Result<()> {
    let cfg = SyntheticConfig { repetition_s: 6.0, n_channels: 16, ..SyntheticConfig::default() };
    let session = synthesize(&cfg)?;
    let chain = PreprocessConfig::default();
    let dataset = LabeledDataset::build(&session.recording, &session.angles, &chain, WindowGeometry::default())?;
    let config = DparsConfig { c_in: 16, ..DparsConfig::default() };
    let (params, _) = train_loop(&dataset, &config, &TrainConfig { epochs: 10, ..TrainConfig::default() })?;

    let rec = &session.recording;
    let mut pre = StreamingPreprocessor::new(&chain, rec.sample_rate_hz, rec.channels())?;
    let mut state = StreamState::new();
    let mut row = vec![0.0; rec.channels()];
    let mut frame = 0usize;
    println!("    t     truth f1   y f1  = attr  + refn");
    for r in 0..rec.len() {
        row.copy_from_slice(rec.samples.row(r));
        if !pre.push(&mut row) {
            continue;
        }
        dataset.normalization.apply_frame(&mut row);
        if let Some(trace) = streaming_step(&row, &mut state, &params)? {
            if frame.is_multiple_of(100) {
                println!(
                    "{:>6.2}  {:>9.1}  {:>6.1} = {:>6.1} {:>+6.1}",
                    frame as f64 / 100.0,
                    session.angles.values.get(frame, 1),
                    trace.y[1],
                    trace.y_attr[1],
                    trace.y_refn[1]
                );
            }
        }
        frame += 1;
    }
    Ok(())
}
