//! Raw EMG to 100 Hz envelope frames, with the filter responses that get
//! there.
//!
//!     cargo run --example preprocess_chain

use dpars::dataset::{synthesize, SyntheticConfig};
use dpars::sigproc::{self, design_filter, PreprocessConfig, StreamingPreprocessor};

fn main() -> dpars::Result<()> {
    let chain = PreprocessConfig::default();
    let fs = 2400.0;
    let bandpass = design_filter(&chain.bandpass(), fs)?;
    let notch = design_filter(&chain.notch(), fs)?;
    let lowpass = design_filter(&chain.envelope_lowpass(), fs)?;
    println!("gain (dB)      band-pass   notch   envelope low-pass");
    for f in [1.0, 5.0, 20.0, 50.0, 100.0, 500.0, 1000.0] {
        let db = |c: &sigproc::FilterCoefficients| 20.0 * c.magnitude_at(f, fs).log10();
        println!("{f:>7} Hz  {:>10.2} {:>7.2} {:>10.2}", db(&bandpass), db(&notch), db(&lowpass));
    }

    let session = synthesize(&SyntheticConfig {
        n_repetitions: 1,
        repetition_s: 5.0,
        n_channels: 8,
        ..SyntheticConfig::default()
    })?;
    let rec = &session.recording;
    let stream = sigproc::preprocess(rec, &chain)?;
    println!(
        "\n{} raw samples x {} channels -> {} envelope frames at {} Hz",
        rec.len(),
        rec.channels(),
        stream.len(),
        stream.sample_rate_hz
    );

    // the sample-at-a-time path produces the same frames
    let mut pre = StreamingPreprocessor::new(&chain, fs, rec.channels())?;
    let mut row = vec![0.0; rec.channels()];
    let mut k = 0;
    let mut identical = true;
    for r in 0..rec.len() {
        row.copy_from_slice(rec.samples.row(r));
        if pre.push(&mut row) {
            identical &= row == stream.frames.row(k);
            k += 1;
        }
    }
    println!("streaming preprocessor matches batch: {identical}");
    let ch0: Vec<String> = (0..stream.len()).step_by(50).map(|k| format!("{:.1}", stream.frames.get(k, 0))).collect();
    println!("channel 0 envelope every 0.5 s: {}", ch0.join(" "));
    Ok(())
}
