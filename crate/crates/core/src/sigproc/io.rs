//! Raw recording CSV: header `t,ch0,..,ch{C-1},rep`, time in seconds,
//! samples in microvolts.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::RawEmgRecording;

pub fn write_raw_csv(path: &Path, rec: &RawEmgRecording) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::from("t");
    for c in 0..rec.channels() {
        write!(line, ",ch{c}").unwrap();
    }
    line.push_str(",rep\n");
    out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for r in 0..rec.len() {
        line.clear();
        let t = rec.start_time_s + r as f64 / rec.sample_rate_hz;
        write!(line, "{t}").unwrap();
        for v in rec.samples.row(r) {
            write!(line, ",{v}").unwrap();
        }
        writeln!(line, ",{}", rec.repetition[r]).unwrap();
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a recording; the sample rate is inferred from the time column.
pub fn read_raw_csv(path: &Path) -> Result<RawEmgRecording> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let n_cols = headers.len();
    if n_cols < 3 || &headers[0] != "t" || &headers[n_cols - 1] != "rep" {
        return Err(Error::format(path, "expected header t,ch0..ch{C-1},rep"));
    }
    for (i, h) in headers.iter().skip(1).take(n_cols - 2).enumerate() {
        if h != format!("ch{i}") {
            return Err(Error::format(path, format!("column {} should be ch{i}, found {h}", i + 1)));
        }
    }
    let channels = n_cols - 2;

    let mut times = Vec::new();
    let mut data = Vec::new();
    let mut reps = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut line = 1;
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(Error::format(path, e.to_string())),
        }
        line += 1;
        if record.len() != n_cols {
            return Err(Error::format(path, format!("line {line}: expected {n_cols} fields")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("line {line}: bad number {s:?}")))
        };
        times.push(parse(&record[0])?);
        for f in record.iter().skip(1).take(channels) {
            data.push(parse(f)?);
        }
        let rep = record[n_cols - 1]
            .trim()
            .parse::<u32>()
            .map_err(|_| Error::format(path, format!("line {line}: bad repetition id")))?;
        reps.push(rep);
    }
    if times.len() < 2 {
        return Err(Error::format(path, "need at least two samples to infer the sample rate"));
    }
    let sample_rate_hz = infer_rate(&times).ok_or_else(|| {
        Error::format(path, "time column is not uniformly sampled")
    })?;
    let samples = Matrix::from_vec(times.len(), channels, data);
    RawEmgRecording::new(sample_rate_hz, times[0], samples, reps)
}

/// Rate from a uniformly spaced time column; snaps to an integer rate when
/// within 1 ppm.
pub(crate) fn infer_rate(times: &[f64]) -> Option<f64> {
    let n = times.len();
    let span = times[n - 1] - times[0];
    if !(span > 0.0) {
        return None;
    }
    let est = (n - 1) as f64 / span;
    let rate = if (est - est.round()).abs() < 1e-6 * est {
        est.round()
    } else {
        est
    };
    let dt = 1.0 / rate;
    let uniform = times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() < 0.01 * dt);
    uniform.then_some(rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.csv");
        let samples = Matrix::from_fn(48, 3, |r, c| (r as f64 * 0.37 - c as f64 * 1.1).sin() * 12.5);
        let reps = (0..48).map(|r| 1 + r as u32 / 24).collect();
        let rec = RawEmgRecording::new(2400.0, 0.0, samples, reps).unwrap();
        write_raw_csv(&p, &rec).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,ch0,ch1,ch2,rep\n"));
        let back = read_raw_csv(&p).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn missing_rep_column_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.csv");
        std::fs::write(&p, "t,ch0\n0,1\n0.1,2\n").unwrap();
        assert!(matches!(read_raw_csv(&p), Err(Error::Format { .. })));
    }
}
