//! The `dpars` command line.
//!
//! Every command takes an optional TOML `--config` file with `[synth]`,
//! `[preprocess]`, `[model]` and `[train]` tables. Each key can also be given
//! as a flag (`learning_rate` is `--learning-rate`); flags win over the file.
//!
//! Exit codes: 0 on success, 1 on runtime or numerical failure, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataset::{
    read_angles_csv, synthesize, write_angles_csv, LabeledDataset, Split, SyntheticConfig,
    WindowGeometry,
};
use crate::error::{Error, Result};
use crate::eval::{
    self, entropy_stats, evaluate, mac_count, prune_attractor_heads, sweep_to_csv, SUPPORT_EPSILON,
};
use crate::model::{streaming_step, DparsConfig, DparsParams, StreamState};
use crate::modelfile::{ModelFile, RunManifest, TrainingMeta};
use crate::sigproc::{self, PreprocessConfig, StreamingPreprocessor};
use crate::train::{train_loop, TrainConfig};

const SECTIONS: [&str; 4] = ["synth", "preprocess", "model", "train"];
const SWEEP_EPOCHS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "dpars", version, about = "EMG envelope to finger-angle decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic recording and its finger angles.
    Synth(SynthCmd),
    /// Train a decoder and save the best-validation model.
    Train(TrainCmd),
    /// Accuracy, attractor entropy and cost of a trained model.
    Eval(EvalCmd),
    /// Stream a raw recording through a model.
    Predict(PredictCmd),
    /// Architecture, parameter and MAC summary of a model file.
    Info(InfoCmd),
    /// Test R² against encoding size, several seeds per size.
    SweepEncoding(SweepEncodingCmd),
    /// Train across entropy weights and pick the best on validation.
    SweepLambda(SweepLambdaCmd),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML file with [synth], [preprocess], [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding emg.csv and angles.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Raw EMG CSV (overrides --data).
    #[arg(long)]
    emg: Option<PathBuf>,
    /// Finger-angle CSV (overrides --data).
    #[arg(long)]
    angles: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Result<(PathBuf, PathBuf)> {
        let pick = |explicit: &Option<PathBuf>, file: &str| {
            explicit
                .clone()
                .or_else(|| self.data.as_ref().map(|d| d.join(file)))
                .ok_or_else(|| Error::Config(format!("no input given: pass --data DIR or --{}", file.trim_end_matches(".csv"))))
        };
        Ok((pick(&self.emg, "emg.csv")?, pick(&self.angles, "angles.csv")?))
    }
}

#[derive(Debug, Default, Args, Serialize)]
struct SynthFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_rate_hz: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_repetitions: Option<u32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    repetition_s: Option<f64>,
    /// Comma-separated plateau angles.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    levels_per_finger: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hold_min_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hold_max_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    transition_ms: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    timing_jitter: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tonic: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nonlinearity_gain: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    velocity_gain: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    amplitude_uv: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    line_noise_uv: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mixing_width: Option<f64>,
}

#[derive(Debug, Default, Args, Serialize)]
struct PreprocessFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bandpass_low_hz: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bandpass_high_hz: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bandpass_order: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    notch_hz: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    notch_q: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    envelope_cutoff_hz: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    decim_factor: Option<usize>,
}

#[derive(Debug, Default, Args, Serialize)]
struct ModelFlags {
    /// Input channels; taken from the data when unset.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    c_in: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_enc: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t_seq: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    h_atn: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_exp: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    h_attr: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_states: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    angle_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    angle_max: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_fingers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    h_refn: Option<usize>,
    /// `context` or `expansion`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    refinement_input: Option<String>,
}

#[derive(Debug, Default, Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long, action = clap::ArgAction::Set)]
    #[serde(skip_serializing_if = "Option::is_none")]
    shuffle: Option<bool>,
}

#[derive(Debug, Args)]
struct SynthCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for emg.csv, angles.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch report CSV; defaults to the model path with `.report.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    preprocess: PreprocessFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalCmd {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Support threshold on mean validation state probability.
    #[arg(long, default_value_t = SUPPORT_EPSILON)]
    epsilon: f64,
    /// Directory for metrics.csv, entropy.csv and cost.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also save the pruned model here.
    #[arg(long)]
    pruned_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictCmd {
    #[arg(long)]
    model: PathBuf,
    /// Raw EMG CSV.
    #[arg(long)]
    emg: PathBuf,
    /// Prediction CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InfoCmd {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct SweepEncodingCmd {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    /// Encoding sizes, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8,10,12,16")]
    sizes: Vec<usize>,
    /// Training seeds per size, comma-separated (at least two).
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    seeds: Vec<u64>,
    /// Sweep CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    preprocess: PreprocessFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct SweepLambdaCmd {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    /// Entropy weights, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.02,0.05,0.2")]
    lambdas: Vec<f64>,
    /// Sweep CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Save the selected model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[command(flatten)]
    preprocess: PreprocessFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, val or test)")),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Summaries go to `out`, errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(c) => cmd_synth(c, out),
        Command::Train(c) => cmd_train(c, out),
        Command::Eval(c) => cmd_eval(c, out),
        Command::Predict(c) => cmd_predict(c, out),
        Command::Info(c) => cmd_info(c, out),
        Command::SweepEncoding(c) => cmd_sweep_encoding(c, out),
        Command::SweepLambda(c) => cmd_sweep_lambda(c, out),
    }
}

/// The parsed `--config` file, or empty tables.
struct Settings {
    file: Option<PathBuf>,
    root: toml::Table,
}

impl Settings {
    fn load(arg: &ConfigArg) -> Result<Self> {
        let Some(path) = &arg.config else {
            return Ok(Settings { file: None, root: toml::Table::new() });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (key, value) in &root {
            if !SECTIONS.contains(&key.as_str()) || !value.is_table() {
                return Err(Error::Config(format!(
                    "{}: unexpected entry `{key}` (tables are {})",
                    path.display(),
                    SECTIONS.join(", ")
                )));
            }
        }
        Ok(Settings { file: Some(path.clone()), root })
    }

    /// File table `name` with `flags` laid over it.
    fn table(&self, name: &str, flags: &impl Serialize) -> Result<toml::Table> {
        let mut table = match self.root.get(name) {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => toml::Table::new(),
        };
        let overrides = toml::Table::try_from(flags)
            .map_err(|e| Error::Config(format!("[{name}] flags: {e}")))?;
        table.extend(overrides);
        Ok(table)
    }

    fn section<T: DeserializeOwned>(&self, name: &str, flags: &impl Serialize) -> Result<T> {
        self.parse(name, self.table(name, flags)?)
    }

    fn parse<T: DeserializeOwned>(&self, name: &str, table: toml::Table) -> Result<T> {
        table.try_into().map_err(|e: toml::de::Error| {
            let origin = self.file.as_ref().map_or("flags".to_string(), |p| p.display().to_string());
            Error::Config(format!("{origin}: [{name}] {}", e.message()))
        })
    }

    fn config_files(&self) -> Vec<String> {
        self.file.iter().map(|p| p.display().to_string()).collect()
    }
}

/// Everything a training command needs, resolved from file and flags.
struct TrainingSetup {
    settings: Settings,
    chain: PreprocessConfig,
    model: DparsConfig,
    train: TrainConfig,
    /// Whether `epochs` was given explicitly.
    epochs_set: bool,
    dataset: LabeledDataset,
    inputs: Vec<String>,
}

fn training_setup(
    config: &ConfigArg,
    data: &DataArgs,
    preprocess: &PreprocessFlags,
    model: &ModelFlags,
    train: &TrainFlags,
) -> Result<TrainingSetup> {
    let settings = Settings::load(config)?;
    let chain: PreprocessConfig = settings.section("preprocess", preprocess)?;
    let mut model_table = settings.table("model", model)?;
    let train_table = settings.table("train", train)?;
    let epochs_set = train_table.contains_key("epochs");
    let train: TrainConfig = settings.parse("train", train_table)?;
    train.validate()?;

    let (emg, angles) = data.paths()?;
    let rec = sigproc::read_raw_csv(&emg)?;
    if !model_table.contains_key("c_in") {
        model_table.insert("c_in".into(), toml::Value::Integer(rec.channels() as i64));
    }
    let model: DparsConfig = settings.parse("model", model_table)?;
    model.validate().map_err(|e| Error::Config(e.to_string()))?;
    if model.c_in != rec.channels() {
        return Err(Error::Config(format!(
            "model c_in is {} but {} has {} channels",
            model.c_in,
            emg.display(),
            rec.channels()
        )));
    }
    let stream = read_angles_csv(&angles)?;
    let dataset = LabeledDataset::build(&rec, &stream, &chain, geometry_for(&model))?;
    Ok(TrainingSetup {
        settings,
        chain,
        model,
        train,
        epochs_set,
        dataset,
        inputs: vec![emg.display().to_string(), angles.display().to_string()],
    })
}

fn geometry_for(model: &DparsConfig) -> WindowGeometry {
    WindowGeometry { window_samples: model.t_seq, hop: 1 }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(c: SynthCmd, out: &mut dyn Write) -> Result<()> {
    let settings = Settings::load(&c.config)?;
    let cfg: SyntheticConfig = settings.section("synth", &c.synth)?;
    cfg.validate()?;
    let session = synthesize(&cfg)?;
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let emg = c.out.join("emg.csv");
    let angles = c.out.join("angles.csv");
    let manifest_path = c.out.join("manifest.json");
    sigproc::write_raw_csv(&emg, &session.recording)?;
    write_angles_csv(&angles, &session.angles)?;

    let mut manifest = RunManifest::new("synth", cfg.seed);
    manifest.config_files = settings.config_files();
    // relative to the manifest, so a seed gives the same bytes wherever it is written
    manifest.outputs = vec!["emg.csv".into(), "angles.csv".into()];
    let doc = serde_json::json!({ "manifest": manifest, "synth": cfg });
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    text.push('\n');
    write_file(&manifest_path, &text)?;

    let rec = &session.recording;
    emit(
        out,
        &format!(
            "wrote {} samples x {} channels ({} repetitions, {:.1} s) and {} angle rows to {}\n",
            rec.len(),
            rec.channels(),
            cfg.n_repetitions,
            rec.len() as f64 / rec.sample_rate_hz,
            session.angles.len(),
            c.out.display()
        ),
    )
}

fn cmd_train(c: TrainCmd, out: &mut dyn Write) -> Result<()> {
    let s = training_setup(&c.config, &c.data, &c.preprocess, &c.model, &c.train)?;
    let (params, report) = train_loop(&s.dataset, &s.model, &s.train)?;
    let report_path = c.report.clone().unwrap_or_else(|| c.out.with_extension("report.csv"));
    report.write_csv(&report_path)?;

    let mut manifest = RunManifest::new("train", s.train.seed);
    manifest.config_files = s.settings.config_files();
    manifest.inputs = s.inputs.clone();
    manifest.outputs = vec![c.out.display().to_string(), report_path.display().to_string()];
    let meta = TrainingMeta {
        seed: s.train.seed,
        epochs: s.train.epochs,
        lambda: s.train.lambda,
        learning_rate: report.learning_rate,
        batch_size: s.train.batch_size,
        best_epoch: report.best_epoch,
        lr_retries: report.lr_retries,
    };
    let file = ModelFile::new(
        &params,
        s.dataset.normalization.clone(),
        s.chain,
        s.dataset.geometry,
        Some(meta),
        manifest,
    );
    file.save(&c.out)?;

    let val = evaluate(&s.dataset, &params, Split::Val)?.0;
    let test = evaluate(&s.dataset, &params, Split::Test)?.0;
    let mut text = format!(
        "trained {} epochs in {:.1} s (lr {}, {} retries); best epoch {}\n",
        report.epochs.len(),
        report.wall_clock_s,
        report.learning_rate,
        report.lr_retries,
        report.best_epoch
    );
    text += &format!("val R2 {:.4}\ntest R2 {:.4} (pooled {:.4})\n", val.mean, test.mean, test.pooled);
    for w in test.warnings.iter().chain(&val.warnings) {
        text += &format!("warning: {w}\n");
    }
    text += &format!("model written to {}\n", c.out.display());
    emit(out, &text)
}

/// Dataset for a saved model: its preprocessing chain and normalization.
fn dataset_for_model(file: &ModelFile, data: &DataArgs) -> Result<LabeledDataset> {
    let (emg, angles) = data.paths()?;
    let rec = sigproc::read_raw_csv(&emg)?;
    if rec.channels() != file.config.c_in {
        return Err(Error::Config(format!(
            "model expects {} channels but {} has {}",
            file.config.c_in,
            emg.display(),
            rec.channels()
        )));
    }
    let stream = read_angles_csv(&angles)?;
    LabeledDataset::build_with(&rec, &stream, &file.preprocess, file.window, Some(&file.normalization))
}

fn cmd_eval(c: EvalCmd, out: &mut dyn Write) -> Result<()> {
    if !(c.epsilon >= 0.0 && c.epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon {} outside [0, 1)", c.epsilon)));
    }
    let file = ModelFile::load(&c.model)?;
    let params = file.to_params()?;
    let dataset = dataset_for_model(&file, &c.data)?;

    let (metrics, traces) = evaluate(&dataset, &params, c.split)?;
    let entropy = entropy_stats(&traces, c.epsilon)?;

    // supports come from validation data so the scored split stays unseen
    let (_, val_traces) = evaluate(&dataset, &params, Split::Val)?;
    let val_entropy = entropy_stats(&val_traces, c.epsilon)?;
    let supports: Vec<Vec<usize>> = val_entropy
        .supports
        .iter()
        .enumerate()
        .map(|(f, rows)| rows.iter().map(|&r| params.supports()[f][r]).collect())
        .collect();
    let (pruned, _) = prune_attractor_heads(&params, &supports)?;
    let sizes: Vec<usize> = supports.iter().map(Vec::len).collect();
    let cost = mac_count(&file.config, Some(&sizes))?;
    let pruned_metrics = evaluate(&dataset, &pruned, c.split)?.0;

    let states: Vec<Vec<f64>> = (0..file.config.n_fingers)
        .map(|f| params.support_values(f).to_vec())
        .collect();
    let split = format!("{:?}", c.split).to_lowercase();
    let mut text = format!("{split} split, {} windows\n", traces.len());
    text += &metrics.summary();
    text += &format!("attractor entropy ({split}):\n");
    text += &entropy.summary(&states);
    text += &cost.summary();
    text += &format!(
        "pruned (validation supports, epsilon {}): mean R2 {:.4} (dense {:.4}, drop {:.4})\n",
        c.epsilon,
        pruned_metrics.mean,
        metrics.mean,
        metrics.mean - pruned_metrics.mean
    );
    emit(out, &text)?;

    if let Some(dir) = &c.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("metrics.csv"), &metrics.to_csv())?;
        write_file(&dir.join("metrics_pruned.csv"), &pruned_metrics.to_csv())?;
        write_file(&dir.join("entropy.csv"), &entropy.to_csv())?;
        write_file(&dir.join("cost.csv"), &cost.to_csv())?;
    }
    if let Some(path) = &c.pruned_out {
        let mut manifest = file.manifest.clone();
        manifest.command = "eval".into();
        manifest.inputs = vec![c.model.display().to_string()];
        manifest.outputs = vec![path.display().to_string()];
        ModelFile::new(
            &pruned,
            file.normalization.clone(),
            file.preprocess,
            file.window,
            file.training.clone(),
            manifest,
        )
        .save(path)?;
    }
    Ok(())
}

/// One output row per prediction.
pub const PREDICTION_HEADER: &str = "t,f0,f1,f2,f3,f4,f5,f0_attr,f1_attr,f2_attr,f3_attr,f4_attr,f5_attr,f0_refn,f1_refn,f2_refn,f3_refn,f4_refn,f5_refn";

/// Runs a raw recording through the streaming preprocessor and decoder,
/// sample by sample, and returns the prediction CSV.
pub fn stream_predictions(
    rec: &sigproc::RawEmgRecording,
    file: &ModelFile,
    params: &DparsParams,
) -> Result<String> {
    use std::fmt::Write as _;
    if rec.channels() != file.config.c_in {
        return Err(Error::Config(format!(
            "model expects {} channels but the recording has {}",
            file.config.c_in,
            rec.channels()
        )));
    }
    let mut pre = StreamingPreprocessor::new(&file.preprocess, rec.sample_rate_hz, rec.channels())?;
    let frame_rate = rec.sample_rate_hz / file.preprocess.decim_factor as f64;
    let mut state = StreamState::new();
    let mut row = vec![0.0; rec.channels()];
    let mut frame = 0usize;
    let mut csv = String::from(PREDICTION_HEADER);
    csv.push('\n');
    for r in 0..rec.len() {
        row.copy_from_slice(rec.samples.row(r));
        if !pre.push(&mut row) {
            continue;
        }
        file.normalization.apply_frame(&mut row);
        if let Some(trace) = streaming_step(&row, &mut state, params)? {
            let t = rec.start_time_s + frame as f64 / frame_rate;
            write!(csv, "{t}").unwrap();
            for v in trace.y.iter().chain(&trace.y_attr).chain(&trace.y_refn) {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
        frame += 1;
    }
    Ok(csv)
}

fn cmd_predict(c: PredictCmd, out: &mut dyn Write) -> Result<()> {
    let file = ModelFile::load(&c.model)?;
    let params = file.to_params()?;
    let rec = sigproc::read_raw_csv(&c.emg)?;
    let csv = stream_predictions(&rec, &file, &params)?;
    write_file(&c.out, &csv)?;
    let rows = csv.lines().count() - 1;
    emit(out, &format!("wrote {rows} predictions to {}\n", c.out.display()))
}

fn cmd_info(c: InfoCmd, out: &mut dyn Write) -> Result<()> {
    let file = ModelFile::load(&c.model)?;
    let params = file.to_params()?;
    let sizes: Vec<usize> = params.supports().iter().map(Vec::len).collect();
    let cost = mac_count(&file.config, params.is_pruned().then_some(&sizes[..]))?;
    let mut doc = toml::Table::new();
    doc.insert(
        "model".into(),
        toml::Value::try_from(&file.config).map_err(|e| Error::ModelFile(e.to_string()))?,
    );
    let mut text = format!("{} v{}: {}\n", file.format, file.version, c.model.display());
    text += &toml::to_string(&doc).map_err(|e| Error::ModelFile(e.to_string()))?;
    text += &cost.summary();
    if let Some(t) = &file.training {
        text += &format!(
            "trained: seed {}, {} epochs (best {}), lambda {}, lr {}, batch {}, {} lr retries\n",
            t.seed, t.epochs, t.best_epoch, t.lambda, t.learning_rate, t.batch_size, t.lr_retries
        );
    }
    text += &format!(
        "manifest: {} (tool {}, timestamp {})\n",
        file.manifest.command, file.manifest.tool_version, file.manifest.timestamp
    );
    emit(out, &text)
}

fn cmd_sweep_encoding(c: SweepEncodingCmd, out: &mut dyn Write) -> Result<()> {
    let mut s = training_setup(&c.config, &c.data, &c.preprocess, &c.model, &c.train)?;
    if !s.epochs_set {
        s.train.epochs = SWEEP_EPOCHS;
    }
    if c.sizes.is_empty() || c.sizes.contains(&0) {
        return Err(Error::Config("encoding sizes must be positive".into()));
    }
    let rows = eval::encoding_size_sweep(&s.dataset, &s.model, &s.train, &c.sizes, &c.seeds)?;
    write_file(&c.out, &sweep_to_csv(&rows))?;
    let mut text = format!("{} epochs per model, seeds {:?}\n", s.train.epochs, c.seeds);
    for r in &rows {
        text += &format!("d_enc {:>3}: mean R2 {:.4}  var {:.2e}\n", r.d_enc, r.mean_r2, r.var_r2);
    }
    emit(out, &text)
}

fn cmd_sweep_lambda(c: SweepLambdaCmd, out: &mut dyn Write) -> Result<()> {
    let s = training_setup(&c.config, &c.data, &c.preprocess, &c.model, &c.train)?;
    if c.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::Config("lambdas must be finite and nonnegative".into()));
    }
    let sweep = eval::lambda_sweep(&s.dataset, &s.model, &s.train, &c.lambdas)?;
    write_file(&c.out, &sweep.to_csv())?;
    let mut text = String::new();
    for (i, r) in sweep.rows.iter().enumerate() {
        text += &format!(
            "lambda {:<6} val R2 {:.4}  test R2 {:.4}  top2 {:.3}{}\n",
            r.lambda,
            r.val_r2,
            r.test_r2,
            r.top2_mass,
            if i == sweep.selected { "  <- selected" } else { "" }
        );
    }
    if let Some(path) = &c.model_out {
        let best = &sweep.rows[sweep.selected];
        let mut manifest = RunManifest::new("sweep-lambda", s.train.seed);
        manifest.config_files = s.settings.config_files();
        manifest.inputs = s.inputs.clone();
        manifest.outputs = vec![path.display().to_string()];
        let meta = TrainingMeta {
            seed: s.train.seed,
            epochs: s.train.epochs,
            lambda: best.lambda,
            learning_rate: s.train.learning_rate,
            batch_size: s.train.batch_size,
            best_epoch: best.best_epoch,
            lr_retries: 0,
        };
        ModelFile::new(
            &sweep.models[sweep.selected],
            s.dataset.normalization.clone(),
            s.chain,
            s.dataset.geometry,
            Some(meta),
            manifest,
        )
        .save(path)?;
        text += &format!("selected model written to {}\n", path.display());
    }
    emit(out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlambda = 0.3\nepochs = 7\n").unwrap();
        let settings = Settings::load(&ConfigArg { config: Some(path) }).unwrap();
        let flags = TrainFlags { lambda: Some(0.0), ..TrainFlags::default() };
        let tc: TrainConfig = settings.section("train", &flags).unwrap();
        assert_eq!(tc.lambda, 0.0);
        assert_eq!(tc.epochs, 7);
        assert_eq!(tc.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_config_files_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("[trian]\nlambda = 1\n", "unexpected entry"),
            ("[train]\nlamda = 1\n", "lamda"),
            ("[train]\nlambda = \"x\"\n", "train"),
            ("not toml = = 1", "c.toml"),
        ];
        for (text, needle) in cases {
            let path = dir.path().join("c.toml");
            std::fs::write(&path, text).unwrap();
            let e = Settings::load(&ConfigArg { config: Some(path) })
                .and_then(|s| s.section::<TrainConfig>("train", &TrainFlags::default()))
                .unwrap_err();
            assert!(e.is_usage(), "{e}");
            assert!(e.to_string().contains(needle), "{e}");
        }
    }

    #[test]
    fn parse_failures_exit_2() {
        assert_eq!(run_capture(&["dpars"]).0, 2);
        assert_eq!(run_capture(&["dpars", "frobnicate"]).0, 2);
        assert_eq!(run_capture(&["dpars", "train", "--lambda", "x", "--out", "m"]).0, 2);
        let (code, out, _) = run_capture(&["dpars", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("sweep-lambda"));
    }

    #[test]
    fn missing_inputs_are_usage_errors() {
        let (code, _, err) = run_capture(&["dpars", "train", "--out", "m.json"]);
        assert_eq!(code, 2);
        assert!(err.contains("--data"), "{err}");
        let (code, _, err) = run_capture(&["dpars", "info", "--model", "/nonexistent/m.json"]);
        assert_eq!(code, 2);
        assert!(err.starts_with("error: io:"), "{err}");
    }
}
