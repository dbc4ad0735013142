//! Self-describing model documents.
//!
//! A model file is one JSON document holding the architecture, every
//! parameter array (row-major, with its shape), the attractor supports, the
//! input normalization and preprocessing chain, training metadata and a run
//! manifest. Floats are written in shortest round-trip form, so loading and
//! saving again reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{NormalizationStats, WindowGeometry};
use crate::error::{Error, Result};
use crate::model::{DparsConfig, DparsParams};
use crate::sigproc::PreprocessConfig;

pub const FORMAT: &str = "dpars-model";
pub const FORMAT_VERSION: u32 = 1;

/// Where a file came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_files: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    /// Seconds since the epoch from `SOURCE_DATE_EPOCH`, or `"unset"`, so
    /// that repeated runs stay byte-identical.
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH").unwrap_or_else(|_| "unset".into()),
            ..RunManifest::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub best_epoch: usize,
    pub lr_retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: DparsConfig,
    /// Attractor state indices kept per finger.
    pub supports: Vec<Vec<usize>>,
    pub normalization: NormalizationStats,
    pub preprocess: PreprocessConfig,
    pub window: WindowGeometry,
    pub training: Option<TrainingMeta>,
    pub manifest: RunManifest,
    pub params: Vec<NamedArray>,
}

impl ModelFile {
    pub fn new(
        params: &DparsParams,
        normalization: NormalizationStats,
        preprocess: PreprocessConfig,
        window: WindowGeometry,
        training: Option<TrainingMeta>,
        manifest: RunManifest,
    ) -> Self {
        ModelFile {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            config: params.config().clone(),
            supports: params.supports().to_vec(),
            normalization,
            preprocess,
            window,
            training,
            manifest,
            params: params
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameters, checking names, shapes and supports.
    pub fn to_params(&self) -> Result<DparsParams> {
        let tensors = self
            .params
            .iter()
            .map(|a| {
                Tensor::new(a.shape.clone(), a.data.clone())
                    .map(|t| (a.name.clone(), t))
                    .map_err(|e| Error::ModelFile(format!("parameter {}: {e}", a.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        DparsParams::from_tensors(self.config.clone(), self.supports.clone(), tensors)
            .map_err(|e| Error::ModelFile(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::ModelFile(e.to_string()))?;
        if m.format != FORMAT {
            return Err(Error::ModelFile(format!("not a {FORMAT} document")));
        }
        if m.version != FORMAT_VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                m.version
            )));
        }
        let c = m.config.c_in;
        if m.normalization.mean.len() != c || m.normalization.std.len() != c {
            return Err(Error::ModelFile(format!(
                "normalization covers {} channels, model expects {c}",
                m.normalization.mean.len()
            )));
        }
        if m.window.window_samples != m.config.t_seq {
            return Err(Error::ModelFile("window length differs from t_seq".into()));
        }
        m.to_params()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ModelFile(m) => Error::ModelFile(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelFile {
        let config = DparsConfig {
            c_in: 3,
            d_enc: 2,
            t_seq: 4,
            ..DparsConfig::default()
        };
        let params = DparsParams::init(&config, 9).unwrap();
        ModelFile::new(
            &params,
            NormalizationStats {
                mean: vec![0.1, 1.0 / 3.0, 2.0],
                std: vec![1.0, 1e-8, 0.7],
            },
            PreprocessConfig::default(),
            WindowGeometry {
                window_samples: 4,
                hop: 1,
            },
            Some(TrainingMeta {
                seed: 9,
                epochs: 3,
                lambda: 0.02,
                learning_rate: 0.01,
                batch_size: 64,
                best_epoch: 2,
                lr_retries: 0,
            }),
            RunManifest::new("train", 9),
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = sample();
        let text = m.to_json();
        let back = ModelFile::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.to_params().unwrap().tensors(), m.to_params().unwrap().tensors());
    }

    #[test]
    fn corrupt_documents_are_model_file_errors() {
        let text = sample().to_json();
        let cases = [
            text[..text.len() / 2].to_string(),
            text.replace("\"enc.w\"", "\"enc.q\""),
            text.replace("dpars-model", "other"),
            "{}".to_string(),
        ];
        for c in cases {
            let e = ModelFile::from_json(&c).unwrap_err();
            assert!(matches!(e, Error::ModelFile(_)), "{e}");
            assert!(e.is_usage());
        }
    }

    #[test]
    fn pruned_supports_survive() {
        let mut m = sample();
        let params = m.to_params().unwrap().with_supports(&vec![vec![0, 10]; 6]).unwrap();
        m = ModelFile::new(
            &params,
            m.normalization.clone(),
            m.preprocess,
            m.window,
            m.training.clone(),
            m.manifest.clone(),
        );
        let back = ModelFile::from_json(&m.to_json()).unwrap();
        assert_eq!(back.to_params().unwrap().supports(), params.supports());
    }
}
