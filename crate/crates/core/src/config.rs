//! Run configuration: one JSON document covering mode, data source, model
//! spec, and compression settings. Unknown keys are rejected; every run
//! echoes the fully-defaulted effective config next to its outputs.

use crate::compress::{CompressionConfig, Mode};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    SyntheticVision {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    SyntheticText {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Names {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f32,
    },
}

fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}
fn default_test_fraction() -> f32 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub data: DataConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub compress: CompressionConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.compress.validate()?;
        match (&self.model, &self.data) {
            (ModelSpec::Cnn(s), DataConfig::SyntheticVision { .. })
            | (ModelSpec::Cnn(s), DataConfig::Idx { .. }) => s.validate(),
            (ModelSpec::Decoder(s), DataConfig::SyntheticText { .. })
            | (ModelSpec::Decoder(s), DataConfig::Names { .. }) => s.validate(),
            _ => Err(Error::Config(
                "model/data mismatch: cnn takes image sources, decoder takes text sources".into(),
            )),
        }
    }

    /// Materializes every default into an echoable effective config: the
    /// resolved gamma, quantization learning rate, and restore threshold.
    pub fn effective(&self, gamma_eff: Option<f32>, out_dir: &Path) -> RunConfig {
        let mut cfg = self.clone();
        if cfg.compress.gamma.is_none() {
            cfg.compress.gamma = gamma_eff;
        }
        if cfg.compress.quant_lr.is_none() {
            cfg.compress.quant_lr = Some(cfg.compress.learning_rate);
        }
        if cfg.compress.restore_threshold.is_none() {
            cfg.compress.restore_threshold = Some(match cfg.model {
                ModelSpec::Cnn(_) => 1.0,
                ModelSpec::Decoder(_) => 0.05,
            });
        }
        cfg.out_dir = Some(out_dir.to_path_buf());
        cfg
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Loads the train/test pair described by the data config. Synthetic seeds
/// derive deterministically from the run seed so that all three modes of a
/// comparison see identical data.
pub fn load_data(cfg: &DataConfig, model: &ModelSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg {
        DataConfig::SyntheticVision { n_train, n_test } => {
            if *n_train < 10 || *n_test < 1 {
                return Err(Error::Config("synthetic_vision needs n_train >= 10".into()));
            }
            let train = data::synthetic_vision_with_noise(*n_train, seed * 2 + 1, 0.05, Split::Train);
            let test = data::synthetic_vision_with_noise(*n_test, seed * 2 + 2, 0.0, Split::Test);
            Ok((Dataset::Vision(train), Dataset::Vision(test)))
        }
        DataConfig::SyntheticText { n_train, n_test } => {
            let context = match model {
                ModelSpec::Decoder(d) => d.context,
                _ => return Err(Error::Config("synthetic_text needs a decoder model".into())),
            };
            if *n_train < 10 || *n_test < 1 {
                return Err(Error::Config("synthetic_text needs n_train >= 10".into()));
            }
            let train = data::synthetic_text(*n_train, seed * 2 + 1, context, Split::Train);
            let test = data::synthetic_text(*n_test, seed * 2 + 2, context, Split::Test);
            Ok((Dataset::Text(train), Dataset::Text(test)))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = data::load_idx_images(train_images, train_labels)?;
            let mut test = data::load_idx_images(test_images, test_labels)?;
            test.split = Split::Test;
            Ok((Dataset::Vision(train), Dataset::Vision(test)))
        }
        DataConfig::Names {
            path,
            test_fraction,
        } => {
            let context = match model {
                ModelSpec::Decoder(d) => d.context,
                _ => return Err(Error::Config("names corpus needs a decoder model".into())),
            };
            let all = data::load_names_corpus(path, context)?;
            let n_test = ((all.n as f64) * (*test_fraction as f64)).ceil() as usize;
            let n_test = n_test.clamp(1, all.n.saturating_sub(1).max(1));
            let n_train = all.n - n_test;
            let train = data::TextData {
                windows: all.windows[..n_train * context].to_vec(),
                next: all.next[..n_train].to_vec(),
                context,
                n: n_train,
                split: Split::Train,
            };
            let test = data::TextData {
                windows: all.windows[n_train * context..].to_vec(),
                next: all.next[n_train..].to_vec(),
                context,
                n: n_test,
                split: Split::Test,
            };
            Ok((Dataset::Text(train), Dataset::Text(test)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "mode": "safe",
        "data": {"source": "synthetic_vision", "n_train": 100, "n_test": 50},
        "model": {"cnn": {"channels": [8, 12], "classes": 10}},
        "compress": {"seed": 7, "epochs": 2, "batch_size": 16}
    }"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = RunConfig::from_json(GOOD).unwrap();
        assert_eq!(cfg.mode, Mode::Safe);
        assert_eq!(cfg.compress.seed, 7);
        assert_eq!(cfg.compress.alpha, 1e-5);
        assert_eq!(cfg.compress.b0, 8.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = GOOD.replace("\"mode\"", "\"not_a_key\": 1, \"mode\"");
        assert!(RunConfig::from_json(&bad).is_err());
        let bad2 = GOOD.replace("\"seed\": 7", "\"seed\": 7, \"mystery\": true");
        assert!(RunConfig::from_json(&bad2).is_err());
    }

    #[test]
    fn modality_mismatch_rejected() {
        let bad = GOOD.replace("synthetic_vision", "synthetic_text");
        assert!(RunConfig::from_json(&bad).is_err());
    }

    #[test]
    fn effective_config_fills_defaults_and_reparses() {
        let cfg = RunConfig::from_json(GOOD).unwrap();
        let eff = cfg.effective(Some(0.0123), Path::new("/tmp/run"));
        assert_eq!(eff.compress.gamma, Some(0.0123));
        assert_eq!(eff.compress.quant_lr, Some(cfg.compress.learning_rate));
        assert_eq!(eff.compress.restore_threshold, Some(1.0));
        let text = eff.to_json_pretty();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, eff);
    }

    #[test]
    fn synthetic_data_deterministic_by_seed() {
        let cfg = RunConfig::from_json(GOOD).unwrap();
        let (a_train, _) = load_data(&cfg.data, &cfg.model, 7).unwrap();
        let (b_train, _) = load_data(&cfg.data, &cfg.model, 7).unwrap();
        match (&a_train, &b_train) {
            (Dataset::Vision(a), Dataset::Vision(b)) => {
                assert_eq!(a.images, b.images);
                assert_eq!(a.labels, b.labels);
            }
            _ => panic!("expected vision data"),
        }
    }
}
