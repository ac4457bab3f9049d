//! Run configuration: a strict JSON document (unknown keys are rejected)
//! describing the network, training regime, data source, and evaluation /
//! tracking settings. Everything is chain-checked up front so an invalid
//! config never produces partial outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CHAR_SIZE;
use crate::networks::NetworkSpec;
use crate::scalar::Dtype;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

/// Synthetic glyph-alphabet generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphDataConfig {
    pub seed: u64,
    #[serde(default = "default_n_background")]
    pub n_background: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_chars")]
    pub chars_per_alphabet: usize,
    #[serde(default = "default_instances")]
    pub instances_per_char: usize,
}

fn default_n_background() -> usize {
    30
}
fn default_n_eval() -> usize {
    20
}
fn default_chars() -> usize {
    12
}
fn default_instances() -> usize {
    20
}

/// Synthetic tracking-sequence generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingDataConfig {
    pub seed: u64,
    #[serde(default = "default_sequences")]
    pub n_sequences: usize,
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default = "default_frame")]
    pub frame_size: usize,
    #[serde(default = "default_object")]
    pub object_size: usize,
}

fn default_sequences() -> usize {
    24
}
fn default_length() -> usize {
    50
}
fn default_frame() -> usize {
    96
}
fn default_object() -> usize {
    16
}

/// Where training/evaluation data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    /// A character dataset tree on disk (`<root>/<split>/<alphabet>/...`).
    Path(PathBuf),
    /// Generated glyph alphabets.
    Synthetic(GlyphDataConfig),
    /// Generated tracking sequences.
    SyntheticTracking(TrackingDataConfig),
}

impl DataConfig {
    pub fn is_tracking(&self) -> bool {
        matches!(self, DataConfig::SyntheticTracking(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_problems")]
    pub n_problems: usize,
    #[serde(default = "default_way")]
    pub way: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

fn default_problems() -> usize {
    2000
}
fn default_way() -> usize {
    20
}
fn default_eval_seed() -> u64 {
    20
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_problems: 2000, way: 20, seed: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSection {
    #[serde(default = "default_exemplar")]
    pub exemplar_size: usize,
    #[serde(default = "default_search")]
    pub search_size: usize,
    #[serde(default = "default_radius")]
    pub search_radius: f64,
}

fn default_exemplar() -> usize {
    32
}
fn default_search() -> usize {
    64
}
fn default_radius() -> f64 {
    16.0
}

impl Default for TrackSection {
    fn default() -> Self {
        TrackSection { exemplar_size: 32, search_size: 64, search_radius: 16.0 }
    }
}

/// The complete run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub precision: Precision,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub track: TrackSection,
}

impl Config {
    /// Strict parse: unknown keys anywhere are an error.
    pub fn from_str(text: &str) -> Result<Config> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Config::from_str(&text)
    }

    /// Validate every section and their interactions before any work runs.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;

        match &self.data {
            DataConfig::Path(_) | DataConfig::Synthetic(_) => {
                let want = [CHAR_SIZE, CHAR_SIZE, 1];
                if self.network.input != want {
                    return Err(Error::Config(format!(
                        "character data feeds {want:?} inputs but the network expects {:?}",
                        self.network.input
                    )));
                }
                if let DataConfig::Synthetic(g) = &self.data {
                    if g.instances_per_char < 2 {
                        return Err(Error::Config(
                            "synthetic data needs at least 2 instances per character".into(),
                        ));
                    }
                    if g.n_background == 0 || g.n_eval == 0 || g.chars_per_alphabet == 0 {
                        return Err(Error::Config("synthetic data counts must be positive".into()));
                    }
                }
            }
            DataConfig::SyntheticTracking(t) => {
                let want = [self.track.exemplar_size, self.track.exemplar_size, 1];
                if self.network.input != want {
                    return Err(Error::Config(format!(
                        "tracking exemplars are {want:?} but the network expects {:?}",
                        self.network.input
                    )));
                }
                if t.n_sequences < 2 {
                    return Err(Error::Config(
                        "tracking needs at least 2 sequences (negatives come from another sequence)"
                            .into(),
                    ));
                }
                if t.object_size + 2 > t.frame_size {
                    return Err(Error::Config(format!(
                        "object size {} does not fit in frame size {}",
                        t.object_size, t.frame_size
                    )));
                }
                if t.length == 0 {
                    return Err(Error::Config("sequence length must be positive".into()));
                }
                // The whole search window must be representable.
                self.network
                    .map_dims(&[self.track.search_size, self.track.search_size, 1])?;
            }
        }

        if self.track.exemplar_size >= self.track.search_size {
            return Err(Error::Config(format!(
                "exemplar size {} must be smaller than search size {}",
                self.track.exemplar_size, self.track.search_size
            )));
        }
        if self.eval.n_problems == 0 || self.eval.way < 2 {
            return Err(Error::Config("eval needs n_problems >= 1 and way >= 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{compact_ocr_spec, compact_tracking_spec, Arch, ComparisonKind};
    use crate::train::InitScheme;

    fn base_train() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            triplets_per_epoch: 8,
            batch_size: 4,
            lr_initial: 1e-2,
            lr_final: 1e-3,
            weight_decay: 0.0,
            positive_fraction: 0.5,
            seed: 1,
            init: InitScheme::ImprovedXavier,
        }
    }

    #[test]
    fn round_trips_and_validates() {
        let cfg = Config {
            precision: Precision::F32,
            network: compact_ocr_spec(Arch::SingleStreamLearnet, ComparisonKind::WeightedL1),
            train: base_train(),
            data: DataConfig::Synthetic(GlyphDataConfig {
                seed: 7,
                n_background: 4,
                n_eval: 2,
                chars_per_alphabet: 5,
                instances_per_char: 3,
            }),
            eval: EvalConfig::default(),
            track: TrackSection::default(),
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = Config::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = Config {
            precision: Precision::F32,
            network: compact_ocr_spec(Arch::Shared, ComparisonKind::Dot),
            train: base_train(),
            data: DataConfig::Synthetic(GlyphDataConfig {
                seed: 1,
                n_background: 2,
                n_eval: 1,
                chars_per_alphabet: 3,
                instances_per_char: 2,
            }),
            eval: EvalConfig::default(),
            track: TrackSection::default(),
        };
        let mut v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        v.as_object_mut().unwrap().insert("learning_rate".into(), 0.1.into());
        let err = Config::from_str(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");

        // Typos inside nested sections are caught too.
        let mut v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        v["train"].as_object_mut().unwrap().insert("weigth_decay".into(), 0.1.into());
        assert!(Config::from_str(&v.to_string()).is_err());
    }

    #[test]
    fn cross_section_consistency_is_checked() {
        // Tracking network with character data: input sizes disagree.
        let cfg = Config {
            precision: Precision::F32,
            network: compact_tracking_spec(Arch::SiameseLearnet),
            train: base_train(),
            data: DataConfig::Synthetic(GlyphDataConfig {
                seed: 1,
                n_background: 2,
                n_eval: 1,
                chars_per_alphabet: 3,
                instances_per_char: 2,
            }),
            eval: EvalConfig::default(),
            track: TrackSection::default(),
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("network expects"), "{err}");

        let ok = Config {
            network: compact_tracking_spec(Arch::SiameseLearnet),
            data: DataConfig::SyntheticTracking(TrackingDataConfig {
                seed: 3,
                n_sequences: 4,
                length: 10,
                frame_size: 96,
                object_size: 16,
            }),
            ..cfg
        };
        ok.validate().unwrap();
    }

    #[test]
    fn defaults_fill_optional_sections() {
        let spec = compact_ocr_spec(Arch::Shared, ComparisonKind::Euclidean);
        let text = format!(
            r#"{{
  "network": {},
  "train": {{"epochs": 1, "triplets_per_epoch": 8, "batch_size": 4,
             "lr_initial": 0.01, "lr_final": 0.001,
             "positive_fraction": 0.5, "seed": 3}},
  "data": {{"synthetic": {{"seed": 5}}}}
}}"#,
            serde_json::to_string(&spec).unwrap()
        );
        let cfg = Config::from_str(&text).unwrap();
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.eval.n_problems, 2000);
        assert_eq!(cfg.track.exemplar_size, 32);
        match cfg.data {
            DataConfig::Synthetic(g) => {
                assert_eq!(g.n_background, 30);
                assert_eq!(g.n_eval, 20);
                assert_eq!(g.chars_per_alphabet, 12);
                assert_eq!(g.instances_per_char, 20);
            }
            _ => panic!("wrong data kind"),
        }
    }
}
