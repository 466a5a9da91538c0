//! Experiment configuration: one TOML file plus dotted command-line
//! overrides such as `--compressor.mode same_prediction_average`.
//!
//! Unknown keys are rejected at every level. Override values are parsed as
//! TOML (`0.9`, `true`, `"x"`) and fall back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compressor::CompressionConfig;
use crate::data::CorpusSpec;
use crate::error::Error;
use crate::model::ModelConfig;
use crate::trainer::{CjstConfig, Stage, TrainConfig};

/// Utterance counts written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub test_out: usize,
    pub text_in: usize,
    pub text_out: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            dev: 100,
            test: 200,
            test_out: 200,
            text_in: 4000,
            text_out: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 4, max_len: 24 }
    }
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        stage: Stage::PretrainEncoderCtc,
        steps: 300,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of the synthetic world (prototypes, grammars and splits).
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub splits: SplitSizes,
    pub model: ModelConfig,
    pub compressor: CompressionConfig,
    pub cjst: CjstConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    pub trainer: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusSpec::default(),
            splits: SplitSizes::default(),
            model: ModelConfig::default(),
            compressor: CompressionConfig::default(),
            cjst: CjstConfig::default(),
            pretrain: default_pretrain(),
            trainer: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Loads `path` (or the defaults), applies `overrides` in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        // A partial [pretrain] section still means the pretraining stage.
        if let Some(toml::Value::Table(p)) = table.get_mut("pretrain") {
            p.entry("stage")
                .or_insert_with(|| toml::Value::String("pretrain_encoder_ctc".into()));
        }
        // Without a mode, a [compressor] section refines the default one.
        if let Some(toml::Value::Table(c)) = table.get_mut("compressor") {
            if !c.contains_key("mode") {
                let default = CompressionConfig::default();
                c.insert("mode".into(), toml::Value::String(default.mode.name().into()));
                if let Some(th) = default.blank_threshold {
                    c.entry("blank_threshold").or_insert(toml::Value::Float(th));
                }
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.compressor
            .validate()
            .map_err(|e| Error::Config(format!("compressor: {e}")))?;
        self.cjst.validate()?;
        self.pretrain.validate()?;
        self.trainer.validate()?;
        if self.pretrain.stage != Stage::PretrainEncoderCtc {
            return Err(Error::Config("pretrain.stage must be \"pretrain_encoder_ctc\"".into()));
        }
        if self.trainer.stage == Stage::PretrainEncoderCtc {
            return Err(Error::Config("trainer.stage must be a joint stage; use [pretrain] for CTC pretraining".into()));
        }
        if self.corpus.vocab_size != self.model.vocab_size || self.corpus.feat_dim != self.model.feat_dim {
            return Err(Error::Config(
                "corpus.vocab_size/feat_dim must equal model.vocab_size/feat_dim".into(),
            ));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--section.key value` and `--section.key=value` pairs out of raw
/// arguments; everything else is returned untouched for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("override `--{key}` needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Standard file names inside a data directory.
#[derive(Clone, Debug)]
pub struct DataLayout {
    pub dir: PathBuf,
}

impl DataLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }

    pub fn feats(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.feats"))
    }

    pub fn text(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.text"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::CompressionMode;

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let (rest, ov) = extract_overrides(strings(&[
            "train",
            "--compressor.mode",
            "same_prediction_average",
            "--trainer.lr=0.01",
            "--out-dir",
            "x",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["train", "--out-dir", "x"]));
        let cfg = ExperimentConfig::load(None, &ov).unwrap();
        assert_eq!(cfg.compressor.mode, CompressionMode::SamePredictionAverage);
        assert_eq!(cfg.compressor.blank_threshold, None);
        assert_eq!(cfg.trainer.lr, 0.01);

        let err = ExperimentConfig::load(None, &[("trainer.bogus".into(), "1".into())]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::load(None, &[("compressor.mode".into(), "combined".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[cjst]\nmask_fraction = 0.1\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &[("cjst.mask_fraction".into(), "0.3".into())]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.cjst.mask_fraction, 0.3);
        assert!(extract_overrides(strings(&["--a.b"])).is_err());
    }

    #[test]
    fn partial_compressor_section_keeps_the_default_mode() {
        let ov = |k: &str, v: &str| vec![(k.to_string(), v.to_string())];
        let cfg = ExperimentConfig::load(None, &ov("compressor.empty_policy", "skip")).unwrap();
        assert_eq!(cfg.compressor.mode, CompressionConfig::default().mode);
        assert_eq!(cfg.compressor.blank_threshold, Some(0.95));
        let cfg = ExperimentConfig::load(None, &ov("compressor.blank_threshold", "0.5")).unwrap();
        assert_eq!(cfg.compressor.blank_threshold, Some(0.5));
        assert!(ExperimentConfig::load(None, &ov("compressor.blank_threshold", "1.5")).is_err());
    }
}
