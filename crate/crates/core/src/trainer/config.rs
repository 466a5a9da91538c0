use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::modality::{InsertSide, MaskGranularity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder and CTC head on the CTC loss alone.
    PretrainEncoderCtc,
    JointFromScratch,
    /// Continue a trained model with text injection.
    ContinueWithText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    None,
    LmLike,
    Cjst,
}

/// Share of batch slots given to each data component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mix {
    pub paired: f64,
    pub text_in: f64,
    pub text_out: f64,
}

impl Mix {
    pub const SPEECH_ONLY: Mix = Mix {
        paired: 1.0,
        text_in: 0.0,
        text_out: 0.0,
    };

    pub fn fractions(&self) -> [f64; 3] {
        [self.paired, self.text_in, self.text_out]
    }
}

impl Default for Mix {
    fn default() -> Self {
        Self::SPEECH_ONLY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ce_speech: f64,
    pub ce_text: f64,
    pub ctc: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce_speech: 1.0,
            ce_text: 1.0,
            ctc: 0.5,
            mse: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    /// Batch slots per update.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub mix: Mix,
    pub weights: LossWeights,
    pub text_mode: TextMode,
    pub freeze_encoder: bool,
    /// Dev evaluation cadence in updates; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_beam: usize,
    pub max_decode_len: usize,
    /// Worker threads for per-utterance forward/backward passes.
    pub threads: usize,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::JointFromScratch,
            steps: 1000,
            batch_size: 8,
            lr: 2e-3,
            warmup: 100,
            clip_norm: 5.0,
            seed: 0,
            mix: Mix::SPEECH_ONLY,
            weights: LossWeights::default(),
            text_mode: TextMode::None,
            freeze_encoder: false,
            eval_every: 0,
            eval_beam: 4,
            max_decode_len: 24,
            threads: 1,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        let f = self.mix.fractions();
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("trainer.mix fractions {f:?} must lie in [0, 1] and sum to 1"));
        }
        if self.text_mode == TextMode::None && (self.mix.text_in > 0.0 || self.mix.text_out > 0.0) {
            return bad("trainer.text_mode = \"none\" requires zero text fractions in trainer.mix".into());
        }
        if self.stage == Stage::PretrainEncoderCtc && (self.mix != Mix::SPEECH_ONLY || self.text_mode != TextMode::None) {
            return bad("trainer.stage = \"pretrain_encoder_ctc\" trains on paired data only".into());
        }
        if self.batch_size == 0 || self.eval_beam == 0 || self.threads == 0 {
            return bad("trainer.batch_size, trainer.eval_beam and trainer.threads must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("trainer.lr must be positive and trainer.clip_norm non-negative".into());
        }
        Ok(())
    }
}

/// Text-to-speech-representation matching options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CjstConfig {
    pub ema_decay: f64,
    pub insert_side: InsertSide,
    pub mask_fraction: f64,
    pub mask_granularity: MaskGranularity,
    /// Also mask the pseudo embeddings of paired utterances in the MSE branch.
    pub mask_paired: bool,
}

impl Default for CjstConfig {
    fn default() -> Self {
        Self {
            ema_decay: 0.99,
            insert_side: InsertSide::After,
            mask_fraction: 0.2,
            mask_granularity: MaskGranularity::Element,
            mask_paired: false,
        }
    }
}

impl CjstConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("cjst.ema_decay {} must lie in (0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!("cjst.mask_fraction {} must lie in [0, 1)", self.mask_fraction)));
        }
        Ok(())
    }
}
