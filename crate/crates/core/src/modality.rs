//! Text-to-speech representation matching.
//!
//! Paired data teaches a small modality adaptor to map CTC class embeddings of
//! a forced peaky alignment onto the compressed acoustic frames (MSE, adaptor
//! only). Text-only data reuses the adaptor: blanks are inserted into the
//! transcript at a rate driven by the tracked compressed-length ratio, and the
//! adaptor output, masked and behind a stop-gradient, becomes a pseudo
//! acoustic prompt for the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::model::layers;
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::params::{ParamStore, Session};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModalityError {
    #[error("length ratio update with an empty label sequence")]
    EmptyLabels,
    #[error("length ratio update with zero compressed frames")]
    EmptyFrames,
    #[error("decay {0} outside (0, 1)")]
    Decay(f64),
    #[error("mask fraction {0} outside [0, 1)")]
    MaskFraction(f64),
    #[error("label {label} has no classifier row (classifier has {rows} rows)")]
    UnknownLabel { label: usize, rows: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Exponential moving average of `|h′| / |y|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRatioTracker {
    value: f64,
    decay: f64,
    update_count: u64,
}

impl LengthRatioTracker {
    pub const INITIAL: f64 = 1.0;

    pub fn new(decay: f64) -> Result<Self, ModalityError> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(ModalityError::Decay(decay));
        }
        Ok(Self {
            value: Self::INITIAL,
            decay,
            update_count: 0,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// `value ← decay·value + (1 − decay)·(t_prime / y_len)`.
    pub fn update(&mut self, t_prime: usize, y_len: usize) -> Result<f64, ModalityError> {
        if y_len == 0 {
            return Err(ModalityError::EmptyLabels);
        }
        if t_prime == 0 {
            return Err(ModalityError::EmptyFrames);
        }
        let ratio = t_prime as f64 / y_len as f64;
        self.value = self.decay * self.value + (1.0 - self.decay) * ratio;
        self.update_count += 1;
        Ok(self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InsertSide {
    #[default]
    After,
    Before,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// Each scalar element is zeroed independently.
    #[default]
    Element,
    /// Whole frames (rows) are zeroed.
    Frame,
}

/// Per-token blank insertion probability `min(1, max(0, R − 1))`.
pub fn blank_insertion_probability(ratio: f64) -> f64 {
    (ratio - 1.0).clamp(0.0, 1.0)
}

/// Simulated alignment for text-only data: each token independently gets one
/// blank beside it with probability [`blank_insertion_probability`].
///
/// Equal neighbours always get the blank between them, so the result
/// collapses back to `y` under CTC rules.
pub fn simulate_alignment(y: &[usize], ratio: f64, blank: usize, side: InsertSide, rng: &mut impl Rng) -> Vec<usize> {
    let p = blank_insertion_probability(ratio);
    let mut out = Vec::with_capacity(2 * y.len());
    for (i, &tok) in y.iter().enumerate() {
        let repeat = match side {
            InsertSide::Before => i > 0 && y[i - 1] == tok,
            InsertSide::After => y.get(i + 1) == Some(&tok),
        };
        let insert = (p > 0.0 && rng.gen::<f64>() < p) || repeat;
        if insert && side == InsertSide::Before {
            out.push(blank);
        }
        out.push(tok);
        if insert && side == InsertSide::After {
            out.push(blank);
        }
    }
    out
}

/// 0/1 keep-mask of shape `rows × cols` dropping roughly `fraction` of the
/// elements (or frames).
pub fn random_mask(rows: usize, cols: usize, fraction: f64, granularity: MaskGranularity, rng: &mut impl Rng) -> Result<Tensor, ModalityError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(ModalityError::MaskFraction(fraction));
    }
    let mut data = vec![1.0; rows * cols];
    if fraction > 0.0 {
        match granularity {
            MaskGranularity::Element => {
                for v in &mut data {
                    if rng.gen::<f64>() < fraction {
                        *v = 0.0;
                    }
                }
            }
            MaskGranularity::Frame => {
                for row in data.chunks_mut(cols.max(1)) {
                    if rng.gen::<f64>() < fraction {
                        row.fill(0.0);
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// Parameter prefix of the modality adaptor.
pub const ADAPTOR: &str = "adaptor";

/// Creates the adaptor: one conformer-style block with a half-step
/// feed-forward (no dimension uplift), single-head self-attention, a kernel-3
/// depthwise convolution and a second half-step feed-forward.
///
/// Every branch ends in a zero-initialized projection, so the adaptor starts
/// as the identity map.
pub fn init_adaptor(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) {
    layers::init_feed_forward(store, rng, &format!("{ADAPTOR}.ff_in"), dim, dim, true);
    layers::init_attention(store, rng, &format!("{ADAPTOR}.att"), dim, true);
    layers::init_conv(store, rng, &format!("{ADAPTOR}.conv"), dim, 3, true);
    layers::init_feed_forward(store, rng, &format!("{ADAPTOR}.ff_out"), dim, dim, true);
}

/// Length-preserving adaptor forward pass over `x` (`T × D`).
pub fn adaptor_forward(s: &mut Session, x: Var) -> Result<Var, Error> {
    let ff = layers::feed_forward(s, x, &format!("{ADAPTOR}.ff_in"))?;
    let ff = s.g.scale(ff, 0.5);
    let x = layers::residual(s, x, ff)?;
    let att = layers::attention(s, x, &format!("{ADAPTOR}.att"), 1, false)?;
    let x = layers::residual(s, x, att)?;
    let conv = layers::conv_module(s, x, &format!("{ADAPTOR}.conv"))?;
    let x = layers::residual(s, x, conv)?;
    let ff = layers::feed_forward(s, x, &format!("{ADAPTOR}.ff_out"))?;
    let ff = s.g.scale(ff, 0.5);
    layers::residual(s, x, ff)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptOrigin {
    Paired,
    TextOnly,
}

/// Pseudo acoustic embeddings `h′_text` produced from an (actual or simulated)
/// alignment.
#[derive(Clone, Copy, Debug)]
pub struct PseudoPrompt {
    pub frames: Var,
    pub origin: PromptOrigin,
}

/// Looks up every label of `alignment` in the CTC class embeddings, runs the
/// adaptor and, when `mask` is given, multiplies by it.
///
/// The class-embedding lookup sits behind a stop-gradient: neither use of
/// `h′_text` trains the classifier.
pub fn build_pseudo_embeddings(
    s: &mut Session,
    alignment: &[usize],
    classifier: Var,
    mask: Option<&Tensor>,
    origin: PromptOrigin,
) -> Result<PseudoPrompt, Error> {
    let rows = s.value(classifier).rows();
    if let Some(&bad) = alignment.iter().find(|&&l| l >= rows) {
        return Err(ModalityError::UnknownLabel { label: bad, rows }.into());
    }
    let frozen = s.g.stop_gradient(classifier);
    let emb = s.g.gather_rows(frozen, alignment)?;
    let mut out = adaptor_forward(s, emb)?;
    if let Some(m) = mask {
        let m = s.constant(m.clone());
        out = s.g.mul(out, m)?;
    }
    Ok(PseudoPrompt { frames: out, origin })
}

/// Mean squared error between the compressed acoustic frames `h′` and the
/// pseudo embeddings. `h′` is behind a stop-gradient, so only the adaptor
/// (the producer of `h_text`) is trained by this loss.
pub fn mse_adaptor_loss(g: &mut Graph, h_prime: Var, h_text: Var) -> Result<Var, ModalityError> {
    let target = g.stop_gradient(h_prime);
    let diff = g.sub(h_text, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq)?)
}
