//! Toy audio encoder, CTC compressor wiring and decoder-only transformer.
//!
//! The decoder consumes a prompt
//!
//! ```text
//! <Start> h′₁ … h′_T′ <End> y₁ … y_N
//! ```
//!
//! and is scored on predicting `y₁ … y_N <EOS>` from the `<End>` position
//! onward. Text-only LM-like batches use `<BOS> y₁ … y_N` instead.

mod beam;
pub mod layers;
mod wer;

pub use beam::{beam_search, greedy_search, Hypothesis, StepScorer};
pub use wer::{edit_distance, wer, WerAccumulator};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{self, CompressionConfig, CompressionPlan, CompressionStatus};
use crate::ctc::{self, PosteriorGrid};
use crate::error::Error;
use crate::modality;
use crate::numerics::{Tensor, Var};
use crate::params::{ParamStore, Session};

/// Token inventory. Regular tokens are `0..V`; the decoder adds four special
/// ids after them. The CTC blank reuses id `V` in posterior space only and is
/// never fed to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub const SPECIALS: usize = 4;

    pub fn new(size: usize) -> Self {
        Self { size }
    }

    /// Number of regular tokens `V`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> usize {
        self.size + 1
    }

    pub fn start(&self) -> usize {
        self.size + 2
    }

    pub fn end(&self) -> usize {
        self.size + 3
    }

    /// Rows of the decoder embedding table and width of its output layer.
    pub fn decoder_size(&self) -> usize {
        self.size + Self::SPECIALS
    }

    pub fn is_token(&self, id: usize) -> bool {
        id < self.size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Frames stacked per encoder step.
    pub reduction: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_ff: usize,
    pub conv_kernel: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_ff: usize,
    pub max_positions: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feat_dim: 16,
            reduction: 2,
            enc_dim: 64,
            enc_layers: 2,
            enc_ff: 128,
            conv_kernel: 3,
            dec_dim: 64,
            dec_layers: 2,
            dec_heads: 2,
            dec_ff: 128,
            max_positions: 160,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.feat_dim == 0 || self.reduction == 0 {
            return bad("model.vocab_size, model.feat_dim and model.reduction must be positive".into());
        }
        if self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return bad(format!("model.dec_dim {} not divisible by model.dec_heads {}", self.dec_dim, self.dec_heads));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("model.conv_kernel must be odd, got {}", self.conv_kernel));
        }
        Ok(())
    }
}

/// Encoder output before and after compression, for one utterance.
pub struct AcousticForward {
    /// Encoder output projected to the decoder width, `T × D_dec`.
    pub h: Var,
    /// `(V+1) × D_dec` CTC class embeddings (shared or dedicated).
    pub classifier: Var,
    /// `T × (V+1)` CTC log-posteriors.
    pub logp: Var,
    pub grid: PosteriorGrid,
    pub plan: CompressionPlan,
    /// Compressed frames `h′`; `None` for a skipped utterance.
    pub h_prime: Option<Var>,
}

/// Decoder input rows and the positions scored by the CE loss.
pub struct Prompt {
    pub inputs: Var,
    /// Index of the first scored position.
    pub first_scored: usize,
    /// Targets for positions `first_scored..`, ending with EOS.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsrModel {
    pub cfg: ModelConfig,
    pub compression: CompressionConfig,
}

impl AsrModel {
    pub fn new(cfg: ModelConfig, compression: CompressionConfig) -> Result<Self, Error> {
        cfg.validate()?;
        compression.validate()?;
        Ok(Self { cfg, compression })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.cfg.vocab_size)
    }

    /// Fresh parameters for encoder, projection, CTC head, decoder and adaptor.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let c = &self.cfg;
        let v = self.vocab();
        let mut p = ParamStore::new();
        layers::init_linear(&mut p, rng, "encoder.in", c.feat_dim * c.reduction, c.enc_dim);
        for l in 0..c.enc_layers {
            layers::init_feed_forward(&mut p, rng, &format!("encoder.l{l}.ff"), c.enc_dim, c.enc_ff, false);
            layers::init_conv(&mut p, rng, &format!("encoder.l{l}.conv"), c.enc_dim, c.conv_kernel, false);
        }
        layers::init_layer_norm(&mut p, "encoder.out_ln", c.enc_dim);
        layers::init_linear(&mut p, rng, "proj", c.enc_dim, c.dec_dim);

        let emb_std = 1.0 / (c.dec_dim as f64).sqrt();
        if self.compression.embedding_sharing {
            p.init_normal(rng, "ctc.blank", &[1, c.dec_dim], emb_std);
        } else {
            p.init_normal(rng, "ctc.classifier", &[v.size() + 1, c.dec_dim], emb_std);
        }

        p.init_normal(rng, "decoder.embed", &[v.decoder_size(), c.dec_dim], emb_std);
        p.init_normal(rng, "decoder.pos", &[c.max_positions, c.dec_dim], 0.1 * emb_std);
        for l in 0..c.dec_layers {
            layers::init_attention(&mut p, rng, &format!("decoder.l{l}.att"), c.dec_dim, false);
            layers::init_feed_forward(&mut p, rng, &format!("decoder.l{l}.ff"), c.dec_dim, c.dec_ff, false);
        }
        layers::init_layer_norm(&mut p, "decoder.out_ln", c.dec_dim);
        if !c.tie_embeddings {
            layers::init_linear(&mut p, rng, "decoder.out", c.dec_dim, v.decoder_size());
        }
        modality::init_adaptor(&mut p, rng, c.dec_dim);
        p
    }

    /// Encoder output `T × enc_dim` with `T = ceil(frames / reduction)`.
    pub fn encode(&self, s: &mut Session, features: &Tensor) -> Result<Var, Error> {
        if features.rank() != 2 || features.cols() != self.cfg.feat_dim {
            return Err(Error::Data(format!(
                "features have shape {:?}, expected (*, {})",
                features.shape(),
                self.cfg.feat_dim
            )));
        }
        let x = s.constant(features.clone());
        let x = s.g.stack_frames(x, self.cfg.reduction)?;
        let mut x = layers::linear(s, x, "encoder.in")?;
        for l in 0..self.cfg.enc_layers {
            let ff = layers::feed_forward(s, x, &format!("encoder.l{l}.ff"))?;
            x = layers::residual(s, x, ff)?;
            let conv = layers::conv_module(s, x, &format!("encoder.l{l}.conv"))?;
            x = layers::residual(s, x, conv)?;
        }
        layers::layer_norm(s, x, "encoder.out_ln")
    }

    /// Encoder output mapped to the decoder width (`h`).
    pub fn acoustic_embeddings(&self, s: &mut Session, features: &Tensor) -> Result<Var, Error> {
        let enc = self.encode(s, features)?;
        layers::linear(s, enc, "proj")
    }

    /// CTC class embeddings. Under embedding sharing the token rows are the
    /// decoder's own embedding rows.
    pub fn classifier(&self, s: &mut Session) -> Result<Var, Error> {
        if self.compression.embedding_sharing {
            let emb = s.p("decoder.embed")?;
            let blank = s.p("ctc.blank")?;
            Ok(compressor::shared_classifier_view(&mut s.g, emb, self.cfg.vocab_size, blank)?)
        } else {
            s.p("ctc.classifier")
        }
    }

    /// Value of the CTC classifier under the given parameters.
    pub fn classifier_values(&self, params: &ParamStore) -> Result<Tensor, Error> {
        let mut s = Session::inference(params);
        let c = self.classifier(&mut s)?;
        Ok(s.value(c).clone())
    }

    /// Encoder, CTC head and compression for one utterance.
    pub fn acoustic_forward(&self, s: &mut Session, features: &Tensor) -> Result<AcousticForward, Error> {
        let h = self.acoustic_embeddings(s, features)?;
        let classifier = self.classifier(s)?;
        let logp = ctc::ctc_head(&mut s.g, h, classifier)?;
        let grid = PosteriorGrid::new(s.value(logp).clone())?;
        let plan = compressor::plan(&grid, &self.compression);
        let h_prime = compressor::apply_plan(&mut s.g, h, &plan)?;
        Ok(AcousticForward {
            h,
            classifier,
            logp,
            grid,
            plan,
            h_prime,
        })
    }

    fn embed_ids(&self, s: &mut Session, ids: &[usize]) -> Result<Var, Error> {
        let emb = s.p("decoder.embed")?;
        Ok(s.g.gather_rows(emb, ids)?)
    }

    /// `[Start, acoustic…, End, y…]`, scored from the `End` position.
    pub fn assemble_prompt(&self, s: &mut Session, acoustic: Var, y: &[usize]) -> Result<Prompt, Error> {
        let v = self.vocab();
        let start = self.embed_ids(s, &[v.start()])?;
        let mut ids = vec![v.end()];
        ids.extend_from_slice(y);
        let tail = self.embed_ids(s, &ids)?;
        let inputs = s.g.concat_rows(&[start, acoustic, tail])?;
        let acoustic_len = s.value(acoustic).rows();
        let mut targets = y.to_vec();
        targets.push(v.eos());
        Ok(Prompt {
            inputs,
            first_scored: 1 + acoustic_len,
            targets,
        })
    }

    /// `[BOS, y…]` for LM-like text-only training; no acoustic segment.
    pub fn lm_prompt(&self, s: &mut Session, y: &[usize]) -> Result<Prompt, Error> {
        let v = self.vocab();
        let mut ids = vec![v.bos()];
        ids.extend_from_slice(y);
        let inputs = self.embed_ids(s, &ids)?;
        let mut targets = y.to_vec();
        targets.push(v.eos());
        Ok(Prompt {
            inputs,
            first_scored: 0,
            targets,
        })
    }

    /// Final decoder hidden states, `L × D_dec`.
    pub fn decoder_hidden(&self, s: &mut Session, inputs: Var) -> Result<Var, Error> {
        let len = s.value(inputs).rows();
        if len > self.cfg.max_positions {
            return Err(Error::Data(format!(
                "decoder input of length {len} exceeds model.max_positions {}",
                self.cfg.max_positions
            )));
        }
        let pos_table = s.p("decoder.pos")?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = s.g.gather_rows(pos_table, &positions)?;
        let mut x = s.g.add(inputs, pos)?;
        for l in 0..self.cfg.dec_layers {
            let att = layers::attention(s, x, &format!("decoder.l{l}.att"), self.cfg.dec_heads, true)?;
            x = layers::residual(s, x, att)?;
            let ff = layers::feed_forward(s, x, &format!("decoder.l{l}.ff"))?;
            x = layers::residual(s, x, ff)?;
        }
        layers::layer_norm(s, x, "decoder.out_ln")
    }

    /// Output logits over the decoder vocabulary for the given hidden rows.
    pub fn output_logits(&self, s: &mut Session, hidden: Var) -> Result<Var, Error> {
        if self.cfg.tie_embeddings {
            let emb = s.p("decoder.embed")?;
            let et = s.g.transpose(emb)?;
            Ok(s.g.matmul(hidden, et)?)
        } else {
            layers::linear(s, hidden, "decoder.out")
        }
    }

    /// Full `L × V_dec` decoder log-probabilities for a prompt.
    pub fn decoder_log_probs(&self, s: &mut Session, inputs: Var) -> Result<Var, Error> {
        let hidden = self.decoder_hidden(s, inputs)?;
        let logits = self.output_logits(s, hidden)?;
        Ok(s.g.log_softmax_rows(logits)?)
    }

    /// Sum of per-token negative log-probabilities over the scored positions.
    pub fn decoder_ce_loss(&self, s: &mut Session, prompt: &Prompt) -> Result<Var, Error> {
        let hidden = self.decoder_hidden(s, prompt.inputs)?;
        let rows: Vec<usize> = (prompt.first_scored..prompt.first_scored + prompt.targets.len()).collect();
        let scored = s.g.gather_rows(hidden, &rows)?;
        let logits = self.output_logits(s, scored)?;
        let logp = s.g.log_softmax_rows(logits)?;
        let picked = s.g.pick(logp, &prompt.targets)?;
        let total = s.g.sum(picked);
        Ok(s.g.scale(total, -1.0))
    }

    /// Compressed acoustic prompt for inference: `(h′, status)`.
    pub fn compressed_values(&self, params: &ParamStore, features: &Tensor) -> Result<(Option<Tensor>, CompressionStatus), Error> {
        let mut s = Session::inference(params);
        let fwd = self.acoustic_forward(&mut s, features)?;
        Ok((fwd.h_prime.map(|v| s.value(v).clone()), fwd.plan.status))
    }

    /// Beam search over an acoustic prompt; a skipped utterance yields the
    /// empty hypothesis (EOS first).
    pub fn decode(&self, params: &ParamStore, features: &Tensor, beam_size: usize, max_len: usize) -> Result<Hypothesis, Error> {
        let (h_prime, _) = self.compressed_values(params, features)?;
        match h_prime {
            None => Ok(Hypothesis {
                tokens: Vec::new(),
                score: 0.0,
                truncated: false,
            }),
            Some(acoustic) => self.decode_prompt(params, Some(&acoustic), beam_size, max_len),
        }
    }

    /// Beam search given an already computed acoustic prompt (or none, for
    /// an unconditioned LM-style decode).
    pub fn decode_prompt(&self, params: &ParamStore, acoustic: Option<&Tensor>, beam_size: usize, max_len: usize) -> Result<Hypothesis, Error> {
        let mut scorer = DecoderScorer {
            model: self,
            params,
            acoustic,
        };
        beam_search(&mut scorer, beam_size, max_len)
    }
}

/// Scores next-token distributions by running the full decoder on each prefix.
pub struct DecoderScorer<'a> {
    pub model: &'a AsrModel,
    pub params: &'a ParamStore,
    pub acoustic: Option<&'a Tensor>,
}

impl StepScorer for DecoderScorer<'_> {
    fn eos(&self) -> usize {
        self.model.vocab().eos()
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error> {
        let v = self.model.vocab();
        let mut s = Session::inference(self.params);
        let acoustic = self.acoustic.map(|a| s.constant(a.clone()));
        let mut out = Vec::with_capacity(prefixes.len());
        for prefix in prefixes {
            let prompt = match acoustic {
                Some(a) => self.model.assemble_prompt(&mut s, a, prefix)?,
                None => self.model.lm_prompt(&mut s, prefix)?,
            };
            let hidden = self.model.decoder_hidden(&mut s, prompt.inputs)?;
            let last = s.value(hidden).rows() - 1;
            let row = s.g.gather_rows(hidden, &[last])?;
            let logits = self.model.output_logits(&mut s, row)?;
            let logp = s.g.log_softmax_rows(logits)?;
            let mut scores = s.value(logp).data().to_vec();
            // only regular tokens and EOS may be generated
            for (id, sc) in scores.iter_mut().enumerate() {
                if id > v.eos() {
                    *sc = f64::NEG_INFINITY;
                }
            }
            out.push(scores);
        }
        Ok(out)
    }
}
