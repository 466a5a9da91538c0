//! Encoder pretraining and joint speech/text training.
//!
//! Every update draws `batch_size` slots from the paired, in-domain text and
//! out-of-domain text components through a deterministic interleave. Each
//! slot is forwarded and backpropagated in its own graph; the per-slot
//! gradients are summed in slot order, so the result does not depend on the
//! number of worker threads.

mod checkpoint;
mod config;
mod optim;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, ConfigSnapshot};
pub use config::{CjstConfig, LossWeights, Mix, Stage, TextMode, TrainConfig};
pub use optim::{clip_global_norm, scheduled_lr, Adam};
pub use schedule::{draw_index, Interleave};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::align::{forced_peaky_align, AlignError};
use crate::compressor::CompressionStatus;
use crate::ctc::{self, CtcError, LabelSequence};
use crate::data::{derive_rng, derive_seed, TextUtterance, Utterance};
use crate::error::Error;
use crate::modality::{self, LengthRatioTracker, PromptOrigin};
use crate::model::{AsrModel, WerAccumulator};
use crate::params::{accumulate, ParamGrads, ParamStore, Session};

/// Parameters left untouched by `freeze_encoder`. With embedding sharing the
/// token rows of the CTC classifier live in `decoder.embed` and keep training.
pub const ENCODER_PREFIXES: [&str; 3] = ["encoder.", "proj.", "ctc."];

const INIT_STREAM: u64 = 0x49_4E_49_54;
const ITEM_STREAM: u64 = 0x49_54_45_4D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub dev_wer: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: AsrModel,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Updates applied in the current stage.
    pub step: u64,
    pub tracker: LengthRatioTracker,
    pub schedule: Interleave,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn new(model: AsrModel, seed: u64, ema_decay: f64) -> Result<Self, Error> {
        let params = model.init_params(&mut derive_rng(&[INIT_STREAM, seed]));
        Ok(Self {
            model,
            params,
            optimizer: Adam::default(),
            step: 0,
            tracker: LengthRatioTracker::new(ema_decay)?,
            schedule: Interleave::new(3),
            best: None,
        })
    }

    /// Keeps parameters and tracker, resets everything tied to one stage.
    pub fn start_stage(&mut self) {
        self.optimizer = Adam::default();
        self.step = 0;
        self.schedule = Interleave::new(3);
        self.best = None;
    }
}

/// Weighted loss parts averaged over the non-skipped slots of one update.
/// Absent parts were not computed in that update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_speech: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_text: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Number of loss parts present.
    pub fn entries(&self) -> usize {
        [self.ce_speech, self.ctc, self.mse, self.ce_text].iter().filter(|p| p.is_some()).count()
    }

    /// `Σ weight · part` over the present parts.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let parts = [
            (self.ce_speech, w.ce_speech),
            (self.ctc, w.ctc),
            (self.mse, w.mse),
            (self.ce_text, w.ce_text),
        ];
        parts.iter().filter_map(|(p, w)| p.map(|p| p * w)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    /// Slots that contributed to the losses.
    pub items: usize,
    /// Paired slots dropped by the empty-output skip policy.
    pub skipped: usize,
    pub ctc_infeasible: usize,
    pub mse_infeasible: usize,
    /// Summed parameter gradients before averaging and clipping.
    pub grads: ParamGrads,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: Stage,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub tracker: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub items: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
}

pub trait Observer {
    fn on_metrics(&mut self, _record: &MetricsRecord) -> Result<(), Error> {
        Ok(())
    }

    /// Called whenever the dev WER improves, after the state has been updated.
    fn on_best(&mut self, _state: &TrainState) -> Result<(), Error> {
        Ok(())
    }
}

pub struct NoopObserver;

impl Observer for NoopObserver {}

/// Keeps every record in memory.
#[derive(Default)]
pub struct MetricsCollector {
    pub records: Vec<MetricsRecord>,
}

impl Observer for MetricsCollector {
    fn on_metrics(&mut self, record: &MetricsRecord) -> Result<(), Error> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Writes each record as one JSON line.
pub struct JsonlLog<W: Write> {
    pub out: W,
}

impl<W: Write> Observer for JsonlLog<W> {
    fn on_metrics(&mut self, record: &MetricsRecord) -> Result<(), Error> {
        let line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("metrics log", e))
    }
}

/// The training corpora. Text components may be empty when their mix
/// fraction is zero.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub paired: Vec<Utterance>,
    pub text_in: Vec<TextUtterance>,
    pub text_out: Vec<TextUtterance>,
    pub dev: Vec<Utterance>,
}

/// One batch slot. `seed` drives every random choice made for it.
#[derive(Clone, Copy, Debug)]
pub enum BatchItem<'a> {
    Paired { utt: &'a Utterance, seed: u64 },
    Text { tokens: &'a [usize], seed: u64 },
}

#[derive(Default)]
struct ItemOutput {
    grads: ParamGrads,
    paired: bool,
    skipped: bool,
    ce_speech: f64,
    ctc: f64,
    mse: f64,
    ce_text: f64,
    ctc_infeasible: bool,
    mse_infeasible: bool,
    /// `(T′, |y|)` for the length-ratio tracker.
    ratio: Option<(usize, usize)>,
}

struct StepContext<'a> {
    model: &'a AsrModel,
    params: &'a ParamStore,
    cfg: &'a TrainConfig,
    cjst: &'a CjstConfig,
    ratio: f64,
}

impl StepContext<'_> {
    fn session(&self) -> Session<'_> {
        if self.cfg.freeze_encoder {
            Session::training_except(self.params, &ENCODER_PREFIXES)
        } else {
            Session::training(self.params)
        }
    }

    fn paired(&self, utt: &Utterance, seed: u64) -> Result<ItemOutput, Error> {
        let model = self.model;
        let w = &self.cfg.weights;
        let pretrain = self.cfg.stage == Stage::PretrainEncoderCtc;
        let mut out = ItemOutput {
            paired: true,
            ..ItemOutput::default()
        };
        let mut s = self.session();
        let fwd = model.acoustic_forward(&mut s, &utt.features)?;
        if !pretrain && fwd.plan.status == CompressionStatus::Skipped {
            out.skipped = true;
            return Ok(out);
        }
        let y = LabelSequence::new(utt.tokens.clone(), model.cfg.vocab_size)?;
        let mut terms = Vec::new();

        match ctc::ctc_loss_node(&mut s.g, fwd.logp, &y) {
            Ok(l) => {
                out.ctc = s.value(l).item();
                terms.push(s.g.scale(l, w.ctc));
            }
            Err(CtcError::Infeasible { .. }) => out.ctc_infeasible = true,
            Err(e) => return Err(e.into()),
        }

        if !pretrain {
            let h_prime = fwd.h_prime.expect("non-skipped plans produce frames");
            let t_prime = s.value(h_prime).rows();
            out.ratio = Some((t_prime, y.len()));
            let prompt = model.assemble_prompt(&mut s, h_prime, y.tokens())?;
            let ce = model.decoder_ce_loss(&mut s, &prompt)?;
            out.ce_speech = s.value(ce).item();
            terms.push(s.g.scale(ce, w.ce_speech));

            if self.cfg.text_mode == TextMode::Cjst {
                let grid = ctc::ctc_head_values(s.value(h_prime), s.value(fwd.classifier))?;
                match forced_peaky_align(&grid, &y) {
                    Ok(alignment) => {
                        let mask = if self.cjst.mask_paired {
                            let mut rng = derive_rng(&[seed]);
                            Some(modality::random_mask(
                                t_prime,
                                model.cfg.dec_dim,
                                self.cjst.mask_fraction,
                                self.cjst.mask_granularity,
                                &mut rng,
                            )?)
                        } else {
                            None
                        };
                        let pseudo = modality::build_pseudo_embeddings(
                            &mut s,
                            &alignment.labels,
                            fwd.classifier,
                            mask.as_ref(),
                            PromptOrigin::Paired,
                        )?;
                        let mse = modality::mse_adaptor_loss(&mut s.g, h_prime, pseudo.frames)?;
                        out.mse = s.value(mse).item();
                        terms.push(s.g.scale(mse, w.mse));
                    }
                    Err(AlignError::Infeasible { .. }) => out.mse_infeasible = true,
                    Err(e) => return Err(e.into()),
                }
            }
        }

        if let Some(&first) = terms.first() {
            let mut loss = first;
            for &t in &terms[1..] {
                loss = s.g.add(loss, t)?;
            }
            out.grads = s.param_grads(loss)?;
        }
        Ok(out)
    }

    fn text(&self, tokens: &[usize], seed: u64) -> Result<ItemOutput, Error> {
        let model = self.model;
        if tokens.is_empty() {
            return Err(Error::Data("empty text-only transcript".into()));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= model.cfg.vocab_size) {
            return Err(Error::Data(format!("text token {bad} is outside the vocabulary")));
        }
        let mut s = self.session();
        let prompt = match self.cfg.text_mode {
            TextMode::None => return Err(Error::Config("text slot scheduled with trainer.text_mode = \"none\"".into())),
            TextMode::LmLike => model.lm_prompt(&mut s, tokens)?,
            TextMode::Cjst => {
                let mut rng = derive_rng(&[seed]);
                let blank = model.vocab().blank();
                let aligned = modality::simulate_alignment(tokens, self.ratio, blank, self.cjst.insert_side, &mut rng);
                let mask = (self.cjst.mask_fraction > 0.0)
                    .then(|| {
                        modality::random_mask(
                            aligned.len(),
                            model.cfg.dec_dim,
                            self.cjst.mask_fraction,
                            self.cjst.mask_granularity,
                            &mut rng,
                        )
                    })
                    .transpose()?;
                let classifier = model.classifier(&mut s)?;
                let pseudo =
                    modality::build_pseudo_embeddings(&mut s, &aligned, classifier, mask.as_ref(), PromptOrigin::TextOnly)?;
                let frozen = s.g.stop_gradient(pseudo.frames);
                model.assemble_prompt(&mut s, frozen, tokens)?
            }
        };
        let ce = model.decoder_ce_loss(&mut s, &prompt)?;
        let loss = s.g.scale(ce, self.cfg.weights.ce_text);
        Ok(ItemOutput {
            ce_text: s.value(ce).item(),
            grads: s.param_grads(loss)?,
            ..ItemOutput::default()
        })
    }

    fn item(&self, item: &BatchItem) -> Result<ItemOutput, Error> {
        match *item {
            BatchItem::Paired { utt, seed } => self.paired(utt, seed),
            BatchItem::Text { tokens, seed } => self.text(tokens, seed),
        }
    }
}

/// Maps `f` over `items` on up to `threads` scoped threads, preserving order.
fn map_ordered<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R, Error> + Sync,
) -> Result<Vec<R>, Error> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>, Error>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// One optimizer update over `items`.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, cjst: &CjstConfig, items: &[BatchItem]) -> Result<StepReport, Error> {
    let ctx = StepContext {
        model: &state.model,
        params: &state.params,
        cfg,
        cjst,
        ratio: state.tracker.value(),
    };
    let outputs = map_ordered(items, cfg.threads, |item| ctx.item(item))?;

    let mut grads = ParamGrads::new();
    let mut sums = [0.0; 4];
    let (mut paired, mut text, mut skipped) = (0, 0, 0);
    let (mut ctc_infeasible, mut mse_infeasible) = (0, 0);
    for o in outputs.iter() {
        if o.skipped {
            skipped += 1;
            continue;
        }
        if o.paired {
            paired += 1;
        } else {
            text += 1;
        }
        ctc_infeasible += usize::from(o.ctc_infeasible);
        mse_infeasible += usize::from(o.mse_infeasible);
        for (acc, x) in sums.iter_mut().zip([o.ce_speech, o.ctc, o.mse, o.ce_text]) {
            *acc += x;
        }
    }
    for o in outputs.iter().filter(|o| o.ratio.is_some()) {
        let (t_prime, y_len) = o.ratio.unwrap();
        state.tracker.update(t_prime, y_len)?;
    }
    let summed: Vec<ParamGrads> = outputs.into_iter().map(|o| o.grads).collect();
    for g in summed {
        accumulate(&mut grads, g);
    }

    let n = paired + text;
    let joint = cfg.stage != Stage::PretrainEncoderCtc;
    let mean = |x: f64| if n > 0 { x / n as f64 } else { 0.0 };
    let mut losses = LossBreakdown {
        ce_speech: (joint && paired > 0).then(|| mean(sums[0])),
        ctc: (paired > 0).then(|| mean(sums[1])),
        mse: (joint && paired > 0 && cfg.text_mode == TextMode::Cjst).then(|| mean(sums[2])),
        ce_text: (text > 0).then(|| mean(sums[3])),
        total: 0.0,
    };
    losses.total = losses.weighted_sum(&cfg.weights);
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", state.step)));
    }

    let lr = scheduled_lr(cfg.lr, cfg.warmup, state.step);
    let raw = grads.clone();
    let mut grad_norm = 0.0;
    if n > 0 {
        for g in grads.values_mut() {
            g.scale_in_place(1.0 / n as f64);
        }
        grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {}", state.step)));
        }
        state.optimizer.step(&mut state.params, &grads, lr);
    }
    state.step += 1;
    Ok(StepReport {
        losses,
        lr,
        grad_norm,
        items: n,
        skipped,
        ctc_infeasible,
        mse_infeasible,
        grads: raw,
    })
}

fn item_seed(cfg: &TrainConfig, component: usize, draw: u64) -> u64 {
    derive_seed(&[ITEM_STREAM, cfg.seed, component as u64, draw])
}

/// One update on paired utterances only.
pub fn train_step_paired(state: &mut TrainState, cfg: &TrainConfig, cjst: &CjstConfig, batch: &[Utterance]) -> Result<StepReport, Error> {
    let items: Vec<BatchItem> = batch
        .iter()
        .enumerate()
        .map(|(i, utt)| BatchItem::Paired {
            utt,
            seed: item_seed(cfg, 0, state.step * batch.len() as u64 + i as u64),
        })
        .collect();
    train_step(state, cfg, cjst, &items)
}

/// One update on text-only transcripts.
pub fn train_step_text(state: &mut TrainState, cfg: &TrainConfig, cjst: &CjstConfig, batch: &[&[usize]]) -> Result<StepReport, Error> {
    let items: Vec<BatchItem> = batch
        .iter()
        .enumerate()
        .map(|(i, tokens)| BatchItem::Text {
            tokens,
            seed: item_seed(cfg, 1, state.step * batch.len() as u64 + i as u64),
        })
        .collect();
    train_step(state, cfg, cjst, &items)
}

/// Corpus WER of CTC greedy decoding (collapse repeats, drop blanks).
pub fn ctc_greedy_wer(model: &AsrModel, params: &ParamStore, utts: &[Utterance], threads: usize) -> Result<f64, Error> {
    let classifier = model.classifier_values(params)?;
    let hyps = map_ordered(utts, threads, |u| {
        let mut s = Session::inference(params);
        let h = model.acoustic_embeddings(&mut s, &u.features)?;
        let grid = ctc::ctc_head_values(s.value(h), &classifier)?;
        Ok(ctc::collapse(&ctc::greedy_predictions(&grid), grid.blank()))
    })?;
    let mut acc = WerAccumulator::default();
    for (h, u) in hyps.iter().zip(utts) {
        acc.add(h, &u.tokens);
    }
    acc.wer()
}

/// Decodes every utterance with beam search.
pub fn decode_all(model: &AsrModel, params: &ParamStore, utts: &[Utterance], beam: usize, max_len: usize, threads: usize) -> Result<Vec<Vec<usize>>, Error> {
    map_ordered(utts, threads, |u| Ok(model.decode(params, &u.features, beam, max_len)?.tokens))
}

/// Corpus WER of beam-search decoding.
pub fn decoder_wer(model: &AsrModel, params: &ParamStore, utts: &[Utterance], beam: usize, max_len: usize, threads: usize) -> Result<f64, Error> {
    let hyps = decode_all(model, params, utts, beam, max_len, threads)?;
    let mut acc = WerAccumulator::default();
    for (h, u) in hyps.iter().zip(utts) {
        acc.add(h, &u.tokens);
    }
    acc.wer()
}

/// Dev metric of a stage: CTC greedy WER while pretraining, decoder WER after.
pub fn evaluate(state: &TrainState, cfg: &TrainConfig, dev: &[Utterance]) -> Result<f64, Error> {
    match cfg.stage {
        Stage::PretrainEncoderCtc => ctc_greedy_wer(&state.model, &state.params, dev, cfg.threads),
        _ => decoder_wer(&state.model, &state.params, dev, cfg.eval_beam, cfg.max_decode_len, cfg.threads),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub best: Option<BestRecord>,
    /// Parameters at the best dev evaluation of this call.
    pub best_params: Option<ParamStore>,
    pub last: Option<MetricsRecord>,
    pub skipped: u64,
    pub ctc_infeasible: u64,
    pub mse_infeasible: u64,
}

fn check_datasets(cfg: &TrainConfig, data: &Datasets) -> Result<(), Error> {
    let needed = [
        (cfg.mix.paired, data.paired.len(), "paired"),
        (cfg.mix.text_in, data.text_in.len(), "in-domain text"),
        (cfg.mix.text_out, data.text_out.len(), "out-of-domain text"),
    ];
    for (fraction, len, name) in needed {
        if fraction > 0.0 && len == 0 {
            return Err(Error::Config(format!("mix fraction {fraction} for {name} data but the dataset is empty")));
        }
    }
    Ok(())
}

/// Trains until `state.step == cfg.steps`, evaluating on `data.dev` every
/// `cfg.eval_every` updates and at the last one.
pub fn run(state: &mut TrainState, cfg: &TrainConfig, cjst: &CjstConfig, data: &Datasets, observer: &mut dyn Observer) -> Result<RunSummary, Error> {
    cfg.validate()?;
    cjst.validate()?;
    check_datasets(cfg, data)?;
    let fractions = cfg.mix.fractions();
    let mut summary = RunSummary {
        best: state.best,
        ..RunSummary::default()
    };
    while state.step < cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (component, draw) = state.schedule.next(&fractions);
            let seed = item_seed(cfg, component, draw);
            items.push(match component {
                0 => BatchItem::Paired {
                    utt: &data.paired[draw_index(cfg.seed, 0, draw, data.paired.len())],
                    seed,
                },
                c => {
                    let set = if c == 1 { &data.text_in } else { &data.text_out };
                    BatchItem::Text {
                        tokens: &set[draw_index(cfg.seed, c, draw, set.len())].tokens,
                        seed,
                    }
                }
            });
        }
        let report = train_step(state, cfg, cjst, &items)?;
        summary.skipped += report.skipped as u64;
        summary.ctc_infeasible += report.ctc_infeasible as u64;
        summary.mse_infeasible += report.mse_infeasible as u64;

        let step = state.step;
        let eval_now = !data.dev.is_empty() && ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps);
        let dev_wer = if eval_now { Some(evaluate(state, cfg, &data.dev)?) } else { None };
        if let Some(wer) = dev_wer {
            if state.best.is_none_or(|b| wer < b.dev_wer) {
                state.best = Some(BestRecord { step, dev_wer: wer });
                summary.best = state.best;
                summary.best_params = Some(state.params.clone());
                observer.on_best(state)?;
            }
        }
        let record = MetricsRecord {
            step,
            stage: cfg.stage,
            losses: report.losses,
            tracker: state.tracker.value(),
            lr: report.lr,
            grad_norm: report.grad_norm,
            items: report.items,
            skipped: report.skipped,
            dev_wer,
        };
        if dev_wer.is_some() || step == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            observer.on_metrics(&record)?;
        }
        summary.last = Some(record);
    }
    Ok(summary)
}

/// CTC pretraining of encoder, projection and CTC head.
pub fn pretrain_encoder(state: &mut TrainState, cfg: &TrainConfig, data: &Datasets, observer: &mut dyn Observer) -> Result<RunSummary, Error> {
    if cfg.stage != Stage::PretrainEncoderCtc {
        return Err(Error::Config("pretrain_encoder needs trainer.stage = \"pretrain_encoder_ctc\"".into()));
    }
    run(state, cfg, &CjstConfig::default(), data, observer)
}

/// Joint training (from scratch or continued with text).
pub fn run_joint(state: &mut TrainState, cfg: &TrainConfig, cjst: &CjstConfig, data: &Datasets, observer: &mut dyn Observer) -> Result<RunSummary, Error> {
    if cfg.stage == Stage::PretrainEncoderCtc {
        return Err(Error::Config("run_joint needs a joint trainer.stage".into()));
    }
    run(state, cfg, cjst, data, observer)
}
