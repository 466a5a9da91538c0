//! The `cjst` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. Every output file is written under a temporary name and renamed
//! once complete; files created by a failed run are removed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::align::{forced_peaky_align, AlignError};
use crate::compressor::{self, CompressionConfig, CompressionMode, CompressionStatus};
use crate::config::{extract_overrides, DataLayout, ExperimentConfig};
use crate::ctc::{self, LabelSequence};
use crate::data::{self, Domain, TextUtterance, Utterance, World};
use crate::error::Error;
use crate::model::{AsrModel, WerAccumulator};
use crate::params::Session;
use crate::trainer::{self, ConfigSnapshot, Datasets, JsonlLog, Observer, MetricsRecord, Stage, TrainConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "cjst", version, about = "CTC-compressed decoder-only ASR with joint speech/text training")]
#[command(after_help = "Any configuration key can be overridden as `--section.key value`, e.g. `--compressor.blank_threshold 0.9`.")]
struct Cli {
    /// TOML experiment configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-utterance computation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// CTC-pretrain the encoder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Joint training, optionally from a pretrained or trained checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Start a new stage from this checkpoint's parameters and tracker.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run exactly where it stopped.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Beam-search decode a feature file to `id<TAB>tokens` lines.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Forced peaky alignment of transcripts to compressed frames.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-mode compression statistics.
    CompressStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// Blank threshold for the threshold-based modes.
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
        /// Table destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write `mode<TAB>id<TAB>T<TAB>T′<TAB>status` lines.
        #[arg(long)]
        per_utterance: Option<PathBuf>,
    },
    /// Corpus WER of a hypothesis TSV against a transcript file.
    EvalWer {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::MissingParam(_) => 3,
        Error::NonFinite(_)
        | Error::Numerics(_)
        | Error::Ctc(_)
        | Error::Align(_)
        | Error::Compressor(_)
        | Error::Modality(_) => 4,
    }
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let (rest, overrides) = match extract_overrides(args.into_iter().skip(1).collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once("cjst".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut created = Vec::new();
    match run(cli, &overrides, &mut created) {
        Ok(()) => 0,
        Err(e) => {
            for p in created {
                let _ = fs::remove_file(p);
            }
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), overrides)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        cfg.pretrain.threads = t;
        cfg.trainer.threads = t;
    }
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
    Ok(cfg)
}

fn run(cli: Cli, overrides: &[(String, String)], created: &mut Vec<PathBuf>) -> Result<(), Error> {
    let threads = cli.threads.unwrap_or(1).max(1);
    match &cli.command {
        Command::GenData { out } => {
            let cfg = resolve_config(&cli, overrides)?;
            gen_data(&cfg, out, created)
        }
        Command::Pretrain { data, out_dir } => {
            let cfg = resolve_config(&cli, overrides)?;
            let model = AsrModel::new(cfg.model.clone(), cfg.compressor.clone())?;
            let mut state = TrainState::new(model, cfg.pretrain.seed, cfg.cjst.ema_decay)?;
            let datasets = load_datasets(&cfg, &cfg.pretrain, data)?;
            train_into(&cfg, &cfg.pretrain, &mut state, &datasets, out_dir, false, created)
        }
        Command::Train {
            data,
            out_dir,
            init,
            resume,
        } => {
            let cfg = resolve_config(&cli, overrides)?;
            let model = AsrModel::new(cfg.model.clone(), cfg.compressor.clone())?;
            let (mut state, resuming) = match (init, resume) {
                (_, Some(path)) => {
                    let (state, _) = trainer::load_checkpoint(path)?;
                    if state.model != model {
                        return Err(Error::Config(format!(
                            "{}: model or compressor configuration differs from the resumed checkpoint",
                            path.display()
                        )));
                    }
                    (state, true)
                }
                (Some(path), None) => {
                    let (mut state, _) = trainer::load_checkpoint(path)?;
                    let fresh = TrainState::new(model.clone(), 0, cfg.cjst.ema_decay)?;
                    for (name, t) in fresh.params.iter() {
                        if state.params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                            return Err(Error::Config(format!(
                                "{}: parameter `{name}` does not match the configured model",
                                path.display()
                            )));
                        }
                    }
                    for (name, t) in fresh.params.iter() {
                        if !state.params.contains(name) {
                            state.params.insert(name.clone(), t.clone());
                        }
                    }
                    state.model = model;
                    state.start_stage();
                    (state, false)
                }
                (None, None) => (TrainState::new(model, cfg.trainer.seed, cfg.cjst.ema_decay)?, false),
            };
            let datasets = load_datasets(&cfg, &cfg.trainer, data)?;
            train_into(&cfg, &cfg.trainer, &mut state, &datasets, out_dir, resuming, created)
        }
        Command::Decode {
            checkpoint,
            feats,
            out,
            beam,
            max_len,
        } => {
            let (state, snapshot) = trainer::load_checkpoint(checkpoint)?;
            let defaults = ExperimentConfig::default().decode;
            let beam = beam.unwrap_or(defaults.beam);
            let max_len = max_len
                .or(snapshot.train.map(|t| t.max_decode_len))
                .unwrap_or(defaults.max_len);
            if beam == 0 {
                return Err(Error::Config("--beam must be positive".into()));
            }
            let records = data::read_feats(feats)?;
            let utts: Vec<Utterance> = records
                .into_iter()
                .map(|(id, features)| Utterance {
                    id,
                    features,
                    tokens: Vec::new(),
                    domain: Domain::In,
                })
                .collect();
            let hyps = trainer::decode_all(&state.model, &state.params, &utts, beam, max_len, threads)?;
            created.push(out.clone());
            data::write_atomic(out, |w| {
                for (u, h) in utts.iter().zip(&hyps) {
                    writeln!(w, "{}\t{}", u.id, join_tokens(h))?;
                }
                Ok(())
            })
        }
        Command::Align {
            checkpoint,
            feats,
            text,
            out,
        } => {
            let (state, _) = trainer::load_checkpoint(checkpoint)?;
            let utts = load_paired(feats, text, state.model.cfg.vocab_size)?;
            let lines = align_lines(&state, &utts)?;
            created.push(out.clone());
            data::write_atomic(out, |w| w.write_all(lines.as_bytes()))
        }
        Command::CompressStats {
            checkpoint,
            feats,
            text,
            threshold,
            out,
            per_utterance,
        } => {
            let (state, _) = trainer::load_checkpoint(checkpoint)?;
            let utts = load_paired(feats, text, state.model.cfg.vocab_size)?;
            let (table, detail) = compress_stats(&state, &utts, *threshold)?;
            if let Some(p) = per_utterance {
                created.push(p.clone());
                data::write_atomic(p, |w| w.write_all(detail.as_bytes()))?;
            }
            match out {
                Some(p) => {
                    created.push(p.clone());
                    data::write_atomic(p, |w| w.write_all(table.as_bytes()))
                }
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
        Command::EvalWer { hyp, reference } => {
            let refs = data::read_text(reference)?;
            let hyps = read_hyp_tsv(hyp)?;
            let mut acc = WerAccumulator::default();
            let mut missing = 0;
            for (id, r) in &refs.entries {
                let h = hyps.get(id).map(Vec::as_slice).unwrap_or_else(|| {
                    missing += 1;
                    &[]
                });
                acc.add(h, r);
            }
            let wer = acc.wer()?;
            println!(
                "WER {wer:.6} ({} errors / {} words, {missing} missing hypotheses)",
                acc.errors, acc.words
            );
            Ok(())
        }
    }
}

fn join_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn read_hyp_tsv(path: &Path) -> Result<HashMap<String, Vec<usize>>, Error> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: expected `id<TAB>tokens`", path.display(), i + 1));
        let (id, toks) = line.split_once('\t').ok_or_else(bad)?;
        let tokens = toks
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(id.to_string(), tokens);
    }
    Ok(out)
}

fn load_paired(feats: &Path, text: &Path, vocab_size: usize) -> Result<Vec<Utterance>, Error> {
    data::join_paired(data::read_feats(feats)?, data::read_text(text)?, vocab_size)
}

fn load_text_set(path: &Path, needed: bool, name: &str) -> Result<Vec<TextUtterance>, Error> {
    if !needed {
        return Ok(Vec::new());
    }
    if !path.exists() {
        return Err(Error::Config(format!(
            "mix fraction for {name} is nonzero but {} does not exist",
            path.display()
        )));
    }
    Ok(data::read_text(path)?.into_utterances())
}

fn load_datasets(cfg: &ExperimentConfig, train: &TrainConfig, dir: &Path) -> Result<Datasets, Error> {
    let layout = DataLayout::new(dir);
    let vocab = data::read_vocab(&layout.vocab())?;
    if vocab != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "{} lists {vocab} tokens but model.vocab_size is {}",
            layout.vocab().display(),
            cfg.model.vocab_size
        )));
    }
    let paired = load_paired(&layout.feats("train"), &layout.text("train"), vocab)?;
    let dev = if layout.feats("dev").exists() {
        load_paired(&layout.feats("dev"), &layout.text("dev"), vocab)?
    } else {
        Vec::new()
    };
    Ok(Datasets {
        paired,
        dev,
        text_in: load_text_set(&layout.text("text_in"), train.mix.text_in > 0.0, "in-domain text")?,
        text_out: load_text_set(&layout.text("text_out"), train.mix.text_out > 0.0, "out-of-domain text")?,
    })
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, created: &mut Vec<PathBuf>) -> Result<(), Error> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let world = World::new(cfg.corpus.clone(), cfg.seed)?;
    let layout = DataLayout::new(out);
    let s = &cfg.splits;
    created.push(layout.vocab());
    data::write_vocab(&layout.vocab(), cfg.corpus.vocab_size)?;
    let paired = [
        ("train", Domain::In, 1, s.train),
        ("dev", Domain::In, 2, s.dev),
        ("test", Domain::In, 3, s.test),
        ("test_out", Domain::Out, 4, s.test_out),
    ];
    for (split, domain, split_seed, n) in paired {
        let utts = world.paired_corpus(&format!("{split}-"), domain, split_seed, n);
        created.push(layout.feats(split));
        data::write_feats(&layout.feats(split), utts.iter().map(|u| (u.id.as_str(), &u.features)))?;
        created.push(layout.text(split));
        data::write_text(&layout.text(split), domain, utts.iter().map(|u| (u.id.as_str(), u.tokens.as_slice())))?;
    }
    for (split, domain, split_seed, n) in [("text_in", Domain::In, 5, s.text_in), ("text_out", Domain::Out, 6, s.text_out)] {
        let texts = world.text_only_corpus(&format!("{split}-"), domain, split_seed, n);
        created.push(layout.text(split));
        data::write_text(&layout.text(split), domain, texts.iter().map(|t| (t.id.as_str(), t.tokens.as_slice())))?;
    }
    eprintln!(
        "wrote {} paired and {} text-only utterances to {}; in/out bigram KL {:.4}",
        s.train + s.dev + s.test + s.test_out,
        s.text_in + s.text_out,
        out.display(),
        world.grammar(Domain::In).kl_divergence(world.grammar(Domain::Out))
    );
    Ok(())
}

struct CliObserver {
    log: JsonlLog<fs::File>,
    best_path: PathBuf,
    snapshot: ConfigSnapshot,
}

impl Observer for CliObserver {
    fn on_metrics(&mut self, record: &MetricsRecord) -> Result<(), Error> {
        self.log.on_metrics(record)
    }

    fn on_best(&mut self, state: &TrainState) -> Result<(), Error> {
        trainer::save_checkpoint(&self.best_path, state, &self.snapshot)
    }
}

fn train_into(
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    state: &mut TrainState,
    datasets: &Datasets,
    out_dir: &Path,
    resuming: bool,
    created: &mut Vec<PathBuf>,
) -> Result<(), Error> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join("metrics.jsonl");
    let partial = out_dir.join("metrics.jsonl.partial");
    if resuming && metrics.exists() {
        fs::copy(&metrics, &partial).map_err(|e| Error::io(&partial, e))?;
    } else {
        fs::write(&partial, b"").map_err(|e| Error::io(&partial, e))?;
    }
    created.push(partial.clone());
    let file = OpenOptions::new().append(true).open(&partial).map_err(|e| Error::io(&partial, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    if !best_path.exists() {
        created.push(best_path.clone());
    }
    let config_path = out_dir.join("config.toml");
    created.push(config_path.clone());
    data::write_atomic(&config_path, |w| w.write_all(cfg.to_toml().as_bytes()))?;

    let snapshot = ConfigSnapshot {
        train: Some(train.clone()),
        cjst: Some(cfg.cjst),
    };
    let mut observer = CliObserver {
        log: JsonlLog { out: file },
        best_path,
        snapshot: snapshot.clone(),
    };
    let summary = match train.stage {
        Stage::PretrainEncoderCtc => trainer::pretrain_encoder(state, train, datasets, &mut observer)?,
        _ => trainer::run_joint(state, train, &cfg.cjst, datasets, &mut observer)?,
    };
    observer.log.out.flush().map_err(|e| Error::io(&partial, e))?;
    created.push(last_path.clone());
    trainer::save_checkpoint(&last_path, state, &snapshot)?;
    fs::rename(&partial, &metrics).map_err(|e| Error::io(&metrics, e))?;
    eprintln!(
        "finished {} updates; best dev WER {}; {} skipped, {} CTC-infeasible, {} alignment-infeasible utterances",
        state.step,
        summary.best.map_or("n/a".to_string(), |b| format!("{:.4} at step {}", b.dev_wer, b.step)),
        summary.skipped,
        summary.ctc_infeasible,
        summary.mse_infeasible
    );
    Ok(())
}

fn align_lines(state: &TrainState, utts: &[Utterance]) -> Result<String, Error> {
    let model = &state.model;
    let classifier = model.classifier_values(&state.params)?;
    let mut out = String::new();
    for u in utts {
        let (h_prime, _) = model.compressed_values(&state.params, &u.features)?;
        let Some(h_prime) = h_prime else {
            writeln!(out, "{}\t0\tskipped", u.id).unwrap();
            continue;
        };
        let grid = ctc::ctc_head_values(&h_prime, &classifier)?;
        let y = LabelSequence::new(u.tokens.clone(), model.cfg.vocab_size)?;
        match forced_peaky_align(&grid, &y) {
            Ok(a) => writeln!(out, "{}\t{}\t{:.6}\t{}", u.id, grid.frames(), a.score, a.render()).unwrap(),
            Err(AlignError::Infeasible { .. }) => writeln!(out, "{}\t{}\tinfeasible", u.id, grid.frames()).unwrap(),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn compress_stats(state: &TrainState, utts: &[Utterance], threshold: f64) -> Result<(String, String), Error> {
    let model = &state.model;
    let classifier = model.classifier_values(&state.params)?;
    let mut cached = Vec::with_capacity(utts.len());
    for u in utts {
        let mut s = Session::inference(&state.params);
        let h = model.acoustic_embeddings(&mut s, &u.features)?;
        let h = s.value(h).clone();
        let grid = ctc::ctc_head_values(&h, &classifier)?;
        cached.push((h, grid));
    }
    let mut table = String::from("mode\tthreshold\tmean_ratio\tempty\tframe_ratio\n");
    let mut detail = String::new();
    for mode in CompressionMode::ALL {
        let th = mode.uses_threshold().then_some(threshold);
        let cfg = CompressionConfig::new(mode, th, model.compression.empty_policy)
            .map_err(|e| Error::Config(e.to_string()))?
            .with_sharing(model.compression.embedding_sharing);
        let (mut ratio_sum, mut ratio_n, mut empty) = (0.0, 0usize, 0usize);
        let (mut frames_in, mut frames_out) = (0usize, 0usize);
        for (u, (h, grid)) in utts.iter().zip(&cached) {
            let c = compressor::compress(h, grid, &cfg)?;
            let t_prime = c.len();
            frames_in += h.rows();
            frames_out += t_prime;
            if c.status != CompressionStatus::Normal {
                empty += 1;
            }
            if c.status != CompressionStatus::Skipped {
                ratio_sum += t_prime as f64 / u.tokens.len() as f64;
                ratio_n += 1;
            }
            writeln!(detail, "{}\t{}\t{}\t{}\t{:?}", mode.name(), u.id, h.rows(), t_prime, c.status).unwrap();
        }
        let th_str = th.map_or("-".to_string(), |t| format!("{t}"));
        let mean = if ratio_n > 0 { ratio_sum / ratio_n as f64 } else { f64::NAN };
        let frame_ratio = if frames_in > 0 { frames_out as f64 / frames_in as f64 } else { f64::NAN };
        writeln!(table, "{}\t{th_str}\t{mean:.4}\t{empty}\t{frame_ratio:.4}", mode.name()).unwrap();
    }
    Ok((table, detail))
}
