//! CTC compressor: shortens encoder output using the CTC posteriors.
//!
//! Four modes are supported:
//!
//! 1. [`CompressionMode::BlankPredictionRemoval`] drops frames whose greedy
//!    prediction is the blank.
//! 2. [`CompressionMode::SamePredictionAverage`] averages every maximal run of
//!    equal greedy predictions (blank runs included) into one frame.
//! 3. [`CompressionMode::BlankProbabilityRemoval`] drops frames whose blank
//!    probability is strictly above a threshold.
//! 4. [`CompressionMode::Combined`] applies 3, then run-averages the survivors
//!    using the greedy predictions of their original posterior rows. Runs do
//!    not span a removed frame, so `A ∅ A` still yields two frames.
//!
//! A compression that removes every frame is resolved by an [`EmptyPolicy`].
//!
//! Compression decisions depend only on posterior values. The averaging itself
//! is differentiable: [`apply_plan`] expresses it as a segment mean in the graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{greedy_predictions, PosteriorGrid};
use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompressorError {
    #[error("blank_threshold is required for mode {0:?}")]
    MissingThreshold(CompressionMode),
    #[error("blank_threshold is only valid for blank probability modes, not {0:?}")]
    UnexpectedThreshold(CompressionMode),
    #[error("blank_threshold {0} outside [0, 1]")]
    ThresholdRange(f64),
    #[error("encoder output has {frames} frames but the posterior grid has {grid_frames}")]
    FrameMismatch { frames: usize, grid_frames: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    BlankPredictionRemoval,
    SamePredictionAverage,
    BlankProbabilityRemoval,
    Combined,
}

impl CompressionMode {
    pub const ALL: [CompressionMode; 4] = [
        CompressionMode::BlankPredictionRemoval,
        CompressionMode::SamePredictionAverage,
        CompressionMode::BlankProbabilityRemoval,
        CompressionMode::Combined,
    ];

    pub fn uses_threshold(self) -> bool {
        matches!(self, Self::BlankProbabilityRemoval | Self::Combined)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BlankPredictionRemoval => "blank_prediction_removal",
            Self::SamePredictionAverage => "same_prediction_average",
            Self::BlankProbabilityRemoval => "blank_probability_removal",
            Self::Combined => "combined",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// Drop the utterance in training; emit EOS immediately in inference.
    Skip,
    /// Replace the empty output with the mean of all encoder frames.
    #[default]
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    pub mode: CompressionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blank_threshold: Option<f64>,
    #[serde(default)]
    pub empty_policy: EmptyPolicy,
    #[serde(default)]
    pub embedding_sharing: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            mode: CompressionMode::BlankProbabilityRemoval,
            blank_threshold: Some(0.95),
            empty_policy: EmptyPolicy::Fallback,
            embedding_sharing: false,
        }
    }
}

impl CompressionConfig {
    pub fn new(mode: CompressionMode, blank_threshold: Option<f64>, empty_policy: EmptyPolicy) -> Result<Self, CompressorError> {
        let cfg = Self {
            mode,
            blank_threshold,
            empty_policy,
            embedding_sharing: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_sharing(mut self, sharing: bool) -> Self {
        self.embedding_sharing = sharing;
        self
    }

    pub fn validate(&self) -> Result<(), CompressorError> {
        match (self.mode.uses_threshold(), self.blank_threshold) {
            (true, None) => Err(CompressorError::MissingThreshold(self.mode)),
            (false, Some(_)) => Err(CompressorError::UnexpectedThreshold(self.mode)),
            (true, Some(th)) if !(0.0..=1.0).contains(&th) => Err(CompressorError::ThresholdRange(th)),
            _ => Ok(()),
        }
    }

    fn threshold(&self) -> f64 {
        self.blank_threshold.unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompressionStatus {
    Normal,
    FallbackSingleFrame,
    Skipped,
}

/// Which source frames make up each compressed frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressionPlan {
    pub segments: Vec<Vec<usize>>,
    pub status: CompressionStatus,
}

impl CompressionPlan {
    pub fn output_len(&self) -> usize {
        self.segments.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedOutput {
    /// `T′ × D` compressed frames; `None` exactly when the status is `Skipped`.
    pub frames: Option<Tensor>,
    pub provenance: Vec<Vec<usize>>,
    pub status: CompressionStatus,
}

impl CompressedOutput {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Maximal runs of equal values in `labels`, as index sets into `frames`.
/// A run never spans a gap in `frames` (a removed source frame).
fn equal_runs(frames: &[usize], labels: &[usize]) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (&f, &l) in frames.iter().zip(labels) {
        match runs.last_mut() {
            Some(run) if prev == Some((f.wrapping_sub(1), l)) => run.push(f),
            _ => runs.push(vec![f]),
        }
        prev = Some((f, l));
    }
    runs
}

fn surviving_blank_prob(grid: &PosteriorGrid, threshold: f64) -> Vec<usize> {
    (0..grid.frames()).filter(|&t| grid.blank_prob(t) <= threshold).collect()
}

/// Decides the compressed segments from the posteriors alone.
pub fn plan(grid: &PosteriorGrid, cfg: &CompressionConfig) -> CompressionPlan {
    let all: Vec<usize> = (0..grid.frames()).collect();
    let greedy = greedy_predictions(grid);
    let blank = grid.blank();
    let segments: Vec<Vec<usize>> = match cfg.mode {
        CompressionMode::BlankPredictionRemoval => all
            .iter()
            .filter(|&&t| greedy[t] != blank)
            .map(|&t| vec![t])
            .collect(),
        CompressionMode::SamePredictionAverage => equal_runs(&all, &greedy),
        CompressionMode::BlankProbabilityRemoval => surviving_blank_prob(grid, cfg.threshold())
            .into_iter()
            .map(|t| vec![t])
            .collect(),
        CompressionMode::Combined => {
            let kept = surviving_blank_prob(grid, cfg.threshold());
            let labels: Vec<usize> = kept.iter().map(|&t| greedy[t]).collect();
            equal_runs(&kept, &labels)
        }
    };
    if !segments.is_empty() {
        return CompressionPlan {
            segments,
            status: CompressionStatus::Normal,
        };
    }
    match cfg.empty_policy {
        EmptyPolicy::Skip => CompressionPlan {
            segments: Vec::new(),
            status: CompressionStatus::Skipped,
        },
        EmptyPolicy::Fallback => CompressionPlan {
            segments: vec![all],
            status: CompressionStatus::FallbackSingleFrame,
        },
    }
}

fn segment_means(h: &Tensor, segments: &[Vec<usize>]) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let y = g.segment_mean(x, segments)?;
    Ok(g.value(y).clone())
}

fn materialize(h: &Tensor, plan: CompressionPlan) -> Result<CompressedOutput, CompressorError> {
    let frames = match plan.status {
        CompressionStatus::Skipped => None,
        _ => Some(segment_means(h, &plan.segments)?),
    };
    Ok(CompressedOutput {
        frames,
        provenance: plan.segments,
        status: plan.status,
    })
}

/// Compresses `T × D` frames `h` with posteriors `grid` computed from them.
pub fn compress(h: &Tensor, grid: &PosteriorGrid, cfg: &CompressionConfig) -> Result<CompressedOutput, CompressorError> {
    if h.rank() != 2 || h.rows() != grid.frames() {
        return Err(CompressorError::FrameMismatch {
            frames: if h.rank() == 2 { h.rows() } else { 0 },
            grid_frames: grid.frames(),
        });
    }
    materialize(h, plan(grid, cfg))
}

/// Output for a compression that removed every frame.
pub fn handle_empty(h: &Tensor, policy: EmptyPolicy) -> Result<CompressedOutput, CompressorError> {
    let plan = match policy {
        EmptyPolicy::Skip => CompressionPlan {
            segments: Vec::new(),
            status: CompressionStatus::Skipped,
        },
        EmptyPolicy::Fallback => CompressionPlan {
            segments: vec![(0..h.rows()).collect()],
            status: CompressionStatus::FallbackSingleFrame,
        },
    };
    materialize(h, plan)
}

/// Applies a plan inside a graph; `None` for a skipped utterance.
pub fn apply_plan(g: &mut Graph, h: Var, plan: &CompressionPlan) -> Result<Option<Var>, NumericsError> {
    match plan.status {
        CompressionStatus::Skipped => Ok(None),
        _ => g.segment_mean(h, &plan.segments).map(Some),
    }
}

/// CTC classifier whose token rows are the first `vocab` rows of the decoder
/// embedding table, followed by a dedicated blank row.
///
/// Both uses read the same parameter, so gradients from the CTC loss and from
/// the decoder accumulate into the same storage.
pub fn shared_classifier_view(g: &mut Graph, decoder_embeddings: Var, vocab: usize, blank_row: Var) -> Result<Var, NumericsError> {
    let rows: Vec<usize> = (0..vocab).collect();
    let tokens = g.gather_rows(decoder_embeddings, &rows)?;
    g.concat_rows(&[tokens, blank_row])
}
