//! CTC classifier head, forward-backward loss and greedy frame predictions.
//!
//! Class index `V` (the last one) is the blank in every posterior grid.

use thiserror::Error;

use crate::numerics::{log_add, logsumexp, Graph, NumericsError, Tensor, Var};

/// Tolerance on `logsumexp(row) = 0` when validating a grid.
const ROW_NORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtcError {
    #[error("label sequence needs {required} frames but only {frames} are available")]
    Infeasible { frames: usize, required: usize },
    #[error("label sequence is empty")]
    EmptyLabels,
    #[error("label {label} is outside the vocabulary of size {vocab}")]
    InvalidLabel { label: usize, vocab: usize },
    #[error("invalid posterior grid: {0}")]
    InvalidGrid(String),
    #[error("ctc loss is not finite")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-frame log-probabilities over `V` tokens plus the blank (index `V`).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    logp: Tensor,
}

impl PosteriorGrid {
    /// Wraps a `T × (V+1)` matrix of log-probabilities, checking normalization.
    pub fn new(logp: Tensor) -> Result<Self, CtcError> {
        if logp.rank() != 2 {
            return Err(CtcError::InvalidGrid(format!("expected a matrix, got {:?}", logp.shape())));
        }
        if logp.rows() == 0 || logp.cols() < 2 {
            return Err(CtcError::InvalidGrid(format!(
                "need T >= 1 and V >= 1, got shape {:?}",
                logp.shape()
            )));
        }
        for t in 0..logp.rows() {
            let lse = logsumexp(logp.row(t));
            if !lse.is_finite() || lse.abs() > ROW_NORM_TOL {
                return Err(CtcError::InvalidGrid(format!("row {t} logsumexp is {lse}")));
            }
        }
        Ok(Self { logp })
    }

    /// Normalizes each row of a probability matrix (useful for fixtures).
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self, CtcError> {
        let logs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.iter().map(|p| (p / z).ln()).collect()
            })
            .collect();
        Self::new(Tensor::from_rows(&logs)?)
    }

    /// Row-wise log-softmax of raw scores.
    pub fn from_logits(logits: &Tensor) -> Result<Self, CtcError> {
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let y = g.log_softmax_rows(x)?;
        Self::new(g.value(y).clone())
    }

    pub fn frames(&self) -> usize {
        self.logp.rows()
    }

    /// Number of regular tokens `V` (the blank is not counted).
    pub fn vocab_size(&self) -> usize {
        self.logp.cols() - 1
    }

    pub fn blank(&self) -> usize {
        self.vocab_size()
    }

    pub fn logp(&self, t: usize, k: usize) -> f64 {
        self.logp.get(t, k)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.logp.row(t)
    }

    pub fn blank_prob(&self, t: usize) -> f64 {
        self.logp(t, self.blank()).exp()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.logp
    }

    /// Grid restricted to the given frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self, CtcError> {
        let rows: Vec<Vec<f64>> = frames.iter().map(|&t| self.row(t).to_vec()).collect();
        Self::new(Tensor::from_rows(&rows)?)
    }
}

/// Ground-truth token ids, all in `[0, V)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self, CtcError> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(CtcError::InvalidLabel { label: bad, vocab });
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal pairs; each needs a separating blank frame.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum frame count for any CTC alignment of this sequence.
    pub fn required_frames(&self) -> usize {
        self.len() + self.repeats()
    }
}

/// `log_softmax(h · classifierᵀ)` as a graph node.
///
/// `h` is `T × D`, `classifier` is `(V+1) × D`.
pub fn ctc_head(g: &mut Graph, h: Var, classifier: Var) -> Result<Var, NumericsError> {
    let wt = g.transpose(classifier)?;
    let logits = g.matmul(h, wt)?;
    g.log_softmax_rows(logits)
}

/// Value-only version of [`ctc_head`].
pub fn ctc_head_values(h: &Tensor, classifier: &Tensor) -> Result<PosteriorGrid, CtcError> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let wv = g.constant(classifier.clone());
    let out = ctc_head(&mut g, hv, wv)?;
    PosteriorGrid::new(g.value(out).clone())
}

fn check_labels(frames: usize, vocab: usize, y: &LabelSequence) -> Result<(), CtcError> {
    if y.is_empty() {
        return Err(CtcError::EmptyLabels);
    }
    if let Some(&bad) = y.tokens().iter().find(|&&t| t >= vocab) {
        return Err(CtcError::InvalidLabel { label: bad, vocab });
    }
    let required = y.required_frames();
    if frames < required {
        return Err(CtcError::Infeasible { frames, required });
    }
    Ok(())
}

/// Blank-interleaved label sequence `∅ y₁ ∅ y₂ … ∅`.
fn extended(y: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(blank);
    for &tok in y {
        ext.push(tok);
        ext.push(blank);
    }
    ext
}

/// Negative log-likelihood of `y` under all CTC alignments, plus its gradient
/// with respect to every entry of the log-probability grid.
///
/// The gradient is minus the state occupancy: `−γ_t(k)`.
pub fn ctc_loss_with_grad(grid: &PosteriorGrid, y: &LabelSequence) -> Result<(f64, Tensor), CtcError> {
    let t_len = grid.frames();
    let blank = grid.blank();
    check_labels(t_len, grid.vocab_size(), y)?;
    let ext = extended(y.tokens(), blank);
    let s_len = ext.len();
    let skip_allowed = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = grid.logp(0, ext[0]);
    alpha[1] = grid.logp(0, ext[1]);
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_allowed(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            if acc > ninf {
                alpha[t * s_len + s] = acc + grid.logp(t, ext[s]);
            }
        }
    }
    let last = (t_len - 1) * s_len;
    let log_z = log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_z.is_finite() {
        return Err(CtcError::NonFinite);
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    beta[last + s_len - 2] = 0.0;
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let emit = |s2: usize| next[s2] + grid.logp(t + 1, ext[s2]);
            let mut acc = emit(s);
            if s + 1 < s_len {
                acc = log_add(acc, emit(s + 1));
            }
            if s + 2 < s_len && skip_allowed(s + 2) {
                acc = log_add(acc, emit(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let classes = grid.vocab_size() + 1;
    let mut grad = Tensor::zeros(&[t_len, classes]);
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_z;
            if occ > ninf {
                grad.data_mut()[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_z, grad))
}

/// Negative log-likelihood of `y` summed over all CTC alignments.
pub fn ctc_loss(grid: &PosteriorGrid, y: &LabelSequence) -> Result<f64, CtcError> {
    ctc_loss_with_grad(grid, y).map(|(loss, _)| loss)
}

/// CTC loss as a differentiable graph node over a `T × (V+1)` log-probability
/// node (normally the output of [`ctc_head`]).
pub fn ctc_loss_node(g: &mut Graph, logp: Var, y: &LabelSequence) -> Result<Var, CtcError> {
    let grid = PosteriorGrid::new(g.value(logp).clone())?;
    let (loss, grad) = ctc_loss_with_grad(&grid, y)?;
    Ok(g.external_scalar(logp, loss, grad)?)
}

/// Per-frame argmax; ties resolve to the lowest class index, so the blank
/// (highest index) loses every tie.
pub fn greedy_predictions(grid: &PosteriorGrid) -> Vec<usize> {
    (0..grid.frames())
        .map(|t| {
            let row = grid.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Removes repeated labels and then blanks (standard CTC collapse).
pub fn collapse(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, t: usize, v: usize) -> PosteriorGrid {
        let data = (0..t * (v + 1)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        PosteriorGrid::from_logits(&Tensor::matrix(t, v + 1, data).unwrap()).unwrap()
    }

    /// Sum of path probabilities over every labelling that collapses to `y`.
    fn brute_force_nll(grid: &PosteriorGrid, y: &[usize]) -> f64 {
        let t = grid.frames();
        let c = grid.vocab_size() + 1;
        let mut total = 0.0;
        let mut labels = vec![0usize; t];
        for code in 0..c.pow(t as u32) {
            let mut rest = code;
            for l in labels.iter_mut() {
                *l = rest % c;
                rest /= c;
            }
            if collapse(&labels, grid.blank()) == y {
                total += labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| grid.logp(i, l))
                    .sum::<f64>()
                    .exp();
            }
        }
        -total.ln()
    }

    #[test]
    fn single_frame_single_label() {
        let grid = PosteriorGrid::from_probs(&[vec![0.7, 0.2, 0.1]]).unwrap();
        let y = LabelSequence::new(vec![0], 2).unwrap();
        assert!((ctc_loss(&grid, &y).unwrap() + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_matches_three_paths() {
        let p1 = [0.6, 0.1, 0.3];
        let p2 = [0.2, 0.3, 0.5];
        let grid = PosteriorGrid::from_probs(&[p1.to_vec(), p2.to_vec()]).unwrap();
        let y = LabelSequence::new(vec![0], 2).unwrap();
        let blank = 2;
        let expected = -(p1[0] * p2[blank] + p1[blank] * p2[0] + p1[0] * p2[0]).ln();
        let got = ctc_loss(&grid, &y).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - brute_force_nll(&grid, &[0])).abs() < 1e-12);
    }

    #[test]
    fn uniform_grid_matches_enumeration() {
        let grid = PosteriorGrid::from_probs(&vec![vec![1.0; 3]; 4]).unwrap();
        let y = LabelSequence::new(vec![0, 1], 2).unwrap();
        let oracle = brute_force_nll(&grid, &[0, 1]);
        assert!((ctc_loss(&grid, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn infeasible_length_is_a_distinct_error() {
        let grid = PosteriorGrid::from_probs(&vec![vec![1.0; 3]; 2]).unwrap();
        let y = LabelSequence::new(vec![1, 1], 2).unwrap();
        assert_eq!(
            ctc_loss(&grid, &y).unwrap_err(),
            CtcError::Infeasible { frames: 2, required: 3 }
        );
        let empty = LabelSequence::new(vec![], 2).unwrap();
        assert_eq!(ctc_loss(&grid, &empty).unwrap_err(), CtcError::EmptyLabels);
    }

    #[test]
    fn zero_classifier_gives_uniform_rows() {
        let h = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 4.0, 0.0, 1.0]).unwrap();
        let w = Tensor::zeros(&[4, 3]);
        let grid = ctc_head_values(&h, &w).unwrap();
        for t in 0..2 {
            for k in 0..4 {
                assert!((grid.logp(t, k) + 4f64.ln()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturated_classifier_gives_near_one_hot_rows() {
        // frame 0 selects class 1, frame 1 selects the blank (class 2)
        let h = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::from_rows(&[vec![0.0; 3], vec![0.0, 50.0, 0.0], vec![0.0, 0.0, 50.0]]).unwrap();
        let grid = ctc_head_values(&h, &w).unwrap();
        assert!(grid.logp(0, 1).exp() > 1.0 - 1e-12);
        assert!(grid.blank_prob(1) > 1.0 - 1e-12);
        assert_eq!(greedy_predictions(&grid), vec![1, 2]);
    }

    #[test]
    fn head_rejects_dimension_mismatch() {
        let h = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        assert!(matches!(ctc_head_values(&h, &w), Err(CtcError::Numerics(_))));
    }

    #[test]
    fn random_head_rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Tensor::matrix(5, 4, (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let w = Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let grid = ctc_head_values(&h, &w).unwrap();
        for t in 0..5 {
            let s: f64 = grid.row(t).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn greedy_tie_breaks_low_and_blank_rows() {
        let uniform = PosteriorGrid::from_probs(&[vec![1.0; 4]]).unwrap();
        assert_eq!(greedy_predictions(&uniform), vec![0]);
        let blanks = PosteriorGrid::from_probs(&vec![vec![1e-9, 1e-9, 1.0]; 3]).unwrap();
        assert_eq!(greedy_predictions(&blanks), vec![2, 2, 2]);
    }

    #[test]
    fn greedy_matches_rowwise_scan_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let grid = random_grid(&mut rng, 7, 4);
            let got = greedy_predictions(&grid);
            for t in 0..7 {
                let row = grid.row(t);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let first = row.iter().position(|&v| v == max).unwrap();
                assert_eq!(got[t], first);
            }
        }
    }

    #[test]
    fn reversing_non_palindrome_changes_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = LabelSequence::new(vec![0, 1, 2], 3).unwrap();
        let rev = LabelSequence::new(vec![2, 1, 0], 3).unwrap();
        for _ in 0..20 {
            let grid = random_grid(&mut rng, 5, 3);
            let a = ctc_loss(&grid, &y).unwrap();
            let b = ctc_loss(&grid, &rev).unwrap();
            assert!((a - b).abs() > 1e-9);
        }
    }

    #[test]
    fn collapse_removes_repeats_then_blanks() {
        assert_eq!(collapse(&[3, 0, 0, 3, 1, 3, 1], 3), vec![0, 1, 1]);
        assert_eq!(collapse(&[1, 1, 0, 0], 3), vec![1, 0]);
        assert_eq!(collapse(&[0, 3, 0], 3), vec![0, 0]);
    }
}
