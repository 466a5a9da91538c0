//! Forced peaky alignment of a reference token sequence to compressed frames.
//!
//! Every token occupies exactly one frame and every other frame is blank.
//! The lattice is the usual blank-extended sequence `∅ y₁ ∅ y₂ … y_N ∅`, but
//! token states have no self-loop. A direct token-to-token transition exists
//! only between different tokens, so equal neighbours are always separated by
//! a blank frame and the result collapses back to `y` under CTC rules.
//!
//! Among equally scoring alignments the one placing each token at the
//! earliest frame wins (lexicographically smallest token positions).

use thiserror::Error;

use crate::ctc::{LabelSequence, PosteriorGrid};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignError {
    #[error("alignment infeasible: {required} frames required, {frames} available")]
    Infeasible { frames: usize, required: usize },
    #[error("label {label} is outside the vocabulary of size {vocab}")]
    InvalidLabel { label: usize, vocab: usize },
    #[error("brute-force oracle limited to T' <= 10 and |y| <= 4, got T'={frames}, |y|={labels}")]
    OracleTooLarge { frames: usize, labels: usize },
}

/// Blank-interleaved label sequence of the same length as the frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakyAlignment {
    pub labels: Vec<usize>,
    /// Sum of the frame log-probabilities along the alignment, in frame order.
    pub score: f64,
    pub blank: usize,
}

impl PeakyAlignment {
    /// Frame index of each token, in order.
    pub fn token_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != self.blank)
            .map(|(t, _)| t)
            .collect()
    }

    /// The aligned labels with blanks removed.
    pub fn tokens(&self) -> Vec<usize> {
        self.labels.iter().copied().filter(|&l| l != self.blank).collect()
    }

    /// Space-separated labels with `_` for the blank.
    pub fn render(&self) -> String {
        self.labels
            .iter()
            .map(|&l| if l == self.blank { "_".to_string() } else { l.to_string() })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn validate(frames: usize, vocab: usize, y: &LabelSequence) -> Result<(), AlignError> {
    if let Some(&bad) = y.tokens().iter().find(|&&t| t >= vocab) {
        return Err(AlignError::InvalidLabel { label: bad, vocab });
    }
    let required = y.required_frames();
    if frames < required {
        return Err(AlignError::Infeasible { frames, required });
    }
    Ok(())
}

/// Blank-extended lattice shared by the Viterbi and counting passes.
struct Lattice<'a> {
    y: &'a [usize],
}

impl Lattice<'_> {
    fn states(&self) -> usize {
        2 * self.y.len() + 1
    }

    fn is_token(s: usize) -> bool {
        s % 2 == 1
    }

    fn label(&self, s: usize, blank: usize) -> usize {
        if Self::is_token(s) {
            self.y[s / 2]
        } else {
            blank
        }
    }

    fn is_start(&self, s: usize) -> bool {
        s <= 1
    }

    fn is_final(&self, s: usize) -> bool {
        let n = self.states();
        s + 1 == n || (n >= 2 && s + 2 == n)
    }

    /// Successor states in preference order: emitting a token comes first.
    fn successors(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.states();
        let (first, second) = if Self::is_token(s) {
            // token -> next token (only when different), token -> blank
            let next_tok = s + 2;
            let direct = (next_tok < n && self.y[next_tok / 2] != self.y[s / 2]).then_some(next_tok);
            (direct, Some(s + 1))
        } else {
            // blank -> next token, blank -> blank
            ((s + 1 < n).then_some(s + 1), Some(s))
        };
        first.into_iter().chain(second)
    }
}

/// Best peaky alignment of `y` to the frames of `grid`, by dynamic programming
/// over `O(T′ · |y|)` states.
pub fn forced_peaky_align(grid: &PosteriorGrid, y: &LabelSequence) -> Result<PeakyAlignment, AlignError> {
    let t_len = grid.frames();
    let blank = grid.blank();
    validate(t_len, grid.vocab_size(), y)?;
    let lat = Lattice { y: y.tokens() };
    let n = lat.states();
    let ninf = f64::NEG_INFINITY;

    // best[t][s]: best score of frames t.. given state s at frame t.
    let mut best = vec![ninf; t_len * n];
    for s in 0..n {
        if lat.is_final(s) {
            best[(t_len - 1) * n + s] = grid.logp(t_len - 1, lat.label(s, blank));
        }
    }
    for t in (0..t_len - 1).rev() {
        let (head, tail) = best.split_at_mut((t + 1) * n);
        let cur = &mut head[t * n..];
        let next = &tail[..n];
        for s in 0..n {
            let succ = lat.successors(s).map(|s2| next[s2]).fold(ninf, f64::max);
            if succ > ninf {
                cur[s] = grid.logp(t, lat.label(s, blank)) + succ;
            }
        }
    }

    // a token start (state 1) wins ties against the blank start
    let starts: Vec<usize> = [1usize, 0].into_iter().filter(|&s| s < n).collect();
    let top = starts.iter().map(|&s| best[s]).fold(ninf, f64::max);
    let mut state = *starts
        .iter()
        .find(|&&s| best[s] == top)
        .expect("feasible lattice has a start state");
    let mut labels = Vec::with_capacity(t_len);
    labels.push(lat.label(state, blank));
    for t in 1..t_len {
        let row = &best[t * n..(t + 1) * n];
        let target = lat.successors(state).map(|s2| row[s2]).fold(ninf, f64::max);
        state = lat
            .successors(state)
            .find(|&s2| row[s2] == target)
            .expect("optimal successor exists");
        labels.push(lat.label(state, blank));
    }
    let score = labels.iter().enumerate().map(|(t, &l)| grid.logp(t, l)).sum();
    Ok(PeakyAlignment { labels, score, blank })
}

/// Number of distinct peaky alignments of `y` over `frames` frames, computed by
/// running the alignment lattice in the counting semiring.
pub fn count_peaky_alignments(frames: usize, y: &[usize]) -> u128 {
    let lat = Lattice { y };
    let n = lat.states();
    if frames == 0 {
        return 0;
    }
    let mut counts = vec![0u128; n];
    for (s, c) in counts.iter_mut().enumerate() {
        if lat.is_start(s) {
            *c = 1;
        }
    }
    for _ in 1..frames {
        let mut next = vec![0u128; n];
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for s2 in lat.successors(s) {
                next[s2] += c;
            }
        }
        counts = next;
    }
    counts.iter().enumerate().filter(|(s, _)| lat.is_final(*s)).map(|(_, &c)| c).sum()
}

/// Every valid peaky label sequence, in lexicographic order of token positions.
pub fn enumerate_peaky_alignments(frames: usize, y: &[usize], blank: usize) -> Vec<Vec<usize>> {
    fn recurse(y: &[usize], frames: usize, start: usize, prev: Option<usize>, pos: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let k = pos.len();
        if k == y.len() {
            out.push(pos.clone());
            return;
        }
        for p in start..frames {
            // equal neighbours need a blank frame between them
            if let Some(q) = prev {
                if y[k - 1] == y[k] && p < q + 2 {
                    continue;
                }
            }
            pos.push(p);
            recurse(y, frames, p + 1, Some(p), pos, out);
            pos.pop();
        }
    }
    let mut positions = Vec::new();
    recurse(y, frames, 0, None, &mut Vec::new(), &mut positions);
    positions
        .into_iter()
        .map(|pos| {
            let mut labels = vec![blank; frames];
            for (&p, &tok) in pos.iter().zip(y) {
                labels[p] = tok;
            }
            labels
        })
        .collect()
}

/// Exhaustive-search oracle for [`forced_peaky_align`] on small instances.
pub fn brute_force_align(grid: &PosteriorGrid, y: &LabelSequence) -> Result<PeakyAlignment, AlignError> {
    let t_len = grid.frames();
    if t_len > 10 || y.len() > 4 {
        return Err(AlignError::OracleTooLarge {
            frames: t_len,
            labels: y.len(),
        });
    }
    validate(t_len, grid.vocab_size(), y)?;
    let blank = grid.blank();
    let mut best: Option<PeakyAlignment> = None;
    for labels in enumerate_peaky_alignments(t_len, y.tokens(), blank) {
        let score: f64 = labels.iter().enumerate().map(|(t, &l)| grid.logp(t, l)).sum();
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(PeakyAlignment { labels, score, blank });
        }
    }
    Ok(best.expect("feasible instance has at least one alignment"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::collapse;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(tokens: &[usize], v: usize) -> LabelSequence {
        LabelSequence::new(tokens.to_vec(), v).unwrap()
    }

    #[test]
    fn single_frame_is_forced() {
        let grid = PosteriorGrid::from_probs(&[vec![0.3, 0.2, 0.5]]).unwrap();
        let a = forced_peaky_align(&grid, &labels(&[0], 2)).unwrap();
        assert_eq!(a.labels, vec![0]);
        assert!((a.score - 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frames_pick_the_better_placement() {
        // V = 1: columns are (a, blank)
        let grid = PosteriorGrid::from_probs(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let a = forced_peaky_align(&grid, &labels(&[0], 1)).unwrap();
        // (a, ∅) = 0.72 beats (∅, a) = 0.02
        assert_eq!(a.labels, vec![0, 1]);
        assert_eq!(a.render(), "0 _");
    }

    #[test]
    fn too_few_frames_is_infeasible() {
        let grid = PosteriorGrid::from_probs(&[vec![1.0; 3]]).unwrap();
        assert_eq!(
            forced_peaky_align(&grid, &labels(&[0, 1], 2)).unwrap_err(),
            AlignError::Infeasible { frames: 1, required: 2 }
        );
        let two = PosteriorGrid::from_probs(&vec![vec![1.0; 3]; 2]).unwrap();
        assert!(forced_peaky_align(&two, &labels(&[1, 1], 2)).is_err());
    }

    #[test]
    fn repeated_tokens_get_a_blank_between() {
        let grid = PosteriorGrid::from_probs(&vec![vec![0.98, 0.01, 0.01]; 3]).unwrap();
        let a = forced_peaky_align(&grid, &labels(&[0, 0], 2)).unwrap();
        assert_eq!(a.labels, vec![0, 2, 0]);
    }

    #[test]
    fn ties_place_tokens_earliest() {
        let grid = PosteriorGrid::from_probs(&vec![vec![1.0; 3]; 5]).unwrap();
        let a = forced_peaky_align(&grid, &labels(&[0, 1], 2)).unwrap();
        assert_eq!(a.token_positions(), vec![0, 1]);
        let b = brute_force_align(&grid, &labels(&[0, 1], 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn candidate_counts() {
        assert_eq!(enumerate_peaky_alignments(2, &[0], 1).len(), 2);
        assert_eq!(enumerate_peaky_alignments(4, &[0, 1], 2).len(), 6);
        assert_eq!(count_peaky_alignments(4, &[0, 1]), 6);
        // a a over 4 frames: positions (0,2) (0,3) (1,3)
        assert_eq!(enumerate_peaky_alignments(4, &[0, 0], 2).len(), 3);
        assert_eq!(count_peaky_alignments(4, &[0, 0]), 3);
    }

    fn binom(n: u128, k: u128) -> u128 {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn counting_semiring_matches_binomial_without_repeats() {
        for t in 1..12usize {
            for n in 0..=t.min(5) {
                let y: Vec<usize> = (0..n).collect();
                assert_eq!(count_peaky_alignments(t, &y), binom(t as u128, n as u128), "T={t} N={n}");
            }
        }
    }

    #[test]
    fn dp_agrees_with_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let v = rng.gen_range(1..=3);
            let n = rng.gen_range(1..=3);
            let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
            let y = labels(&y, v);
            let t = rng.gen_range(y.required_frames()..=8);
            let data = (0..t * (v + 1)).map(|_| rng.gen_range(-4.0..2.0)).collect();
            let grid = PosteriorGrid::from_logits(&Tensor::matrix(t, v + 1, data).unwrap()).unwrap();
            let dp = forced_peaky_align(&grid, &y).unwrap();
            let bf = brute_force_align(&grid, &y).unwrap();
            assert_eq!(dp.labels, bf.labels);
            assert_eq!(dp.score, bf.score);
            assert_eq!(collapse(&dp.labels, v), y.tokens());
            assert!(dp.score <= 0.0);
        }
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let grid = PosteriorGrid::from_probs(&vec![vec![1.0, 1.0]; 11]).unwrap();
        assert!(matches!(
            brute_force_align(&grid, &labels(&[0], 1)),
            Err(AlignError::OracleTooLarge { .. })
        ));
    }
}
