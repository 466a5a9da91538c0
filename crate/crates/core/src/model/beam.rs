use crate::error::Error;

/// Next-token log-probabilities for a batch of prefixes. Entries equal to
/// `-inf` are never expanded.
pub trait StepScorer {
    fn eos(&self) -> usize;
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// Total log-probability, EOS included when the hypothesis finished.
    pub score: f64,
    /// Set when `max_len` was reached before EOS.
    pub truncated: bool,
}

/// Beam search keeping the `beam_size` best expansions of all live
/// hypotheses at every step. Expansions to EOS leave the beam as finished
/// hypotheses. Ties between equal scores go to the earlier hypothesis, then
/// the lower token id, so `beam_size == 1` reproduces [`greedy_search`].
pub fn beam_search(scorer: &mut impl StepScorer, beam_size: usize, max_len: usize) -> Result<Hypothesis, Error> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    let eos = scorer.eos();
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut best: Option<Hypothesis> = None;

    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let scores = scorer.next_log_probs(&prefixes)?;
        let mut candidates = Vec::new();
        for (i, (row, (_, base))) in scores.iter().zip(&alive).enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                if lp.is_finite() {
                    candidates.push((base + lp, i, tok));
                } else if lp.is_nan() {
                    return Err(Error::NonFinite("decoder produced NaN log-probabilities".into()));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        candidates.truncate(beam_size);

        let mut next = Vec::new();
        for (score, i, tok) in candidates {
            if tok == eos {
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(Hypothesis {
                        tokens: alive[i].0.clone(),
                        score,
                        truncated: false,
                    });
                }
            } else {
                let mut p = alive[i].0.clone();
                p.push(tok);
                next.push((p, score));
            }
        }
        alive = next;
        // log-probabilities only decrease, so no live hypothesis can overtake
        let top_alive = alive.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || best.as_ref().is_some_and(|b| b.score >= top_alive) {
            break;
        }
    }

    if best.is_none() {
        // nothing reached EOS within max_len
        let (tokens, score) = alive
            .into_iter()
            .fold((Vec::new(), f64::NEG_INFINITY), |acc, (p, s)| if s > acc.1 { (p, s) } else { acc });
        return Ok(Hypothesis {
            tokens,
            score,
            truncated: true,
        });
    }
    Ok(best.unwrap())
}

/// Repeated argmax (lowest id on ties) until EOS or `max_len` tokens.
pub fn greedy_search(scorer: &mut impl StepScorer, max_len: usize) -> Result<Hypothesis, Error> {
    let eos = scorer.eos();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let row = scorer.next_log_probs(std::slice::from_ref(&tokens))?.remove(0);
        let mut arg = None;
        for (tok, &lp) in row.iter().enumerate() {
            if lp.is_finite() && arg.is_none_or(|(_, b)| lp > b) {
                arg = Some((tok, lp));
            }
        }
        let (tok, lp) = arg.ok_or_else(|| Error::NonFinite("no finite next-token score".into()))?;
        score += lp;
        if tok == eos {
            return Ok(Hypothesis {
                tokens,
                score,
                truncated: false,
            });
        }
        tokens.push(tok);
    }
    Ok(Hypothesis {
        tokens,
        score,
        truncated: true,
    })
}
