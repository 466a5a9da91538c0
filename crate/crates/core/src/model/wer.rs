use crate::error::Error;

/// Levenshtein distance with unit substitution, insertion and deletion cost.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of one hypothesis against a non-empty reference.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64, Error> {
    if reference.is_empty() {
        return Err(Error::Data("WER is undefined for an empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerAccumulator {
    pub errors: usize,
    pub words: usize,
}

impl WerAccumulator {
    pub fn add<T: PartialEq>(&mut self, hyp: &[T], reference: &[T]) {
        self.errors += edit_distance(hyp, reference);
        self.words += reference.len();
    }

    pub fn wer(&self) -> Result<f64, Error> {
        if self.words == 0 {
            return Err(Error::Data("WER is undefined for an empty reference set".into()));
        }
        Ok(self.errors as f64 / self.words as f64)
    }
}
