//! Word error rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, two-row dynamic programme.
pub fn edit_distance<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn wer<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER is undefined for an empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level WER: total edits over total reference words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounter {
    pub errors: usize,
    pub words: usize,
}

impl WerCounter {
    pub fn add<S: PartialEq>(&mut self, reference: &[S], hypothesis: &[S]) {
        self.errors += edit_distance(reference, hypothesis);
        self.words += reference.len();
    }

    pub fn merge(&mut self, other: WerCounter) {
        self.errors += other.errors;
        self.words += other.words;
    }

    pub fn wer(&self) -> Result<f64> {
        if self.words == 0 {
            return Err(Error::invalid("no reference words"));
        }
        Ok(self.errors as f64 / self.words as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn basic_cases() {
        assert_eq!(wer(&w("a b c"), &w("a b c")).unwrap(), 0.0);
        assert!((wer(&w("a b c"), &w("a x c")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&w("a"), &w("a b")).unwrap(), 1.0);
        assert_eq!(wer(&w("a b"), &w("c d")).unwrap(), 1.0);
        assert_eq!(wer(&w("a b"), &w("")).unwrap(), 1.0);
        assert!(wer(&w(""), &w("a")).is_err());
    }

    #[test]
    fn corpus_level_counter() {
        let mut c = WerCounter::default();
        c.add(&w("a b c d"), &w("a b c d"));
        c.add(&w("a b"), &w("a"));
        assert_eq!(c, WerCounter { errors: 1, words: 6 });
        assert!(WerCounter::default().wer().is_err());
    }
}
