//! Subword tokenization: BPE-style vocabulary construction with greedy
//! longest-match-first segmentation.
//!
//! Pieces are stored without position markers; a [`TokenSeq`] records which
//! tokens start a word, and [`TokenSeq::marked`] renders continuation pieces
//! with the usual `##` prefix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD: &str = "[PAD]";
const UNK: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    alphabet: BTreeSet<char>,
    max_piece_chars: usize,
}

/// Token ids of one text, with word-start flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub word_start: Vec<bool>,
    pub text: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keeps at most `max_tokens` leading tokens.
    pub fn truncated(mut self, max_tokens: usize) -> Self {
        self.ids.truncate(max_tokens);
        self.word_start.truncate(max_tokens);
        self
    }

    /// Piece strings with `##` on continuation pieces.
    pub fn marked(&self, vocab: &SubwordVocab) -> Vec<String> {
        self.ids
            .iter()
            .zip(&self.word_start)
            .map(|(&id, &start)| {
                let p = vocab.piece(id);
                if start {
                    p.to_string()
                } else {
                    format!("##{p}")
                }
            })
            .collect()
    }
}

fn normalize(text: &str) -> String {
    text.to_lowercase()
}

impl SubwordVocab {
    /// Builds a vocabulary of `target_size` pieces (special tokens excluded):
    /// every character of the corpus, then the most frequent adjacent pair
    /// merges in order. Ties go to the lexicographically smallest pair.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in normalize(line.as_ref()).split_whitespace() {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        if target_size < alphabet.len() {
            return Err(Error::invalid(format!(
                "target size {target_size} below alphabet size {}",
                alphabet.len()
            )));
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), c))
            .collect();
        let mut pieces: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let mut known: BTreeSet<String> = pieces.iter().cloned().collect();
        let mut merges = Vec::new();

        while pieces.len() < target_size {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += c;
                }
            }
            // BTreeMap iterates in pair order, so the first maximum wins ties.
            let Some(((a, b), _)) = counts
                .iter()
                .fold(None::<(&(&str, &str), usize)>, |best, (k, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((k, v)),
                })
                .map(|(k, v)| (*k, v))
            else {
                break;
            };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (syms, _) in &mut words {
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut syms[i]));
                        i += 1;
                    }
                }
                *syms = out;
            }
            if known.insert(merged.clone()) {
                pieces.push(merged);
            }
            merges.push((a, b));
        }
        Self::from_parts(pieces, merges)
    }

    fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut all = vec![PAD.to_string(), UNK.to_string()];
        all.extend(pieces);
        let mut index = HashMap::new();
        for (i, p) in all.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate piece {p:?}")));
            }
        }
        let alphabet: BTreeSet<char> = all[2..]
            .iter()
            .filter(|p| p.chars().count() == 1)
            .flat_map(|p| p.chars())
            .collect();
        let max_piece_chars = all[2..].iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(SubwordVocab {
            pieces: all,
            index,
            merges,
            alphabet,
            max_piece_chars,
        })
    }

    /// Number of ids, specials included.
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.len() <= 2
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    /// Greedy longest-match-first segmentation of each whitespace-separated word.
    /// Characters outside the alphabet become `[UNK]`.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let norm = normalize(text);
        let mut ids = Vec::new();
        let mut word_start = Vec::new();
        for word in norm.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut pos = 0;
            let mut first = true;
            while pos < chars.len() {
                let longest = (1..=self.max_piece_chars.min(chars.len() - pos))
                    .rev()
                    .find_map(|n| {
                        let cand: String = chars[pos..pos + n].iter().collect();
                        self.index.get(&cand).map(|&id| (id, n))
                    });
                let (id, n) = longest.unwrap_or((UNK_ID, 1));
                ids.push(id);
                word_start.push(first);
                first = false;
                pos += n;
            }
        }
        TokenSeq {
            ids,
            word_start,
            text: norm,
        }
    }

    /// Rebuilds text from ids and word-start flags.
    pub fn detokenize(&self, ids: &[u32], word_start: &[bool]) -> String {
        let mut out = String::new();
        for (i, (&id, &start)) in ids.iter().zip(word_start).enumerate() {
            if start && i > 0 {
                out.push(' ');
            }
            out.push_str(if id == UNK_ID { "?" } else { self.piece(id) });
        }
        out
    }

    /// Writes `vocab.txt` (one piece per line, specials first) and
    /// `merges.txt` (one `left right` pair per line) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocab.txt");
        let mut body = self.pieces.join("\n");
        body.push('\n');
        std::fs::write(&vocab_path, body).map_err(|e| Error::io(&vocab_path, e))?;
        let merges_path = dir.join("merges.txt");
        let body: String = self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
        std::fs::write(&merges_path, body).map_err(|e| Error::io(&merges_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.txt");
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        if lines.len() < 2 || lines[0] != PAD || lines[1] != UNK {
            return Err(Error::Format {
                path: vocab_path,
                reason: "vocabulary must start with [PAD], [UNK]".into(),
            });
        }
        let merges_path = dir.join("merges.txt");
        let merges = match std::fs::read_to_string(&merges_path) {
            Ok(t) => t
                .lines()
                .filter_map(|l| l.split_once(' '))
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&merges_path, e)),
        };
        Self::from_parts(lines[2..].to_vec(), merges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_merge_adds_most_frequent_pair() {
        // "aa" occurs twice in each word (overlapping), 4 times in total.
        let v = SubwordVocab::build(&["aaab", "aaac"], 4).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert!(v.id("aa").is_some());
        let t = v.tokenize("aaab");
        let pieces: Vec<&str> = t.ids.iter().map(|&i| v.piece(i)).collect();
        assert_eq!(pieces, ["aa", "a", "b"]);
        assert_eq!(t.marked(&v), ["aa", "##a", "##b"]);
    }

    #[test]
    fn no_merges_when_target_is_alphabet() {
        let v = SubwordVocab::build(&["x"], 1).unwrap();
        assert_eq!(v.pieces(), &["[PAD]", "[UNK]", "x"]);
        assert_eq!(v.id("[PAD]"), Some(PAD_ID));
    }

    #[test]
    fn target_below_alphabet_is_an_error() {
        assert!(SubwordVocab::build(&["abc"], 2).is_err());
        assert!(SubwordVocab::build::<&str>(&[], 5).is_err());
    }

    #[test]
    fn empty_text_and_word_boundaries() {
        let v = SubwordVocab::build(&["x y"], 2).unwrap();
        assert!(v.tokenize("").is_empty());
        let t = v.tokenize("x y");
        assert_eq!(t.word_start, [true, true]);
        assert_eq!(v.detokenize(&t.ids, &t.word_start), "x y");
    }

    #[test]
    fn out_of_alphabet_maps_to_unk() {
        let v = SubwordVocab::build(&["ab"], 2).unwrap();
        assert_eq!(v.tokenize("azb").ids, [v.id("a").unwrap(), UNK_ID, v.id("b").unwrap()]);
    }

    #[test]
    fn merge_producing_known_piece_does_not_grow_vocab() {
        let v = SubwordVocab::build(&["abc abc abc", "ab"], 6).unwrap();
        let unique: BTreeSet<&String> = v.pieces().iter().collect();
        assert_eq!(unique.len(), v.len());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = SubwordVocab::build(&["hello world", "help the world"], 14).unwrap();
        v.save(dir.path()).unwrap();
        assert_eq!(SubwordVocab::load(dir.path()).unwrap(), v);
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-f]{1,7}( [a-f]{1,7}){0,4}", 1..8)
    }

    proptest! {
        #[test]
        fn transcripts_round_trip(corpus in corpus_strategy(), extra in 0usize..30) {
            let alphabet: BTreeSet<char> = corpus.iter().flat_map(|l| l.chars()).filter(|c| !c.is_whitespace()).collect();
            let v = SubwordVocab::build(&corpus, alphabet.len() + extra).unwrap();
            for line in &corpus {
                let t = v.tokenize(line);
                prop_assert_eq!(v.detokenize(&t.ids, &t.word_start), line.clone());
                prop_assert!(t.len() <= line.chars().filter(|c| !c.is_whitespace()).count());
            }
        }

        #[test]
        fn tokenization_is_per_word(corpus in corpus_strategy(), extra in 0usize..30) {
            let alphabet: BTreeSet<char> = corpus.iter().flat_map(|l| l.chars()).filter(|c| !c.is_whitespace()).collect();
            let v = SubwordVocab::build(&corpus, alphabet.len() + extra).unwrap();
            let joined = corpus.join(" ");
            let whole = v.tokenize(&joined);
            let mut ids = Vec::new();
            for w in joined.split_whitespace() {
                ids.extend(v.tokenize(w).ids);
            }
            prop_assert_eq!(whole.ids, ids);
        }
    }
}
