//! Corpus handling and the two global phrase pools: every word n-gram of the
//! corpus, and the mapping from detected entity words to the n-grams that
//! contain them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const POOL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<String>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, transcript: &str) -> Self {
        Utterance {
            id: id.into(),
            words: transcript.split_whitespace().map(str::to_lowercase).collect(),
        }
    }

    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }
}

/// Utterances with unique ids and non-empty transcripts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashSet::new();
        for u in &utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id {}", u.id)));
            }
            if u.words.is_empty() {
                return Err(Error::invalid(format!("utterance {} has an empty transcript", u.id)));
            }
        }
        Ok(Corpus { utterances })
    }

    /// Parses `id<TAB>transcript` lines; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut utts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, transcript) = line.split_once('\t').ok_or_else(|| {
                Error::invalid(format!("line {}: expected id<TAB>transcript", n + 1))
            })?;
            utts.push(Utterance::new(id.trim(), transcript));
        }
        Self::new(utts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        self.utterances
            .iter()
            .map(|u| format!("{}\t{}\n", u.id, u.transcript()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical text form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn word_counts(&self) -> HashMap<String, usize> {
        let mut counts = HashMap::new();
        for u in &self.utterances {
            for w in &u.words {
                *counts.entry(w.clone()).or_default() += 1;
            }
        }
        counts
    }
}

/// Distinct contiguous n-grams (`1 <= n <= n_max`) of `words`, ordered by
/// n then position.
pub fn transcript_ngrams(words: &[String], n_max: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for n in 1..=n_max.min(words.len()) {
        for w in words.windows(n) {
            let g = w.join(" ");
            if seen.insert(g.clone()) {
                out.push(g);
            }
        }
    }
    out
}

/// Distinct n-grams of `words` (n ≤ n_max) whose span covers an occurrence
/// of `entity` as a whole word.
pub fn ngrams_containing(words: &[String], entity: &str, n_max: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for n in 1..=n_max.min(words.len()) {
        for w in words.windows(n) {
            if w.iter().any(|x| x == entity) {
                let g = w.join(" ");
                if seen.insert(g.clone()) {
                    out.push(g);
                }
            }
        }
    }
    out
}

/// Every word n-gram of a corpus, deduplicated with occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramPool {
    n_max: usize,
    ngrams: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl NGramPool {
    pub fn build(corpus: &Corpus, n_max: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a pool from an empty corpus"));
        }
        if n_max == 0 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        let mut pool = NGramPool {
            n_max,
            ngrams: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for u in &corpus.utterances {
            for n in 1..=n_max.min(u.words.len()) {
                for w in u.words.windows(n) {
                    pool.add(w.join(" "), 1);
                }
            }
        }
        Ok(pool)
    }

    fn add(&mut self, g: String, count: usize) {
        match self.index.get(&g) {
            Some(&i) => self.counts[i] += count,
            None => {
                self.index.insert(g.clone(), self.ngrams.len());
                self.ngrams.push(g);
                self.counts.push(count);
            }
        }
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn len(&self) -> usize {
        self.ngrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ngrams.is_empty()
    }

    pub fn get(&self, i: usize) -> &str {
        &self.ngrams[i]
    }

    pub fn contains(&self, g: &str) -> bool {
        self.index.contains_key(g)
    }

    pub fn count(&self, g: &str) -> usize {
        self.index.get(g).map_or(0, |&i| self.counts[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.ngrams.iter().map(String::as_str).zip(self.counts.iter().copied())
    }
}

/// Pluggable named-entity / rare-word detector.
pub trait EntityDetector: Send + Sync {
    /// Entity words of a transcript, in transcript order, each listed once.
    /// Every returned word must occur in `words`.
    fn detect(&self, words: &[String]) -> Vec<String>;

    /// Stable description of the implementation and its parameters.
    fn config_id(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Words with corpus frequency at most this are rare; `None` means every word qualifies.
    pub rare_threshold: Option<usize>,
    pub min_len: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            rare_threshold: Some(2),
            min_len: 4,
        }
    }
}

/// Flags words whose corpus frequency is at or below a threshold.
#[derive(Debug, Clone)]
pub struct FrequencyDetector {
    counts: HashMap<String, usize>,
    config: DetectorConfig,
}

impl FrequencyDetector {
    pub fn new(counts: HashMap<String, usize>, config: DetectorConfig) -> Self {
        FrequencyDetector { counts, config }
    }

    pub fn from_corpus(corpus: &Corpus, config: DetectorConfig) -> Self {
        Self::new(corpus.word_counts(), config)
    }

    pub fn config(&self) -> DetectorConfig {
        self.config
    }
}

impl EntityDetector for FrequencyDetector {
    fn detect(&self, words: &[String]) -> Vec<String> {
        let mut seen = HashSet::new();
        words
            .iter()
            .filter(|w| w.chars().count() >= self.config.min_len)
            .filter(|w| match self.config.rare_threshold {
                Some(t) => self.counts.get(*w).copied().unwrap_or(0) <= t,
                None => true,
            })
            .filter(|w| seen.insert(w.as_str()))
            .cloned()
            .collect()
    }

    fn config_id(&self) -> String {
        let t = self
            .config
            .rare_threshold
            .map_or("inf".to_string(), |t| t.to_string());
        format!("frequency(rare_threshold={t},min_len={})", self.config.min_len)
    }
}

pub fn detector_hash(detector: &dyn EntityDetector) -> String {
    hex::encode(Sha256::digest(detector.config_id().as_bytes()))
}

/// Entity word → distinct n-grams containing it, gathered from every
/// utterance in which the entity occurs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityNGramMap {
    pub n_max: usize,
    pub map: BTreeMap<String, Vec<String>>,
}

impl EntityNGramMap {
    pub fn build(corpus: &Corpus, detector: &dyn EntityDetector, n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        let mut entities = HashSet::new();
        for u in &corpus.utterances {
            entities.extend(detector.detect(&u.words));
        }
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut seen: HashMap<String, HashSet<String>> = HashMap::new();
        for u in &corpus.utterances {
            let mut here = HashSet::new();
            for w in &u.words {
                if !entities.contains(w) || !here.insert(w.clone()) {
                    continue;
                }
                let entry = map.entry(w.clone()).or_default();
                let s = seen.entry(w.clone()).or_default();
                for g in ngrams_containing(&u.words, w, n_max) {
                    if s.insert(g.clone()) {
                        entry.push(g);
                    }
                }
            }
        }
        Ok(EntityNGramMap { n_max, map })
    }

    pub fn get(&self, entity: &str) -> Option<&[String]> {
        self.map.get(entity).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Both pools plus the provenance needed to detect stale files.
#[derive(Debug, Clone)]
pub struct Pools {
    pub ngrams: NGramPool,
    pub entities: EntityNGramMap,
    pub detector: DetectorConfig,
    pub corpus_hash: String,
}

#[derive(Serialize, Deserialize)]
struct NGramPoolFile {
    schema_version: u32,
    n_max: usize,
    detector: DetectorConfig,
    detector_hash: String,
    corpus_hash: String,
    ngrams: Vec<(String, usize)>,
}

#[derive(Serialize, Deserialize)]
struct EntityMapFile {
    schema_version: u32,
    n_max: usize,
    detector: DetectorConfig,
    detector_hash: String,
    corpus_hash: String,
    entities: BTreeMap<String, Vec<String>>,
}

pub const NGRAM_POOL_FILE: &str = "ngram_pool.json";
pub const ENTITY_MAP_FILE: &str = "entity_ngram_pool.json";

impl Pools {
    pub fn build(corpus: &Corpus, detector: DetectorConfig, n_max: usize) -> Result<Self> {
        let det = FrequencyDetector::from_corpus(corpus, detector);
        Ok(Pools {
            ngrams: NGramPool::build(corpus, n_max)?,
            entities: EntityNGramMap::build(corpus, &det, n_max)?,
            detector,
            corpus_hash: corpus.content_hash(),
        })
    }

    fn detector_hash(&self) -> String {
        let det = FrequencyDetector::new(HashMap::new(), self.detector);
        detector_hash(&det)
    }

    /// Writes both pool files into `dir`; returns their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pool = NGramPoolFile {
            schema_version: POOL_SCHEMA_VERSION,
            n_max: self.ngrams.n_max,
            detector: self.detector,
            detector_hash: self.detector_hash(),
            corpus_hash: self.corpus_hash.clone(),
            ngrams: self.ngrams.iter().map(|(g, c)| (g.to_string(), c)).collect(),
        };
        let ent = EntityMapFile {
            schema_version: POOL_SCHEMA_VERSION,
            n_max: self.entities.n_max,
            detector: self.detector,
            detector_hash: self.detector_hash(),
            corpus_hash: self.corpus_hash.clone(),
            entities: self.entities.map.clone(),
        };
        let p1 = dir.join(NGRAM_POOL_FILE);
        let p2 = dir.join(ENTITY_MAP_FILE);
        std::fs::write(&p1, serde_json::to_vec_pretty(&pool)?).map_err(|e| Error::io(&p1, e))?;
        std::fs::write(&p2, serde_json::to_vec_pretty(&ent)?).map_err(|e| Error::io(&p2, e))?;
        Ok(vec![p1, p2])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p1 = dir.join(NGRAM_POOL_FILE);
        let p2 = dir.join(ENTITY_MAP_FILE);
        let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
        let pool: NGramPoolFile = serde_json::from_slice(&read(&p1)?)?;
        let ent: EntityMapFile = serde_json::from_slice(&read(&p2)?)?;
        for (path, v) in [(&p1, pool.schema_version), (&p2, ent.schema_version)] {
            if v != POOL_SCHEMA_VERSION {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("schema version {v}, expected {POOL_SCHEMA_VERSION}"),
                });
            }
        }
        if pool.corpus_hash != ent.corpus_hash || pool.detector_hash != ent.detector_hash {
            return Err(Error::Format {
                path: p2,
                reason: "pool files were built from different inputs".into(),
            });
        }
        let mut ngrams = NGramPool {
            n_max: pool.n_max,
            ngrams: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for (g, c) in pool.ngrams {
            ngrams.add(g, c);
        }
        Ok(Pools {
            ngrams,
            entities: EntityNGramMap {
                n_max: ent.n_max,
                map: ent.entities,
            },
            detector: pool.detector,
            corpus_hash: pool.corpus_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Corpus {
        Corpus::new(
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| Utterance::new(format!("u{i}"), l))
                .collect(),
        )
        .unwrap()
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn three_word_pool() {
        let p = NGramPool::build(&corpus(&["a b c"]), 3).unwrap();
        let got: Vec<&str> = p.iter().map(|(g, _)| g).collect();
        assert_eq!(got, ["a", "b", "c", "a b", "b c", "a b c"]);
    }

    #[test]
    fn five_words_give_twelve_ngrams() {
        assert_eq!(NGramPool::build(&corpus(&["a b c d e"]), 3).unwrap().len(), 12);
    }

    #[test]
    fn shared_ngrams_are_counted_once() {
        let p = NGramPool::build(&corpus(&["a b x", "y a b"]), 2).unwrap();
        assert_eq!(p.count("a b"), 2);
        assert_eq!(p.iter().filter(|(g, _)| *g == "a b").count(), 1);
    }

    #[test]
    fn pool_errors() {
        assert!(NGramPool::build(&Corpus::default(), 3).is_err());
        assert!(NGramPool::build(&corpus(&["a"]), 0).is_err());
    }

    #[test]
    fn corpus_validation() {
        assert!(Corpus::parse("a\tx\na\ty").is_err());
        assert!(Corpus::parse("a\t   ").is_err());
        assert!(Corpus::parse("no tab here").is_err());
        let c = Corpus::parse("u1\tHello World\n\nu2\tbye\n").unwrap();
        assert_eq!(c.utterances[0].words, ["hello", "world"]);
    }

    #[test]
    fn detects_rare_entity() {
        let c = corpus(&[
            "tumult cries down with the bolsheviki",
            "down with the tide",
            "down with the ship",
            "tumult and cries",
        ]);
        let det = FrequencyDetector::from_corpus(
            &c,
            DetectorConfig {
                rare_threshold: Some(2),
                min_len: 5,
            },
        );
        // "cries"/"tumult" occur twice, so they are rare too under threshold 2;
        // with min_len 9 only the long word remains.
        let det_long = FrequencyDetector::new(
            c.word_counts(),
            DetectorConfig {
                rare_threshold: Some(2),
                min_len: 9,
            },
        );
        assert_eq!(det_long.detect(&words("down with the bolsheviki")), ["bolsheviki"]);
        assert_eq!(det.detect(&words("down with the")), Vec::<String>::new());
        let all = FrequencyDetector::new(
            c.word_counts(),
            DetectorConfig {
                rare_threshold: None,
                min_len: 4,
            },
        );
        assert_eq!(all.detect(&words("down with the bolsheviki")), ["down", "with", "bolsheviki"]);
    }

    #[test]
    fn entity_map_enumeration() {
        let c = corpus(&["x e y", "p q r", "p q r s", "x y p q"]);
        let det = FrequencyDetector::from_corpus(
            &c,
            DetectorConfig {
                rare_threshold: Some(1),
                min_len: 1,
            },
        );
        // Rare (count 1): e, s.
        let m = EntityNGramMap::build(&c, &det, 2).unwrap();
        assert_eq!(m.get("e").unwrap(), ["e", "x e", "e y"]);
        assert_eq!(m.get("s").unwrap(), ["s", "r s"]);
    }

    #[test]
    fn entity_map_unions_utterances() {
        let c = corpus(&["a e b", "c e d", "a b c d", "a b c d"]);
        let det = FrequencyDetector::new(
            [("e".to_string(), 1)].into_iter().collect(),
            DetectorConfig {
                rare_threshold: Some(1),
                min_len: 1,
            },
        );
        let m = EntityNGramMap::build(&c, &det, 2).unwrap();
        assert_eq!(m.get("e").unwrap(), ["e", "a e", "e b", "c e", "e d"]);
    }

    #[test]
    fn no_entities_means_empty_map() {
        let c = corpus(&["a b", "a b"]);
        let det = FrequencyDetector::from_corpus(&c, DetectorConfig::default());
        assert!(EntityNGramMap::build(&c, &det, 3).unwrap().is_empty());
    }

    #[test]
    fn pool_files_round_trip() {
        let c = corpus(&["alpha beta gamma", "beta gamma delta", "epsilon"]);
        let pools = Pools::build(&c, DetectorConfig { rare_threshold: Some(1), min_len: 1 }, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pools.save(dir.path()).unwrap();
        let back = Pools::load(dir.path()).unwrap();
        assert_eq!(back.ngrams, pools.ngrams);
        assert_eq!(back.entities, pools.entities);
        assert_eq!(back.corpus_hash, c.content_hash());
    }
}
