//! Per-utterance context batches of exactly `B` phrases.
//!
//! Three training strategies and one evaluation strategy:
//!
//! * `Sma`: positives are n-grams of the current transcript.
//! * `Smb`: positives are transcript n-grams that contain a detected entity.
//! * `Smc`: positives come from the entity n-gram map, so they may originate
//!   in other utterances that share the entity.
//! * `Smd`: positives are the detected entity words themselves.
//!
//! All strategies fill the rest of the batch with negatives drawn from the
//! global n-gram pool, never using an n-gram of the current transcript.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::pools::{ngrams_containing, transcript_ngrams, EntityDetector, EntityNGramMap, NGramPool, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sma,
    Smb,
    Smc,
    Smd,
}

impl Method {
    pub const TRAINING: [Method; 3] = [Method::Sma, Method::Smb, Method::Smc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sma => "sma",
            Method::Smb => "smb",
            Method::Smc => "smc",
            Method::Smd => "smd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sma" => Ok(Method::Sma),
            "smb" => Ok(Method::Smb),
            "smc" => Ok(Method::Smc),
            "smd" => Ok(Method::Smd),
            other => Err(Error::invalid(format!("unknown sampling method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

/// Where a phrase was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Transcript,
    EntityNGrams,
    EntityWords,
    RandomNGrams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub method: Method,
    pub pool: PoolKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub label: Label,
    pub origin: Origin,
}

impl Phrase {
    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBatch {
    pub utterance_id: String,
    pub phrases: Vec<Phrase>,
    pub k_positive: usize,
    pub seed: u64,
    /// `order[i]` is the pre-shuffle index of the phrase now at position `i`.
    pub order: Vec<usize>,
}

impl ContextBatch {
    pub fn positives(&self) -> impl Iterator<Item = &Phrase> {
        self.phrases.iter().filter(|p| p.is_positive())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Phrase> {
        self.phrases.iter().filter(|p| !p.is_positive())
    }
}

/// How many positives SMa and SMc draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// Uniform in `[1, min(ceil(B/2), candidates)]`.
    UniformUpToHalf,
    /// Exactly this many, clamped to the candidates and to `B`.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub n_max: usize,
    pub k_rule: KRule,
    /// Probability that each positive stays in the batch.
    pub retention: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 10,
            n_max: 3,
            k_rule: KRule::UniformUpToHalf,
            retention: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size B must be at least 1"));
        }
        if self.n_max == 0 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.retention) {
            return Err(Error::invalid(format!("retention {} outside [0, 1]", self.retention)));
        }
        Ok(())
    }

    /// Seed for one utterance at one epoch.
    pub fn batch_seed(&self, utterance_id: &str, epoch: usize) -> u64 {
        derive_seed(self.seed, &format!("{utterance_id}#{epoch}"))
    }
}

pub struct Sampler<'a> {
    pool: &'a NGramPool,
    entity_map: &'a EntityNGramMap,
    detector: &'a dyn EntityDetector,
    cfg: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(
        pool: &'a NGramPool,
        entity_map: &'a EntityNGramMap,
        detector: &'a dyn EntityDetector,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Sampler {
            pool,
            entity_map,
            detector,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Draws a batch with `method` and applies positive retention.
    pub fn sample(&self, method: Method, utt: &Utterance, seed: u64) -> Result<ContextBatch> {
        let batch = match method {
            Method::Sma => self.sample_sma(utt, seed),
            Method::Smb => self.sample_smb(utt, seed),
            Method::Smc => self.sample_smc(utt, seed),
            Method::Smd => self.sample_smd(utt, seed),
        }?;
        if self.cfg.retention < 1.0 {
            self.apply_retention(batch, utt, self.cfg.retention, derive_seed(seed, "retention"))
        } else {
            Ok(batch)
        }
    }

    fn choose_k(&self, rng: &mut ChaCha8Rng, candidates: usize) -> usize {
        let b = self.cfg.batch_size;
        match self.cfg.k_rule {
            KRule::Fixed(k) => k.min(candidates).min(b),
            KRule::UniformUpToHalf => {
                let hi = b.div_ceil(2).min(candidates);
                if hi == 0 {
                    0
                } else {
                    rng.random_range(1..=hi)
                }
            }
        }
    }

    pub fn sample_sma(&self, utt: &Utterance, seed: u64) -> Result<ContextBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let own = transcript_ngrams(&utt.words, self.cfg.n_max);
        let k = self.choose_k(&mut rng, own.len());
        let picked = pick(&own, k, &mut rng);
        self.assemble(utt, Method::Sma, PoolKind::Transcript, picked, seed, &mut rng)
    }

    pub fn sample_smb(&self, utt: &Utterance, seed: u64) -> Result<ContextBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut cands = Vec::new();
        for e in self.detector.detect(&utt.words) {
            for g in ngrams_containing(&utt.words, &e, self.cfg.n_max) {
                if seen.insert(g.clone()) {
                    cands.push(g);
                }
            }
        }
        let k = cands.len().min(self.cfg.batch_size);
        let picked = pick(&cands, k, &mut rng);
        self.assemble(utt, Method::Smb, PoolKind::Transcript, picked, seed, &mut rng)
    }

    pub fn sample_smc(&self, utt: &Utterance, seed: u64) -> Result<ContextBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut cands = Vec::new();
        for e in self.detector.detect(&utt.words) {
            match self.entity_map.get(&e) {
                Some(list) => {
                    for g in list {
                        if seen.insert(g.clone()) {
                            cands.push(g.clone());
                        }
                    }
                }
                None => log::warn!("entity {e:?} of {} missing from the entity n-gram pool", utt.id),
            }
        }
        let k = self.choose_k(&mut rng, cands.len());
        let picked = pick(&cands, k, &mut rng);
        self.assemble(utt, Method::Smc, PoolKind::EntityNGrams, picked, seed, &mut rng)
    }

    pub fn sample_smd(&self, utt: &Utterance, seed: u64) -> Result<ContextBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entities = self.detector.detect(&utt.words);
        entities.truncate(self.cfg.batch_size);
        self.assemble(utt, Method::Smd, PoolKind::EntityWords, entities, seed, &mut rng)
    }

    fn assemble(
        &self,
        utt: &Utterance,
        method: Method,
        kind: PoolKind,
        positives: Vec<String>,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ContextBatch> {
        let k = positives.len();
        let mut used: HashSet<String> = positives.iter().cloned().collect();
        let exclude: HashSet<String> = transcript_ngrams(&utt.words, self.pool.n_max().max(self.cfg.n_max))
            .into_iter()
            .collect();
        let negatives = self.draw_negatives(self.cfg.batch_size - k, &exclude, &mut used, rng)?;
        let mut phrases: Vec<Phrase> = positives
            .into_iter()
            .map(|text| Phrase {
                text,
                label: Label::Positive,
                origin: Origin { method, pool: kind },
            })
            .chain(negatives.into_iter().map(|text| Phrase {
                text,
                label: Label::Negative,
                origin: Origin {
                    method,
                    pool: PoolKind::RandomNGrams,
                },
            }))
            .collect();
        let mut order: Vec<usize> = (0..phrases.len()).collect();
        order.shuffle(rng);
        let mut slots: Vec<Option<Phrase>> = phrases.drain(..).map(Some).collect();
        let phrases = order.iter().map(|&i| slots[i].take().expect("permutation")).collect();
        Ok(ContextBatch {
            utterance_id: utt.id.clone(),
            phrases,
            k_positive: k,
            seed,
            order,
        })
    }

    /// Uniform draws without replacement from the pool, skipping `exclude`
    /// and anything already in `used`.
    fn draw_negatives(
        &self,
        needed: usize,
        exclude: &HashSet<String>,
        used: &mut HashSet<String>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(needed);
        if needed == 0 {
            return Ok(out);
        }
        let n = self.pool.len();
        let eligible = |g: &str, used: &HashSet<String>| !exclude.contains(g) && !used.contains(g);
        if n > 0 {
            for _ in 0..needed * 64 {
                if out.len() == needed {
                    return Ok(out);
                }
                let g = self.pool.get(rng.random_range(0..n));
                if eligible(g, used) {
                    used.insert(g.to_string());
                    out.push(g.to_string());
                }
            }
        }
        // Rejection sampling stalled: enumerate what is left.
        let mut rest: Vec<&str> = (0..n).map(|i| self.pool.get(i)).filter(|g| eligible(g, used)).collect();
        let missing = needed - out.len();
        if rest.len() < missing {
            return Err(Error::PoolShortfall {
                needed,
                available: out.len() + rest.len(),
            });
        }
        rest.shuffle(rng);
        for g in rest.into_iter().take(missing) {
            used.insert(g.to_string());
            out.push(g.to_string());
        }
        Ok(out)
    }

    /// Keeps each positive with probability `p`; dropped positives are
    /// replaced in place by fresh negatives so the batch keeps `B` phrases.
    pub fn apply_retention(&self, mut batch: ContextBatch, utt: &Utterance, p: f64, seed: u64) -> Result<ContextBatch> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("retention {p} outside [0, 1]")));
        }
        if p >= 1.0 {
            return Ok(batch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dropped: Vec<usize> = batch
            .phrases
            .iter()
            .enumerate()
            .filter(|(_, ph)| ph.is_positive())
            .filter_map(|(i, _)| (rng.random::<f64>() >= p).then_some(i))
            .collect();
        if dropped.is_empty() {
            return Ok(batch);
        }
        let mut used: HashSet<String> = batch.phrases.iter().map(|p| p.text.clone()).collect();
        let exclude: HashSet<String> = transcript_ngrams(&utt.words, self.pool.n_max().max(self.cfg.n_max))
            .into_iter()
            .collect();
        let fresh = self.draw_negatives(dropped.len(), &exclude, &mut used, &mut rng)?;
        for (slot, text) in dropped.iter().zip(fresh) {
            let method = batch.phrases[*slot].origin.method;
            batch.phrases[*slot] = Phrase {
                text,
                label: Label::Negative,
                origin: Origin {
                    method,
                    pool: PoolKind::RandomNGrams,
                },
            };
        }
        batch.k_positive -= dropped.len();
        Ok(batch)
    }
}

fn pick(cands: &[String], k: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    rand::seq::index::sample(rng, cands.len(), k.min(cands.len()))
        .into_iter()
        .map(|i| cands[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pools::{Corpus, DetectorConfig, FrequencyDetector};

    struct Fixture {
        corpus: Corpus,
        pool: NGramPool,
        map: EntityNGramMap,
        det: FrequencyDetector,
    }

    fn fixture() -> Fixture {
        let mut lines: Vec<String> = (0..40)
            .map(|i| format!("w{} w{} w{} w{}", i % 13, (i * 7) % 17, (i * 3) % 11 + 20, i % 5 + 40))
            .collect();
        lines.push("a b c".into());
        lines.push("x ent y".into());
        lines.push("ent y z".into());
        lines.push("p q rare1 r rare2".into());
        let corpus = Corpus::new(
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| Utterance::new(format!("u{i}"), l))
                .collect(),
        )
        .unwrap();
        let mut counts = corpus.word_counts();
        // Only the named words are rare.
        for (w, c) in counts.iter_mut() {
            if !["ent", "rare1", "rare2"].contains(&w.as_str()) {
                *c = 100;
            }
        }
        let det = FrequencyDetector::new(
            counts,
            DetectorConfig {
                rare_threshold: Some(2),
                min_len: 1,
            },
        );
        let pool = NGramPool::build(&corpus, 3).unwrap();
        let map = EntityNGramMap::build(&corpus, &det, 3).unwrap();
        Fixture { corpus, pool, map, det }
    }

    fn utt(fx: &Fixture, text: &str) -> Utterance {
        fx.corpus
            .utterances
            .iter()
            .find(|u| u.transcript() == text)
            .cloned()
            .unwrap_or_else(|| Utterance::new("probe", text))
    }

    fn cfg(b: usize, k: KRule) -> SamplerConfig {
        SamplerConfig {
            batch_size: b,
            n_max: 3,
            k_rule: k,
            retention: 1.0,
            seed: 1,
        }
    }

    #[test]
    fn sma_membership() {
        let fx = fixture();
        let s = Sampler::new(&fx.pool, &fx.map, &fx.det, cfg(10, KRule::Fixed(3))).unwrap();
        let u = utt(&fx, "a b c");
        let own: HashSet<String> = ["a", "b", "c", "a b", "b c", "a b c"].map(String::from).into();
        let b = s.sample_sma(&u, 42).unwrap();
        assert_eq!(b.phrases.len(), 10);
        assert_eq!(b.k_positive, 3);
        assert!(b.positives().all(|p| own.contains(&p.text)));
        assert!(b.negatives().all(|p| !own.contains(&p.text) && fx.pool.contains(&p.text)));
    }

    #[test]
    fn degenerate_single_phrase_batch() {
        let fx = fixture();
        let s = Sampler::new(&fx.pool, &fx.map, &fx.det, cfg(1, KRule::Fixed(1))).unwrap();
        let b = s.sample_sma(&utt(&fx, "a b c"), 3).unwrap();
        assert_eq!(b.phrases.len(), 1);
        assert!(b.phrases[0].is_positive());
    }

    #[test]
    fn same_seed_same_batch() {
        let fx = fixture();
        let s = Sampler::new(&fx.pool, &fx.map, &fx.det, cfg(10, KRule::UniformUpToHalf)).unwrap();
        let u = utt(&fx, "x ent y");
        for m in [Method::Sma, Method::Smb, Method::Smc, Method::Smd] {
            assert_eq!(s.sample(m, &u, 9).unwrap(), s.sample(m, &u, 9).unwrap());
        }
    }

    #[test]
    fn smb_entity_neighbourhood() {
        let fx = fixture();
        let mut c = cfg(10, KRule::UniformUpToHalf);
        c.n_max = 2;
        let s = Sampler::new(&fx.pool, &fx.map, &fx.det, c).unwrap();
        let b = s.sample_smb(&utt(&fx, "x ent y"), 5).unwrap();
        let mut pos: Vec<&str> = b.positives().map(|p| p.text.as_str()).collect();
        pos.sort();
        assert_eq!(pos, ["ent", "ent y", "x ent"]);

        let b = s.sample_smb(&utt(&fx, "ent y z"), 5).unwrap();
        let mut pos: Vec<&str> = b.positives().map(|p| p.text.as_str()).collect();
        pos.sort();
        assert_eq!(pos, ["ent", "ent y"]);

        let b = s.sample_smb(&utt(&fx, "a b c"), 5).unwrap();
        assert_eq!(b.k_positive, 0);
        assert_eq!(b.negatives().count(), 10);
    }

    #[test]
    fn smc_draws_from_other_utterances() {
        let fx = fixture();
        let s = Sampler::new(&fx.pool, &fx.map, &fx.det, cfg(10, KRule::Fixed(100))).unwrap();
        let b = s.sample_smc(&utt(&fx, "x ent y"), 5).unwrap();
        let all: HashSet<&str> = fx.map.get("ent").unwrap().iter().map(String::as_str).collect();
        // Fixed(100) clamps to the candidate count.
        assert_eq!(b.k_positive, all.len());
        assert!(b.positives().any(|p| p.text == "ent y z"), "n-gram from the other utterance");
        assert!(b.positives().all(|p| p.text.split(' ').any(|w| w == "ent")));

        let none = s.sample_smc(&utt(&fx, "a b c"), 5).unwrap();
        assert_eq!(none.k_positive, 0);
    }

    #[test]
    fn smd_counts() {
        let fx = fixture();
        let s = Sampler::new(&fx.pool, &fx.map, &fx.det, cfg(10, KRule::UniformUpToHalf)).unwrap();
        let b = s.sample_smd(&utt(&fx, "p q rare1 r rare2"), 5).unwrap();
        assert_eq!(b.k_positive, 2);
        assert_eq!(b.negatives().count(), 8);
        let mut pos: Vec<&str> = b.positives().map(|p| p.text.as_str()).collect();
        pos.sort();
        assert_eq!(pos, ["rare1", "rare2"]);

        let z = s.sample_smd(&utt(&fx, "a b c"), 5).unwrap();
        assert_eq!(z.negatives().count(), 10);

        let s2 = Sampler::new(&fx.pool, &fx.map, &fx.det, cfg(2, KRule::UniformUpToHalf)).unwrap();
        let b = s2.sample_smd(&utt(&fx, "p q rare1 r rare2"), 5).unwrap();
        assert_eq!(b.negatives().count(), 0);
    }

    #[test]
    fn shortfall_is_reported() {
        let corpus = Corpus::new(vec![Utterance::new("a", "one two")]).unwrap();
        let pool = NGramPool::build(&corpus, 2).unwrap();
        let det = FrequencyDetector::from_corpus(&corpus, DetectorConfig::default());
        let map = EntityNGramMap::build(&corpus, &det, 2).unwrap();
        let s = Sampler::new(&pool, &map, &det, cfg(5, KRule::Fixed(1))).unwrap();
        let err = s.sample_sma(&corpus.utterances[0], 1).unwrap_err();
        assert!(matches!(err, Error::PoolShortfall { needed: 4, available: 0 }), "{err}");
    }

    #[test]
    fn retention_extremes() {
        let fx = fixture();
        let s = Sampler::new(&fx.pool, &fx.map, &fx.det, cfg(10, KRule::Fixed(4))).unwrap();
        let u = utt(&fx, "p q rare1 r rare2");
        let b = s.sample_sma(&u, 2).unwrap();
        assert_eq!(s.apply_retention(b.clone(), &u, 1.0, 3).unwrap(), b);
        let dropped = s.apply_retention(b.clone(), &u, 0.0, 3).unwrap();
        assert_eq!(dropped.k_positive, 0);
        assert_eq!(dropped.phrases.len(), 10);
        let own: HashSet<String> = transcript_ngrams(&u.words, 3).into_iter().collect();
        assert!(dropped.phrases.iter().all(|p| !own.contains(&p.text)));
        assert!(s.apply_retention(b, &u, 1.5, 3).is_err());
    }

    #[test]
    fn config_validation() {
        let fx = fixture();
        let mut c = cfg(0, KRule::UniformUpToHalf);
        assert!(Sampler::new(&fx.pool, &fx.map, &fx.det, c).is_err());
        c.batch_size = 3;
        c.retention = -0.1;
        assert!(Sampler::new(&fx.pool, &fx.map, &fx.det, c).is_err());
        assert_eq!("SMb".parse::<Method>().unwrap(), Method::Smb);
        assert!("sme".parse::<Method>().is_err());
    }
}
