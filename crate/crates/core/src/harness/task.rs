//! Synthetic recognition task with confusable rare words.
//!
//! Every subword piece has an acoustic template. A word is rendered as its
//! pieces (a few frames each, blank frames in between) and words are
//! separated by silence frames. Rare words are rendered as a blend of their
//! own templates and those of a paired common word, weighted towards the
//! common word, so an unbiased recognizer hears the common word.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Tensor};
use crate::pools::{Corpus, Utterance};
use crate::tokenizer::SubwordVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seed: u64,
    pub alphabet: String,
    pub common_words: usize,
    /// Rare words available to the training split.
    pub rare_words: usize,
    pub train_utterances: usize,
    /// Share of training utterances that carry one rare word.
    pub rare_fraction: f64,
    pub dev_utterances: usize,
    pub test_clean: usize,
    pub test_rare: usize,
    pub test_ood: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Rare words occur in at most this many training utterances.
    pub rare_threshold: usize,
    /// Held-out rare words for dev and test instead of training ones.
    pub zero_shot: bool,
    pub merges: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    /// Weight of a rare word's own templates in its rendering.
    pub blend: f64,
    pub noise: f64,
    pub ood_noise: f64,
    pub ood_shift: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 7,
            alphabet: "abdefghiklmnoprstu".into(),
            common_words: 40,
            rare_words: 160,
            train_utterances: 320,
            rare_fraction: 0.75,
            dev_utterances: 64,
            test_clean: 40,
            test_rare: 48,
            test_ood: 40,
            min_words: 3,
            max_words: 6,
            rare_threshold: 2,
            zero_shot: false,
            merges: 48,
            feature_dim: 16,
            frames_per_token: 2,
            blend: 0.45,
            noise: 0.1,
            ood_noise: 0.25,
            ood_shift: 0.2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let chars: BTreeSet<char> = self.alphabet.chars().collect();
        if chars.len() < 4 || chars.len() != self.alphabet.chars().count() {
            return Err(Error::invalid("alphabet needs at least 4 distinct letters"));
        }
        if chars.iter().any(|c| !c.is_ascii_lowercase()) {
            return Err(Error::invalid("alphabet must be lowercase ascii letters"));
        }
        let sizes = [
            self.common_words,
            self.rare_words,
            self.train_utterances,
            self.dev_utterances,
            self.feature_dim,
            self.frames_per_token,
            self.min_words,
            self.rare_threshold,
        ];
        if sizes.contains(&0) || self.max_words < self.min_words {
            return Err(Error::invalid("task sizes must be positive"));
        }
        if self.test_clean + self.test_rare + self.test_ood == 0 {
            return Err(Error::invalid("test split is empty"));
        }
        if !(0.0..=1.0).contains(&self.rare_fraction) || !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::invalid("rare_fraction and blend must be in [0, 1]"));
        }
        if !self.zero_shot && self.rare_words < self.test_rare.max(1) {
            return Err(Error::invalid("not enough rare words for the rare test subset"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Clean,
    Rare,
    Ood,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Clean, Subset::Rare, Subset::Ood];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Clean => "clean",
            Subset::Rare => "rare",
            Subset::Ood => "ood",
        }
    }
}

/// One utterance with its rendered features and frame labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub utterance: Utterance,
    pub subset: Subset,
    pub features: Tensor,
    pub targets: Vec<usize>,
    /// Frame range of each word.
    pub word_spans: Vec<(usize, usize)>,
    /// Index of the rare word in `utterance.words`, if any.
    pub rare_word: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

pub struct SyntheticTask {
    pub cfg: TaskConfig,
    pub vocab: SubwordVocab,
    pub common: Vec<String>,
    pub rare: Vec<String>,
    /// Rare word → common word it is confused with.
    pub confusers: BTreeMap<String, String>,
    /// One template per class (`vocab.len()` pieces, then blank, then silence).
    pub templates: Tensor,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn random_word(rng: &mut ChaCha8Rng, letters: &[char], len: usize) -> String {
    (0..len).map(|_| *letters.choose(rng).expect("alphabet")).collect()
}

fn unique_words(
    rng: &mut ChaCha8Rng,
    letters: &[char],
    count: usize,
    lens: std::ops::RangeInclusive<usize>,
    taken: &mut BTreeSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(lens.clone());
        let w = random_word(rng, letters, len);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SyntheticTask {
    pub fn blank_class(&self) -> usize {
        self.vocab.len()
    }

    pub fn sil_class(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn classes(&self) -> usize {
        self.vocab.len() + 2
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn train_corpus(&self) -> Result<Corpus> {
        Corpus::new(self.train.iter().map(|s| s.utterance.clone()).collect())
    }

    /// SHA-256 over every transcript and feature value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.dev).chain(&self.test) {
            h.update(s.utterance.id.as_bytes());
            h.update(s.utterance.transcript().as_bytes());
            for v in s.features.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn generate(cfg: &TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let letters: Vec<char> = cfg.alphabet.chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "words"));
        let mut taken = BTreeSet::new();
        let common = unique_words(&mut rng, &letters, cfg.common_words, 2..=4, &mut taken);
        let held_out = if cfg.zero_shot { cfg.test_rare + cfg.dev_utterances } else { 0 };
        let rare = unique_words(&mut rng, &letters, cfg.rare_words + held_out, 4..=6, &mut taken);
        let confusers: BTreeMap<String, String> = rare
            .iter()
            .map(|r| (r.clone(), common.choose(&mut rng).expect("common").clone()))
            .collect();
        let (train_rare, eval_rare) = if cfg.zero_shot {
            (rare[..cfg.rare_words].to_vec(), rare[cfg.rare_words..].to_vec())
        } else {
            (rare.clone(), rare.clone())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "utterances"));
        let sentence = |rng: &mut ChaCha8Rng, rare_word: Option<&str>| -> (Vec<String>, Option<usize>) {
            let n = rng.random_range(cfg.min_words..=cfg.max_words);
            let mut words: Vec<String> = (0..n).map(|_| common.choose(rng).expect("common").clone()).collect();
            let pos = rare_word.map(|r| {
                let p = rng.random_range(0..n);
                words[p] = r.to_string();
                p
            });
            (words, pos)
        };

        let mut train_words = Vec::with_capacity(cfg.train_utterances);
        let n_rare_utts = (cfg.train_utterances as f64 * cfg.rare_fraction).round() as usize;
        let mut rare_slots = Vec::new();
        for r in &train_rare {
            let uses = rng.random_range(1..=cfg.rare_threshold);
            rare_slots.extend(std::iter::repeat(r.clone()).take(uses));
        }
        rare_slots.shuffle(&mut rng);
        rare_slots.truncate(n_rare_utts);
        for i in 0..cfg.train_utterances {
            train_words.push(sentence(&mut rng, rare_slots.get(i).map(|s| s.as_str())));
        }
        train_words.shuffle(&mut rng);
        // every common word must be frequent enough not to look rare
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (ws, _) in &train_words {
            for w in ws {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let missing: Vec<String> = common
            .iter()
            .filter(|c| counts.get(c.as_str()).copied().unwrap_or(0) <= cfg.rare_threshold)
            .cloned()
            .collect();
        for c in missing {
            train_words.push((vec![c; cfg.rare_threshold + 1], None));
        }

        let eval_pick = |rng: &mut ChaCha8Rng| eval_rare.choose(rng).expect("rare").clone();
        let mut dev_words = Vec::new();
        for i in 0..cfg.dev_utterances {
            let r = (i % 2 == 0).then(|| eval_pick(&mut rng));
            dev_words.push(sentence(&mut rng, r.as_deref()));
        }
        let mut test_words = Vec::new();
        for _ in 0..cfg.test_clean {
            test_words.push((sentence(&mut rng, None), Subset::Clean));
        }
        let mut order = eval_rare.clone();
        order.shuffle(&mut rng);
        for i in 0..cfg.test_rare {
            let r = order[i % order.len()].clone();
            test_words.push((sentence(&mut rng, Some(&r)), Subset::Rare));
        }
        for i in 0..cfg.test_ood {
            let r = (i % 2 == 0).then(|| eval_pick(&mut rng));
            test_words.push((sentence(&mut rng, r.as_deref()), Subset::Ood));
        }

        let mut vocab_text: Vec<String> = train_words.iter().map(|(w, _)| w.join(" ")).collect();
        vocab_text.push(letters.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
        let vocab = SubwordVocab::build(&vocab_text, letters.len() + cfg.merges)?;

        let classes = vocab.len() + 2;
        let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "templates"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let templates = Tensor::matrix(
            classes,
            cfg.feature_dim,
            (0..classes * cfg.feature_dim).map(|_| normal.sample(&mut trng)).collect(),
        )?;
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "ood-shift"));
        let shift: Vec<f64> = (0..cfg.feature_dim)
            .map(|_| if srng.random::<bool>() { cfg.ood_shift } else { -cfg.ood_shift })
            .collect();

        let mut task = SyntheticTask {
            cfg: cfg.clone(),
            vocab,
            common,
            rare,
            confusers,
            templates,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        let render = |task: &SyntheticTask, id: String, words: Vec<String>, pos, subset| {
            task.render(Utterance { id, words }, pos, subset, &shift)
        };
        task.train = train_words
            .into_iter()
            .enumerate()
            .map(|(i, (w, p))| render(&task, format!("train-{i:04}"), w, p, Subset::Clean))
            .collect::<Result<_>>()?;
        task.dev = dev_words
            .into_iter()
            .enumerate()
            .map(|(i, (w, p))| {
                let subset = if p.is_some() { Subset::Rare } else { Subset::Clean };
                render(&task, format!("dev-{i:04}"), w, p, subset)
            })
            .collect::<Result<_>>()?;
        task.test = test_words
            .into_iter()
            .enumerate()
            .map(|(i, ((w, p), s))| render(&task, format!("test-{}-{i:04}", s.as_str()), w, p, s))
            .collect::<Result<_>>()?;
        Ok(task)
    }

    /// Piece ids of a word paired with the class used for its confusion.
    fn word_classes(&self, word: &str, rare: bool) -> Vec<(usize, Option<usize>)> {
        let own = self.vocab.tokenize(word).ids;
        let partner = if rare {
            self.confusers.get(word).map(|c| self.vocab.tokenize(c).ids)
        } else {
            None
        };
        own.iter()
            .enumerate()
            .map(|(i, &id)| (id as usize, partner.as_ref().map(|p| p[i % p.len()] as usize)))
            .collect()
    }

    fn render(&self, utterance: Utterance, rare_word: Option<usize>, subset: Subset, shift: &[f64]) -> Result<Sample> {
        let cfg = &self.cfg;
        let f = cfg.feature_dim;
        let (sigma, offset) = if subset == Subset::Ood {
            (cfg.ood_noise, Some(shift))
        } else {
            (cfg.noise, None)
        };
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("render/{}", utterance.id)));
        let mut frames: Vec<f64> = Vec::new();
        let mut targets = Vec::new();
        let mut emit = |class: usize, mix: Option<usize>, frames: &mut Vec<f64>, targets: &mut Vec<usize>| {
            for c in 0..f {
                let mut v = match mix {
                    Some(m) => cfg.blend * self.templates.get(class, c) + (1.0 - cfg.blend) * self.templates.get(m, c),
                    None => self.templates.get(class, c),
                };
                v += noise.sample(&mut rng) + offset.map_or(0.0, |s| s[c]);
                frames.push(v);
            }
            targets.push(class);
        };
        let (blank, sil) = (self.blank_class(), self.sil_class());
        let mut spans = Vec::with_capacity(utterance.words.len());
        emit(sil, None, &mut frames, &mut targets);
        for (wi, word) in utterance.words.iter().enumerate() {
            if wi > 0 {
                emit(sil, None, &mut frames, &mut targets);
            }
            let start = targets.len();
            let pieces = self.word_classes(word, rare_word == Some(wi));
            if pieces.is_empty() {
                return Err(Error::invalid(format!("word '{word}' has no pieces")));
            }
            for (pi, (class, mix)) in pieces.into_iter().enumerate() {
                if pi > 0 {
                    emit(blank, None, &mut frames, &mut targets);
                }
                for _ in 0..cfg.frames_per_token {
                    emit(class, mix, &mut frames, &mut targets);
                }
            }
            spans.push((start, targets.len()));
        }
        emit(sil, None, &mut frames, &mut targets);
        let tau = targets.len();
        Ok(Sample {
            utterance,
            subset,
            features: Tensor::matrix(tau, f, frames)?,
            targets,
            word_spans: spans,
            rare_word,
        })
    }
}
