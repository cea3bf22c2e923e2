//! CB-only training against the frozen backbone, and SMd evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::FrozenBackbone;
use super::task::{Sample, Split, Subset, SyntheticTask, TaskConfig};
use super::wer::WerCounter;
use crate::biasing::{BiasConfig, LecbModel, ModelConfig, Variant};
use crate::encoder::{dropout_rng, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Adam, Graph, ParamId, ParamStore, Tensor};
use crate::pools::{DetectorConfig, FrequencyDetector, Pools};
use crate::sampling::{ContextBatch, KRule, Method, Sampler, SamplerConfig};
use crate::svcca::{DumpTag, EmbeddingDump};

/// Task, backbone and pools shared by every run on one task.
pub struct Workbench {
    pub task: SyntheticTask,
    pub backbone: FrozenBackbone,
    pub pools: Pools,
    pub detector: FrequencyDetector,
    pub d_a: usize,
}

impl Workbench {
    pub fn new(task_cfg: &TaskConfig, d_a: usize) -> Result<Self> {
        let task = SyntheticTask::generate(task_cfg)?;
        let backbone = FrozenBackbone::train(&task, d_a, derive_seed(task_cfg.seed, "backbone"))?;
        let corpus = task.train_corpus()?;
        let detector_cfg = DetectorConfig {
            rare_threshold: Some(task_cfg.rare_threshold),
            min_len: 4,
        };
        let pools = Pools::build(&corpus, detector_cfg, 2)?;
        let detector = FrequencyDetector::from_corpus(&corpus, detector_cfg);
        Ok(Workbench {
            task,
            backbone,
            pools,
            detector,
            d_a,
        })
    }

    pub fn sampler(&self, cfg: SamplerConfig) -> Result<Sampler<'_>> {
        Sampler::new(&self.pools.ngrams, &self.pools.entities, &self.detector, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub method: Method,
    pub lambda: f64,
    pub window: usize,
    /// Context batch size `B`.
    pub batch_size: usize,
    pub n_max: usize,
    pub retention: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub d: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::LecbV2,
            method: Method::Smb,
            lambda: 1.0,
            window: 7,
            batch_size: 10,
            n_max: 2,
            retention: 1.0,
            epochs: 30,
            minibatch: 8,
            lr: 3e-3,
            d: 32,
            heads: 4,
            ff_dim: 64,
            layers: 5,
            max_tokens: 8,
            dropout: 0.0,
            seed: 1,
            eval_seed: 99,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, d_a: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: self.layers,
                d_model: self.d,
                heads: self.heads,
                ff_dim: self.ff_dim,
                max_tokens: self.max_tokens,
                dropout: self.dropout,
            },
            bias: BiasConfig {
                variant: self.variant,
                lambda: self.lambda,
                window: self.window,
                heads: self.heads,
                d: self.d,
                d_a,
            },
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            n_max: self.n_max,
            k_rule: KRule::UniformUpToHalf,
            retention: self.retention,
            seed: self.seed,
        }
    }

    /// Evaluation always uses SMd with every positive kept.
    pub fn eval_sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            retention: 1.0,
            seed: self.eval_seed,
            ..self.sampler_config()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch; `None` before training.
    pub train_loss: Option<f64>,
    pub dev_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub overall: f64,
    pub subsets: BTreeMap<Subset, WerCounter>,
}

impl WerReport {
    pub fn subset(&self, s: Subset) -> Option<f64> {
        self.subsets.get(&s).and_then(|c| c.wer().ok())
    }
}

pub struct TrainRun {
    pub config: TrainConfig,
    pub model: LecbModel,
    pub params: ParamStore,
    pub metrics: Vec<EpochMetrics>,
    pub dumps: Vec<EmbeddingDump>,
    pub backbone_checksum: String,
}

/// Model plus its parameters, ready for evaluation.
pub struct Trained<'a> {
    pub model: &'a LecbModel,
    pub params: &'a ParamStore,
}

/// Identifier of a probe set: utterance ids plus the evaluation seed.
pub fn probe_hash(samples: &[Sample], eval_seed: u64) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.utterance.id.as_bytes());
        h.update(b"\n");
    }
    h.update(eval_seed.to_le_bytes());
    hex::encode(h.finalize())
}

pub fn train_cb(bench: &Workbench, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.minibatch == 0 {
        return Err(Error::invalid("minibatch must be positive"));
    }
    let model = LecbModel::new(cfg.model_config(bench.d_a), bench.task.vocab.len())?;
    let mut params = model.init(derive_seed(cfg.seed, "cb"))?;
    let checksum = bench.backbone.checksum();
    let sampler = bench.sampler(cfg.sampler_config())?;
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut dumps = Vec::new();
    let record = |params: &ParamStore, epoch, loss, metrics: &mut Vec<EpochMetrics>, dumps: &mut Vec<EmbeddingDump>| -> Result<()> {
        let trained = Trained { model: &model, params };
        let dev = evaluate(bench, &trained, Split::Dev, cfg)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss,
            dev_wer: dev.overall,
        });
        if cfg.variant != Variant::None {
            dumps.push(embedding_dump(bench, &trained, cfg, epoch)?);
        }
        log::info!(
            "{}/{} epoch {epoch}: loss {:?} dev WER {:.4}",
            cfg.variant,
            cfg.method,
            loss,
            dev.overall
        );
        Ok(())
    };
    record(&params, 0, None, &mut metrics, &mut dumps)?;

    let mut adam = Adam::new(cfg.lr).with_clip(1.0);
    let train = &bench.task.train;
    let encoded: Vec<Tensor> = train.iter().map(|s| bench.backbone.encode(&s.features)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("order#{epoch}")));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        if cfg.variant != Variant::None {
            for chunk in order.chunks(cfg.minibatch) {
                let mut grads: Vec<(ParamId, Vec<f64>)> = Vec::new();
                for &i in chunk {
                    let s = &train[i];
                    let seed = sampler.config().batch_seed(&s.utterance.id, epoch);
                    let batch = sampler.sample(cfg.method, &s.utterance, seed)?;
                    let phrases = model.tokenize_batch(&bench.task.vocab, &batch)?;
                    let mut g = Graph::new();
                    let x = g.constant(encoded[i].clone());
                    let mut drop = dropout_rng(derive_seed(seed, "dropout"));
                    let out = model.graph(&mut g, &params, x, &phrases, Some(&mut drop))?;
                    let logits = bench.backbone.classifier_graph(&mut g, out.h)?;
                    let loss = g.cross_entropy(logits, &s.targets)?;
                    let lv = g.value(loss).data()[0];
                    if !lv.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss at epoch {epoch}, utterance {}",
                            s.utterance.id
                        )));
                    }
                    total += lv;
                    g.backward(loss)?;
                    for (id, gr) in g.param_grads() {
                        match grads.iter_mut().find(|(p, _)| *p == id) {
                            Some((_, acc)) => acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b),
                            None => grads.push((id, gr)),
                        }
                    }
                }
                let n = chunk.len() as f64;
                grads.iter_mut().for_each(|(_, gr)| gr.iter_mut().for_each(|v| *v /= n));
                adam.step(&mut params, &grads);
            }
        }
        if bench.backbone.checksum() != checksum {
            return Err(Error::invalid("backbone parameters changed during training"));
        }
        let loss = (cfg.variant != Variant::None).then(|| total / train.len() as f64);
        record(&params, epoch, loss, &mut metrics, &mut dumps)?;
    }
    Ok(TrainRun {
        config: *cfg,
        model,
        params,
        metrics,
        dumps,
        backbone_checksum: checksum,
    })
}

/// Biased representation and attention weights for one sample under SMd.
pub struct Inference {
    pub words: Vec<String>,
    pub batch: Option<ContextBatch>,
    pub output: crate::biasing::BiasOutput,
}

pub fn infer(bench: &Workbench, trained: &Trained<'_>, sampler: &Sampler<'_>, s: &Sample) -> Result<Inference> {
    let x = bench.backbone.encode(&s.features)?;
    let (batch, phrases) = if trained.model.variant() == Variant::None {
        (None, Vec::new())
    } else {
        let seed = sampler.config().batch_seed(&s.utterance.id, 0);
        let batch = sampler.sample(Method::Smd, &s.utterance, seed)?;
        let phrases = trained.model.tokenize_batch(&bench.task.vocab, &batch)?;
        (Some(batch), phrases)
    };
    let output = trained.model.forward(trained.params, &x, &phrases)?;
    let words = bench.backbone.decode(&bench.task, &output.h)?;
    Ok(Inference { words, batch, output })
}

pub fn evaluate(bench: &Workbench, trained: &Trained<'_>, split: Split, cfg: &TrainConfig) -> Result<WerReport> {
    let samples = bench.task.split(split);
    if samples.is_empty() {
        return Err(Error::invalid(format!("{} split is empty", split.as_str())));
    }
    let sampler = bench.sampler(cfg.eval_sampler_config())?;
    let mut subsets: BTreeMap<Subset, WerCounter> = BTreeMap::new();
    let mut all = WerCounter::default();
    for s in samples {
        let inf = infer(bench, trained, &sampler, s)?;
        let c = subsets.entry(s.subset).or_default();
        c.add(&s.utterance.words, &inf.words);
        all.add(&s.utterance.words, &inf.words);
    }
    Ok(WerReport {
        overall: all.wer()?,
        subsets,
    })
}

/// `H_cb` rows of every dev frame under SMd, in a fixed order.
pub fn embedding_dump(bench: &Workbench, trained: &Trained<'_>, cfg: &TrainConfig, epoch: usize) -> Result<EmbeddingDump> {
    let sampler = bench.sampler(cfg.eval_sampler_config())?;
    let probe = &bench.task.dev;
    let mut rows = Vec::new();
    let mut cols = 0;
    for s in probe {
        let inf = infer(bench, trained, &sampler, s)?;
        let h = inf
            .output
            .h_cb
            .ok_or_else(|| Error::invalid("variant has no bias embedding"))?;
        cols = h.cols();
        rows.extend_from_slice(h.data());
    }
    let n = rows.len() / cols.max(1);
    Ok(EmbeddingDump {
        tag: DumpTag {
            model: cfg.variant.to_string(),
            sampler: cfg.method.to_string(),
            epoch,
        },
        probe_hash: probe_hash(probe, cfg.eval_seed),
        matrix: Tensor::matrix(n, cols, rows)?,
    })
}

/// Per rare-word test utterance: attention mass on the rare word's phrase
/// relative to the uniform share `k_eff / (N·l)`, averaged over the word's
/// frames and all heads.
pub fn attribution_factors(bench: &Workbench, trained: &Trained<'_>, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let sampler = bench.sampler(cfg.eval_sampler_config())?;
    let l = trained.model.cfg.encoder.max_tokens;
    let mut factors = Vec::new();
    for s in bench.task.test.iter().filter(|s| s.subset == Subset::Rare) {
        let Some(wi) = s.rare_word else { continue };
        let word = &s.utterance.words[wi];
        let inf = infer(bench, trained, &sampler, s)?;
        let batch = inf.batch.as_ref().ok_or_else(|| Error::invalid("variant has no attention"))?;
        let Some(p) = batch.phrases.iter().position(|ph| ph.is_positive() && &ph.text == word) else {
            factors.push(0.0);
            continue;
        };
        let k_eff = bench.task.vocab.tokenize(word).len().min(l);
        let keys = batch.phrases.len() * l;
        let uniform = k_eff as f64 / keys as f64;
        let (start, end) = s.word_spans[wi];
        let heads = &inf.output.mha_weights;
        let mut mass = 0.0;
        for w in heads {
            for f in start..end {
                mass += w.row(f)[p * l..p * l + k_eff].iter().sum::<f64>();
            }
        }
        mass /= (heads.len() * (end - start)) as f64;
        factors.push(mass / uniform);
    }
    Ok(factors)
}
