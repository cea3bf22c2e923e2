use std::collections::{HashMap, HashSet};

use lecb::biasing::{LecbModel, Variant};
use lecb::harness::{evaluate, train_cb, Split, Subset, SyntheticTask, TaskConfig, TrainConfig, Trained, Workbench};
use lecb::pools::EntityDetector;
use lecb::sampling::Method;

fn small() -> TaskConfig {
    TaskConfig {
        common_words: 12,
        rare_words: 16,
        train_utterances: 40,
        dev_utterances: 8,
        test_clean: 6,
        test_rare: 6,
        test_ood: 6,
        merges: 16,
        ..TaskConfig::default()
    }
}

fn tiny_train(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        method: Method::Smb,
        epochs,
        d: 16,
        heads: 2,
        ff_dim: 32,
        layers: 2,
        window: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn task_generation_is_seeded() {
    let a = SyntheticTask::generate(&small()).unwrap();
    let b = SyntheticTask::generate(&small()).unwrap();
    let c = SyntheticTask::generate(&TaskConfig { seed: 8, ..small() }).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
    assert_eq!(a.test.iter().filter(|s| s.subset == Subset::Rare).count(), 6);
    for s in a.train.iter().chain(&a.dev).chain(&a.test) {
        assert_eq!(s.features.rows(), s.targets.len());
        assert_eq!(s.word_spans.len(), s.utterance.words.len());
    }
}

#[test]
fn rare_words_stay_rare_and_common_words_do_not() {
    let task = SyntheticTask::generate(&small()).unwrap();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &task.train {
        for w in &s.utterance.words {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    for r in &task.rare {
        assert!(counts.get(r.as_str()).copied().unwrap_or(0) <= task.cfg.rare_threshold, "{r}");
    }
    for c in &task.common {
        assert!(counts[c.as_str()] > task.cfg.rare_threshold, "{c}");
    }
}

#[test]
fn zero_shot_holds_evaluation_rare_words_out_of_training() {
    let task = SyntheticTask::generate(&TaskConfig {
        zero_shot: true,
        ..small()
    })
    .unwrap();
    let seen: HashSet<&str> = task
        .train
        .iter()
        .flat_map(|s| s.utterance.words.iter().map(String::as_str))
        .collect();
    for s in task.dev.iter().chain(&task.test) {
        if let Some(i) = s.rare_word {
            assert!(!seen.contains(s.utterance.words[i].as_str()));
        }
    }
}

#[test]
fn frozen_backbone_is_exact_on_clean_speech_and_confused_on_rare_words() {
    let bench = Workbench::new(&small(), 32).unwrap();
    let cfg = tiny_train(Variant::None, 0);
    let model = LecbModel::new(cfg.model_config(bench.d_a), bench.task.vocab.len()).unwrap();
    let params = model.init(0).unwrap();
    let t = Trained {
        model: &model,
        params: &params,
    };
    let report = evaluate(&bench, &t, Split::Test, &cfg).unwrap();
    assert_eq!(report.subset(Subset::Clean), Some(0.0));
    assert!(report.subset(Subset::Rare).unwrap() > 0.0);
    let detected: usize = bench
        .task
        .test
        .iter()
        .filter(|s| s.subset == Subset::Rare)
        .filter(|s| {
            let w = &s.utterance.words[s.rare_word.unwrap()];
            bench.detector.detect(&s.utterance.words).contains(w)
        })
        .count();
    assert_eq!(detected, 6);
}

#[test]
fn no_bias_variant_has_a_constant_dev_wer_and_training_keeps_the_backbone() {
    let bench = Workbench::new(&small(), 32).unwrap();
    let before = bench.backbone.checksum();
    let none = train_cb(&bench, &tiny_train(Variant::None, 2)).unwrap();
    let w0 = none.metrics[0].dev_wer;
    assert!(none.metrics.iter().all(|m| m.dev_wer == w0 && m.train_loss.is_none()));
    assert!(none.dumps.is_empty());

    let v2 = train_cb(&bench, &tiny_train(Variant::LecbV2, 2)).unwrap();
    assert_eq!(v2.metrics[0].dev_wer, w0);
    assert_eq!(v2.metrics.len(), 3);
    assert!(v2.metrics[1..].iter().all(|m| m.train_loss.unwrap().is_finite()));
    assert_eq!(v2.dumps.len(), 3);
    assert_eq!(v2.backbone_checksum, before);
    assert_eq!(bench.backbone.checksum(), before);
}

#[test]
fn training_is_reproducible() {
    let bench = Workbench::new(&small(), 32).unwrap();
    let cfg = tiny_train(Variant::LecbV1, 1);
    let a = train_cb(&bench, &cfg).unwrap();
    let b = train_cb(&bench, &cfg).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_eq!(a.metrics, b.metrics);
}
