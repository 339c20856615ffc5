use std::fs;
use std::path::Path;

use lpilab_core::dataset::{synth_facts, training_sentences, SynthSpec, Tokenizer, UnknownPolicy};
use lpilab_core::model::{FfnConfig, ModelConfig, Nonlinearity};
use lpilab_core::training::{
    checkpoint_file_name, expert_usage, read_loss_log, train, TrainConfig, Trainer, OPTIMIZER_FILE,
};

fn corpus() -> (usize, Vec<Vec<usize>>) {
    let facts = synth_facts(&SynthSpec::new(12, 20, 7)).unwrap();
    let tok = Tokenizer::from_examples(&facts);
    let sents = training_sentences(&facts)
        .iter()
        .map(|s| tok.encode(s, UnknownPolicy::Strict).unwrap())
        .collect();
    (tok.vocab_size(), sents)
}

fn small(vocab: usize, moe: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_head: 8,
        ffn: if moe {
            FfnConfig::Moe {
                experts: 4,
                expert_dim: 8,
                top_k: 2,
                gate_renorm: true,
            }
        } else {
            FfnConfig::Dense { ffn_dim: 32 }
        },
        vocab,
        max_seq: 16,
        nonlinearity: Nonlinearity::Silu,
        final_layernorm: true,
        ln_eps: 1e-5,
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn same_seed_gives_identical_files() {
    let (vocab, sents) = corpus();
    let tc = TrainConfig {
        steps: 12,
        seed: 3,
        ..TrainConfig::default()
    };
    for moe in [false, true] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train(&small(vocab, moe), &tc, &sents, a.path()).unwrap();
        train(&small(vocab, moe), &tc, &sents, b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }
}

#[test]
fn resumed_training_is_bitwise_identical() {
    let (vocab, sents) = corpus();
    let tc = TrainConfig {
        steps: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    for moe in [false, true] {
        let cfg = small(vocab, moe);
        let mut straight = Trainer::new(cfg.clone(), tc.clone(), sents.clone()).unwrap();
        straight.run_until(20, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(cfg, tc.clone(), sents.clone()).unwrap();
        first.run_until(9, |_, _| Ok(())).unwrap();
        let ckpt = dir.path().join(checkpoint_file_name(9));
        first.checkpoint().save(&ckpt).unwrap();
        first.save_optimizer(&dir.path().join(OPTIMIZER_FILE)).unwrap();
        drop(first);

        let mut resumed = Trainer::resume(&ckpt, &dir.path().join(OPTIMIZER_FILE), tc.clone(), sents.clone()).unwrap();
        assert_eq!(resumed.step_count(), 9);
        resumed.run_until(20, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    }
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let (vocab, sents) = corpus();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let series = train(&small(vocab, false), &tc, &sents, dir.path()).unwrap();
    assert_eq!(series.steps(), vec![0]);
    assert!(read_loss_log(&dir.path().join("loss.tsv")).unwrap().is_empty());
}

#[test]
fn default_moe_has_no_dead_experts() {
    let (vocab, sents) = corpus();
    let cfg = ModelConfig::moe_default(vocab);
    let tc = TrainConfig {
        steps: 300,
        seed: 1,
        ..TrainConfig::default()
    };
    assert!(tc.lambda_bal > 0.0);
    let mut t = Trainer::new(cfg, tc, sents.clone()).unwrap();
    for target in [0, 100, 300] {
        t.run_until(target, |_, _| Ok(())).unwrap();
        let usage = expert_usage(&t.checkpoint().model, &sents).unwrap();
        for (l, layer) in usage.iter().enumerate() {
            assert!(layer.iter().all(|&c| c > 0), "step {target}, layer {l}: {layer:?}");
        }
    }
}

#[test]
fn default_dense_loss_decreases_over_2k_steps() {
    let (vocab, sents) = corpus();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        steps: 2000,
        schedule: Some(vec![2000]),
        ..TrainConfig::default()
    };
    train(&ModelConfig::dense_default(vocab), &tc, &sents, dir.path()).unwrap();
    let log = read_loss_log(&dir.path().join("loss.tsv")).unwrap();
    assert_eq!(log.len(), 2000);
    let head: f64 = log[..20].iter().map(|r| r.1).sum::<f64>() / 20.0;
    let tail: f64 = log[log.len() - 20..].iter().map(|r| r.1).sum::<f64>() / 20.0;
    assert!(tail < head, "loss {head} -> {tail}");
    assert!(log.last().unwrap().1 < log[0].1);
}
