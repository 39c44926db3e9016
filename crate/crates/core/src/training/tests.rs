use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::synthetic::{single_action_episodes, SynthConfig};
use crate::corpus::{extract_mlm_texts, Split};
use crate::gridworld::{replay, Action, Cell, GridDims};
use crate::model::{init_model, Component, ModelConfig};
use crate::numcore::{AdamConfig, AdamState, Graph};
use crate::tokenizer::{build_vocab, encode, mask_tokens, MaskingConfig, Vocabulary, IGNORE};

fn sentences() -> Vec<String> {
    include_str!("../../fixtures/mlm_sentences.txt")
        .lines()
        .map(crate::corpus::normalize_text)
        .collect()
}

fn tiny_model(vocab: &Vocabulary, grid: GridDims) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        grid,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn quick_pretrain(epochs: usize) -> PretrainConfig {
    let mut cfg = PretrainConfig::default();
    cfg.optim.epochs = epochs;
    cfg.optim.peak_lr = 3e-3;
    cfg.optim.batch_size = 4;
    cfg.valid_fraction = 0.25;
    cfg
}

#[test]
fn schedule_hits_its_breakpoints_exactly() {
    let s = LrSchedule::new(1000, 100, 1e-4).unwrap();
    assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
    assert_eq!(lr_at(&s, 100).unwrap(), 1e-4);
    assert_eq!(lr_at(&s, 1000).unwrap(), 0.0);
    assert_eq!(lr_at(&s, 550).unwrap(), 0.5e-4);
    assert_eq!(lr_at(&s, 50).unwrap(), 0.5e-4);
    assert!(matches!(
        lr_at(&s, 1001),
        Err(TrainError::StepOutOfRange { step: 1001, total: 1000 })
    ));
    assert!(LrSchedule::new(10, 11, 1e-4).is_err());
    let flat = LrSchedule::new(4, 0, 2.0).unwrap();
    assert_eq!(lr_at(&flat, 0).unwrap(), 2.0);
    assert_eq!(lr_at(&flat, 2).unwrap(), 1.0);
}

#[test]
fn schedule_is_piecewise_linear_with_one_peak() {
    let (total, warmup, peak) = (997usize, 113usize, 3e-4);
    let s = LrSchedule::new(total, warmup, peak).unwrap();
    // Independent interpolation between the three breakpoints.
    let oracle = |t: usize| {
        let (x0, y0, x1, y1) = if t <= warmup {
            (0.0, 0.0, warmup as f64, peak)
        } else {
            (warmup as f64, peak, total as f64, 0.0)
        };
        y0 + (y1 - y0) * (t as f64 - x0) / (x1 - x0)
    };
    let values: Vec<f64> = (0..=total).map(|t| lr_at(&s, t).unwrap()).collect();
    for (t, &v) in values.iter().enumerate() {
        assert!((v - oracle(t)).abs() <= 1e-18, "step {t}: {v} vs {}", oracle(t));
    }
    let peaks = values.iter().filter(|&&v| v == peak).count();
    assert_eq!(peaks, 1);
    for w in values.windows(2) {
        assert!((w[1] - w[0]).abs() <= peak / warmup as f64 + 1e-18);
    }
}

#[test]
fn warmup_length_rounds_the_fraction() {
    let s = LrSchedule::from_fraction(200, 0.1, 1e-4).unwrap();
    assert_eq!(s.warmup_steps, 20);
    let s = LrSchedule::from_fraction(15, 0.1, 1e-4).unwrap();
    assert_eq!(s.warmup_steps, 2);
}

#[test]
fn split_arithmetic() {
    let texts: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
    let (train, valid) = split_texts(&texts, 0.5, 9);
    assert_eq!((train.len(), valid.len()), (5, 5));
    let mut all: Vec<String> = train.iter().chain(&valid).cloned().collect();
    all.sort();
    let mut sorted = texts.clone();
    sorted.sort();
    assert_eq!(all, sorted);
    assert_eq!(split_texts(&texts, 0.5, 9), (train, valid));
    assert_eq!(split_texts(&texts, 0.0, 9).1.len(), 0);
    assert_eq!(split_texts(&texts[..1], 0.9, 9).0.len(), 1);
}

#[test]
fn config_keys_roundtrip_through_text() {
    let mut p = PretrainConfig::default();
    for k in PretrainConfig::KEYS {
        let v = p.get(k).unwrap();
        p.set(k, &v).unwrap();
    }
    assert_eq!(p, PretrainConfig::default());
    assert!(p.set("nope", "1").is_err());
    assert!(p.set("epochs", "x").is_err());
    let f = FinetuneConfig::default();
    assert_eq!((f.optim.epochs, f.optim.peak_lr), (20, 1e-4));
    for k in FinetuneConfig::KEYS {
        assert!(f.get(k).is_some(), "{k}");
    }
    assert_eq!((p.optim.epochs, p.optim.peak_lr, p.optim.warmup_fraction), (100, 1e-4, 0.1));
    assert_eq!((p.mask_prob, p.valid_fraction), (0.15, 0.1));
}

#[test]
fn pretraining_is_deterministic_across_runs_and_execution_modes() {
    let texts = sentences();
    let vocab = build_vocab(&texts, 1, 1000).unwrap();
    let mcfg = tiny_model(&vocab, GridDims::new(3, 2, 3));
    let cfg = quick_pretrain(3);
    let a = pretrain_mlm(&texts, &vocab, &mcfg, &cfg).unwrap();
    let b = pretrain_mlm(&texts, &vocab, &mcfg, &cfg).unwrap();
    assert!(a.model.params().bit_eq(b.model.params()));
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.records.len(), 3);
    assert_eq!(a.lr_log.len(), 3 * 6);

    let mut par = cfg.clone();
    par.optim.execution = crate::par::Execution::Parallel;
    let c = pretrain_mlm(&texts, &vocab, &mcfg, &par).unwrap();
    assert!(a.model.params().bit_eq(c.model.params()));
    assert_eq!(a.curve, c.curve);
}

#[test]
fn resuming_at_an_epoch_boundary_matches_an_uninterrupted_run() {
    let texts = sentences();
    let vocab = build_vocab(&texts, 1, 1000).unwrap();
    let mcfg = tiny_model(&vocab, GridDims::new(3, 2, 3));
    let cfg = quick_pretrain(4);
    let full = pretrain_mlm(&texts, &vocab, &mcfg, &cfg).unwrap();

    let start = MlmRun::start(init_model(&mcfg).unwrap(), &cfg);
    let half = pretrain_mlm_resume(&texts, &vocab, &cfg, start, Some(2)).unwrap();
    assert_eq!(half.epochs_done, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    save_train_state(&half, &path).unwrap();
    let restored = load_train_state(&path, &cfg).unwrap();
    assert_eq!(restored, half);
    let resumed = pretrain_mlm_resume(&texts, &vocab, &cfg, restored, None).unwrap();
    assert!(resumed.model.params().bit_eq(full.model.params()));
    assert_eq!(resumed.curve, full.curve);
    assert_eq!(resumed.lr_log, full.lr_log);
}

/// Pretraining settings for the 32-sentence fixture with the 2-layer, d=32
/// model.
fn fixture_pretrain(epochs: usize) -> (Vec<String>, Vocabulary, ModelConfig, PretrainConfig) {
    let texts = sentences();
    let vocab = build_vocab(&texts, 1, 1000).unwrap();
    let mcfg = ModelConfig {
        vocab_size: vocab.len(),
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    let mut cfg = quick_pretrain(epochs);
    cfg.optim.peak_lr = 3e-3;
    cfg.optim.batch_size = 4;
    cfg.valid_fraction = 0.1;
    (texts, vocab, mcfg, cfg)
}

#[test]
fn training_split_loss_strictly_decreases_over_the_first_epochs() {
    let (texts, vocab, mcfg, cfg) = fixture_pretrain(200);
    let (train, _) = split_texts(&texts, cfg.valid_fraction, cfg.optim.seed);
    let exec = crate::par::Execution::Sequential;
    let mut run = MlmRun::start(init_model(&mcfg).unwrap(), &cfg);
    let mut losses = vec![mlm_loss(&run.model, &train, &vocab, cfg.mask_prob, 99, exec).unwrap().unwrap()];
    for epoch in 1..=10 {
        run = pretrain_mlm_resume(&texts, &vocab, &cfg, run, Some(epoch)).unwrap();
        losses.push(mlm_loss(&run.model, &train, &vocab, cfg.mask_prob, 99, exec).unwrap().unwrap());
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
    assert!(run.curve.records.iter().all(|r| r.valid_loss.is_some()));
    let csv = run.curve.to_csv();
    assert!(csv.starts_with("epoch,train_loss,valid_loss,seconds\n1,"));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn empty_text_is_rejected() {
    let texts = sentences();
    let vocab = build_vocab(&texts, 1, 1000).unwrap();
    let mcfg = tiny_model(&vocab, GridDims::new(3, 2, 3));
    let cfg = quick_pretrain(1);
    assert!(matches!(
        pretrain_mlm(&[], &vocab, &mcfg, &cfg),
        Err(TrainError::EmptyCorpus)
    ));
    assert!(matches!(
        pretrain_mlm(&["  ".to_string()], &vocab, &mcfg, &cfg),
        Err(TrainError::EmptyCorpus)
    ));
}

#[test]
fn non_finite_parameters_abort_with_a_location() {
    let texts = sentences();
    let vocab = build_vocab(&texts, 1, 1000).unwrap();
    let mcfg = tiny_model(&vocab, GridDims::new(3, 2, 3));
    let cfg = quick_pretrain(2);
    let mut model = init_model(&mcfg).unwrap();
    let id = model.params().id("encoder.layer0.ffn.w1").unwrap();
    model.params_mut().get_mut(id).data_mut()[3] = f32::NAN;
    let err = pretrain_mlm_resume(&texts, &vocab, &cfg, MlmRun::start(model, &cfg), None).unwrap_err();
    assert!(
        matches!(err, TrainError::NonFiniteLoss { epoch: 1, step: 0, .. }),
        "{err:?}"
    );
}

#[test]
fn masked_sentence_is_recovered_after_overfitting() {
    let texts = sentences();
    let vocab = build_vocab(&texts, 1, 1000).unwrap();
    let mcfg = ModelConfig {
        max_seq_len: 12,
        ..tiny_model(&vocab, GridDims::new(3, 2, 3))
    };
    let mut model = init_model(&mcfg).unwrap();
    let enc = encode(&vocab, &texts[0], 12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let masked = loop {
        let m = mask_tokens(&enc, &MaskingConfig::with_prob(0.3), &mut rng, &vocab);
        if m.selected_count() >= 2 {
            break m;
        }
    };
    let input = crate::tokenizer::Encoding {
        ids: masked.masked_ids.clone(),
        attention_mask: enc.attention_mask.clone(),
    };
    let mut adam = AdamState::new(model.params(), AdamConfig::default());
    for _ in 0..200 {
        let grads = {
            let net = model.net().unwrap();
            let mut g = Graph::new();
            let h = net.encode_text(&mut g, &input, None).unwrap();
            let l = net.mlm_logits(&mut g, h).unwrap();
            let ce = g.cross_entropy(l, &masked.labels).unwrap();
            g.backward(ce).unwrap().param_grads(model.params().len())
        };
        adam.step(model.params_mut(), &grads, 3e-3).unwrap();
    }
    let net = model.net().unwrap();
    let mut g = Graph::new();
    let h = net.encode_text(&mut g, &input, None).unwrap();
    let l = net.mlm_logits(&mut g, h).unwrap();
    let v = vocab.len();
    for (pos, &label) in masked.labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let row = &g.value(l)[pos * v..(pos + 1) * v];
        let argmax = (0..v).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax as i64, label, "position {pos}");
    }
}

fn synth_setup(episodes: usize) -> (Vec<BuilderExample>, Vocabulary, ModelConfig) {
    let cfg = SynthConfig {
        episodes,
        dims: GridDims::new(4, 2, 4),
        seed: 21,
        ..SynthConfig::default()
    };
    let eps = crate::corpus::synthetic::generate(&cfg);
    let vocab = build_vocab(&extract_mlm_texts(&eps), 1, 1000).unwrap();
    let mcfg = ModelConfig {
        max_seq_len: 24,
        ..tiny_model(&vocab, cfg.dims)
    };
    let train: Vec<_> = eps.into_iter().filter(|e| e.split == Split::Train).collect();
    (builder_examples(&train, &vocab, 24).unwrap(), vocab, mcfg)
}

fn quick_finetune(steps: usize) -> FinetuneConfig {
    let mut f = FinetuneConfig::default();
    f.optim.max_steps = steps;
    f.optim.peak_lr = 3e-3;
    f.optim.warmup_fraction = 0.0;
    f.optim.batch_size = 4;
    f
}

#[test]
fn zero_length_finetune_returns_init_unchanged() {
    let (examples, _, mcfg) = synth_setup(6);
    let init = init_model(&mcfg).unwrap().without(Component::MlmHead);
    let mut cfg = quick_finetune(0);
    cfg.optim.epochs = 0;
    let run = train_builder(&examples, &[], init.clone(), &cfg).unwrap();
    assert!(run.model.params().bit_eq(init.params()));
    assert!(run.curve.records.is_empty());
}

#[test]
fn initial_builder_loss_is_near_uniform() {
    let (examples, _, mcfg) = synth_setup(10);
    let model = init_model(&mcfg).unwrap().without(Component::MlmHead);
    let mut uniform = 0.0;
    let mut steps = 0;
    for ex in &examples {
        let mut grid = ex.grid.clone();
        for k in 0..=ex.gold.len() {
            uniform += (crate::gridworld::feasible_vec(&grid).len() as f64).ln();
            steps += 1;
            if let Some(a) = ex.gold.get(k) {
                grid.apply_mut(a).unwrap();
            }
        }
    }
    uniform /= steps as f64;
    let loss = evaluate_builder_loss(&model, &examples, crate::par::Execution::Sequential)
        .unwrap()
        .unwrap();
    assert!((loss - uniform).abs() < 0.2 * uniform, "{loss} vs {uniform}");
}

#[test]
fn corrupted_gold_is_reported() {
    let mut eps = single_action_episodes(2, GridDims::new(4, 2, 4), 1);
    eps[1].gold_turns[0].actions = vec![Action::remove(Cell::new(0, 0, 0))];
    let vocab = build_vocab(&extract_mlm_texts(&eps), 1, 100).unwrap();
    match builder_examples(&eps, &vocab, 16) {
        Err(TrainError::GoldNotFeasible { episode, step: 0, .. }) => assert_eq!(episode, "single-001"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn finetuning_is_deterministic_across_execution_modes() {
    let (examples, _, mcfg) = synth_setup(8);
    let init = init_model(&mcfg).unwrap().without(Component::MlmHead);
    let cfg = quick_finetune(4);
    let a = train_builder(&examples, &examples[..2], init.clone(), &cfg).unwrap();
    let mut par = cfg.clone();
    par.optim.execution = crate::par::Execution::Parallel;
    let b = train_builder(&examples, &examples[..2], init, &par).unwrap();
    assert!(a.model.params().bit_eq(b.model.params()));
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.step_losses.len(), 4);
}

#[test]
fn decoded_actions_always_replay() {
    let (examples, _, mcfg) = synth_setup(6);
    for seed in 0..4 {
        let model = init_model(&ModelConfig { seed, ..mcfg.clone() }).unwrap();
        for ex in &examples {
            let seq = decode_actions(&model, &ex.encoding, &ex.grid, 5).unwrap();
            assert!(seq.len() <= 5);
            assert!(!seq.contains(&Action::Stop));
            replay(&ex.grid, &seq).unwrap();
            assert!(decode_actions(&model, &ex.encoding, &ex.grid, 1).unwrap().len() <= 1);
        }
    }
}

#[test]
fn stop_trained_model_decodes_nothing() {
    let (mut examples, _, mcfg) = synth_setup(6);
    for ex in &mut examples {
        ex.gold.clear();
    }
    let init = init_model(&mcfg).unwrap().without(Component::MlmHead);
    let run = train_builder(&examples, &[], init, &quick_finetune(30)).unwrap();
    for ex in &examples {
        assert!(decode_actions(&run.model, &ex.encoding, &ex.grid, 5).unwrap().is_empty());
    }
}

#[test]
fn single_pair_overfit_predicts_the_gold_action() {
    let eps = single_action_episodes(1, GridDims::new(4, 2, 4), 8);
    let vocab = build_vocab(&extract_mlm_texts(&eps), 1, 100).unwrap();
    let mcfg = tiny_model(&vocab, GridDims::new(4, 2, 4));
    let examples = builder_examples(&eps, &vocab, 16).unwrap();
    let init = init_model(&mcfg).unwrap().without(Component::MlmHead);
    let run = train_builder(&examples, &[], init, &quick_finetune(60)).unwrap();
    let seq = decode_actions(&run.model, &examples[0].encoding, &examples[0].grid, 3).unwrap();
    assert_eq!(seq, examples[0].gold);
}

