use numcore::{ParamStore, Tensor};
use proptest::prelude::*;
use vmsst::corpus::{generate_corpus, make_batches, Batcher, CorpusSpec};
use vmsst::model::{Model, ModelConfig};
use vmsst::objectives::Objective;
use vmsst::trainer::{
    checkpoint_load, checkpoint_save, clip_global_norm, kl_anneal, lr_schedule, window_means, Adam, LossLog,
    StepRecord, TrainState, TrainingConfig, CHECKPOINT_MAGIC, CSV_HEADER,
};
use vmsst::Error;

fn spec() -> CorpusSpec {
    CorpusSpec {
        n_languages: 3,
        n_concepts: 16,
        sentence_len: (2, 5),
        n_train_pairs: 400,
        n_fillers: 2,
        n_sts_pairs: 10,
        n_tatoeba_pairs: 10,
        n_mining_pairs: 5,
        n_mining_distractors: 2,
        n_kb: 10,
        n_queries: 5,
        seed: 4,
        ..CorpusSpec::default()
    }
}

fn model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        model_dim: 16,
        latent_dim: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        ff_dim: 32,
        n_languages: 3,
        max_len: 12,
        ..ModelConfig::default()
    }
}

fn setup(objective: Objective, seed: u64) -> (TrainState<f32>, Batcher, Vec<String>) {
    let corpus = generate_corpus(&spec()).unwrap();
    let cfg = TrainingConfig {
        objective,
        steps: 10,
        batch_size: 16,
        warmup_steps: 50,
        kl_anneal_steps: 200,
        seed,
        ..TrainingConfig::default()
    };
    let model = Model::new(model_config(corpus.vocab.len()), seed).unwrap();
    let batcher = make_batches(corpus.train_examples(12), cfg.batch_size, seed).unwrap();
    (
        TrainState::new(cfg, model).unwrap(),
        batcher,
        corpus.vocab.tokens().to_vec(),
    )
}

fn totals(records: &[StepRecord]) -> Vec<u64> {
    records.iter().map(|r| r.loss.total.to_bits()).collect()
}

#[test]
fn schedule_examples() {
    let lr = |s| lr_schedule(s, 0.001, 4000).unwrap();
    assert!((lr(4000) - 0.001).abs() < 1e-12);
    assert!((lr(2000) - 0.0005).abs() < 1e-12);
    assert!((lr(16000) - 0.0005).abs() < 1e-12);
    assert!(matches!(lr_schedule(0, 0.001, 4000), Err(Error::Contract(_))));
    // both branches meet at the warmup boundary
    assert_eq!(4000.0f64 / 4000.0, (4000.0f64 / 4000.0).sqrt());

    assert_eq!(kl_anneal(0, 1_000_000), 0.0);
    assert_eq!(kl_anneal(1_000_000, 1_000_000), 1.0);
    assert_eq!(kl_anneal(500_000, 1_000_000), 0.5);
    assert_eq!(kl_anneal(5_000_000, 1_000_000), 1.0);
}

proptest! {
    #[test]
    fn lr_is_continuous_and_peaks_at_warmup(w in 1u64..10_000, peak in 1e-5f64..1.0) {
        let at = lr_schedule(w, peak, w).unwrap();
        prop_assert!((at - peak).abs() <= 1e-15 * peak.max(1.0));
        if w > 1 {
            let before = lr_schedule(w - 1, peak, w).unwrap();
            let after = lr_schedule(w + 1, peak, w).unwrap();
            prop_assert!(before <= at && after <= at);
        }
    }

    #[test]
    fn kl_anneal_is_monotone_and_clamped(a in 0u64..100_000, b in 0u64..100_000, h in 1u64..50_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(kl_anneal(lo, h) <= kl_anneal(hi, h));
        prop_assert!((0.0..=1.0).contains(&kl_anneal(hi, h)));
    }

    #[test]
    fn clipping_never_increases_the_norm(
        xs in prop::collection::vec(-10.0f64..10.0, 1..20),
        ys in prop::collection::vec(-10.0f64..10.0, 1..20),
        max in 0.01f64..20.0,
    ) {
        let mut g = ParamStore::new();
        g.insert("x", Tensor::from_f64(&[xs.len()], &xs).unwrap());
        g.insert("y", Tensor::from_f64(&[ys.len()], &ys).unwrap());
        let norm = |g: &ParamStore<f64>| g.iter().flat_map(|(_, t)| t.data().to_vec()).map(|v| v * v).sum::<f64>().sqrt();
        let before = norm(&g);
        let reported = clip_global_norm(&mut g, max);
        let after = norm(&g);
        prop_assert!((reported - before).abs() <= 1e-12 * before.max(1.0));
        prop_assert!(after <= before * (1.0 + 1e-12));
        prop_assert!(after <= max * (1.0 + 1e-12) || after <= before);
    }
}

#[test]
fn adam_matches_hand_computation() {
    let mut params: ParamStore<f64> = ParamStore::new();
    params.insert("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
    let mut grads = ParamStore::new();
    grads.insert("w", Tensor::from_f64(&[2], &[0.5, -4.0]).unwrap());
    let cfg = TrainingConfig::default();
    let mut adam = Adam::new(&params);
    adam.update(&mut params, &grads, 0.01, 1, &cfg);
    // step 1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
    let w = params.get("w").unwrap().data();
    assert!((w[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-9))).abs() < 1e-15);
    assert!((w[1] - (-2.0 + 0.01 * 4.0 / (4.0 + 1e-9))).abs() < 1e-15);
    assert!((adam.m.get("w").unwrap().data()[0] - 0.05).abs() < 1e-15);
    assert!((adam.v.get("w").unwrap().data()[1] - 0.02 * 16.0).abs() < 1e-15);

    // step 2 with the same gradient: bias correction keeps the update at lr
    let before = params.get("w").unwrap().data()[0];
    adam.update(&mut params, &grads, 0.01, 2, &cfg);
    let m = 0.9 * 0.05 + 0.1 * 0.5;
    let v = 0.98 * 0.02 * 0.25 + 0.02 * 0.25;
    let want = before - 0.01 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.98f64 * 0.98)).sqrt() + 1e-9);
    assert!((params.get("w").unwrap().data()[0] - want).abs() < 1e-15);
}

#[test]
fn config_validation_names_fields() {
    for (cfg, field) in [
        (
            TrainingConfig {
                steps: 0,
                ..Default::default()
            },
            "steps",
        ),
        (
            TrainingConfig {
                warmup_steps: 0,
                ..Default::default()
            },
            "warmup_steps",
        ),
        (
            TrainingConfig {
                lambda: Some(-1.0),
                ..Default::default()
            },
            "lambda",
        ),
        (
            TrainingConfig {
                dropout_rate: Some(1.0),
                ..Default::default()
            },
            "dropout_rate",
        ),
        (
            TrainingConfig {
                batch_size: 0,
                ..Default::default()
            },
            "batch_size",
        ),
    ] {
        match cfg.validate() {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
    let d = TrainingConfig::default();
    assert_eq!(
        (d.batch_size, d.steps, d.kl_anneal_steps, d.warmup_steps),
        (64, 5000, 10_000, 4000)
    );
    assert_eq!(d.peak_lr, 0.001);
    assert!(d.kl_anneal_steps > d.steps);
    assert_eq!(
        TrainingConfig {
            objective: Objective::Contrastive,
            ..d.clone()
        }
        .dropout(),
        0.1
    );
    assert_eq!(d.dropout(), 0.0);
    assert_eq!(d.lambda(), 0.1);
    let no_kl = TrainingConfig { no_kl: true, ..d };
    assert_eq!(no_kl.kl_weight(20_000), 0.0);
}

#[test]
fn training_is_deterministic() {
    for objective in Objective::ALL {
        let run = || {
            let (mut state, mut batcher, _) = setup(objective, 3);
            state.run(&mut batcher, |_, _| Ok(true)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 10);
        assert_eq!(totals(&a), totals(&b), "{objective}");
    }
}

#[test]
fn applied_lr_and_kl_weight_follow_the_schedules() {
    let (mut state, mut batcher, _) = setup(Objective::Vmsst, 1);
    let recs = state.run(&mut batcher, |_, _| Ok(true)).unwrap();
    for r in &recs {
        assert_eq!(r.lr, lr_schedule(r.step, 0.001, 50).unwrap());
        assert_eq!(r.kl_weight, kl_anneal(r.step, 200));
        assert_eq!(r.loss.kl_weight, r.kl_weight);
    }
    assert_eq!(
        recs.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=10).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (mut state, mut batcher, vocab) = setup(Objective::Vmsst, 2);
    state.config.steps = 3;
    state.run(&mut batcher, |_, _| Ok(true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    checkpoint_save(&state, Some(&vocab), &p1).unwrap();
    let loaded = checkpoint_load::<f32>(&p1).unwrap();
    assert_eq!(loaded.state, state);
    assert_eq!(loaded.vocab.as_deref(), Some(vocab.as_slice()));
    checkpoint_save(&loaded.state, loaded.vocab.as_deref(), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(&std::fs::read(&p1).unwrap()[..6], CHECKPOINT_MAGIC);

    let batch = batcher.batch(0).unwrap();
    let e1 = state.model.embed_sentences(&batch.a).unwrap();
    let e2 = loaded.state.model.embed_sentences(&batch.a).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn resumed_run_matches_unbroken_run() {
    for objective in [Objective::Vmsst, Objective::Contrastive] {
        let (mut full, mut batcher, vocab) = setup(objective, 5);
        full.config.steps = 20;
        let all = full.run(&mut batcher, |_, _| Ok(true)).unwrap();

        let (mut first, mut batcher, _) = setup(objective, 5);
        first.config.steps = 10;
        first.run(&mut batcher, |_, _| Ok(true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        checkpoint_save(&first, Some(&vocab), &path).unwrap();
        let mut resumed = checkpoint_load::<f32>(&path).unwrap().state;
        resumed.config.steps = 20;
        let rest = resumed.run(&mut batcher, |_, _| Ok(true)).unwrap();
        assert_eq!(totals(&rest), totals(&all[10..]), "{objective}");
        assert_eq!(resumed.model, full.model);
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (state, _, _) = setup(Objective::Bitranslation, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    checkpoint_save(&state, None, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    let mut bad_magic = good.clone();
    bad_magic[5] = b'9';
    let truncated = good[..good.len() - 8].to_vec();
    for (name, bytes) in [("flipped", flipped), ("magic", bad_magic), ("truncated", truncated)] {
        std::fs::write(&path, bytes).unwrap();
        match checkpoint_load::<f32>(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("{name}: expected format error, got {other:?}"),
        }
    }
}

fn bits(state: &TrainState<f32>) -> Vec<u32> {
    let m = state.model.params().iter();
    let a = state.adam.m.iter().chain(state.adam.v.iter());
    m.chain(a)
        .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let (mut state, mut batcher, _) = setup(Objective::Vmsst, 0);
    // poison one word embedding; the first batch containing it must abort
    let t = state.model.params_mut().get_mut("embed.token").unwrap();
    t.data_mut()[20 * 16] = f32::NAN;
    for i in 0..50 {
        let batch = batcher.batch(i).unwrap();
        let before = bits(&state);
        let step = state.step;
        match state.train_step(&batch) {
            Ok(_) => continue,
            Err(Error::NonFinite { step: s, breakdown }) => {
                assert_eq!(s, step + 1);
                assert!(!breakdown.is_finite());
                assert_eq!(state.step, step);
                assert_eq!(bits(&state), before);
                return;
            }
            Err(e) => panic!("expected non-finite error, got {e}"),
        }
    }
    panic!("no batch touched the poisoned embedding");
}

#[test]
fn loss_log_resume_truncates_later_rows() {
    let (mut state, mut batcher, _) = setup(Objective::Bitranslation, 0);
    let recs = state.run(&mut batcher, |_, _| Ok(true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    {
        let mut log = LossLog::create(&path).unwrap();
        for r in &recs {
            log.append(r).unwrap();
        }
    }
    let full = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[1].split(',').count(), 12);
    {
        let mut log = LossLog::resume(&path, 6).unwrap();
        for r in &recs[6..] {
            log.append(r).unwrap();
        }
    }
    assert_eq!(std::fs::read_to_string(&path).unwrap(), full);
}

#[test]
fn smoke_training_decreases_every_loss() {
    for objective in Objective::ALL {
        let (mut state, mut batcher, _) = setup(objective, 9);
        state.config.steps = 500;
        let recs = state.run(&mut batcher, |_, _| Ok(true)).unwrap();
        let means = window_means(&recs.iter().map(|r| r.loss.total).collect::<Vec<_>>(), 100);
        assert_eq!(means.len(), 5);
        assert!(
            means[4] <= means[0],
            "{objective}: windowed loss went from {} to {}",
            means[0],
            means[4]
        );
    }
}
