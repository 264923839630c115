use numcore::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmsst::model::{
    reparameterize, standard_normal, GaussianPosterior, Graph, Model, ModelConfig, PosteriorVars, TokenBatch,
};
use vmsst::{tokens, Error};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        model_dim: 16,
        latent_dim: 4,
        n_enc_layers: 2,
        n_dec_layers: 1,
        n_heads: 2,
        ff_dim: 24,
        n_languages: 3,
        max_len: 8,
        ..ModelConfig::default()
    }
}

fn batch() -> TokenBatch {
    TokenBatch::from_sequences(&[vec![1, 9, 10, 11, 2], vec![1, 12, 2], vec![1, 13, 14, 15, 16, 2]], 0).unwrap()
}

#[test]
fn zero_heads_give_prior_posterior() {
    let mut m = Model::<f64>::new(tiny(), 1).unwrap();
    for name in [
        "head.sem.mu.w",
        "head.sem.mu.b",
        "head.sem.logvar.w",
        "head.sem.logvar.b",
    ] {
        let t = m.params_mut().get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let p = m.encode_semantic(&batch()).unwrap();
    assert!(p.mu.data().iter().all(|&x| x == 0.0));
    assert!(p.log_var.data().iter().all(|&x| x == 0.0));
}

#[test]
fn posterior_shapes_are_rows_by_latent() {
    let m = Model::<f64>::new(tiny(), 2).unwrap();
    let s = m.encode_semantic(&batch()).unwrap();
    let l = m.encode_language(&batch(), &[0, 1, 2]).unwrap();
    for t in [&s.mu, &s.log_var, &l.mu, &l.log_var] {
        assert_eq!(t.shape(), &[3, 4]);
        assert!(t.is_finite());
    }
}

#[test]
fn semantic_encoder_ignores_language_parameters() {
    let m = Model::<f64>::new(tiny(), 3).unwrap();
    let before = m.encode_semantic(&batch()).unwrap();
    let mut other = m.clone();
    for x in other.params_mut().get_mut("embed.language").unwrap().data_mut() {
        *x += 1.0;
    }
    assert_eq!(other.encode_semantic(&batch()).unwrap(), before);
}

#[test]
fn embedding_is_semantic_mean_and_deterministic() {
    let m = Model::<f64>::new(tiny(), 4).unwrap();
    let e1 = m.embed_sentences(&batch()).unwrap();
    let e2 = m.embed_sentences(&batch()).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1, m.encode_semantic(&batch()).unwrap().mu);
}

#[test]
fn embedding_ignores_padding_width() {
    let m = Model::<f64>::new(tiny(), 4).unwrap();
    let seqs = [vec![1, 9, 10, 2]];
    let narrow = m
        .embed_sentences(&TokenBatch::from_sequences(&seqs, 0).unwrap())
        .unwrap();
    let wide = m
        .embed_sentences(&TokenBatch::from_sequences(&seqs, 8).unwrap())
        .unwrap();
    for (a, b) in narrow.data().iter().zip(wide.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn language_output_ignores_id_without_encoder_embedding() {
    let cfg = ModelConfig {
        use_encoder_lang_emb: false,
        ..tiny()
    };
    let m = Model::<f64>::new(cfg, 5).unwrap();
    let a = m.encode_language(&batch(), &[0, 0, 0]).unwrap();
    let b = m.encode_language(&batch(), &[2, 1, 2]).unwrap();
    assert_eq!(a, b);

    let with = Model::<f64>::new(tiny(), 5).unwrap();
    let a = with.encode_language(&batch(), &[0, 0, 0]).unwrap();
    let b = with.encode_language(&batch(), &[2, 1, 2]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn separate_language_encoders_have_disjoint_parameters() {
    let cfg = ModelConfig {
        n_language_encoders: 2,
        ..tiny()
    };
    assert_eq!(cfg.language_encoder_of(0), 0);
    assert_eq!(cfg.language_encoder_of(1), 1);
    assert_eq!(cfg.language_encoder_of(2), 0);
    let m = Model::<f64>::new(cfg, 6).unwrap();
    let langs = [0, 1, 2];
    let base = m.encode_language(&batch(), &langs).unwrap();

    let mut perturbed = m.clone();
    for x in perturbed
        .params_mut()
        .get_mut("enc.lang1.layer0.ff.1.w")
        .unwrap()
        .data_mut()
    {
        *x *= 1.5;
    }
    let out = perturbed.encode_language(&batch(), &langs).unwrap();
    for r in [0, 2] {
        assert_eq!(out.mu.row(r), base.mu.row(r));
    }
    assert_ne!(out.mu.row(1), base.mu.row(1));
}

#[test]
fn single_encoder_has_fewer_parameters() {
    let twin = Model::<f64>::new(tiny(), 0).unwrap();
    let single = Model::<f64>::new(
        ModelConfig {
            single_encoder: true,
            ..tiny()
        },
        0,
    )
    .unwrap();
    assert!(single.num_params() < twin.num_params());
    assert!(single.params().contains("enc.shared.layer0.attn.q.w"));
    assert!(single.params().contains("head.lang0.mu.w"));
    assert!(single.params().contains("head.sem.mu.w"));
}

#[test]
fn factored_projection_parameter_difference() {
    let full = Model::<f64>::new(tiny(), 0).unwrap();
    let fact = Model::<f64>::new(
        ModelConfig {
            factored_projection: true,
            ..tiny()
        },
        0,
    )
    .unwrap();
    let (d, v) = (16, 20);
    let diff = full.num_params() as i64 - fact.num_params() as i64;
    assert_eq!(diff, (3 * d * v) as i64 - (d * v + 3 * d * d) as i64);
    let out = |m: &Model<f64>| m.params().num_scalars_with_prefix("dec.out.w");
    assert_eq!(out(&full), 3 * d * v);
    assert_eq!(out(&fact), d * v + 3 * d * d);
}

#[test]
fn reparameterize_examples() {
    let post = GaussianPosterior {
        mu: Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap(),
        log_var: Tensor::from_f64(&[1, 3], &[0.3, 0.0, -2.0]).unwrap(),
    };
    assert_eq!(post.sample(&Tensor::zeros(&[1, 3])).unwrap(), post.mu);

    let unit = GaussianPosterior {
        mu: post.mu.clone(),
        log_var: Tensor::zeros(&[1, 3]),
    };
    let e = Tensor::from_f64(&[1, 3], &[0.25, -0.5, 1.0]).unwrap();
    let z = unit.sample(&e).unwrap();
    assert_eq!(z.data(), &[0.75, -1.5, 3.0]);

    let mut tape = Tape::<f64>::new();
    let mu = tape.leaf(post.mu.clone());
    let lv = tape.leaf(post.log_var.clone());
    let z = reparameterize(&mut tape, PosteriorVars { mu, log_var: lv }, &e).unwrap();
    assert_eq!(tape.value(z), &post.sample(&e).unwrap());
}

#[test]
fn reparameterized_draws_have_posterior_mean() {
    let n = 1_000_000;
    let (mu, lv) = (0.7_f64, 0.5_f64);
    let sigma = (0.5 * lv).exp();
    let post = GaussianPosterior {
        mu: Tensor::full(&[n, 1], mu),
        log_var: Tensor::full(&[n, 1], lv),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = standard_normal::<f64, _>(&mut rng, &[n, 1]);
    let z = post.sample(&noise).unwrap();
    let mean = z.data().iter().sum::<f64>() / n as f64;
    assert!((mean - mu).abs() < 4.0 * sigma / (n as f64).sqrt());
}

#[test]
fn zero_model_gives_uniform_logits() {
    let m = Model::<f64>::zeros(tiny()).unwrap();
    let z = Tensor::from_f64(&[3, 4], &[0.3; 12]).unwrap();
    let logits = m.decode_logits(&z, &z, &batch(), &[0, 1, 2]).unwrap();
    assert_eq!(logits.shape(), &[3 * 5, 20]);
    assert!(logits.data().iter().all(|&x| x == 0.0));
}

#[test]
fn decoder_rejects_long_targets() {
    let m = Model::<f64>::new(tiny(), 0).unwrap();
    let long = TokenBatch::from_sequences(&[vec![1; 10]], 0).unwrap();
    let z = Tensor::zeros(&[1, 4]);
    assert!(matches!(
        m.decode_logits(&z, &z, &long, &[0]),
        Err(Error::Length { .. })
    ));
    assert!(matches!(m.encode_semantic(&long), Err(Error::Length { .. })));
}

#[test]
fn unknown_language_is_config_error() {
    let m = Model::<f64>::new(tiny(), 0).unwrap();
    assert!(matches!(
        m.encode_language(&batch(), &[0, 1, 3]),
        Err(Error::Config { .. })
    ));
}

#[test]
fn invalid_configs_name_the_field() {
    let cases = [
        (ModelConfig { n_heads: 3, ..tiny() }, "n_heads"),
        (
            ModelConfig {
                latent_dim: 0,
                ..tiny()
            },
            "latent_dim",
        ),
        (ModelConfig { max_len: 1, ..tiny() }, "max_len"),
        (
            ModelConfig {
                n_languages: 1,
                ..tiny()
            },
            "n_languages",
        ),
        (
            ModelConfig {
                n_language_encoders: 4,
                ..tiny()
            },
            "n_language_encoders",
        ),
        (
            ModelConfig {
                vocab_size: 7,
                ..tiny()
            },
            "vocab_size",
        ),
    ];
    for (cfg, field) in cases {
        match cfg.validate() {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
}

#[test]
fn log_variance_stays_clamped_under_large_weights() {
    let mut m = Model::<f64>::new(tiny(), 8).unwrap();
    for x in m.params_mut().get_mut("head.lang0.logvar.w").unwrap().data_mut() {
        *x *= 1e4;
    }
    for x in m.params_mut().get_mut("head.sem.logvar.b").unwrap().data_mut() {
        *x = -1e6;
    }
    let s = m.encode_semantic(&batch()).unwrap();
    let l = m.encode_language(&batch(), &[0, 1, 2]).unwrap();
    for &v in s.log_var.data().iter().chain(l.log_var.data()) {
        assert!((-10.0..=10.0).contains(&v));
        let sd = (0.5 * v).exp();
        assert!(sd >= (-5.0f64).exp() && sd <= 5.0f64.exp());
    }
    assert!(l.log_var.data().iter().any(|&v| v.abs() == 10.0));
}

#[test]
fn decoder_start_token_follows_flag() {
    let m = Model::<f64>::new(tiny(), 9).unwrap();
    let z = Tensor::from_f64(&[1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let t = TokenBatch::from_sequences(&[vec![1, 9, 2]], 0).unwrap();
    let l0 = m.decode_logits(&z, &z, &t, &[0]).unwrap();
    let l1 = m.decode_logits(&z, &z, &t, &[1]).unwrap();
    assert_ne!(l0, l1);

    let off = Model::<f64>::new(
        ModelConfig {
            use_decoder_lang_emb: false,
            ..tiny()
        },
        9,
    )
    .unwrap();
    let l0 = off.decode_logits(&z, &z, &t, &[0]).unwrap();
    let l1 = off.decode_logits(&z, &z, &t, &[1]).unwrap();
    assert_eq!(l0, l1);
    assert_eq!(tokens::lang_start(1), 5);
}

#[test]
fn graph_and_frozen_forward_agree() {
    let m = Model::<f64>::new(tiny(), 10).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&m, &mut tape);
    let p = g.encode_semantic(&mut tape, &batch()).unwrap();
    assert_eq!(tape.value(p.mu), &m.encode_semantic(&batch()).unwrap().mu);
}

fn causality_holds(layers: usize, seed: u64, pos: usize, replacement: usize) {
    let cfg = ModelConfig {
        n_dec_layers: layers,
        ..tiny()
    };
    let m = Model::<f64>::new(cfg, seed).unwrap();
    let z = standard_normal::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed), &[1, 4]);
    let row = vec![1, 9, 10, 11, 12, 13, 2];
    let mut changed = row.clone();
    changed[pos] = replacement;
    let a = m
        .decode_logits(&z, &z, &TokenBatch::from_sequences(&[row], 0).unwrap(), &[1])
        .unwrap();
    let b = m
        .decode_logits(&z, &z, &TokenBatch::from_sequences(&[changed], 0).unwrap(), &[1])
        .unwrap();
    // Logit row s predicts target token s+1, so target position t = pos−1.
    let t = pos - 1;
    for s in 0..t {
        assert_eq!(a.row(s), b.row(s), "layers={layers} pos={pos} s={s}");
    }
    if replacement != 9 + pos - 1 {
        assert_ne!(a.row(t + 1), b.row(t + 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn decoder_is_causal(layers in 1usize..=2, seed in 0u64..1000, pos in 1usize..6, tok in 7usize..20) {
        causality_holds(layers, seed, pos, tok);
    }
}
