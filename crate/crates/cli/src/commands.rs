use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vmsst::corpus::{examples, frame, generate_corpus, make_batches, read_gold, CorpusFiles, Vocab};
use vmsst::evalkit::{
    embed_framed, embed_sentences, evaluate, mine_pairs, overall_score, EmbeddingMatrix, EvalReport, MiningMethod,
    ScoreInputs,
};
use vmsst::model::Model;
use vmsst::objectives::Objective;
use vmsst::trainer::{checkpoint_load, checkpoint_save, Checkpoint, LossLog, TrainState};
use vmsst::Error;

use crate::config::Loaded;
use crate::{Cli, Command, EmbedArgs, EvalArgs, GenArgs, MineArgs, ScoreArgs, TrainArgs};

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const MANIFEST: &str = "manifest.json";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Embed(a) => embed(cli, a),
        Command::Mine(a) => mine(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Score(a) => score(a),
    }
}

fn load(cli: &Cli) -> Result<Loaded> {
    Loaded::load(cli.config.as_deref(), cli.seed, |_| {})
}

fn config_error(field: &str, message: impl Into<String>) -> anyhow::Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
    .into()
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(cli: &Cli, args: &GenArgs) -> Result<()> {
    let loaded = load(cli)?;
    let cfg = &loaded.config;
    let out = args.out.clone().unwrap_or_else(|| loaded.corpus_dir());
    let corpus = generate_corpus(&cfg.corpus)?;
    let files = CorpusFiles::new(&out);
    let written = files.write(&corpus)?;
    let names: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    write_json(
        &files.manifest(),
        &json!({
            "created_unix": unix_time(),
            "seed": cfg.corpus.seed,
            "config_hash": loaded.config.hash(),
            "corpus": cfg.corpus,
            "vocab_size": corpus.vocab.len(),
            "train_pairs": corpus.train.len(),
            "files": names,
        }),
    )?;
    if !cli.quiet {
        println!(
            "wrote {} files ({} training pairs, {} tokens) to {}",
            written.len(),
            corpus.train.len(),
            corpus.vocab.len(),
            out.display()
        );
    }
    Ok(())
}

fn check_vocab(found: Option<&[String]>, vocab: &Vocab) -> Result<()> {
    match found {
        Some(v) if v == vocab.tokens() => Ok(()),
        Some(_) => Err(config_error("vocab", "checkpoint vocabulary does not match the corpus")),
        None => Err(config_error("vocab", "checkpoint carries no vocabulary")),
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let loaded = Loaded::load(cli.config.as_deref(), cli.seed, |c| {
        if let Some(o) = args.objective {
            c.training.objective = o;
        }
        if let Some(s) = args.steps {
            c.training.steps = s;
        }
    })?;
    let cfg = &loaded.config;
    let files = CorpusFiles::new(args.corpus.clone().unwrap_or_else(|| loaded.corpus_dir()));
    let dir = args.out.clone().unwrap_or_else(|| loaded.checkpoint_dir());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let latest = dir.join(LATEST_CHECKPOINT);

    let vocab = files.read_vocab()?;
    if vocab.len() != cfg.model.vocab_size {
        return Err(config_error(
            "model.vocab_size",
            format!(
                "{} but {} holds {} tokens",
                cfg.model.vocab_size,
                files.vocab().display(),
                vocab.len()
            ),
        ));
    }
    let pairs = files.read_train(&vocab)?;
    let mut batcher = make_batches(
        examples(&pairs, cfg.model.max_len),
        cfg.training.batch_size,
        cfg.training.seed,
    )?;

    let mut state = if args.resume {
        let Checkpoint {
            mut state,
            vocab: saved,
        } = checkpoint_load::<f32>(&latest).with_context(|| format!("resuming from {}", latest.display()))?;
        check_vocab(saved.as_deref(), &vocab)?;
        if state.model.config() != &cfg.model {
            return Err(config_error("model", "differs from the checkpoint's model"));
        }
        state.config.steps = cfg.training.steps;
        if state.config != cfg.training {
            return Err(config_error(
                "training",
                "differs from the checkpoint's settings (only steps may change)",
            ));
        }
        state
    } else {
        TrainState::new(cfg.training.clone(), Model::new(cfg.model.clone(), cfg.training.seed)?)?
    };

    let log_path = dir.join(LOSS_CSV);
    let mut log = if args.resume {
        LossLog::resume(&log_path, state.step)?
    } else {
        LossLog::create(&log_path)?
    };
    let eval_sets = if cfg.training.eval_every > 0 {
        Some(files.read_eval(&vocab)?)
    } else {
        None
    };
    let opts = cfg.eval_options();
    let total = cfg.training.steps;
    let every = cfg.training.checkpoint_every;
    let tokens = vocab.tokens();
    let start = state.step;

    state.run(&mut batcher, |s, rec| {
        log.append(rec)?;
        if every > 0 && rec.step % every == 0 {
            log.flush()?;
            checkpoint_save(s, Some(tokens), &dir.join(format!("step-{:06}.ckpt", rec.step)))?;
            checkpoint_save(s, Some(tokens), &latest)?;
        }
        if !cli.quiet && (rec.step % 100 == 0 || rec.step == total) {
            eprintln!(
                "step {:>6}/{total}  loss {:.4}  lr {:.2e}  kl_w {:.3}",
                rec.step, rec.loss.total, rec.lr, rec.kl_weight
            );
        }
        if let Some(sets) = &eval_sets {
            if rec.step % cfg.training.eval_every == 0 {
                let r = evaluate(&s.model, sets, &opts)?;
                if !cli.quiet {
                    eprintln!(
                        "step {:>6}  pair accuracy {:.1}  score {:.1}",
                        rec.step, r.tatoeba_acc, r.overall_score
                    );
                }
            }
        }
        Ok(true)
    })?;
    log.flush()?;
    checkpoint_save(&state, Some(tokens), &latest)?;
    write_json(
        &dir.join(MANIFEST),
        &json!({
            "created_unix": unix_time(),
            "seed": cfg.training.seed,
            "config_hash": cfg.hash(),
            "objective": state.config.objective,
            "resumed_from": args.resume.then_some(start),
            "steps": state.step,
            "parameters": state.model.num_params(),
        }),
    )?;
    if !cli.quiet {
        println!(
            "trained {} to step {} -> {}",
            state.config.objective,
            state.step,
            latest.display()
        );
    }
    Ok(())
}

fn load_checkpoint(loaded: &Loaded, path: &Option<PathBuf>) -> Result<(Checkpoint<f32>, PathBuf)> {
    let path = path
        .clone()
        .unwrap_or_else(|| loaded.checkpoint_dir().join(LATEST_CHECKPOINT));
    let ck = checkpoint_load::<f32>(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ck, path))
}

fn embed(cli: &Cli, args: &EmbedArgs) -> Result<()> {
    let loaded = load(cli)?;
    let (ck, _) = load_checkpoint(&loaded, &args.checkpoint)?;
    let tokens = ck
        .vocab
        .clone()
        .ok_or_else(|| config_error("checkpoint", "carries no vocabulary"))?;
    let vocab = Vocab::from_tokens(tokens)?;
    if args.column == 0 {
        return Err(config_error("column", "columns are 1-based"));
    }
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let max_len = ck.state.model.config().max_len;
    let mut seqs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let field = line.split('\t').nth(args.column - 1).ok_or_else(|| {
            Error::Format(format!(
                "{} line {}: no column {}",
                args.input.display(),
                n + 1,
                args.column
            ))
        })?;
        let words: Vec<&str> = field.split_whitespace().collect();
        let ids = vocab
            .ids(&words)
            .with_context(|| format!("{} line {}", args.input.display(), n + 1))?;
        seqs.push(frame(&ids, max_len));
    }
    if seqs.is_empty() {
        bail!(Error::Format(format!("{} has no lines", args.input.display())));
    }
    let m = embed_framed(&ck.state.model, &seqs)?;
    m.write(&args.out)?;
    if !cli.quiet {
        println!("embedded {} rows (dim {}) -> {}", m.rows(), m.dim(), args.out.display());
    }
    Ok(())
}

fn mine(cli: &Cli, args: &MineArgs) -> Result<()> {
    let loaded = load(cli)?;
    let mut opts = loaded.config.margin_options();
    if let Some(k) = args.k_nn {
        if k == 0 {
            return Err(config_error("k_nn", "must be at least 1"));
        }
        opts.k_nn = k;
    }
    let src = EmbeddingMatrix::read(&args.src)?;
    let tgt = EmbeddingMatrix::read(&args.tgt)?;
    let gold: Vec<(usize, usize)> = read_gold(&args.gold, 2)?.into_iter().map(|r| (r[0], r[1])).collect();
    let result = mine_pairs(&src, &tgt, args.method, &gold, &opts)?;
    match &args.out {
        Some(p) => write_json(p, &result)?,
        None => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    if !cli.quiet && args.out.is_some() {
        println!(
            "{}: P {:.3}  R {:.3}  F1 {:.3}",
            args.method, result.precision, result.recall, result.f1
        );
    }
    Ok(())
}

/// Mining summary of one language and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningSummary {
    pub lang: usize,
    pub method: MiningMethod,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_gold: usize,
}

/// What `eval` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDocument {
    pub config_hash: String,
    pub seed: u64,
    pub corpus_seed: u64,
    pub objective: Objective,
    pub step: u64,
    pub metrics: EvalReport,
    pub mining: Vec<MiningSummary>,
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let loaded = load(cli)?;
    let cfg = &loaded.config;
    let (ck, _) = load_checkpoint(&loaded, &args.checkpoint)?;
    let files = CorpusFiles::new(args.corpus.clone().unwrap_or_else(|| loaded.corpus_dir()));
    let vocab = files.read_vocab()?;
    check_vocab(ck.vocab.as_deref(), &vocab)?;
    let sets = files.read_eval(&vocab)?;
    let model = &ck.state.model;
    let opts = vmsst::evalkit::EvalOptions {
        max_len: model.config().max_len,
        ..cfg.eval_options()
    };
    let metrics = evaluate(model, &sets, &opts)?;

    let mut mining = Vec::new();
    for set in &sets.mining {
        let src = embed_sentences(model, &set.src.iter().collect::<Vec<_>>(), opts.max_len)?;
        let tgt = embed_sentences(model, &set.tgt.iter().collect::<Vec<_>>(), opts.max_len)?;
        for &method in &cfg.eval.methods {
            let r = mine_pairs(&src, &tgt, method, &set.gold, &opts.margin)?;
            mining.push(MiningSummary {
                lang: set.lang,
                method,
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
                n_gold: r.n_gold,
            });
        }
    }
    let doc = EvalDocument {
        config_hash: cfg.hash(),
        seed: ck.state.config.seed,
        corpus_seed: cfg.corpus.seed,
        objective: ck.state.config.objective,
        step: ck.state.step,
        metrics,
        mining,
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| loaded.report_dir().join(&cfg.eval.report));
    write_json(&out, &doc)?;
    if !cli.quiet {
        println!("{}", doc.metrics);
    }
    Ok(())
}

fn score(args: &ScoreArgs) -> Result<()> {
    let inputs = match (&args.values, &args.report) {
        (Some(v), _) if v.len() != 7 => bail!(config_error("values", format!("expected 7 values, got {}", v.len()))),
        (Some(v), _) => ScoreInputs {
            sts_english: Some(v[0]),
            sts_crosslingual: Some(v[1]),
            tatoeba_acc: Some(v[2]),
            bucc_cosine_f1: Some(v[3]),
            bucc_margin_f1: Some(v[4]),
            retrieval_r1_primary: Some(v[5]),
            retrieval_r1_multilingual: Some(v[6]),
        },
        (None, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            let parsed = if value.get("metrics").is_some() {
                serde_json::from_value::<EvalDocument>(value).map(|d| d.metrics.inputs())
            } else {
                serde_json::from_value::<ScoreInputs>(value)
            };
            parsed.map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        (None, None) => bail!(config_error("score", "give --report or --values")),
    };
    println!("{:.1}", overall_score(&inputs)?);
    Ok(())
}
