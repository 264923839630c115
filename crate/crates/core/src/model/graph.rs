use numcore::{Bound, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{lang_stack, sem_stack, Model, TokenBatch, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::tokens;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Tape handles of a posterior's mean and clamped log-variance.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Decoder logits with the teacher-forcing targets they score.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[rows·steps × V]`.
    pub logits: Var,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub steps: usize,
}

enum AttnMask<F: Real> {
    None,
    /// Additive `[B·H × T × T]` key-padding mask.
    Padding(Tensor<F>),
    /// Additive `[T × T]` causal mask, tiled over batch and heads.
    Causal(Var),
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// One forward pass of a model on a tape.
pub struct Graph<'m, F: Real> {
    model: &'m Model<F>,
    params: Bound,
    dropout: Option<Dropout>,
}

impl<'m, F: Real> Graph<'m, F> {
    /// Binds parameters as differentiable leaves.
    pub fn new(model: &'m Model<F>, tape: &mut Tape<F>) -> Self {
        Graph {
            model,
            params: model.params().bind(tape),
            dropout: None,
        }
    }

    /// Uses parameters already bound on the tape (names must match the model's).
    pub fn from_bound(model: &'m Model<F>, params: Bound) -> Self {
        Graph {
            model,
            params,
            dropout: None,
        }
    }

    /// Binds parameters as constants (inference only).
    pub(crate) fn frozen(model: &'m Model<F>, tape: &mut Tape<F>) -> Self {
        Graph {
            model,
            params: model.params().bind_frozen(tape),
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = (rate > 0.0).then_some(Dropout { rate, rng });
        self
    }

    pub fn params(&self) -> &Bound {
        &self.params
    }

    fn p(&self, name: &str) -> Var {
        self.params[name]
    }

    fn linear(&self, tape: &mut Tape<F>, x: Var, name: &str) -> Result<Var> {
        let y = tape.matmul(x, self.p(&format!("{name}.w")))?;
        Ok(tape.add_tiled(y, self.p(&format!("{name}.b")))?)
    }

    fn norm(&self, tape: &mut Tape<F>, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        Ok(tape.layer_norm(x, g, b, F::from_f64_lossy(LN_EPS))?)
    }

    fn dropout(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = F::from_f64_lossy(1.0 / (1.0 - d.rate));
        let n = tape.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if d.rng.random::<f64>() < d.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        Ok(tape.mul_const(x, mask)?)
    }

    fn attention(
        &mut self,
        tape: &mut Tape<F>,
        x: Var,
        batch: usize,
        seq: usize,
        prefix: &str,
        mask: &AttnMask<F>,
    ) -> Result<Var> {
        let c = self.model.config();
        let h = c.n_heads;
        let q = self.linear(tape, x, &format!("{prefix}.q"))?;
        let k = self.linear(tape, x, &format!("{prefix}.k"))?;
        let v = self.linear(tape, x, &format!("{prefix}.v"))?;
        let q = tape.split_heads(q, batch, seq, h)?;
        let k = tape.split_heads(k, batch, seq, h)?;
        let v = tape.split_heads(v, batch, seq, h)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, F::from_f64_lossy(1.0 / (c.head_dim() as f64).sqrt()));
        let scores = match mask {
            AttnMask::None => scores,
            AttnMask::Padding(m) => tape.add_const(scores, m)?,
            AttnMask::Causal(m) => tape.add_tiled(scores, *m)?,
        };
        let probs = tape.softmax(scores, 2)?;
        let probs = self.dropout(tape, probs)?;
        let out = tape.matmul(probs, v)?;
        let out = tape.merge_heads(out, batch, seq, h)?;
        self.linear(tape, out, &format!("{prefix}.o"))
    }

    fn feed_forward(&mut self, tape: &mut Tape<F>, x: Var, prefix: &str) -> Result<Var> {
        let hdn = self.linear(tape, x, &format!("{prefix}.1"))?;
        let hdn = tape.gelu(hdn);
        let hdn = self.dropout(tape, hdn)?;
        self.linear(tape, hdn, &format!("{prefix}.2"))
    }

    fn positions(&self, tape: &mut Tape<F>, x: Var, table: &str, seq: usize) -> Result<Var> {
        let idx: Vec<usize> = (0..seq).collect();
        let pos = tape.gather_rows(self.p(table), &idx)?;
        Ok(tape.add_tiled(x, pos)?)
    }

    fn padding_mask(&self, batch: &TokenBatch) -> AttnMask<F> {
        if batch.mask().iter().all(|&m| m) {
            return AttnMask::None;
        }
        let (b, t, h) = (batch.rows(), batch.seq(), self.model.config().n_heads);
        let neg = F::from_f64_lossy(MASKED);
        let mut data = Vec::with_capacity(b * h * t * t);
        for r in 0..b {
            let keys: Vec<F> = batch
                .row_mask(r)
                .iter()
                .map(|&m| if m { F::zero() } else { neg })
                .collect();
            for _ in 0..h * t {
                data.extend_from_slice(&keys);
            }
        }
        AttnMask::Padding(Tensor::from_vec(&[b * h, t, t], data).expect("sized"))
    }

    /// Runs encoder stack `stack` and mean-pools its output to `[rows × d]`.
    fn encoder_stack(
        &mut self,
        tape: &mut Tape<F>,
        stack: &str,
        batch: &TokenBatch,
        langs: Option<&[usize]>,
    ) -> Result<Var> {
        let c = self.model.config();
        let (rows, seq) = (batch.rows(), batch.seq());
        if seq > c.max_len {
            return Err(Error::Length {
                len: seq,
                max_len: c.max_len,
            });
        }
        let mut x = tape.gather_rows(self.p("embed.token"), batch.ids())?;
        if let Some(langs) = langs {
            let per_token: Vec<usize> = langs.iter().flat_map(|&l| std::iter::repeat_n(l, seq)).collect();
            let le = tape.gather_rows(self.p("embed.language"), &per_token)?;
            x = tape.add(x, le)?;
        }
        x = self.positions(tape, x, &format!("{stack}.pos"), seq)?;
        let mask = self.padding_mask(batch);
        for l in 0..c.n_enc_layers {
            let p = format!("{stack}.layer{l}");
            let h = self.norm(tape, x, &format!("{p}.ln1"))?;
            let h = self.attention(tape, h, rows, seq, &format!("{p}.attn"), &mask)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, x, &format!("{p}.ln2"))?;
            let h = self.feed_forward(tape, h, &format!("{p}.ff"))?;
            x = tape.add(x, h)?;
        }
        x = self.norm(tape, x, &format!("{stack}.ln_f"))?;
        Ok(tape.masked_mean_pool(x, &batch.mask_as::<F>(), seq)?)
    }

    fn head(&self, tape: &mut Tape<F>, pooled: Var, head: &str) -> Result<PosteriorVars> {
        let mu = self.linear(tape, pooled, &format!("{head}.mu"))?;
        let lv = self.linear(tape, pooled, &format!("{head}.logvar"))?;
        let log_var = tape.clamp(lv, F::from_f64_lossy(LOG_VAR_MIN), F::from_f64_lossy(LOG_VAR_MAX));
        Ok(PosteriorVars { mu, log_var })
    }

    /// Semantic posterior; the encoder never sees a language id.
    pub fn encode_semantic(&mut self, tape: &mut Tape<F>, batch: &TokenBatch) -> Result<PosteriorVars> {
        let stack = sem_stack(self.model.config());
        let pooled = self.encoder_stack(tape, stack, batch, None)?;
        self.head(tape, pooled, "head.sem")
    }

    /// Language posterior of each row under its own language's encoder.
    pub fn encode_language(
        &mut self,
        tape: &mut Tape<F>,
        batch: &TokenBatch,
        langs: &[usize],
    ) -> Result<PosteriorVars> {
        let c = self.model.config().clone();
        if langs.len() != batch.rows() {
            return Err(Error::Contract(format!(
                "{} language ids for {} rows",
                langs.len(),
                batch.rows()
            )));
        }
        for &l in langs {
            c.check_language(l)?;
        }
        let emb_langs = c.use_encoder_lang_emb.then_some(langs);
        if c.n_language_encoders == 1 {
            let pooled = self.encoder_stack(tape, &lang_stack(&c, 0), batch, emb_langs)?;
            return self.head(tape, pooled, "head.lang0");
        }
        let mut mus = Vec::new();
        let mut lvs = Vec::new();
        let mut order = Vec::with_capacity(batch.rows());
        for e in 0..c.n_language_encoders {
            let rows: Vec<usize> = (0..batch.rows())
                .filter(|&r| c.language_encoder_of(langs[r]) == e)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let sub = batch.select(&rows);
            let sub_langs: Vec<usize> = rows.iter().map(|&r| langs[r]).collect();
            let sub_emb = emb_langs.map(|_| sub_langs.as_slice());
            let pooled = self.encoder_stack(tape, &lang_stack(&c, e), &sub, sub_emb)?;
            let post = self.head(tape, pooled, &format!("head.lang{e}"))?;
            mus.push(post.mu);
            lvs.push(post.log_var);
            order.extend(rows);
        }
        let mut inverse = vec![0; order.len()];
        for (pos, &r) in order.iter().enumerate() {
            inverse[r] = pos;
        }
        let mu = tape.concat_rows(&mus)?;
        let log_var = tape.concat_rows(&lvs)?;
        Ok(PosteriorVars {
            mu: tape.gather_rows(mu, &inverse)?,
            log_var: tape.gather_rows(log_var, &inverse)?,
        })
    }

    /// Teacher-forced decoder over `targets` conditioned on `[z_sem; z_lang]`.
    ///
    /// Each target row `[BOS, w…, EOS, PAD…]` is read with its first token
    /// replaced by the language start token (or kept as BOS when decoder
    /// language tokens are disabled); position `t` predicts row token `t+1`.
    pub fn decode_logits(
        &mut self,
        tape: &mut Tape<F>,
        z_sem: Var,
        z_lang: Var,
        targets: &TokenBatch,
        langs: &[usize],
    ) -> Result<DecoderOutput> {
        let c = self.model.config().clone();
        let (rows, seq) = (targets.rows(), targets.seq());
        if seq > c.max_len + 1 {
            return Err(Error::Length {
                len: seq - 1,
                max_len: c.max_len,
            });
        }
        if seq < 2 {
            return Err(Error::EmptySequence { row: 0 });
        }
        if langs.len() != rows {
            return Err(Error::Contract(format!("{} language ids for {rows} rows", langs.len())));
        }
        let steps = seq - 1;
        let mut input = Vec::with_capacity(rows * steps);
        let mut tgt = Vec::with_capacity(rows * steps);
        let mut mask = Vec::with_capacity(rows * steps);
        for (r, &lang) in langs.iter().enumerate() {
            c.check_language(lang)?;
            let row = targets.row(r);
            let m = targets.row_mask(r);
            input.push(if c.use_decoder_lang_emb {
                tokens::lang_start(lang)
            } else {
                tokens::BOS
            });
            input.extend_from_slice(&row[1..steps]);
            tgt.extend_from_slice(&row[1..]);
            mask.extend_from_slice(&m[1..]);
        }

        let mut x = tape.gather_rows(self.p("embed.token"), &input)?;
        x = self.positions(tape, x, "dec.pos", steps)?;
        let neg = F::from_f64_lossy(MASKED);
        let causal: Vec<F> = (0..steps * steps)
            .map(|i| if i % steps > i / steps { neg } else { F::zero() })
            .collect();
        let causal = tape.constant(Tensor::from_vec(&[steps, steps], causal)?);
        let mask_attn = AttnMask::Causal(causal);
        for l in 0..c.n_dec_layers {
            let p = format!("dec.layer{l}");
            let h = self.norm(tape, x, &format!("{p}.ln1"))?;
            let h = self.attention(tape, h, rows, steps, &format!("{p}.attn"), &mask_attn)?;
            x = tape.add(x, h)?;
            let s = tape.matmul(z_sem, self.p(&format!("{p}.inject.sem.w")))?;
            let lg = tape.matmul(z_lang, self.p(&format!("{p}.inject.lang.w")))?;
            let inj = tape.add(s, lg)?;
            let inj = tape.add_tiled(inj, self.p(&format!("{p}.inject.b")))?;
            let inj = tape.repeat_rows(inj, steps)?;
            x = tape.add(x, inj)?;
            let h = self.norm(tape, x, &format!("{p}.ln2"))?;
            let h = self.feed_forward(tape, h, &format!("{p}.ff"))?;
            x = tape.add(x, h)?;
        }
        let h = self.norm(tape, x, "dec.ln_f")?;
        let ms = self.linear(tape, z_sem, "dec.logit.sem")?;
        let ms = tape.repeat_rows(ms, steps)?;
        let ml = self.linear(tape, z_lang, "dec.logit.lang")?;
        let ml = tape.repeat_rows(ml, steps)?;
        let cat = tape.concat_cols(&[h, ms, ml])?;
        let logits = if c.factored_projection {
            let r = tape.matmul(cat, self.p("dec.out.w1"))?;
            tape.matmul(r, self.p("dec.out.w2"))?
        } else {
            tape.matmul(cat, self.p("dec.out.w"))?
        };
        let logits = tape.add_tiled(logits, self.p("dec.out.b"))?;
        Ok(DecoderOutput {
            logits,
            targets: tgt,
            mask,
            rows,
            steps,
        })
    }
}
