//! Twin-encoder variational encoder–decoder over a shared token embedding.

mod batch;
mod config;
mod graph;

pub use batch::{PairBatch, Side, TokenBatch};
pub use config::ModelConfig;
pub use graph::{DecoderOutput, Graph, PosteriorVars};

use numcore::{ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Rows embedded per forward pass by the tape-free helpers.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot-uniform over `(fan_in, fan_out)`.
    Glorot(usize, usize),
}

fn layer_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: &ModelConfig) {
    let d = c.model_dim;
    let mut lin = |name: String, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o], Init::Glorot(i, o)));
        out.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    for proj in ["q", "k", "v", "o"] {
        lin(format!("{prefix}.attn.{proj}"), d, d);
    }
    lin(format!("{prefix}.ff.1"), d, c.ff_dim);
    lin(format!("{prefix}.ff.2"), c.ff_dim, d);
    for ln in ["ln1", "ln2"] {
        out.push((format!("{prefix}.{ln}.g"), vec![d], Init::Ones));
        out.push((format!("{prefix}.{ln}.b"), vec![d], Init::Zeros));
    }
}

fn final_norm(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.ln_f.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}.ln_f.b"), vec![d], Init::Zeros));
}

fn linear(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize) {
    out.push((format!("{name}.w"), vec![i, o], Init::Glorot(i, o)));
    out.push((format!("{name}.b"), vec![o], Init::Zeros));
}

pub(crate) fn sem_stack(c: &ModelConfig) -> &'static str {
    if c.single_encoder {
        "enc.shared"
    } else {
        "enc.sem"
    }
}

pub(crate) fn lang_stack(c: &ModelConfig, encoder: usize) -> String {
    if c.single_encoder {
        "enc.shared".to_string()
    } else {
        format!("enc.lang{encoder}")
    }
}

fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, k, v) = (c.model_dim, c.latent_dim, c.vocab_size);
    let mut out = vec![
        ("embed.token".to_string(), vec![v, d], Init::Normal(0.1)),
        ("embed.language".to_string(), vec![c.n_languages, d], Init::Normal(0.1)),
    ];
    let mut stacks = vec![sem_stack(c).to_string()];
    if !c.single_encoder {
        stacks.extend((0..c.n_language_encoders).map(|e| lang_stack(c, e)));
    }
    for s in &stacks {
        out.push((format!("{s}.pos"), vec![c.max_len, d], Init::Normal(0.1)));
        for l in 0..c.n_enc_layers {
            layer_shapes(&mut out, &format!("{s}.layer{l}"), c);
        }
        final_norm(&mut out, s, d);
    }
    let heads =
        std::iter::once("head.sem".to_string()).chain((0..c.n_language_encoders).map(|e| format!("head.lang{e}")));
    for h in heads {
        linear(&mut out, &format!("{h}.mu"), d, k);
        linear(&mut out, &format!("{h}.logvar"), d, k);
    }
    out.push(("dec.pos".to_string(), vec![c.max_len, d], Init::Normal(0.1)));
    for l in 0..c.n_dec_layers {
        let p = format!("dec.layer{l}");
        layer_shapes(&mut out, &p, c);
        out.push((format!("{p}.inject.sem.w"), vec![k, d], Init::Glorot(k, d)));
        out.push((format!("{p}.inject.lang.w"), vec![k, d], Init::Glorot(k, d)));
        out.push((format!("{p}.inject.b"), vec![d], Init::Zeros));
    }
    final_norm(&mut out, "dec", d);
    linear(&mut out, "dec.logit.sem", k, d);
    linear(&mut out, "dec.logit.lang", k, d);
    if c.factored_projection {
        out.push(("dec.out.w1".to_string(), vec![3 * d, d], Init::Glorot(3 * d, d)));
        out.push(("dec.out.w2".to_string(), vec![d, v], Init::Glorot(d, v)));
    } else {
        out.push(("dec.out.w".to_string(), vec![3 * d, v], Init::Glorot(3 * d, v)));
    }
    out.push(("dec.out.b".to_string(), vec![v], Init::Zeros));
    out
}

/// Mean and log-variance of a diagonal Gaussian, one row per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<F: Real> {
    pub mu: Tensor<F>,
    pub log_var: Tensor<F>,
}

impl<F: Real> GaussianPosterior<F> {
    /// `μ + exp(½·log σ²) ⊙ noise`.
    pub fn sample(&self, noise: &Tensor<F>) -> Result<Tensor<F>> {
        if noise.shape() != self.mu.shape() {
            return Err(numcore::NumError::Shape {
                op: "reparameterize",
                lhs: self.mu.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            }
            .into());
        }
        let half = F::from_f64_lossy(0.5);
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.log_var.data())
            .zip(noise.data())
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect();
        Ok(Tensor::from_vec(self.mu.shape(), data)?)
    }
}

/// Standard-normal draws, sampled in f64 so both precisions see the same noise.
pub fn standard_normal<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            F::from_f64_lossy(x)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// `z = μ + exp(½·log σ²) ⊙ noise`, differentiable in μ and log σ².
pub fn reparameterize<F: Real>(tape: &mut Tape<F>, post: PosteriorVars, noise: &Tensor<F>) -> Result<Var> {
    let half = tape.scale(post.log_var, F::from_f64_lossy(0.5));
    let std = tape.exp(half);
    let scaled = tape.mul_const(std, noise.data().to_vec())?;
    Ok(tape.add(post.mu, scaled)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real> {
    config: ModelConfig,
    params: ParamStore<F>,
}

impl<F: Real> Model<F> {
    /// Random initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| rng.sample(dist)).collect()
                }
                Init::Glorot(i, o) => {
                    let a = (6.0 / (i + o) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
                    (0..n).map(|_| rng.sample(dist)).collect()
                }
            };
            params.insert(name, Tensor::from_f64(&shape, &data)?);
        }
        Ok(Model { config, params })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, _) in param_layout(&config) {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(Model { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq() > self.config.max_len {
            return Err(Error::Length {
                len: batch.seq(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = batch.ids().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocabulary(format!("id {bad}")));
        }
        Ok(())
    }

    fn run<T>(
        &self,
        batch: &TokenBatch,
        f: impl Fn(&mut Graph<'_, F>, &mut Tape<F>, &TokenBatch) -> Result<T>,
    ) -> Result<T> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut g = Graph::frozen(self, &mut tape);
        f(&mut g, &mut tape, batch)
    }

    fn posterior_of(tape: &Tape<F>, p: PosteriorVars) -> GaussianPosterior<F> {
        GaussianPosterior {
            mu: tape.value(p.mu).clone(),
            log_var: tape.value(p.log_var).clone(),
        }
    }

    pub fn encode_semantic(&self, batch: &TokenBatch) -> Result<GaussianPosterior<F>> {
        self.run(batch, |g, tape, b| {
            let p = g.encode_semantic(tape, b)?;
            Ok(Self::posterior_of(tape, p))
        })
    }

    pub fn encode_language(&self, batch: &TokenBatch, langs: &[usize]) -> Result<GaussianPosterior<F>> {
        self.run(batch, |g, tape, b| {
            let p = g.encode_language(tape, b, langs)?;
            Ok(Self::posterior_of(tape, p))
        })
    }

    /// Teacher-forced logits `[rows·(seq−1) × V]` for `targets`.
    pub fn decode_logits(
        &self,
        z_sem: &Tensor<F>,
        z_lang: &Tensor<F>,
        targets: &TokenBatch,
        langs: &[usize],
    ) -> Result<Tensor<F>> {
        self.run(targets, |g, tape, b| {
            let zs = tape.constant(z_sem.clone());
            let zl = tape.constant(z_lang.clone());
            let out = g.decode_logits(tape, zs, zl, b, langs)?;
            Ok(tape.value(out.logits).clone())
        })
    }

    /// Sentence embeddings: the semantic posterior mean, `[rows × k]`.
    pub fn embed_sentences(&self, batch: &TokenBatch) -> Result<Tensor<F>> {
        Ok(self.encode_semantic(batch)?.mu)
    }

    /// Embeds unpadded sequences in chunks, preserving order.
    pub fn embed_sequences<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Tensor<F>> {
        let k = self.config.latent_dim;
        let mut data = Vec::with_capacity(seqs.len() * k);
        for chunk in seqs.chunks(EMBED_CHUNK) {
            let batch = TokenBatch::from_sequences(chunk, 0)?;
            data.extend_from_slice(self.embed_sentences(&batch)?.data());
        }
        Ok(Tensor::from_vec(&[seqs.len(), k], data)?)
    }
}
