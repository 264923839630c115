//! Training losses: the variational source-separation objective, its
//! translation-only and contrastive baselines, and their combination.

use std::fmt;
use std::str::FromStr;

use numcore::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reparameterize, standard_normal, DecoderOutput, Graph, PairBatch, PosteriorVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Contrastive,
    Bitranslation,
    Vmsst,
    VmsstContrastive,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Contrastive,
        Objective::Bitranslation,
        Objective::Vmsst,
        Objective::VmsstContrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Contrastive => "contrastive",
            Objective::Bitranslation => "bitranslation",
            Objective::Vmsst => "vmsst",
            Objective::VmsstContrastive => "vmsst_contrastive",
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Objective::Vmsst => 0.1,
            Objective::VmsstContrastive => 0.0005,
            _ => 0.0,
        }
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            Objective::Contrastive => 0.1,
            _ => 0.0,
        }
    }

    /// Whether the objective samples latents (and so uses the KL schedule).
    pub fn is_variational(self) -> bool {
        matches!(self, Objective::Vmsst | Objective::VmsstContrastive)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| {
            Error::config(
                "objective",
                format!("unknown objective `{s}` (expected contrastive, bitranslation, vmsst or vmsst_contrastive)"),
            )
        })
    }
}

/// Language input to the decoder in the translation terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationLanguage {
    /// Posterior mean of the target sentence's language variable.
    #[default]
    TargetMean,
    /// The prior mean (zero); the decoder sees only the semantic mean.
    PriorMean,
}

/// Scalar parts of one loss evaluation (batch means).
///
/// `translation_ab` scores sentence b decoded from the semantic mean of a;
/// `translation_ba` the reverse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_a: f64,
    pub recon_b: f64,
    pub kl_sem: f64,
    pub kl_lang_a: f64,
    pub kl_lang_b: f64,
    pub translation_ab: f64,
    pub translation_ba: f64,
    pub contrastive: f64,
    pub kl_weight: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.recon_a,
            self.recon_b,
            self.kl_sem,
            self.kl_lang_a,
            self.kl_lang_b,
            self.translation_ab,
            self.translation_ba,
            self.contrastive,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Negative ELBO at the recorded KL weight.
    pub fn neg_elbo(&self) -> f64 {
        self.recon_a + self.recon_b + self.kl_weight * (self.kl_sem + self.kl_lang_a + self.kl_lang_b)
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} recon_a={} recon_b={} kl_sem={} kl_lang_a={} kl_lang_b={} \
             translation_ab={} translation_ba={} contrastive={} kl_weight={} lambda={}",
            self.total,
            self.recon_a,
            self.recon_b,
            self.kl_sem,
            self.kl_lang_a,
            self.kl_lang_b,
            self.translation_ab,
            self.translation_ba,
            self.contrastive,
            self.kl_weight,
            self.lambda
        )
    }
}

/// Recorded loss plus its evaluated parts.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub kl_weight: f64,
    pub translation_language: TranslationLanguage,
}

/// `½ Σ_j (μ_j² + exp(log σ²_j) − 1 − log σ²_j)`, the KL divergence to `N(0, I)`.
pub fn kl_diag_gaussian(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// `Σ_r w_r · KL(q_r ‖ N(0, I))` over posterior rows.
pub fn kl_rows<F: Real>(tape: &mut Tape<F>, post: PosteriorVars, row_weights: &[F]) -> Result<Var> {
    let shape = tape.shape(post.mu).to_vec();
    let k = *shape.last().unwrap_or(&1);
    let sq = tape.square(post.mu);
    let var = tape.exp(post.log_var);
    let t = tape.add(sq, var)?;
    let t = tape.sub(t, post.log_var)?;
    let t = tape.add_const(t, &Tensor::full(&shape, -F::one()))?;
    let half = F::from_f64_lossy(0.5);
    let weights = row_weights
        .iter()
        .flat_map(|&w| std::iter::repeat_n(half * w, k))
        .collect();
    Ok(tape.weighted_sum(t, weights)?)
}

/// Masked token-level cross-entropy of one sequence, averaged over unmasked tokens.
pub fn reconstruction_nll<F: Real>(tape: &mut Tape<F>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptySequence { row: 0 });
    }
    let nll = tape.cross_entropy_rows(logits, targets)?;
    let w = F::from_f64_lossy(1.0 / count as f64);
    let weights = mask.iter().map(|&m| if m { w } else { F::zero() }).collect();
    Ok(tape.weighted_sum(nll, weights)?)
}

/// Per-token NLL of a decoder pass, reducible to per-row token means.
struct SequenceNll {
    nll: Var,
    /// `1/len(row)` on unmasked tokens, 0 elsewhere.
    token_weights: Vec<f64>,
    steps: usize,
}

impl SequenceNll {
    fn new<F: Real>(tape: &mut Tape<F>, out: &DecoderOutput) -> Result<Self> {
        let nll = tape.cross_entropy_rows(out.logits, &out.targets)?;
        let mut token_weights = Vec::with_capacity(out.mask.len());
        for (r, m) in out.mask.chunks(out.steps).enumerate() {
            let count = m.iter().filter(|&&v| v).count();
            if count == 0 {
                return Err(Error::EmptySequence { row: r });
            }
            let w = 1.0 / count as f64;
            token_weights.extend(m.iter().map(|&v| if v { w } else { 0.0 }));
        }
        Ok(SequenceNll {
            nll,
            token_weights,
            steps: out.steps,
        })
    }

    /// Mean over rows `start..end` of the per-row token-mean NLL.
    fn block_mean<F: Real>(&self, tape: &mut Tape<F>, start: usize, end: usize) -> Result<Var> {
        let scale = 1.0 / (end - start) as f64;
        let weights = self
            .token_weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let r = i / self.steps;
                if r >= start && r < end {
                    F::from_f64_lossy(w * scale)
                } else {
                    F::zero()
                }
            })
            .collect();
        Ok(tape.weighted_sum(self.nll, weights)?)
    }
}

/// `Σ c_i·v_i` over recorded scalars.
fn combine<F: Real>(tape: &mut Tape<F>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, c) in terms {
        let t = if c == 1.0 {
            v
        } else {
            tape.scale(v, F::from_f64_lossy(c))
        };
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("no loss terms".into()))
}

fn item<F: Real>(tape: &Tape<F>, v: Var) -> f64 {
    tape.item(v).as_f64()
}

/// Posteriors of both sides of every pair, rows ordered `[a; b]`.
#[derive(Debug, Clone, Copy)]
pub struct PairEncodings {
    pub sem: PosteriorVars,
    pub lang: Option<PosteriorVars>,
}

pub fn encode_pairs<F: Real>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    with_language: bool,
) -> Result<PairEncodings> {
    let both = batch.both();
    let sem = g.encode_semantic(tape, &both)?;
    let lang = if with_language {
        Some(g.encode_language(tape, &both, &batch.both_langs())?)
    } else {
        None
    };
    Ok(PairEncodings { sem, lang })
}

#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub recon_a: Var,
    pub recon_b: Var,
    pub kl_sem: Var,
    pub kl_lang_a: Var,
    pub kl_lang_b: Var,
}

impl ElboTerms {
    /// `recon_a + recon_b + kl_weight·(kl_sem + kl_lang_a + kl_lang_b)`.
    pub fn negative_elbo<F: Real>(&self, tape: &mut Tape<F>, kl_weight: f64) -> Result<Var> {
        combine(
            tape,
            &[
                (self.recon_a, 1.0),
                (self.recon_b, 1.0),
                (self.kl_sem, kl_weight),
                (self.kl_lang_a, kl_weight),
                (self.kl_lang_b, kl_weight),
            ],
        )
    }
}

/// Single-sample ELBO terms, batch means.
///
/// The semantic variable of pair `i` is read from its `sem_side` sentence;
/// both sentences get their own language variable and are reconstructed.
pub fn elbo_terms<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    enc: &PairEncodings,
    rng: &mut R,
) -> Result<ElboTerms> {
    let lang = enc
        .lang
        .ok_or_else(|| Error::Contract("ELBO needs language posteriors".into()))?;
    let n = batch.len();
    let sem_rows = batch.sem_rows();
    let sem = PosteriorVars {
        mu: tape.gather_rows(enc.sem.mu, &sem_rows)?,
        log_var: tape.gather_rows(enc.sem.log_var, &sem_rows)?,
    };
    let k = tape.shape(sem.mu)[1];
    let eps_sem = standard_normal::<F, R>(rng, &[n, k]);
    let eps_lang = standard_normal::<F, R>(rng, &[2 * n, k]);
    let z_sem = reparameterize(tape, sem, &eps_sem)?;
    let z_lang = reparameterize(tape, lang, &eps_lang)?;
    let z_sem2 = tape.concat_rows(&[z_sem, z_sem])?;
    let out = g.decode_logits(tape, z_sem2, z_lang, &batch.both(), &batch.both_langs())?;
    let nll = SequenceNll::new(tape, &out)?;
    let recon_a = nll.block_mean(tape, 0, n)?;
    let recon_b = nll.block_mean(tape, n, 2 * n)?;

    let inv = F::from_f64_lossy(1.0 / n as f64);
    let kl_sem = kl_rows(tape, sem, &vec![inv; n])?;
    let side = |first: bool| -> Vec<F> {
        (0..2 * n)
            .map(|r| if (r < n) == first { inv } else { F::zero() })
            .collect()
    };
    let kl_lang_a = kl_rows(tape, lang, &side(true))?;
    let kl_lang_b = kl_rows(tape, lang, &side(false))?;
    Ok(ElboTerms {
        recon_a,
        recon_b,
        kl_sem,
        kl_lang_a,
        kl_lang_b,
    })
}

/// Translation NLLs `(ab, ba)` decoded from posterior means, batch means.
pub fn translation_terms<F: Real>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    enc: &PairEncodings,
    language: TranslationLanguage,
) -> Result<(Var, Var)> {
    let n = batch.len();
    // Row r of [a; b] is decoded from the semantic mean of its partner.
    let partner: Vec<usize> = (n..2 * n).chain(0..n).collect();
    let z_sem = tape.gather_rows(enc.sem.mu, &partner)?;
    let z_lang = match language {
        TranslationLanguage::TargetMean => {
            enc.lang
                .ok_or_else(|| Error::Contract("translation needs language posteriors".into()))?
                .mu
        }
        TranslationLanguage::PriorMean => {
            let shape = tape.shape(z_sem).to_vec();
            tape.constant(Tensor::zeros(&shape))
        }
    };
    let out = g.decode_logits(tape, z_sem, z_lang, &batch.both(), &batch.both_langs())?;
    let nll = SequenceNll::new(tape, &out)?;
    let ba = nll.block_mean(tape, 0, n)?;
    let ab = nll.block_mean(tape, n, 2 * n)?;
    Ok((ab, ba))
}

/// In-batch contrastive loss over raw dot products:
/// `−(1/2B) Σ_i [log p(s_i|t_i) + log p(t_i|s_i)]`.
pub fn contrastive_loss<F: Real>(tape: &mut Tape<F>, s: Var, t: Var) -> Result<Var> {
    let b = tape.shape(s)[0];
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let scores = tape.matmul_nt(s, t)?;
    let scores_t = tape.transpose(scores)?;
    let diag: Vec<usize> = (0..b).collect();
    let rows = tape.cross_entropy_rows(scores, &diag)?;
    let cols = tape.cross_entropy_rows(scores_t, &diag)?;
    let w = F::from_f64_lossy(0.5 / b as f64);
    let rows = tape.weighted_sum(rows, vec![w; b])?;
    let cols = tape.weighted_sum(cols, vec![w; b])?;
    Ok(tape.add(rows, cols)?)
}

fn semantic_means<F: Real>(tape: &mut Tape<F>, enc: &PairEncodings, n: usize) -> Result<(Var, Var)> {
    let a: Vec<usize> = (0..n).collect();
    let b: Vec<usize> = (n..2 * n).collect();
    Ok((tape.gather_rows(enc.sem.mu, &a)?, tape.gather_rows(enc.sem.mu, &b)?))
}

fn needs_language(language: TranslationLanguage) -> bool {
    language == TranslationLanguage::TargetMean
}

/// `mean[translation_ab + translation_ba + λ·(negative ELBO)]`.
pub fn vmsst_loss<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    rng: &mut R,
    settings: &LossSettings,
) -> Result<LossOutput> {
    let enc = encode_pairs(g, tape, batch, true)?;
    vmsst_from(g, tape, batch, &enc, rng, settings)
}

fn vmsst_from<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    enc: &PairEncodings,
    rng: &mut R,
    settings: &LossSettings,
) -> Result<LossOutput> {
    let elbo = elbo_terms(g, tape, batch, enc, rng)?;
    let (ab, ba) = translation_terms(g, tape, batch, enc, settings.translation_language)?;
    let neg_elbo = elbo.negative_elbo(tape, settings.kl_weight)?;
    let total = combine(tape, &[(ab, 1.0), (ba, 1.0), (neg_elbo, settings.lambda)])?;
    let breakdown = LossBreakdown {
        total: item(tape, total),
        recon_a: item(tape, elbo.recon_a),
        recon_b: item(tape, elbo.recon_b),
        kl_sem: item(tape, elbo.kl_sem),
        kl_lang_a: item(tape, elbo.kl_lang_a),
        kl_lang_b: item(tape, elbo.kl_lang_b),
        translation_ab: item(tape, ab),
        translation_ba: item(tape, ba),
        contrastive: 0.0,
        kl_weight: settings.kl_weight,
        lambda: settings.lambda,
    };
    Ok(LossOutput { total, breakdown })
}

/// `mean[translation_ab + translation_ba]`, deterministic.
pub fn bitranslation_loss<F: Real>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    language: TranslationLanguage,
) -> Result<LossOutput> {
    let enc = encode_pairs(g, tape, batch, needs_language(language))?;
    let (ab, ba) = translation_terms(g, tape, batch, &enc, language)?;
    let total = combine(tape, &[(ab, 1.0), (ba, 1.0)])?;
    let breakdown = LossBreakdown {
        total: item(tape, total),
        translation_ab: item(tape, ab),
        translation_ba: item(tape, ba),
        ..LossBreakdown::default()
    };
    Ok(LossOutput { total, breakdown })
}

/// Contrastive loss on the semantic means of both sides.
pub fn contrastive_objective<F: Real>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
) -> Result<LossOutput> {
    let enc = encode_pairs(g, tape, batch, false)?;
    let (s, t) = semantic_means(tape, &enc, batch.len())?;
    let total = contrastive_loss(tape, s, t)?;
    let c = item(tape, total);
    let breakdown = LossBreakdown {
        total: c,
        contrastive: c,
        ..LossBreakdown::default()
    };
    Ok(LossOutput { total, breakdown })
}

/// `contrastive + λ·vmsst` with the inner λ fixed to 1.
pub fn vmsst_contrastive_loss<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    rng: &mut R,
    settings: &LossSettings,
) -> Result<LossOutput> {
    let enc = encode_pairs(g, tape, batch, true)?;
    let (s, t) = semantic_means(tape, &enc, batch.len())?;
    let con = contrastive_loss(tape, s, t)?;
    let inner = LossSettings {
        lambda: 1.0,
        ..*settings
    };
    let v = vmsst_from(g, tape, batch, &enc, rng, &inner)?;
    let total = combine(tape, &[(con, 1.0), (v.total, settings.lambda)])?;
    let breakdown = LossBreakdown {
        total: item(tape, total),
        contrastive: item(tape, con),
        lambda: settings.lambda,
        ..v.breakdown
    };
    Ok(LossOutput { total, breakdown })
}

/// Dispatches to the loss of `objective`.
pub fn objective_loss<F: Real, R: Rng + ?Sized>(
    objective: Objective,
    g: &mut Graph<'_, F>,
    tape: &mut Tape<F>,
    batch: &PairBatch,
    rng: &mut R,
    settings: &LossSettings,
) -> Result<LossOutput> {
    match objective {
        Objective::Contrastive => contrastive_objective(g, tape, batch),
        Objective::Bitranslation => bitranslation_loss(g, tape, batch, settings.translation_language),
        Objective::Vmsst => vmsst_loss(g, tape, batch, rng, settings),
        Objective::VmsstContrastive => vmsst_contrastive_loss(g, tape, batch, rng, settings),
    }
}
