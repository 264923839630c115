use std::fmt;

use numcore::Real;
use serde::{Deserialize, Serialize};

use super::{
    cosine, hubness, mine_pairs, pair_gap, pearson, retrieval_r_at_1, spearman, tatoeba_accuracy, EmbeddingMatrix,
    MarginOptions, MiningMethod, PairGap, TatoebaAccuracy,
};
use crate::corpus::{frame, EvalSets, ParallelPair, Sentence};
use crate::error::{Error, Result};
use crate::model::Model;

/// The six subtask scores (×100); any may be missing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreInputs {
    pub sts_english: Option<f64>,
    pub sts_crosslingual: Option<f64>,
    pub tatoeba_acc: Option<f64>,
    pub bucc_cosine_f1: Option<f64>,
    pub bucc_margin_f1: Option<f64>,
    pub retrieval_r1_primary: Option<f64>,
    pub retrieval_r1_multilingual: Option<f64>,
}

/// Mean of the six subtasks, the two mining scores first averaged together.
pub fn overall_score(s: &ScoreInputs) -> Result<f64> {
    let get = |name: &str, v: Option<f64>| v.ok_or_else(|| Error::Contract(format!("overall score needs `{name}`")));
    let parts = [
        get("sts_english", s.sts_english)?,
        get("sts_crosslingual", s.sts_crosslingual)?,
        get("tatoeba_acc", s.tatoeba_acc)?,
        (get("bucc_cosine_f1", s.bucc_cosine_f1)? + get("bucc_margin_f1", s.bucc_margin_f1)?) / 2.0,
        get("retrieval_r1_primary", s.retrieval_r1_primary)?,
        get("retrieval_r1_multilingual", s.retrieval_r1_multilingual)?,
    ];
    Ok(parts.iter().sum::<f64>() / 6.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub margin: MarginOptions,
    /// Neighbourhood size of the hubness diagnostic.
    pub hubness_k: usize,
    pub max_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            margin: MarginOptions::default(),
            hubness_k: 10,
            max_len: 32,
        }
    }
}

/// Per-language breakdown against language 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageScores {
    pub lang: usize,
    pub tatoeba: TatoebaAccuracy,
    pub bucc_cosine_f1: f64,
    pub bucc_margin_f1: f64,
    pub pair_gap: PairGap,
}

/// Scores ×100 (diagnostics unscaled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sts_english: f64,
    pub sts_crosslingual: f64,
    pub tatoeba_acc: f64,
    pub bucc_cosine_f1: f64,
    pub bucc_margin_f1: f64,
    pub retrieval_r1_primary: f64,
    pub retrieval_r1_multilingual: f64,
    pub overall_score: f64,
    pub sts_english_spearman: f64,
    pub sts_crosslingual_spearman: f64,
    pub languages: Vec<LanguageScores>,
    pub hubness_skewness: f64,
}

impl EvalReport {
    pub fn inputs(&self) -> ScoreInputs {
        ScoreInputs {
            sts_english: Some(self.sts_english),
            sts_crosslingual: Some(self.sts_crosslingual),
            tatoeba_acc: Some(self.tatoeba_acc),
            bucc_cosine_f1: Some(self.bucc_cosine_f1),
            bucc_margin_f1: Some(self.bucc_margin_f1),
            retrieval_r1_primary: Some(self.retrieval_r1_primary),
            retrieval_r1_multilingual: Some(self.retrieval_r1_multilingual),
        }
    }

    /// Tatoeba-style mean accuracy (fraction) for one language.
    pub fn tatoeba_for(&self, lang: usize) -> Option<f64> {
        self.languages.iter().find(|l| l.lang == lang).map(|l| l.tatoeba.mean)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sts (same language)    {:6.1}", self.sts_english)?;
        writeln!(f, "sts (cross-lingual)    {:6.1}", self.sts_crosslingual)?;
        writeln!(f, "pair accuracy          {:6.1}", self.tatoeba_acc)?;
        writeln!(f, "mining f1 (cosine)     {:6.1}", self.bucc_cosine_f1)?;
        writeln!(f, "mining f1 (margin)     {:6.1}", self.bucc_margin_f1)?;
        writeln!(f, "retrieval r@1          {:6.1}", self.retrieval_r1_primary)?;
        writeln!(f, "retrieval r@1 (multi)  {:6.1}", self.retrieval_r1_multilingual)?;
        write!(f, "score                  {:6.1}", self.overall_score)
    }
}

/// Rows embedded per forward pass.
const EMBED_CHUNK: usize = 256;

/// Semantic means of framed token sequences, in input order.
pub fn embed_framed<F: Real>(model: &Model<F>, seqs: &[Vec<usize>]) -> Result<EmbeddingMatrix> {
    if seqs.is_empty() {
        return Err(Error::Contract("nothing to embed".into()));
    }
    let mut data = Vec::new();
    for chunk in seqs.chunks(EMBED_CHUNK) {
        let t = model.embed_sequences(chunk)?;
        data.extend(t.data().iter().map(|x| x.as_f64() as f32));
    }
    EmbeddingMatrix::new(seqs.len(), model.config().latent_dim, data)
}

pub fn embed_sentences<F: Real>(model: &Model<F>, sentences: &[&Sentence], max_len: usize) -> Result<EmbeddingMatrix> {
    let seqs: Vec<Vec<usize>> = sentences.iter().map(|s| frame(&s.words, max_len)).collect();
    embed_framed(model, &seqs)
}

fn embed_sides<F: Real>(
    model: &Model<F>,
    pairs: &[ParallelPair],
    max_len: usize,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let a: Vec<&Sentence> = pairs.iter().map(|p| &p.a).collect();
    let b: Vec<&Sentence> = pairs.iter().map(|p| &p.b).collect();
    Ok((
        embed_sentences(model, &a, max_len)?,
        embed_sentences(model, &b, max_len)?,
    ))
}

fn sts<F: Real>(model: &Model<F>, pairs: &[ParallelPair], max_len: usize) -> Result<(f64, f64)> {
    let (a, b) = embed_sides(model, pairs, max_len)?;
    let sims = (0..a.rows())
        .map(|i| cosine(&a.row_f64(i), &b.row_f64(i)))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<f64> = pairs
        .iter()
        .map(|p| {
            p.gold
                .ok_or_else(|| Error::Contract("similarity pair without a gold score".into()))
        })
        .collect::<Result<_>>()?;
    Ok((pearson(&sims, &gold)? * 100.0, spearman(&sims, &gold)? * 100.0))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Embeds every evaluation set with the semantic means of `model` and scores it.
pub fn evaluate<F: Real>(model: &Model<F>, sets: &EvalSets, opts: &EvalOptions) -> Result<EvalReport> {
    let max_len = opts.max_len;
    let (sts_english, sts_english_spearman) = sts(model, &sets.sts_mono, max_len)?;
    let (sts_crosslingual, sts_crosslingual_spearman) = sts(model, &sets.sts_cross, max_len)?;

    let mut languages = Vec::new();
    for t in &sets.tatoeba {
        let (a, b) = embed_sides(model, &t.pairs, max_len)?;
        let mining = sets
            .mining
            .iter()
            .find(|m| m.lang == t.lang)
            .ok_or_else(|| Error::Contract(format!("no mining set for language {}", t.lang)))?;
        let src = embed_sentences(model, &mining.src.iter().collect::<Vec<_>>(), max_len)?;
        let tgt = embed_sentences(model, &mining.tgt.iter().collect::<Vec<_>>(), max_len)?;
        let f1 = |m| mine_pairs(&src, &tgt, m, &mining.gold, &opts.margin).map(|r| r.f1);
        languages.push(LanguageScores {
            lang: t.lang,
            tatoeba: tatoeba_accuracy(&a, &b)?,
            bucc_cosine_f1: f1(MiningMethod::Cosine)?,
            bucc_margin_f1: f1(MiningMethod::Margin)?,
            pair_gap: pair_gap(&a, &b)?,
        });
    }
    if languages.is_empty() {
        return Err(Error::Contract("no pair-accuracy sets".into()));
    }

    let retrieval = |r: &crate::corpus::RetrievalSet| -> Result<(f64, EmbeddingMatrix)> {
        let kb = embed_sentences(model, &r.kb.iter().collect::<Vec<_>>(), max_len)?;
        let q = embed_sentences(model, &r.queries.iter().collect::<Vec<_>>(), max_len)?;
        Ok((retrieval_r_at_1(&q, &kb, &r.gold)? * 100.0, kb))
    };
    let (retrieval_r1_primary, kb) = retrieval(&sets.retrieval_primary)?;
    let (retrieval_r1_multilingual, _) = retrieval(&sets.retrieval_multilingual)?;
    let k = opts.hubness_k.min(kb.rows().saturating_sub(1)).max(1);
    let hubness_skewness = hubness(&kb, k)?.skewness;

    let mut report = EvalReport {
        sts_english,
        sts_crosslingual,
        tatoeba_acc: mean(languages.iter().map(|l| l.tatoeba.mean)) * 100.0,
        bucc_cosine_f1: mean(languages.iter().map(|l| l.bucc_cosine_f1)) * 100.0,
        bucc_margin_f1: mean(languages.iter().map(|l| l.bucc_margin_f1)) * 100.0,
        retrieval_r1_primary,
        retrieval_r1_multilingual,
        overall_score: 0.0,
        sts_english_spearman,
        sts_crosslingual_spearman,
        languages,
        hubness_skewness,
    };
    report.overall_score = overall_score(&report.inputs())?;
    Ok(report)
}
