//! Synthetic multilingual parallel corpora.
//!
//! Every sentence is a sequence of hidden concept ids rendered into one
//! language: each language maps concepts to its own surface forms, has its
//! own word-order rule and inserts its own filler tokens.

mod batching;
mod io;
mod vocab;

pub use batching::{make_batches, Batcher, Example};
pub use io::{
    read_gold, read_pairs, read_sentences, read_vocab, write_gold, write_pairs, write_sentences, write_vocab,
    CorpusFiles,
};
pub use vocab::{filler_surface, frame, unframe, word_surface, Vocab};

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{stream_rng, Domain};
use crate::tokens::N_RESERVED;

/// Draws allowed per fresh eval sentence before the spec is declared infeasible.
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_languages: usize,
    pub n_concepts: usize,
    /// Inclusive range of concepts per sentence.
    pub sentence_len: (usize, usize),
    pub n_train_pairs: usize,
    pub pivot_languages: Vec<usize>,
    /// Probability of a filler token before each word.
    pub noise_rate: f64,
    /// Bounded-distance shuffle degree in `[0, 1]`.
    pub permutation_strength: f64,
    pub holdout_languages: Vec<usize>,
    /// Chance that a holdout language borrows its parent's surface form for
    /// a concept. Zero keeps every vocabulary disjoint.
    pub cognate_rate: f64,
    pub n_fillers: usize,
    pub n_sts_pairs: usize,
    pub n_tatoeba_pairs: usize,
    pub n_mining_pairs: usize,
    pub n_mining_distractors: usize,
    pub n_kb: usize,
    pub n_queries: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_languages: 4,
            n_concepts: 64,
            sentence_len: (4, 8),
            n_train_pairs: 20_000,
            pivot_languages: vec![0, 1],
            noise_rate: 0.1,
            permutation_strength: 0.3,
            holdout_languages: Vec::new(),
            cognate_rate: 0.0,
            n_fillers: 8,
            n_sts_pairs: 200,
            n_tatoeba_pairs: 200,
            n_mining_pairs: 150,
            n_mining_distractors: 50,
            n_kb: 400,
            n_queries: 200,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.n_languages < 2 {
            return bad("n_languages", format!("{} < 2", self.n_languages));
        }
        if self.n_concepts == 0 {
            return bad("n_concepts", "must be positive".into());
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return bad("sentence_len", format!("invalid range [{lo}, {hi}]"));
        }
        if hi > self.n_concepts {
            return Err(Error::Spec(format!(
                "sentence_len {hi} exceeds n_concepts {} (concepts are drawn without replacement)",
                self.n_concepts
            )));
        }
        if self.n_train_pairs == 0 {
            return bad("n_train_pairs", "must be at least 1".into());
        }
        if self.pivot_languages.is_empty() {
            return bad("pivot_languages", "at least one pivot is required".into());
        }
        for &p in &self.pivot_languages {
            if p >= self.n_languages {
                return bad("pivot_languages", format!("language {p} does not exist"));
            }
        }
        for &h in &self.holdout_languages {
            if h >= self.n_languages {
                return bad("holdout_languages", format!("language {h} does not exist"));
            }
            if self.pivot_languages.contains(&h) {
                return bad("holdout_languages", format!("language {h} is also a pivot"));
            }
        }
        if self.training_languages().len() < 2 {
            return bad("holdout_languages", "fewer than two training languages remain".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate", format!("{} outside [0, 1)", self.noise_rate));
        }
        if self.noise_rate > 0.0 && self.n_fillers == 0 {
            return bad("n_fillers", "filler noise needs at least one filler".into());
        }
        if !(0.0..=1.0).contains(&self.permutation_strength) {
            return bad(
                "permutation_strength",
                format!("{} outside [0, 1]", self.permutation_strength),
            );
        }
        if !(0.0..=1.0).contains(&self.cognate_rate) {
            return bad("cognate_rate", format!("{} outside [0, 1]", self.cognate_rate));
        }
        if self.cognate_rate > 0.0 && !self.holdout_languages.is_empty() && self.parent_language().is_none() {
            return bad("cognate_rate", "no non-pivot training language to borrow from".into());
        }
        if self.n_sts_pairs < 2 {
            return bad("n_sts_pairs", "need at least 2 graded pairs".into());
        }
        for (field, v) in [
            ("n_tatoeba_pairs", self.n_tatoeba_pairs),
            ("n_mining_pairs", self.n_mining_pairs),
            ("n_kb", self.n_kb),
            ("n_queries", self.n_queries),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        if self.n_queries > self.n_kb {
            return bad("n_queries", format!("{} exceeds n_kb {}", self.n_queries, self.n_kb));
        }
        Ok(())
    }

    pub fn training_languages(&self) -> Vec<usize> {
        (0..self.n_languages)
            .filter(|l| !self.holdout_languages.contains(l))
            .collect()
    }

    /// Language whose surface forms holdout languages borrow.
    pub fn parent_language(&self) -> Option<usize> {
        self.training_languages()
            .into_iter()
            .find(|l| !self.pivot_languages.contains(l))
    }

    /// Query language of the primary retrieval set.
    pub fn primary_query_language(&self) -> usize {
        self.pivot_languages.iter().copied().find(|&p| p != 0).unwrap_or(1)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_languages, self.n_concepts, self.n_fillers)
    }
}

/// One rendered sentence: vocabulary ids without BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub lang: usize,
    pub words: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPair {
    /// Hidden concept sequence of side a (empty when read from a file).
    pub concepts: Vec<usize>,
    /// Concepts of side b; differs from `concepts` only in graded pairs.
    pub concepts_b: Vec<usize>,
    pub a: Sentence,
    pub b: Sentence,
    pub gold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TatoebaSet {
    pub lang: usize,
    pub pairs: Vec<ParallelPair>,
}

/// Source sentences in `lang`, targets in language 0, with gold alignments.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningSet {
    pub lang: usize,
    pub src: Vec<Sentence>,
    pub tgt: Vec<Sentence>,
    pub gold: Vec<(usize, usize)>,
}

/// Knowledge base in language 0 and queries with one gold entry each.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub kb: Vec<Sentence>,
    pub queries: Vec<Sentence>,
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    /// Graded pairs within language 0.
    pub sts_mono: Vec<ParallelPair>,
    /// Graded pairs between language 0 and another language.
    pub sts_cross: Vec<ParallelPair>,
    pub tatoeba: Vec<TatoebaSet>,
    pub mining: Vec<MiningSet>,
    pub retrieval_primary: RetrievalSet,
    pub retrieval_multilingual: RetrievalSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocab,
    pub train: Vec<ParallelPair>,
    pub eval: EvalSets,
}

impl Corpus {
    /// Framed training examples for the batcher.
    pub fn train_examples(&self, max_len: usize) -> Vec<Example> {
        examples(&self.train, max_len)
    }
}

pub fn examples(pairs: &[ParallelPair], max_len: usize) -> Vec<Example> {
    pairs
        .iter()
        .map(|p| Example {
            a: frame(&p.a.words, max_len),
            b: frame(&p.b.words, max_len),
            lang_a: p.a.lang,
            lang_b: p.b.lang,
        })
        .collect()
}

/// `5·|A ∩ B| / |A ∪ B|` over concept multisets.
pub fn gold_similarity(a: &[usize], b: &[usize]) -> f64 {
    let mut ca = std::collections::BTreeMap::<usize, usize>::new();
    let mut cb = std::collections::BTreeMap::<usize, usize>::new();
    for &x in a {
        *ca.entry(x).or_default() += 1;
    }
    for &x in b {
        *cb.entry(x).or_default() += 1;
    }
    let keys: BTreeSet<usize> = ca.keys().chain(cb.keys()).copied().collect();
    let (mut inter, mut union) = (0, 0);
    for k in keys {
        let (x, y) = (ca.get(&k).copied().unwrap_or(0), cb.get(&k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        return 5.0;
    }
    5.0 * inter as f64 / union as f64
}

struct Language {
    id: usize,
    /// Vocabulary id of each concept.
    words: Vec<usize>,
    fillers: Vec<usize>,
    reverse: bool,
}

fn multiset_key(concepts: &[usize]) -> Vec<usize> {
    let mut k = concepts.to_vec();
    k.sort_unstable();
    k
}

struct Generator<'s> {
    spec: &'s CorpusSpec,
    rng: ChaCha8Rng,
    langs: Vec<Language>,
    train_keys: HashSet<Vec<usize>>,
}

impl<'s> Generator<'s> {
    fn new(spec: &'s CorpusSpec) -> Self {
        let mut rng = stream_rng(spec.seed, Domain::Corpus, 0);
        let (n, c, f) = (spec.n_languages, spec.n_concepts, spec.n_fillers);
        let base = |l: usize| N_RESERVED + n + l * (c + f);
        let mut langs: Vec<Language> = (0..n)
            .map(|l| {
                let mut forms: Vec<usize> = (0..c).collect();
                forms.shuffle(&mut rng);
                Language {
                    id: l,
                    words: forms.iter().map(|&w| base(l) + w).collect(),
                    fillers: (0..f).map(|j| base(l) + c + j).collect(),
                    reverse: rng.random_bool(0.5),
                }
            })
            .collect();
        if spec.cognate_rate > 0.0 {
            if let Some(parent) = spec.parent_language() {
                let (pw, pr) = (langs[parent].words.clone(), langs[parent].reverse);
                for &h in &spec.holdout_languages {
                    for (cpt, w) in langs[h].words.iter_mut().enumerate() {
                        if rng.random_bool(spec.cognate_rate) {
                            *w = pw[cpt];
                        }
                    }
                    langs[h].reverse = pr;
                }
            }
        }
        Generator {
            spec,
            rng,
            langs,
            train_keys: HashSet::new(),
        }
    }

    fn concepts(&mut self) -> Vec<usize> {
        let (lo, hi) = self.spec.sentence_len;
        let n = self.rng.random_range(lo..=hi);
        rand::seq::index::sample(&mut self.rng, self.spec.n_concepts, n)
            .into_iter()
            .collect()
    }

    /// A concept sequence unseen in training and not in `used`.
    fn fresh_concepts(&mut self, used: &mut HashSet<Vec<usize>>) -> Result<Vec<usize>> {
        for _ in 0..MAX_ATTEMPTS {
            let c = self.concepts();
            let key = multiset_key(&c);
            if !self.train_keys.contains(&key) && used.insert(key) {
                return Ok(c);
            }
        }
        Err(Error::Spec(
            "concept space too small for disjoint evaluation sets".into(),
        ))
    }

    fn render(&mut self, lang: usize, concepts: &[usize]) -> Sentence {
        let l = &self.langs[lang];
        let len = concepts.len() as f64;
        let jitter = self.spec.permutation_strength * len;
        let mut keyed: Vec<(f64, usize)> = concepts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let pos = if l.reverse { len - 1.0 - i as f64 } else { i as f64 };
                (pos + self.rng.random::<f64>() * jitter, c)
            })
            .collect();
        keyed.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut words = Vec::with_capacity(concepts.len() + 2);
        for (_, c) in keyed {
            if self.spec.noise_rate > 0.0 && self.rng.random_bool(self.spec.noise_rate) {
                words.push(*l.fillers.choose(&mut self.rng).expect("fillers exist"));
            }
            words.push(l.words[c]);
        }
        Sentence { lang: l.id, words }
    }

    fn pair(&mut self, concepts: Vec<usize>, la: usize, lb: usize, gold: Option<f64>) -> ParallelPair {
        let a = self.render(la, &concepts);
        let b = self.render(lb, &concepts);
        ParallelPair {
            concepts_b: concepts.clone(),
            concepts,
            a,
            b,
            gold,
        }
    }

    fn train(&mut self) -> Vec<ParallelPair> {
        let training = self.spec.training_languages();
        let pivots: Vec<usize> = self.spec.pivot_languages.clone();
        (0..self.spec.n_train_pairs)
            .map(|_| {
                let p = *pivots.choose(&mut self.rng).expect("pivots");
                let others: Vec<usize> = training.iter().copied().filter(|&l| l != p).collect();
                let o = *others.choose(&mut self.rng).expect("validated");
                let c = self.concepts();
                self.train_keys.insert(multiset_key(&c));
                let (la, lb) = if self.rng.random_bool(0.5) { (p, o) } else { (o, p) };
                self.pair(c, la, lb, None)
            })
            .collect()
    }

    fn graded(&mut self, cross: bool) -> Result<Vec<ParallelPair>> {
        let mut used = HashSet::new();
        let others: Vec<usize> = (1..self.spec.n_languages).collect();
        (0..self.spec.n_sts_pairs)
            .map(|_| {
                let base = self.fresh_concepts(&mut used)?;
                let n = base.len();
                let spare: Vec<usize> = (0..self.spec.n_concepts).filter(|c| !base.contains(c)).collect();
                let r = self.rng.random_range(0..=n.min(spare.len()));
                let mut other = base.clone();
                let slots = rand::seq::index::sample(&mut self.rng, n, r).into_vec();
                let fresh = rand::seq::index::sample(&mut self.rng, spare.len(), r).into_vec();
                for (s, f) in slots.into_iter().zip(fresh) {
                    other[s] = spare[f];
                }
                let lb = if cross {
                    *others.choose(&mut self.rng).expect("N ≥ 2")
                } else {
                    0
                };
                let gold = gold_similarity(&base, &other);
                let a = self.render(0, &base);
                let b = self.render(lb, &other);
                Ok(ParallelPair {
                    concepts: base,
                    concepts_b: other,
                    a,
                    b,
                    gold: Some(gold),
                })
            })
            .collect()
    }

    fn tatoeba(&mut self, lang: usize) -> Result<TatoebaSet> {
        let mut used = HashSet::new();
        let pairs = (0..self.spec.n_tatoeba_pairs)
            .map(|_| {
                let c = self.fresh_concepts(&mut used)?;
                Ok(self.pair(c, 0, lang, None))
            })
            .collect::<Result<_>>()?;
        Ok(TatoebaSet { lang, pairs })
    }

    fn mining(&mut self, lang: usize) -> Result<MiningSet> {
        let mut used = HashSet::new();
        let (g, d) = (self.spec.n_mining_pairs, self.spec.n_mining_distractors);
        let mut src = Vec::with_capacity(g + d);
        let mut tgt = Vec::with_capacity(g + d);
        for i in 0..g {
            let c = self.fresh_concepts(&mut used)?;
            src.push((Some(i), self.render(lang, &c)));
            tgt.push((Some(i), self.render(0, &c)));
        }
        for _ in 0..d {
            let c = self.fresh_concepts(&mut used)?;
            src.push((None, self.render(lang, &c)));
            let c = self.fresh_concepts(&mut used)?;
            tgt.push((None, self.render(0, &c)));
        }
        src.shuffle(&mut self.rng);
        tgt.shuffle(&mut self.rng);
        let mut tgt_of = vec![0; g];
        for (j, (id, _)) in tgt.iter().enumerate() {
            if let Some(i) = id {
                tgt_of[*i] = j;
            }
        }
        let gold = src
            .iter()
            .enumerate()
            .filter_map(|(s, (id, _))| id.map(|i| (s, tgt_of[i])))
            .collect();
        Ok(MiningSet {
            lang,
            src: src.into_iter().map(|x| x.1).collect(),
            tgt: tgt.into_iter().map(|x| x.1).collect(),
            gold,
        })
    }

    fn retrieval(&mut self, query_lang: Option<usize>) -> Result<RetrievalSet> {
        let mut used = HashSet::new();
        let concepts = (0..self.spec.n_kb)
            .map(|_| self.fresh_concepts(&mut used))
            .collect::<Result<Vec<_>>>()?;
        let kb = concepts.iter().map(|c| self.render(0, c)).collect();
        let gold = rand::seq::index::sample(&mut self.rng, self.spec.n_kb, self.spec.n_queries).into_vec();
        let others: Vec<usize> = (1..self.spec.n_languages).collect();
        let queries = gold
            .iter()
            .map(|&g| {
                let l = query_lang.unwrap_or_else(|| *others.choose(&mut self.rng).expect("N ≥ 2"));
                self.render(l, &concepts[g])
            })
            .collect();
        Ok(RetrievalSet { kb, queries, gold })
    }
}

/// Generates training pairs and every evaluation set from `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut g = Generator::new(spec);
    let train = g.train();
    let sts_mono = g.graded(false)?;
    let sts_cross = g.graded(true)?;
    let tatoeba = (1..spec.n_languages).map(|l| g.tatoeba(l)).collect::<Result<_>>()?;
    let mining = (1..spec.n_languages).map(|l| g.mining(l)).collect::<Result<_>>()?;
    let retrieval_primary = g.retrieval(Some(spec.primary_query_language()))?;
    let retrieval_multilingual = g.retrieval(None)?;
    Ok(Corpus {
        spec: spec.clone(),
        vocab: spec.vocab(),
        train,
        eval: EvalSets {
            sts_mono,
            sts_cross,
            tatoeba,
            mining,
            retrieval_primary,
            retrieval_multilingual,
        },
    })
}
