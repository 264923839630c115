//! Embedding evaluation: similarity correlations, bidirectional pair
//! accuracy, bitext mining, nearest-neighbour retrieval and hubness.
//!
//! Cosines are computed in f64 from the stored f32 rows; every argmax
//! breaks ties towards the lowest index.

mod embeddings;
mod mining;
mod report;

pub use embeddings::{EmbeddingMatrix, VMSB_MAGIC};
pub use mining::{
    margin_score, mine_pairs, optimal_f1_threshold, score_matrix, threshold_sweep, Candidate, MarginOptions,
    MarginStats, MiningMethod, MiningResult, ThresholdResult,
};
pub use report::{
    embed_framed, embed_sentences, evaluate, overall_score, EvalOptions, EvalReport, LanguageScores, ScoreInputs,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "cosine of vectors with {} and {} entries",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Dense `rows(S) × rows(T)` cosine matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl Similarity {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }
}

fn rows_f64(e: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..e.rows()).map(|i| e.row_f64(i)).collect()
}

/// All pairwise cosines; each entry is bitwise equal to [`cosine`] of the rows.
pub fn cosine_matrix(s: &EmbeddingMatrix, t: &EmbeddingMatrix) -> Result<Similarity> {
    if s.dim() != t.dim() {
        return Err(Error::Contract(format!(
            "embedding dims differ: {} vs {}",
            s.dim(),
            t.dim()
        )));
    }
    let (sr, tr) = (rows_f64(s), rows_f64(t));
    let sn: Vec<f64> = sr.iter().map(|r| norm(r)).collect();
    let tn: Vec<f64> = tr.iter().map(|r| norm(r)).collect();
    if let Some(i) = sn.iter().chain(&tn).position(|&x| x == 0.0) {
        return Err(Error::Degenerate(format!("zero embedding row ({i})")));
    }
    let mut values = Vec::with_capacity(sr.len() * tr.len());
    for (u, nu) in sr.iter().zip(&sn) {
        for (v, nv) in tr.iter().zip(&tn) {
            values.push(dot(u, v) / (nu * nv));
        }
    }
    Ok(Similarity {
        n: sr.len(),
        m: tr.len(),
        values,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Contract("correlation needs at least two observations".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation with a constant variable".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, tied values sharing their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("{} vs {} observations", x.len(), y.len())));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TatoebaAccuracy {
    pub src_to_tgt: f64,
    pub tgt_to_src: f64,
    pub mean: f64,
}

/// Nearest-neighbour accuracy in both directions for row-aligned matrices.
pub fn tatoeba_accuracy(src: &EmbeddingMatrix, tgt: &EmbeddingMatrix) -> Result<TatoebaAccuracy> {
    if src.rows() != tgt.rows() {
        return Err(Error::Contract(format!(
            "alignment error: {} source rows vs {} target rows",
            src.rows(),
            tgt.rows()
        )));
    }
    let sim = cosine_matrix(src, tgt)?;
    let n = src.rows();
    let fwd = (0..n).filter(|&i| argmax(sim.row(i)) == i).count();
    let bwd = (0..n).filter(|&j| argmax(&sim.column(j)) == j).count();
    let (a, b) = (fwd as f64 / n as f64, bwd as f64 / n as f64);
    Ok(TatoebaAccuracy {
        src_to_tgt: a,
        tgt_to_src: b,
        mean: (a + b) / 2.0,
    })
}

/// Fraction of queries whose nearest knowledge-base row is the gold row.
pub fn retrieval_r_at_1(queries: &EmbeddingMatrix, kb: &EmbeddingMatrix, gold: &[usize]) -> Result<f64> {
    if kb.rows() == 0 {
        return Err(Error::Contract("empty knowledge base".into()));
    }
    if gold.len() != queries.rows() {
        return Err(Error::Contract(format!(
            "{} gold entries for {} queries",
            gold.len(),
            queries.rows()
        )));
    }
    if let Some(g) = gold.iter().find(|&&g| g >= kb.rows()) {
        return Err(Error::Contract(format!("gold row {g} outside the knowledge base")));
    }
    let sim = cosine_matrix(queries, kb)?;
    let hits = gold
        .iter()
        .enumerate()
        .filter(|&(q, &g)| argmax(sim.row(q)) == g)
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// k-occurrence counts and their skewness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hubness {
    pub k_nn: usize,
    /// `N_k` of every row.
    pub counts: Vec<usize>,
    /// `histogram[c]` rows have `N_k = c`.
    pub histogram: Vec<usize>,
    pub skewness: f64,
}

/// Biased sample skewness `m₃ / m₂^{3/2}`; zero for constant data.
pub fn skewness(x: &[f64]) -> f64 {
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / x.len() as f64;
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Indices of the `k` largest values of `row`, skipping `skip`; ties go to
/// the lower index.
pub fn top_k(row: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| Some(j) != skip).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn hubness(e: &EmbeddingMatrix, k_nn: usize) -> Result<Hubness> {
    let n = e.rows();
    if n <= k_nn || k_nn == 0 {
        return Err(Error::Contract(format!(
            "hubness needs 0 < k_nn < n (k_nn={k_nn}, n={n})"
        )));
    }
    let sim = cosine_matrix(e, e)?;
    let mut counts = vec![0; n];
    for i in 0..n {
        for j in top_k(sim.row(i), k_nn, Some(i)) {
            counts[j] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut histogram = vec![0; max + 1];
    for &c in &counts {
        histogram[c] += 1;
    }
    let skew = skewness(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Ok(Hubness {
        k_nn,
        counts,
        histogram,
        skewness: skew,
    })
}

/// Mean cosine of aligned rows against the unaligned and all-pairs means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub pair_mean: f64,
    pub non_pair_mean: f64,
    pub all_pairs_mean: f64,
}

impl PairGap {
    pub fn gap(&self) -> f64 {
        self.pair_mean - self.non_pair_mean
    }
}

pub fn pair_gap(src: &EmbeddingMatrix, tgt: &EmbeddingMatrix) -> Result<PairGap> {
    if src.rows() != tgt.rows() || src.rows() < 2 {
        return Err(Error::Contract("pair gap needs at least two aligned rows".into()));
    }
    let sim = cosine_matrix(src, tgt)?;
    let n = src.rows();
    let diag: f64 = (0..n).map(|i| sim.get(i, i)).sum();
    let all: f64 = sim.values.iter().sum();
    Ok(PairGap {
        pair_mean: diag / n as f64,
        non_pair_mean: (all - diag) / (n * n - n) as f64,
        all_pairs_mean: all / (n * n) as f64,
    })
}
