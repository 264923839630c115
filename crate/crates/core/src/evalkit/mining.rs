use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{argmax, cosine_matrix, EmbeddingMatrix, Similarity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMethod {
    Cosine,
    Margin,
}

impl MiningMethod {
    pub const ALL: [MiningMethod; 2] = [MiningMethod::Cosine, MiningMethod::Margin];

    pub fn name(self) -> &'static str {
        match self {
            MiningMethod::Cosine => "cosine",
            MiningMethod::Margin => "margin",
        }
    }
}

impl fmt::Display for MiningMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MiningMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MiningMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown mining method `{s}` (cosine or margin)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginOptions {
    /// Neighbourhood size, capped by the number of candidates on each side.
    pub k_nn: usize,
    /// Divide each neighbour sum by `2k` (the averaged form).
    pub averaged: bool,
}

impl Default for MarginOptions {
    fn default() -> Self {
        MarginOptions {
            k_nn: 4,
            averaged: false,
        }
    }
}

/// Sum of the `k` largest values, added largest first.
fn top_sum(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum()
}

/// Neighbourhood sums of every source and target row.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginStats {
    pub src_sums: Vec<f64>,
    pub tgt_sums: Vec<f64>,
    pub k_src: usize,
    pub k_tgt: usize,
    pub averaged: bool,
}

impl MarginStats {
    pub fn new(sim: &Similarity, opts: &MarginOptions) -> Result<Self> {
        if sim.n == 0 || sim.m == 0 || opts.k_nn == 0 {
            return Err(Error::Contract("margin needs non-empty matrices and k_nn ≥ 1".into()));
        }
        let k_src = opts.k_nn.min(sim.m);
        let k_tgt = opts.k_nn.min(sim.n);
        Ok(MarginStats {
            src_sums: (0..sim.n).map(|i| top_sum(sim.row(i), k_src)).collect(),
            tgt_sums: (0..sim.m).map(|j| top_sum(&sim.column(j), k_tgt)).collect(),
            k_src,
            k_tgt,
            averaged: opts.averaged,
        })
    }

    pub fn score(&self, sim: &Similarity, i: usize, j: usize) -> Result<f64> {
        let (a, b) = (self.src_sums[i], self.tgt_sums[j]);
        let denom = if self.averaged {
            a / (2 * self.k_src) as f64 + b / (2 * self.k_tgt) as f64
        } else {
            a + b
        };
        if denom <= 0.0 {
            return Err(Error::Degenerate(format!(
                "margin denominator {denom} ≤ 0 for pair ({i}, {j})"
            )));
        }
        Ok(sim.get(i, j) / denom)
    }
}

/// Cosine of `(s_i, t_j)` over the neighbourhood sums of both rows.
pub fn margin_score(i: usize, j: usize, s: &EmbeddingMatrix, t: &EmbeddingMatrix, opts: &MarginOptions) -> Result<f64> {
    if i >= s.rows() || j >= t.rows() {
        return Err(Error::Contract(format!("pair ({i}, {j}) outside the matrices")));
    }
    let sim = cosine_matrix(s, t)?;
    MarginStats::new(&sim, opts)?.score(&sim, i, j)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub src: usize,
    pub tgt: usize,
    pub score: f64,
    pub gold: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Bound {
    Finite(f64),
    Sentinel(String),
}

fn ser_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if t.is_finite() {
        s.serialize_f64(*t)
    } else if *t > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    match Bound::deserialize(d)? {
        Bound::Finite(x) => Ok(x),
        Bound::Sentinel(s) if s == "inf" => Ok(f64::INFINITY),
        Bound::Sentinel(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
        Bound::Sentinel(s) => Err(serde::de::Error::custom(format!("bad threshold `{s}`"))),
    }
}

/// Best decision threshold; candidates scoring at or above it are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accepted: usize,
}

fn prf(correct: usize, accepted: usize, relevant: usize) -> (f64, f64, f64) {
    let p = if accepted == 0 {
        0.0
    } else {
        correct as f64 / accepted as f64
    };
    let r = if relevant == 0 {
        0.0
    } else {
        correct as f64 / relevant as f64
    };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Probes `−∞`, every midpoint between consecutive distinct scores, and `+∞`;
/// recall is measured against `n_relevant`. Ties go to the higher threshold.
pub fn threshold_sweep(scores: &[f64], labels: &[bool], n_relevant: usize) -> Result<ThresholdResult> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores with {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN candidate score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // groups of equal scores, ascending, with their sizes and gold counts
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += 1;
                g.2 += labels[i] as usize;
            }
            _ => groups.push((scores[i], 1, labels[i] as usize)),
        }
    }
    let mut accepted = scores.len();
    let mut correct = labels.iter().filter(|&&l| l).count();
    let mut best = {
        let (p, r, f) = prf(correct, accepted, n_relevant);
        ThresholdResult {
            threshold: f64::NEG_INFINITY,
            precision: p,
            recall: r,
            f1: f,
            accepted,
        }
    };
    for (g, next) in groups.iter().zip(groups.iter().skip(1).map(Some).chain([None])) {
        accepted -= g.1;
        correct -= g.2;
        let threshold = match next {
            Some(n) => (g.0 + n.0) / 2.0,
            None => f64::INFINITY,
        };
        let (p, r, f) = prf(correct, accepted, n_relevant);
        if f >= best.f1 {
            best = ThresholdResult {
                threshold,
                precision: p,
                recall: r,
                f1: f,
                accepted,
            };
        }
    }
    Ok(best)
}

/// [`threshold_sweep`] with recall measured against the gold labels present.
pub fn optimal_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdResult> {
    threshold_sweep(scores, labels, labels.iter().filter(|&&l| l).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningResult {
    pub method: MiningMethod,
    /// One best-scoring target per source row, by descending score.
    pub pairs: Vec<Candidate>,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_gold: usize,
}

/// Score matrix of `method` over all source/target pairs.
pub fn score_matrix(
    s: &EmbeddingMatrix,
    t: &EmbeddingMatrix,
    method: MiningMethod,
    opts: &MarginOptions,
) -> Result<Similarity> {
    let sim = cosine_matrix(s, t)?;
    match method {
        MiningMethod::Cosine => Ok(sim),
        MiningMethod::Margin => {
            let stats = MarginStats::new(&sim, opts)?;
            let mut values = Vec::with_capacity(sim.values.len());
            for i in 0..sim.n {
                for j in 0..sim.m {
                    values.push(stats.score(&sim, i, j)?);
                }
            }
            Ok(Similarity {
                n: sim.n,
                m: sim.m,
                values,
            })
        }
    }
}

pub fn mine_pairs(
    s: &EmbeddingMatrix,
    t: &EmbeddingMatrix,
    method: MiningMethod,
    gold: &[(usize, usize)],
    opts: &MarginOptions,
) -> Result<MiningResult> {
    if gold.is_empty() {
        return Err(Error::Contract("mining needs at least one gold pair".into()));
    }
    if let Some(g) = gold.iter().find(|g| g.0 >= s.rows() || g.1 >= t.rows()) {
        return Err(Error::Contract(format!("gold pair {g:?} outside the matrices")));
    }
    let gold_set: HashSet<(usize, usize)> = gold.iter().copied().collect();
    let scores = score_matrix(s, t, method, opts)?;
    let mut pairs: Vec<Candidate> = (0..s.rows())
        .map(|i| {
            let j = argmax(scores.row(i));
            Candidate {
                src: i,
                tgt: j,
                score: scores.get(i, j),
                gold: gold_set.contains(&(i, j)),
            }
        })
        .collect();
    pairs.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.src.cmp(&b.src)));
    let sc: Vec<f64> = pairs.iter().map(|c| c.score).collect();
    let lb: Vec<bool> = pairs.iter().map(|c| c.gold).collect();
    let best = threshold_sweep(&sc, &lb, gold_set.len())?;
    Ok(MiningResult {
        method,
        pairs,
        threshold: best.threshold,
        precision: best.precision,
        recall: best.recall,
        f1: best.f1,
        n_gold: gold_set.len(),
    })
}
