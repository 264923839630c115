use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::PAD;

/// Right-padded token ids `[rows × seq]` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    mask: Vec<bool>,
    rows: usize,
    seq: usize,
}

impl TokenBatch {
    /// Pads every sequence with PAD to the longest one (or to `min_seq`).
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S], min_seq: usize) -> Result<Self> {
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0).max(min_seq);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for (row, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::EmptySequence { row });
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, seq - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, seq - s.len()));
        }
        Ok(TokenBatch {
            ids,
            mask,
            rows: seqs.len(),
            seq,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.seq..(r + 1) * self.seq]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.seq..(r + 1) * self.seq]
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_mask(r).iter().filter(|&&m| m).count()
    }

    /// The unpadded sequence of row `r`.
    pub fn sequence(&self, r: usize) -> &[usize] {
        &self.row(r)[..self.row_len(r)]
    }

    /// Rows in the given order (rows may repeat).
    pub fn select(&self, rows: &[usize]) -> TokenBatch {
        let mut ids = Vec::with_capacity(rows.len() * self.seq);
        let mut mask = Vec::with_capacity(rows.len() * self.seq);
        for &r in rows {
            ids.extend_from_slice(self.row(r));
            mask.extend_from_slice(self.row_mask(r));
        }
        TokenBatch {
            ids,
            mask,
            rows: rows.len(),
            seq: self.seq,
        }
    }

    /// Stacks batches of equal width.
    pub fn stack(parts: &[&TokenBatch]) -> Result<TokenBatch> {
        let seq = parts.first().map_or(0, |p| p.seq);
        if parts.iter().any(|p| p.seq != seq) {
            return Err(Error::Contract("stacked batches differ in width".into()));
        }
        let mut out = TokenBatch {
            ids: Vec::new(),
            mask: Vec::new(),
            rows: 0,
            seq,
        };
        for p in parts {
            out.ids.extend_from_slice(&p.ids);
            out.mask.extend_from_slice(&p.mask);
            out.rows += p.rows;
        }
        Ok(out)
    }

    pub(crate) fn mask_as<F: numcore::Real>(&self) -> Vec<F> {
        self.mask
            .iter()
            .map(|&m| if m { F::one() } else { F::zero() })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    /// Even in-batch index reads the semantic variable from side a.
    pub fn for_index(i: usize) -> Side {
        if i.is_multiple_of(2) {
            Side::A
        } else {
            Side::B
        }
    }
}

/// Parallel pairs sharing one padded width.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub a: TokenBatch,
    pub b: TokenBatch,
    pub lang_a: Vec<usize>,
    pub lang_b: Vec<usize>,
    pub sem_side: Vec<Side>,
}

impl PairBatch {
    pub fn new<S: AsRef<[usize]>>(a: &[S], b: &[S], lang_a: Vec<usize>, lang_b: Vec<usize>) -> Result<Self> {
        let n = a.len();
        if b.len() != n || lang_a.len() != n || lang_b.len() != n {
            return Err(Error::Contract(format!(
                "pair batch sides disagree: {} / {} / {} / {}",
                n,
                b.len(),
                lang_a.len(),
                lang_b.len()
            )));
        }
        if n == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let width = a.iter().chain(b.iter()).map(|s| s.as_ref().len()).max().unwrap_or(0);
        Ok(PairBatch {
            a: TokenBatch::from_sequences(a, width)?,
            b: TokenBatch::from_sequences(b, width)?,
            lang_a,
            lang_b,
            sem_side: (0..n).map(Side::for_index).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq(&self) -> usize {
        self.a.seq()
    }

    /// `[a; b]` as one batch of `2B` rows.
    pub fn both(&self) -> TokenBatch {
        TokenBatch::stack(&[&self.a, &self.b]).expect("sides share a width")
    }

    /// Languages of `[a; b]`.
    pub fn both_langs(&self) -> Vec<usize> {
        self.lang_a.iter().chain(&self.lang_b).copied().collect()
    }

    /// Rows of `[a; b]` read by the semantic encoder, one per pair.
    pub fn sem_rows(&self) -> Vec<usize> {
        let n = self.len();
        self.sem_side
            .iter()
            .enumerate()
            .map(|(i, s)| match s {
                Side::A => i,
                Side::B => n + i,
            })
            .collect()
    }

    /// Same pairs in a new order.
    pub fn permuted(&self, order: &[usize]) -> PairBatch {
        PairBatch {
            a: self.a.select(order),
            b: self.b.select(order),
            lang_a: order.iter().map(|&i| self.lang_a[i]).collect(),
            lang_b: order.iter().map(|&i| self.lang_b[i]).collect(),
            sem_side: order.iter().map(|&i| self.sem_side[i]).collect(),
        }
    }
}
