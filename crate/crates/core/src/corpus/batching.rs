use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::PairBatch;
use crate::seeding::{stream_rng, Domain};

/// A framed training pair (`[BOS, words…, EOS]` on both sides).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub lang_a: usize,
    pub lang_b: usize,
}

/// Deterministic epoch-shuffled batches; batch `s` is a pure function of
/// `(examples, batch_size, seed, s)`.
#[derive(Debug, Clone)]
pub struct Batcher {
    examples: Vec<Example>,
    batch_size: usize,
    seed: u64,
    order: Option<(u64, Vec<usize>)>,
}

pub fn make_batches(examples: Vec<Example>, batch_size: usize, seed: u64) -> Result<Batcher> {
    Batcher::new(examples, batch_size, seed)
}

impl Batcher {
    pub fn new(examples: Vec<Example>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if examples.is_empty() {
            return Err(Error::Contract("no training examples".into()));
        }
        Ok(Batcher {
            examples,
            batch_size,
            seed,
            order: None,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// The last batch of an epoch may be short.
    pub fn batches_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.batch_size) as u64
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.examples.len()).collect();
            order.shuffle(&mut stream_rng(self.seed, Domain::Batches, epoch));
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// Batch number `index` (0-based) of the stream.
    pub fn batch(&mut self, index: u64) -> Result<PairBatch> {
        let ids = self.batch_indices(index);
        let ex: Vec<&Example> = ids.iter().map(|&i| &self.examples[i]).collect();
        let a: Vec<&[usize]> = ex.iter().map(|e| e.a.as_slice()).collect();
        let b: Vec<&[usize]> = ex.iter().map(|e| e.b.as_slice()).collect();
        PairBatch::new(
            &a,
            &b,
            ex.iter().map(|e| e.lang_a).collect(),
            ex.iter().map(|e| e.lang_b).collect(),
        )
    }

    /// Example indices of batch `index`, in batch order.
    pub fn batch_indices(&mut self, index: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, pos) = (index / bpe, (index % bpe) as usize);
        let b = self.batch_size;
        let order = self.epoch_order(epoch);
        order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
    }

    /// Endless stream of batches starting at `start`.
    pub fn stream(mut self, start: u64) -> impl Iterator<Item = Result<PairBatch>> {
        (start..).map(move |i| self.batch(i))
    }
}
