use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Corpus = 1,
    Batches = 2,
    Step = 3,
    Init = 4,
}

/// Generator for `(seed, domain, index)`; streams never overlap.
pub fn stream_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (domain as u64).rotate_left(32));
    rng.set_stream(index);
    rng
}
