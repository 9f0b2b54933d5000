//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from a base seed
//! and a stream identifier, so results never depend on evaluation order or on
//! how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream purposes, kept disjoint so that e.g. the parameter initializer and
/// the epoch-0 shuffler never share a keystream.
const DOMAIN_SHIFT: u32 = 56;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Epoch = 2,
    Mask = 3,
    Sampler = 4,
    Split = 5,
    Synthetic = 6,
}

/// Stream for `(seed, domain, index)`; `index` must fit in 56 bits.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1u64 << DOMAIN_SHIFT));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << DOMAIN_SHIFT) | index);
    rng
}

/// Noise stream for one (row, sample) lane of the sampler.
pub fn sampler_stream(init_seed: u64, row: usize, sample: usize) -> ChaCha8Rng {
    // 32 bits of row index, 24 bits of sample index.
    let index = ((row as u64 & 0xffff_ffff) << 24) | (sample as u64 & 0xff_ffff);
    stream(init_seed, Domain::Sampler, index)
}

pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal<R: rand::Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
