//! Splittable seeding: every random draw in an experiment is addressed by
//! `(master_seed, N, trial, purpose)` and gets its own ChaCha stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Ensemble,
    Embedding,
    QMatrix,
    LimitLaw,
    Haar,
    Gaussian,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Ensemble => 0x656e_7365,
            Purpose::Embedding => 0x656d_6264,
            Purpose::QMatrix => 0x716d_6174,
            Purpose::LimitLaw => 0x6c69_6d74,
            Purpose::Haar => 0x6861_6172,
            Purpose::Gaussian => 0x6761_7573,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The 64-bit seed of stream `(master, n, trial, purpose)`.
pub fn derive_seed(master: u64, n: usize, trial: usize, purpose: Purpose) -> u64 {
    let mut h = splitmix(master);
    for word in [n as u64, trial as u64, purpose.tag()] {
        h = splitmix(h ^ word);
    }
    h
}

pub fn stream(master: u64, n: usize, trial: usize, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, n, trial, purpose))
}
