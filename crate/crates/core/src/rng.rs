//! Counter-style random streams.
//!
//! Every particle (or Monte Carlo path) owns one ChaCha stream keyed by
//! `(seed, domain, index)`, so results never depend on how work is split
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains keep particle simulations and auxiliary path simulations
/// from reusing the same key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    Particles,
    FeynmanKac,
    Replicate,
}

impl StreamDomain {
    fn tag(self) -> u64 {
        match self {
            StreamDomain::Particles => 0x5041_5254,
            StreamDomain::FeynmanKac => 0x464b_5041,
            StreamDomain::Replicate => 0x5245_504c,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed, used for independent replicate systems.
pub fn derive_seed(seed: u64, domain: StreamDomain, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain.tag()).wrapping_add(index))
}

/// The random stream owned by item `index`.
pub fn stream(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ domain.tag()));
    rng.set_stream(index);
    rng
}
