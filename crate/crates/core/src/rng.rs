//! Per-trajectory random streams.
//!
//! Every trajectory owns a ChaCha8 generator whose 256-bit key is derived
//! from `(master_seed, domain)` with SplitMix64 and whose 64-bit stream id is
//! the trajectory index. ChaCha is counter based, so the stream for index `k`
//! is a pure function of `(master_seed, domain, k)` and ensembles are
//! bit-identical whatever order or thread count they are generated with.
//!
//! SplitMix64 constants (Steele, Lea, Flood 2014):
//! increment `0x9E3779B97F4A7C15`, multipliers `0xBF58476D1CE4E5B9` and
//! `0x94D049BB133111EB`, shifts 30/27/31.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLITMIX_MUL1: u64 = 0xBF58_476D_1CE4_E5B9;
const SPLITMIX_MUL2: u64 = 0x94D0_49BB_1331_11EB;

/// Independent uses of randomness get separate keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamDomain {
    /// Wiener increments of synthesized records.
    Noise = 0x6E6F_6973_6500_0001,
    /// Projective readout draws.
    Readout = 0x7265_6164_6F75_7402,
    /// Axis assignment and other bookkeeping draws.
    Aux = 0x6175_7800_0000_0003,
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MUL1);
    z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MUL2);
    z ^ (z >> 31)
}

pub fn stream_key(master_seed: u64, domain: StreamDomain) -> [u8; 32] {
    let mut state = master_seed ^ (domain as u64);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Generator for trajectory `index` in `domain`.
pub fn stream_rng(master_seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(stream_key(master_seed, domain));
    rng.set_stream(index);
    rng
}
