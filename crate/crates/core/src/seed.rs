//! Seed derivation for per-round, per-client random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes keep streams for the same (round, client) independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    LocalTraining = 1,
    TargetUpdate = 2,
    Prediction = 3,
    Init = 4,
    Data = 5,
    Partition = 6,
    Holdout = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a list of coordinates.
pub fn derive(base: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
