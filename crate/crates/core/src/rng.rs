//! Labelled, order-independent RNG streams.
//!
//! A stream is a ChaCha8 generator keyed by the base seed with the stream id
//! set to the FNV-1a hash of the label, so creating streams in any order
//! gives the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn stream(base_seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

pub fn streams<S: AsRef<str>>(base_seed: u64, labels: &[S]) -> Vec<StreamRng> {
    labels.iter().map(|l| stream(base_seed, l.as_ref())).collect()
}
