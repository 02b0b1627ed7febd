//! Seeded random streams.
//!
//! A run has one root seed. Every consumer of randomness (client selection,
//! local shuffling, partition synthesis, ...) gets its own ChaCha8 stream whose
//! seed is a hash of `(root, purpose, round, client)`. Streams never share
//! state, so the order in which clients are simulated (or the number of
//! threads doing it) cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the seed hash, so
/// values must stay stable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    BlobMeans = 1,
    BlobSamples = 2,
    Partition = 3,
    Shards = 4,
    ModelInit = 5,
    Selection = 6,
    /// Local data order on a client: epoch shuffles in FedAvg mode and the
    /// virtual-client resample in FedVC mode share this stream.
    LocalData = 7,
    Centralized = 8,
    ClientSizes = 9,
    Sweep = 10,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of words into one well-mixed 64-bit seed.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// 64-bit FNV-1a, used to turn client ids and grid keys into seed words.
pub fn str_key(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(root: u64, purpose: Purpose, round: u64, client: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(root, &[purpose as u64, round, client]))
}

/// Stream for a named client in a given round.
pub fn client_stream(root: u64, purpose: Purpose, round: u64, client_id: &str) -> SimRng {
    stream(root, purpose, round, str_key(client_id))
}
