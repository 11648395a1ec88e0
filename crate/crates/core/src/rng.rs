//! Reproducible random streams.
//!
//! Every stochastic quantity in the crate is drawn from a ChaCha stream keyed
//! by the master seed, with the stream id derived from a path of indices
//! (grid point, replication, draw, ...). A given path always yields the same
//! stream no matter which worker thread evaluates it, so parallel runs are
//! bit-identical to sequential ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream id for an index path.
pub fn stream_id(path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(path.len() as u64), |h, &x| splitmix(h ^ splitmix(x)))
}

/// Independent generator for `(master, path)`.
pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream_id(path));
    rng
}
