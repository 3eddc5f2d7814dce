//! Seeded random streams.
//!
//! Parallel work is split into fixed-size chunks and chunk `k` always draws
//! from stream `k`, so results do not depend on the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Samples per parallel chunk.
pub const CHUNK: usize = 1024;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives an independent sub-seed, e.g. for nested experiments.
pub fn derive(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fills `count` items by calling `draw(rng, out)` once per item, chunked
/// over seed streams. `width` is the number of values per item.
pub fn fill_chunked<F>(seed: u64, count: usize, width: usize, draw: F) -> Vec<f64>
where
    F: Fn(&mut Rng, &mut [f64]) + Sync,
{
    let mut out = vec![0.0; count * width];
    if width == 0 {
        return out;
    }
    out.par_chunks_mut(CHUNK * width).enumerate().for_each(|(k, block)| {
        let mut rng = stream(seed, k as u64);
        for item in block.chunks_exact_mut(width) {
            draw(&mut rng, item);
        }
    });
    out
}
