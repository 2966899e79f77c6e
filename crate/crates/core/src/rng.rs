use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs up to three small indices into one stream id.
pub fn stream_id(a: u64, b: u64, c: u64) -> u64 {
    (a << 42) ^ (b << 21) ^ c
}
