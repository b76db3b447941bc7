use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one named stream of a seeded run. Distinct
/// streams from the same seed are independent.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
