use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream for one unit of work (a patch, an image).
/// Results never depend on the order in which units are scheduled.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
