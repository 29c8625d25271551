use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one run seed, so that e.g.
/// changing how much dropout noise is drawn never perturbs the shuffles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seed for model initialization, kept distinct from the other streams.
pub fn init_seed(seed: u64) -> u64 {
    use rand::Rng;
    stream(seed, Stream::Init).random()
}
