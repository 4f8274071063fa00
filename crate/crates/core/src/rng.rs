use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator streams carved out of one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Means = 1,
    Samples = 2,
    Subsample = 3,
    Init = 4,
    Shuffle = 5,
    Augment = 6,
    Prototype = 7,
}

/// Generator for `(seed, purpose, index)`; distinct triples never share a
/// stream.
pub fn derive_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
