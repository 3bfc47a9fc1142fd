use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named consumer (one per parameter, split, ...),
/// so adding or reordering parameters does not shift other streams.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
