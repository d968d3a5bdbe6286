//! Seeded random streams.
//!
//! Every random quantity in the crate comes from a ChaCha8 generator. A master
//! seed is expanded into independent substreams by selecting a ChaCha stream
//! id built from a [`Purpose`] tag (top 16 bits) and an ordinal (low 48 bits),
//! so e.g. the noise added to bag 17 at step 3 does not depend on how many
//! draws any other consumer made. Derived seeds for sweep cells are obtained
//! with the SplitMix64 finalizer.
//!
//! Gaussian draws use `rand_distr::StandardNormal` (the Ziggurat method) on
//! top of these streams; Laplace draws use the inverse CDF of one uniform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumer of a random substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Purpose {
    Truth = 1,
    Features = 2,
    Noise = 3,
    OracleNoise = 4,
    DpNoise = 5,
    Bagging = 6,
    Rounding = 7,
    Trial = 8,
    Probe = 9,
}

const ORDINAL_MASK: u64 = (1 << 48) - 1;

/// Generator for substream `ordinal` of `purpose` under `seed`.
pub fn substream(seed: u64, purpose: Purpose, ordinal: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (ordinal & ORDINAL_MASK));
    rng
}

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a list of coordinates.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(mix64(master), |acc, &c| mix64(acc ^ mix64(c)))
}

/// Uniform draw in the open interval (0, 1) built from 53 random bits.
pub(crate) fn open_unit<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if u > 0.0 {
            return u;
        }
    }
}
