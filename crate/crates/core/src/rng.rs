//! Seed derivation and the counter-addressed Gaussian noise used by the
//! integrator.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser; used to derive independent seeds from a base seed.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix64(seed ^ mix64(salt))
}

/// Salt from a short tag, so call sites can name their streams.
pub fn salt(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Independent generator for replica `index` under `seed`.
pub fn replica_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform in `(0, 1]`.
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Gaussian noise addressed by `(stream, counter)`.
///
/// Every draw consumes a fixed number of ChaCha words, so the values for a
/// given particle slot and step do not depend on what else was drawn. This
/// is what makes relabeling experiments exact.
#[derive(Clone)]
pub struct NoiseSource {
    base: ChaCha8Rng,
    dim: usize,
}

impl NoiseSource {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
            dim,
        }
    }

    fn words_per_draw(&self) -> u128 {
        // two u64 (four u32 words) per Box-Muller pair
        (4 * self.dim.div_ceil(2)) as u128
    }

    /// Fills `out` (length `dim`) with i.i.d. standard normals for
    /// `(stream, counter)`.
    pub fn fill(&self, stream: u64, counter: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(counter as u128 * self.words_per_draw());
        let mut i = 0;
        while i < self.dim {
            let u1 = open_unit(rng.next_u64());
            let u2 = open_unit(rng.next_u64());
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            out[i] = r * c;
            if i + 1 < self.dim {
                out[i + 1] = r * s;
            }
            i += 2;
        }
    }
}
