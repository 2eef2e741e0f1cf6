//! Seed derivation and counter-based random streams.
//!
//! Every random quantity in the crate is a pure function of a 64-bit seed.
//! Sub-seeds (per trial, per probe, per sketch factor) are derived with
//! [`derive_seed`], which chains the SplitMix64 finalizer:
//!
//! ```text
//! mix64(z):
//!     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!     return z ^ (z >> 31)
//!
//! derive_seed(base, stream, index) =
//!     mix64(mix64(base ^ mix64(stream + 0x9E3779B97F4A7C15)) + index * 0x9E3779B97F4A7C15)
//! ```
//!
//! Sketch columns draw from ChaCha8 keyed by the sketch seed with the column
//! index as the stream id, so column `j` never depends on how many draws
//! columns `0..j` consumed. Realizations are therefore identical whether the
//! columns are generated serially or in parallel.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent-looking seed for `(stream, index)` under `base`.
#[inline]
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let keyed = mix64(base ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)));
    mix64(keyed.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA)))
}

/// Stream ids used when deriving seeds, so distinct consumers never collide.
pub mod streams {
    pub const PROBE_BARRIER: u64 = 1;
    pub const PROBE_SANDWICH: u64 = 2;
    pub const PROBE_LOWER: u64 = 3;
    pub const PROBE_ANTI: u64 = 4;
    pub const PROBE_KFAC_BARRIER: u64 = 5;
    pub const PROBE_KFAC_DEVIATION: u64 = 6;
    pub const PROBE_CROSS_TERM: u64 = 7;
    pub const PROBE_LEAKAGE: u64 = 8;
    pub const PROBE_RATE: u64 = 9;
    pub const PROBE_KFAC_LEAKAGE: u64 = 10;
    pub const CALIBRATION: u64 = 11;
    pub const INSTANCE: u64 = 20;
    pub const SKETCH: u64 = 21;
    pub const PAIRS: u64 = 22;
    pub const KRON_FACTOR_A: u64 = 30;
    pub const KRON_FACTOR_E: u64 = 31;
    pub const SWEEP: u64 = 40;
    pub const GENERATOR: u64 = 41;
}

/// General-purpose generator for a derived seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for one sketch column; independent of every other column.
pub fn column_rng(seed: u64, column: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(column as u64);
    rng
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Uniformly random unit vector in `R^n` (`n >= 1`).
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v = gaussian_vector(rng, n);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}
