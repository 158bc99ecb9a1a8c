//! Seeded random streams.
//!
//! Every stochastic component in the crate draws from a [`SeededStream`], a
//! ChaCha8 generator keyed through [`SeedableRng::seed_from_u64`]. The
//! seed-to-stream mapping is pinned by a golden-sample test, so changing the
//! generator is a breaking change for every recorded experiment.
//!
//! Sub-streams are derived by XOR-ing a base seed with a worker or row index
//! (see [`derive_seed`]); the Hi and Lo channels of a frame use the fixed
//! [`HI_STREAM_TAG`] / [`LO_STREAM_TAG`] offsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide seeded generator.
pub type SeededStream = ChaCha8Rng;

/// Tag mixed into a frame seed to obtain the Hi channel seed.
pub const HI_STREAM_TAG: u64 = 0x4849_0000_0000_0001;
/// Tag mixed into a frame seed to obtain the Lo channel seed.
pub const LO_STREAM_TAG: u64 = 0x4c4f_0000_0000_0002;

/// Opens the stream for `seed`.
pub fn stream(seed: u64) -> SeededStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sub-seed for worker / row `index` under `base`: `base ^ index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

/// Seeds of the (Hi, Lo) channel instances belonging to a frame seed.
pub fn stream_pair_seeds(frame_seed: u64) -> (u64, u64) {
    (frame_seed ^ HI_STREAM_TAG, frame_seed ^ LO_STREAM_TAG)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore};
    use rand_distr::StandardNormal;

    // Frozen on first build; any change here silently invalidates every
    // recorded sweep, so treat a failure as a versioning event.
    #[test]
    fn golden_samples() {
        let mut s = stream(42);
        let words: Vec<u64> = (0..3).map(|_| s.next_u64()).collect();
        assert_eq!(words, GOLDEN_U64);
        let mut s = stream(7);
        let normals: Vec<f64> = (0..3).map(|_| s.sample(StandardNormal)).collect();
        assert_eq!(normals, GOLDEN_NORMAL);
    }

    const GOLDEN_U64: [u64; 3] = [12578764544318200737, 17529487244874322312, 7886285670807131020];
    const GOLDEN_NORMAL: [f64; 3] = [-0.7753719332177971, -1.3834217200084091, 0.8897130187430372];

    #[test]
    fn derived_seeds_differ() {
        let (hi, lo) = stream_pair_seeds(7);
        assert_ne!(hi, lo);
        assert_eq!(derive_seed(derive_seed(99, 5), 5), 99);
        let a = stream(hi).next_u64();
        let b = stream(lo).next_u64();
        assert_ne!(a, b);
    }
}
