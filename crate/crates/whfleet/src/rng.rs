//! Deterministic random streams derived from one master seed.
//!
//! Every consumer of randomness gets its own stream keyed by a purpose tag
//! plus up to two indices (typically agent and iteration). Streams are
//! derived by hashing the key words with a SplitMix64-style mixer, so
//!
//! * two runs with the same master seed are bit-identical, regardless of
//!   thread count or scheduling, and
//! * changing one consumer's draw count (say, the number of solver samples)
//!   never perturbs the values seen by another (say, the drain generator).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Heterogeneous parameter draws and initial states.
    Population,
    /// Training drain scenario.
    DrainsTrain,
    /// Validation (truth) drain scenario.
    DrainsVal,
    /// Candidate-trajectory sampling inside the dual solver.
    Solver,
    /// Evaluation draws (weighted candidate selection).
    Evaluation,
    /// Online-tracking inner loop.
    Online,
    /// Randomized test instances.
    Instances,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Population => 0x706f_7075_6c61_7465,
            Purpose::DrainsTrain => 0x6472_6169_6e74_7261,
            Purpose::DrainsVal => 0x6472_6169_6e76_616c,
            Purpose::Solver => 0x736f_6c76_6572_7367,
            Purpose::Evaluation => 0x6576_616c_6472_6177,
            Purpose::Online => 0x6f6e_6c69_6e65_7472,
            Purpose::Instances => 0x696e_7374_616e_6365,
        }
    }
}

/// SplitMix64 finalizer; full-avalanche mix of one word.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the purpose-level stream.
pub fn stream_seed(master: u64, purpose: Purpose) -> u64 {
    mix(mix(master) ^ purpose.tag())
}

/// Seed of a sub-stream, e.g. per (agent, iteration).
pub fn substream_seed(stream: u64, a: u64, b: u64) -> u64 {
    mix(mix(stream ^ mix(a)) ^ mix(b.wrapping_add(0x517C_C1B7_2722_0A95)))
}

/// RNG for a purpose-level stream.
pub fn stream_rng(master: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, purpose))
}

/// RNG for a (purpose, a, b) sub-stream.
pub fn substream_rng(master: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(stream_seed(master, purpose), a, b))
}
