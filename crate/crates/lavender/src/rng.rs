//! Seed-derived deterministic random streams.
//!
//! Every source of randomness draws from its own ChaCha stream derived from
//! the run seed and a purpose tag. Keeping streams independent means adding
//! or removing one consumer (e.g. the aligner) never shifts the draws seen
//! by another (e.g. batch shuffling), which is what makes the λ=0 run
//! bitwise-comparable to a plain autoregressive run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose tags for the derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ModelInit,
    AlignerInit,
    ParallelInit,
    LoraInit,
    Batches,
    Dataset,
    Other(u64),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ModelInit => 0x6d6f64656c_u64,
            Stream::AlignerInit => 0x616c69676e_u64,
            Stream::ParallelInit => 0x706172_u64,
            Stream::LoraInit => 0x6c6f7261_u64,
            Stream::Batches => 0x6261746368_u64,
            Stream::Dataset => 0x64617461_u64,
            Stream::Other(t) => t.wrapping_add(0x9e3779b97f4a7c15),
        }
    }
}

/// A ChaCha stream keyed by (seed, purpose). Deterministic across platforms.
pub fn stream(seed: u64, purpose: Stream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(purpose.tag());
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic_and_independent() {
        let a: f64 = stream(7, Stream::ModelInit).random();
        let b: f64 = stream(7, Stream::ModelInit).random();
        assert_eq!(a, b);

        let c: f64 = stream(7, Stream::Batches).random();
        assert_ne!(a, c);

        let d: f64 = stream(8, Stream::ModelInit).random();
        assert_ne!(a, d);
    }
}
