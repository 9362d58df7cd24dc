//! Seed derivation.
//!
//! Each random draw in a simulation is taken from its own ChaCha8 stream
//! whose seed is a function of `(master seed, role, round, node)`. Streams
//! never depend on scheduling or on draws made for other roles, which is what
//! makes policy comparisons paired and parallel training schedule-free.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Role of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Init,
    Select,
    Train,
    Eval,
    Central,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x01,
            Stream::Init => 0x02,
            Stream::Select => 0x03,
            Stream::Train => 0x04,
            Stream::Eval => 0x05,
            Stream::Central => 0x06,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for `(master, role, round, node)`.
pub fn substream(master: u64, stream: Stream, round: u64, node: u64) -> SimRng {
    let mut seed = [0u8; 32];
    let mut state = splitmix64(master);
    for (chunk, word) in seed
        .chunks_exact_mut(8)
        .zip([stream.tag(), round, node, 0x6665_6473_696d])
    {
        state = splitmix64(state ^ splitmix64(word));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    SimRng::from_seed(seed)
}

/// Derived 64-bit seed, for components configured with a plain `u64` seed.
pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(stream.tag()))
}
