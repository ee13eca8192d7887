//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness asks for a stream by purpose plus a small
//! index path (iteration, member, epoch, ...). Streams never share state, so
//! toggling one feature (say MC-dropout) leaves every other draw untouched,
//! and a resumed run regenerates exactly the draws it would have made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Dropout,
    Sampling,
    Split,
    Batch,
    Data,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x1e17,
            Stream::Dropout => 0xd209,
            Stream::Sampling => 0x5a3f,
            Stream::Split => 0x5b11,
            Stream::Batch => 0xba7c,
            Stream::Data => 0xda7a,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root of the seed tree for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Derive a 64-bit seed for `stream` at the given index path.
    pub fn seed(&self, stream: Stream, path: &[u64]) -> u64 {
        let mut h = splitmix64(self.root ^ stream.tag().rotate_left(32));
        for &p in path {
            h = splitmix64(h ^ p);
        }
        h
    }

    pub fn rng(&self, stream: Stream, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream, path))
    }
}
