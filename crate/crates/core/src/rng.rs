// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams.
//!
//! A single run seed fans out into independent named streams, so adding a
//! draw in one subsystem never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    MaskNoise,
    RandomHeads,
    Init,
    Shuffle,
    Data,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Self::Split => 1,
            Self::MaskNoise => 2,
            Self::RandomHeads => 3,
            Self::Init => 4,
            Self::Shuffle => 5,
            Self::Data => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
