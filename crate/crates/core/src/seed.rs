//! Named random sub-streams derived from one master seed.
//!
//! Every consumer (scene `i` of the dataset stream, detections for scene `i`,
//! decoder training for class `c`, ...) gets its own generator seeded from
//! `(master, stream, index)`, so work can be re-run or parallelized piecewise
//! without changing any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Dataset,
    Detector,
    Training,
    Inference,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Dataset => 0x6461_7461,
            Stream::Detector => 0x6465_7463,
            Stream::Training => 0x7472_6169,
            Stream::Inference => 0x696e_6665,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.tag()) ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let a = derive_seed(7, Stream::Dataset, 0);
        assert_ne!(a, derive_seed(7, Stream::Detector, 0));
        assert_ne!(a, derive_seed(7, Stream::Dataset, 1));
        assert_ne!(a, derive_seed(8, Stream::Dataset, 0));
        assert_eq!(a, derive_seed(7, Stream::Dataset, 0));
    }
}
