use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named random substreams. Each draws from an independent ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Substream {
    Dropout,
    Zoneout,
    Init,
    Data,
}

impl Substream {
    fn id(self) -> u64 {
        match self {
            Substream::Dropout => 1,
            Substream::Zoneout => 2,
            Substream::Init => 3,
            Substream::Data => 4,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded, forkable source of randomness.
///
/// `fork(key)` derives a child stream from the parent seed and a key, so the
/// same (seed, fork path, substream, draw index) always yields the same value
/// regardless of what other streams were consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, key: u64) -> RngStream {
        RngStream { seed: splitmix64(self.seed ^ splitmix64(key.wrapping_add(0x5151))) }
    }

    pub fn rng(&self, sub: Substream) -> ChaCha8Rng {
        let mut s = [0u8; 32];
        s[..8].copy_from_slice(&self.seed.to_le_bytes());
        s[8..16].copy_from_slice(&sub.id().to_le_bytes());
        ChaCha8Rng::from_seed(s)
    }

    /// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
    pub fn dropout_mask(&self, n: usize, rate: f64) -> Vec<f64> {
        let mut rng = self.rng(Substream::Dropout);
        let keep = 1.0 / (1.0 - rate);
        (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
    }

    /// Zoneout keep-previous indicators: 1 with probability `rate`, else 0.
    pub fn zoneout_mask(&self, n: usize, rate: f64) -> Vec<f64> {
        let mut rng = self.rng(Substream::Zoneout);
        (0..n).map(|_| if rng.gen::<f64>() < rate { 1.0 } else { 0.0 }).collect()
    }
}
