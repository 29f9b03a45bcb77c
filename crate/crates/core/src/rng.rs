//! Named, serializable random streams.
//!
//! Every source of randomness in a run (initialization, data order,
//! augmentation) owns one [`RngStream`]. A stream is xoshiro256** over four
//! 64-bit words, so its full state can be written into a checkpoint and
//! replayed exactly.

use rand_core::RngCore;

/// Full state of one stream.
pub type StreamState = [u64; 4];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    s: StreamState,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, used to turn stream labels into seed material.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl RngStream {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut x = seed;
        let s = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Self { s }
    }

    /// Independent stream identified by `(seed, label, index)`.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        let mut x = seed ^ fnv1a(label.as_bytes()).rotate_left(17);
        let mixed = splitmix64(&mut x) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
        Self::seed_from_u64(mixed)
    }

    pub fn from_state(s: StreamState) -> Self {
        // the all-zero state is a fixed point of xoshiro
        if s == [0; 4] {
            return Self::seed_from_u64(0);
        }
        Self { s }
    }

    pub fn state(&self) -> StreamState {
        self.s
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
