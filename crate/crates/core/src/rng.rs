//! Seeded random streams.
//!
//! Every random draw in the lab derives from one 64-bit seed. A generator is
//! addressed by `(seed, stream, substream)`: the stream id names the purpose
//! (see [`stream`]) and becomes the ChaCha stream number, while the substream
//! (a head index, a sequence index, ...) is folded into the 256-bit key with
//! SplitMix64. Two generators share output only if all three coordinates
//! agree, so work can be split across threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod stream {
    pub const WEIGHTS: u64 = 0;
    pub const PAIR_SAMPLING: u64 = 1;
    pub const SYNTH: u64 = 2;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64, substream: u64) -> ChaCha8Rng {
    let mut state = seed;
    let head = splitmix64(&mut state);
    let mut state = head ^ substream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}
