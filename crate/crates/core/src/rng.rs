//! Reproducible random streams.
//!
//! Every random draw is addressed by `(master seed, stream id, index)`: the
//! first two select a ChaCha key, the index selects the ChaCha stream. Paths
//! can therefore be generated in any order or on any thread without changing
//! a single bit of the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers used by the library. Distinct processes never share a key.
pub mod streams {
    pub const AGENT_BROWNIAN: u64 = 1;
    pub const AGENT_JUMPS: u64 = 2;
    pub const AGENT_KAPPA: u64 = 3;
    /// Demand components use `DEMAND_BASE + component index`.
    pub const DEMAND_BASE: u64 = 100;
    /// Storage agents in the equilibrium solver use `STORAGE_BASE + agent index`.
    pub const STORAGE_BASE: u64 = 1_000;
    /// External supply of agent `j` uses `KAPPA_BASE + j`.
    pub const KAPPA_BASE: u64 = 2_000;
    pub const PROBE: u64 = 3_000;
    pub const BOOTSTRAP: u64 = 4_000;
    pub const OU_SIMULATION: u64 = 5_000;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(master, stream, index)`.
pub fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut state = master ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
