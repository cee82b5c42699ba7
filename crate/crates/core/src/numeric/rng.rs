//! Seeded RNG stream derivation.
//!
//! Parallel sections (E-step groups, benchmark replications, bootstrap
//! replicates) each own an independent generator derived from the user seed
//! and the unit's coordinates, so results do not depend on thread count or
//! scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard 64-bit finalizer used to decorrelate seeds.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a sequence of stream coordinates into a single 64-bit seed.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut out = splitmix64(&mut state);
    for &c in coords {
        state ^= c.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Independent ChaCha8 stream for the given coordinates.
pub fn stream(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}
