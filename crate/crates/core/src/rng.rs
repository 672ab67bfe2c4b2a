//! Seed derivation for per-stage reproducibility.
//!
//! Every stochastic stage of the pipeline draws its own RNG from the master
//! seed via `sub_seed(master, counter)`, where the counter is fixed per stage
//! (see [`crate::harness::StageSeed`]). Changing one stage's draws therefore
//! never perturbs another stage's stream.

/// splitmix64 finalizer; a well-mixed 64-bit permutation.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the sub-seed for stage `counter` from `master`.
pub fn sub_seed(master: u64, counter: u64) -> u64 {
    splitmix64(master ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
