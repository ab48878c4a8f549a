//! Per-trial seeds that do not depend on execution order.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one trial of one grid cell.
///
/// Each coordinate is folded in as `h ← mix64(h + GOLDEN + x)`, starting from the master seed,
/// so the result is a fixed function of `(master, d, count, trial)` alone.
pub fn derive_seed(master: u64, d: u64, count: u64, trial: u64) -> u64 {
    [d, count, trial].iter().fold(mix64(master), |h, &x| {
        mix64(h.wrapping_add(GOLDEN).wrapping_add(x))
    })
}
