//! Environmental state characterization from band-limited RMS seismic trend
//! channels.
//!
//! The pipeline windows aligned channels, summarizes each window with
//! per-channel statistics, clusters the windows with k-means++ / Lloyd,
//! labels clusters against operator thresholds and correlates the resulting
//! state timeline with glitch and lock-loss catalogs.

pub mod clustering;
pub mod dsp;
pub mod evaluation;
pub mod features;
pub mod labeling;
pub mod pipeline;
pub mod simulate;
pub mod timeseries;

/// Derives an independent 64-bit seed for `stream` from a parent seed
/// (SplitMix64 finalizer over the combined input).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
