//! Shared fixtures for the criterion benchmarks.

use freqfocus::net::Tensor3;

/// Deterministic pseudo-random batch in `[-1, 1)` without pulling an RNG
/// into the library target.
pub fn fixture_batch(batch: usize, channels: usize, length: usize) -> Tensor3 {
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    let data = (0..batch * channels * length)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor3::from_channel_major(batch, channels, length, data).expect("sizes agree")
}

pub fn fixture_signal(length: usize) -> Vec<f64> {
    fixture_batch(1, 1, length).into_data()
}
