//! One-sided amplitude spectra and the frequency-focus metrics built on them.
//!
//! Everything here is a pure function over real sequences. The forward
//! transform is normalised by `1/T` and only the bins `0..=⌊(T-1)/2⌋` are
//! kept, so for even `T` the Nyquist bin is not part of a [`Spectrum`].
//! Amplitudes of non-DC bins are not doubled.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Number of one-sided bins kept for a sequence of length `t`.
pub fn bin_count(t: usize) -> usize {
    if t == 0 {
        0
    } else {
        (t - 1) / 2 + 1
    }
}

/// Full-length forward DFT with `1/T` normalisation:
/// `f_k = (1/T) Σ_t s_t e^{-j2πkt/T}`.
pub fn dft(signal: &[f64]) -> Vec<Complex64> {
    let n = signal.len();
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if n == 0 {
        return buf;
    }
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n));
    fft.process(&mut buf);
    let scale = 1.0 / n as f64;
    for c in &mut buf {
        *c *= scale;
    }
    buf
}

/// Inverse of [`dft`], keeping the real part.
pub fn idft(coeffs: &[Complex64]) -> Vec<f64> {
    let n = coeffs.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf = coeffs.to_vec();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    fft.process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// One-sided amplitude spectrum of a real sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    amplitudes: Vec<f64>,
    sampling_freq: f64,
    source_length: usize,
}

impl Spectrum {
    /// Builds a spectrum from raw amplitudes, e.g. an averaged FE map.
    ///
    /// `amplitudes.len()` must equal `bin_count(source_length)` and every
    /// amplitude must be finite and non-negative.
    pub fn from_amplitudes(
        amplitudes: Vec<f64>,
        sampling_freq: f64,
        source_length: usize,
    ) -> Result<Self> {
        if amplitudes.len() != bin_count(source_length) || amplitudes.is_empty() {
            return Err(Error::invalid(format!(
                "{} amplitudes do not match source length {source_length}",
                amplitudes.len()
            )));
        }
        if let Some(i) = amplitudes.iter().position(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid(format!("amplitude {i} is negative or non-finite")));
        }
        if !(sampling_freq.is_finite() && sampling_freq > 0.0) {
            return Err(Error::invalid("sampling frequency must be positive"));
        }
        Ok(Self {
            amplitudes,
            sampling_freq,
            source_length,
        })
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn bin_count(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn sampling_freq(&self) -> f64 {
        self.sampling_freq
    }

    pub fn source_length(&self) -> usize {
        self.source_length
    }

    /// Physical frequency of bin `b`: `b·ω_s/T`.
    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sampling_freq / self.source_length as f64
    }

    /// True when every amplitude is zero (e.g. a dead ReLU channel).
    pub fn is_degenerate(&self) -> bool {
        self.amplitudes.iter().all(|&a| a == 0.0)
    }
}

/// One-sided amplitude spectrum `|f_k|` for `k = 0..=⌊(T-1)/2⌋`.
pub fn amplitude_spectrum(signal: &[f64], sampling_freq: f64) -> Result<Spectrum> {
    if signal.len() < 2 {
        return Err(Error::invalid(format!(
            "signal length {} is below the minimum of 2",
            signal.len()
        )));
    }
    if let Some(i) = signal.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let coeffs = dft(signal);
    let bins = bin_count(signal.len());
    let amplitudes = coeffs[..bins].iter().map(|c| c.norm()).collect();
    Spectrum::from_amplitudes(amplitudes, sampling_freq, signal.len())
}

/// Peak-to-RMS ratio of the amplitudes, scaled by `sqrt(B)` so that the
/// result lies in `[1, sqrt(B)]`.
pub fn peak_rms_ratio(spec: &Spectrum) -> Result<f64> {
    peak_rms_ratio_of(spec.amplitudes())
}

/// [`peak_rms_ratio`] over a bare amplitude slice.
pub fn peak_rms_ratio_of(amplitudes: &[f64]) -> Result<f64> {
    let peak = amplitudes.iter().copied().fold(0.0_f64, f64::max);
    if peak <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    // Scaling by the peak keeps the sum of squares away from underflow.
    let norm = amplitudes
        .iter()
        .map(|a| (a / peak) * (a / peak))
        .sum::<f64>()
        .sqrt();
    let ratio = (amplitudes.len() as f64).sqrt() / norm;
    Ok(ratio.clamp(1.0, (amplitudes.len() as f64).sqrt()))
}

/// Population variance of the focus indicators of one unit.
pub fn focus_scale(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::invalid("focus scale needs at least one ratio"));
    }
    if let Some(i) = ratios.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    // Shifting by the first value makes equal ratios give exactly zero.
    let shift = ratios[0];
    let n = ratios.len() as f64;
    let mean = ratios.iter().map(|p| p - shift).sum::<f64>() / n;
    Ok(ratios
        .iter()
        .map(|p| (p - shift - mean) * (p - shift - mean))
        .sum::<f64>()
        / n)
}

/// Amplitude-weighted mean bin index `Σ k·z_k / Σ z_k`.
pub fn frequency_centroid(spec: &Spectrum) -> Result<f64> {
    centroid_of(spec.amplitudes())
}

/// Centroid in physical units (bin centroid × `ω_s/T`).
pub fn frequency_centroid_hz(spec: &Spectrum) -> Result<f64> {
    Ok(frequency_centroid(spec)? * spec.sampling_freq / spec.source_length as f64)
}

/// Centroid scaled to `[0, 1]` by the highest kept bin `B - 1`.
/// A single-bin spectrum has centroid 0.
pub fn normalized_centroid(spec: &Spectrum) -> Result<f64> {
    let c = frequency_centroid(spec)?;
    let top = spec.bin_count() - 1;
    Ok(if top == 0 { 0.0 } else { c / top as f64 })
}

fn centroid_of(amplitudes: &[f64]) -> Result<f64> {
    let peak = amplitudes.iter().copied().fold(0.0_f64, f64::max);
    if !(peak > 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    // Peak-relative weights: a flat spectrum becomes all ones, whose centroid
    // (B-1)/2 is then computed exactly.
    let (mut weighted, mut total) = (0.0, 0.0);
    for (k, a) in amplitudes.iter().enumerate() {
        let w = a / peak;
        weighted += k as f64 * w;
        total += w;
    }
    Ok(weighted / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// Keep bins at or below the centroid bin.
    KeepLfc,
    /// Keep bins above the centroid bin.
    KeepHfc,
    /// Keep the high band and restore a contiguous slice of low bins
    /// working downward from the centroid bin.
    RestoreLfcFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandFilterSpec {
    pub mode: BandMode,
    /// `⌊centroid⌋` of the signal being filtered. This bin is on the LFC side.
    pub centroid_bin: usize,
    /// Fraction of the LFC bins restored; only read by `RestoreLfcFraction`.
    pub fraction: f64,
}

impl BandFilterSpec {
    /// Spec whose split point is the signal's own frequency centroid.
    pub fn for_signal(signal: &[f64], mode: BandMode, fraction: f64) -> Result<Self> {
        let spec = amplitude_spectrum(signal, 1.0)?;
        let centroid = frequency_centroid(&spec)?;
        Ok(Self {
            mode,
            centroid_bin: centroid.floor() as usize,
            fraction,
        })
    }

    /// Number of LFC bins put back by the restore mode:
    /// `⌈fraction·(centroid_bin + 1)⌉`, so 0 restores nothing and 1 restores
    /// every LFC bin.
    pub fn restored_bins(&self) -> usize {
        let lfc = (self.centroid_bin + 1) as f64;
        // Absorb representation error such as 0.1 * 10 = 1.0000000000000002.
        let raw = self.fraction * lfc - 1e-9;
        (raw.ceil().max(0.0) as usize).min(self.centroid_bin + 1)
    }

    fn keeps(&self, freq_bin: usize) -> bool {
        let c = self.centroid_bin;
        match self.mode {
            BandMode::KeepLfc => freq_bin <= c,
            BandMode::KeepHfc => freq_bin > c,
            BandMode::RestoreLfcFraction => {
                freq_bin > c || freq_bin + self.restored_bins() > c
            }
        }
    }
}

/// Zeroes the DFT coefficients outside the kept band and transforms back.
///
/// Coefficient `j` of the full spectrum is classified by its folded
/// frequency `min(j, T-j)`, which keeps the output real. The Nyquist
/// coefficient of an even-length signal always sits on the HFC side. When no
/// coefficient is removed the input is returned unchanged.
pub fn band_filter(signal: &[f64], filter: &BandFilterSpec) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&filter.fraction) {
        return Err(Error::invalid(format!(
            "fraction {} is outside [0, 1]",
            filter.fraction
        )));
    }
    let t = signal.len();
    if t < 2 {
        return Err(Error::invalid("signal length must be at least 2"));
    }
    if filter.centroid_bin >= bin_count(t) {
        return Err(Error::invalid(format!(
            "centroid bin {} is out of range for length {t}",
            filter.centroid_bin
        )));
    }
    let mut coeffs = dft(signal);
    let mut removed = false;
    for (j, c) in coeffs.iter_mut().enumerate() {
        let folded = j.min(t - j);
        if !filter.keeps(folded) {
            *c = Complex64::new(0.0, 0.0);
            removed = true;
        }
    }
    if !removed {
        return Ok(signal.to_vec());
    }
    // Undo the forward 1/T before the unnormalised inverse.
    let scale = t as f64;
    for c in &mut coeffs {
        *c *= scale;
    }
    let mut out = idft(&coeffs);
    let inv = 1.0 / t as f64;
    for x in &mut out {
        *x *= inv;
    }
    Ok(out)
}
