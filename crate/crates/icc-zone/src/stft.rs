//! STFT analysis and synthesis.
//!
//! All estimation in this crate runs on one-sided spectrograms produced
//! here. Conventions, which the CTF lag indexing depends on and which are
//! therefore fixed:
//!
//! * periodic Hann analysis window, identical synthesis window, hop `R`
//!   dividing the frame size `N`;
//! * the signal is zero-padded with `N - R` samples in front, so frame `l`
//!   reads input samples `[l*R - (N - R), l*R + R)` and is centered near
//!   sample `l*R` for 50% overlap;
//! * the frame count is `ceil(len / R)` (the formula
//!   `floor((padded - N)/R) + 1` applied to the padded length, with the tail
//!   zero-padded to a full frame);
//! * the DFT is unscaled on analysis; synthesis applies `1/N` and divides by
//!   the accumulated squared-window overlap, which makes the round trip exact
//!   up to floating point for every fully covered sample.
//!
//! Shifting a signal by exactly `R` samples shifts its spectrogram by
//! exactly one frame.

use crate::error::{IccError, Result};
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Frame/hop/window configuration shared by every STFT-domain component.
#[derive(Debug, Clone)]
pub struct StftConfig {
    /// Frame size N in samples.
    pub frame_size: usize,
    /// Hop R in samples; must divide N.
    pub hop: usize,
    /// Analysis (and synthesis) window, length N.
    pub window: Vec<f64>,
    /// Sample rate in Hz.
    pub sample_rate: f64,
}

impl StftConfig {
    /// Periodic Hann window of length `n`: `0.5 (1 - cos(2 pi i / n))`.
    pub fn hann(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
            .collect()
    }

    /// Hann-windowed configuration.
    pub fn new(frame_size: usize, hop: usize, sample_rate: f64) -> Result<Self> {
        if frame_size == 0 || hop == 0 || frame_size % hop != 0 {
            return Err(IccError::InvalidConfig(format!(
                "hop {hop} must divide frame size {frame_size}"
            )));
        }
        if !(sample_rate > 0.0) {
            return Err(IccError::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            frame_size,
            hop,
            window: Self::hann(frame_size),
            sample_rate,
        })
    }

    /// The default analysis grid: N=256, R=128 (50% overlap) at 24 kHz.
    pub fn default_24k() -> Self {
        Self::new(256, 128, 24000.0).expect("default config is valid")
    }

    /// Number of one-sided frequency bands, `N/2 + 1`.
    pub fn bands(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Number of frames produced for a signal of length `len`.
    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Center frequency of band `k` in Hz: `k * fs / N`.
    pub fn band_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.frame_size as f64
    }

    /// Time at which frame `l` is centered, `l * R / fs` seconds.
    pub fn frame_time(&self, l: usize) -> f64 {
        l as f64 * self.hop as f64 / self.sample_rate
    }
}

/// Center frequencies of all one-sided bands in Hz.
pub fn band_frequencies(cfg: &StftConfig) -> Vec<f64> {
    (0..cfg.bands()).map(|k| cfg.band_frequency(k)).collect()
}

/// Complex time-frequency tensor, band-major.
///
/// Values are linear amplitudes. For real input, band 0 and band N/2 carry
/// (numerically) real values. Immutable after creation.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bands: usize,
    frames: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(bands: usize, frames: usize) -> Self {
        Self {
            bands,
            frames,
            data: vec![Complex64::ZERO; bands * frames],
        }
    }

    /// Build from band-major data (`data[k * frames + l]`).
    pub fn from_data(bands: usize, frames: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != bands * frames {
            return Err(IccError::InvalidConfig(format!(
                "spectrogram data length {} does not match {bands} bands x {frames} frames",
                data.len()
            )));
        }
        Ok(Self { bands, frames, data })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn at(&self, band: usize, frame: usize) -> Complex64 {
        self.data[band * self.frames + frame]
    }

    #[inline]
    pub fn set(&mut self, band: usize, frame: usize, value: Complex64) {
        self.data[band * self.frames + frame] = value;
    }

    /// All frames of one band.
    pub fn band(&self, band: usize) -> &[Complex64] {
        &self.data[band * self.frames..(band + 1) * self.frames]
    }

    /// One column (all bands of frame `l`), allocated.
    pub fn frame(&self, l: usize) -> Vec<Complex64> {
        (0..self.bands).map(|k| self.at(k, l)).collect()
    }

    /// Squared magnitudes of frame `l` per band.
    pub fn frame_power(&self, l: usize) -> Vec<f64> {
        (0..self.bands).map(|k| self.at(k, l).norm_sqr()).collect()
    }

    /// Total energy `sum |X|^2`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Energy of the difference to another spectrogram of equal shape.
    pub fn diff_energy(&self, other: &Spectrogram) -> f64 {
        assert_eq!(self.bands, other.bands);
        assert_eq!(self.frames, other.frames);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum()
    }
}

/// Analyze a real signal into a one-sided spectrogram.
///
/// The signal must contain at least one full frame (`len >= N`).
pub fn analyze(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    let n = cfg.frame_size;
    let hop = cfg.hop;
    if signal.len() < n {
        return Err(IccError::SignalTooShort {
            len: signal.len(),
            min: n,
        });
    }
    let frames = cfg.num_frames(signal.len());
    let bands = cfg.bands();
    let prepad = n - hop;
    let padded_len = prepad + frames * hop + (n - hop);
    let mut padded = vec![0.0; padded_len];
    padded[prepad..prepad + signal.len()].copy_from_slice(signal);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut spec = Spectrogram::zeros(bands, frames);
    let mut buf = vec![Complex64::ZERO; n];
    for l in 0..frames {
        let start = l * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * cfg.window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bands {
            spec.set(k, l, buf[k]);
        }
    }
    Ok(spec)
}

/// Overlap-add synthesis back to a real signal.
///
/// Applies the synthesis window (same Hann as analysis) and divides by the
/// accumulated squared-window sum per sample, then returns the
/// `frames * R` samples that correspond to the analyzed signal span
/// (the input rounded up to the hop grid).
pub fn synthesize(spec: &Spectrogram, cfg: &StftConfig) -> Result<Vec<f64>> {
    let n = cfg.frame_size;
    let hop = cfg.hop;
    if spec.bands() != cfg.bands() {
        return Err(IccError::BandMismatch {
            left: spec.bands(),
            right: cfg.bands(),
        });
    }
    let frames = spec.frames();
    let ola_len = (frames.saturating_sub(1)) * hop + n;
    let mut ola = vec![0.0; ola_len];
    let mut wsum = vec![0.0; ola_len];

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut buf = vec![Complex64::ZERO; n];
    let scale = 1.0 / n as f64;
    for l in 0..frames {
        buf[0] = spec.at(0, l);
        for k in 1..n / 2 {
            let v = spec.at(k, l);
            buf[k] = v;
            buf[n - k] = v.conj();
        }
        buf[n / 2] = spec.at(n / 2, l);
        ifft.process(&mut buf);
        let start = l * hop;
        for i in 0..n {
            let w = cfg.window[i];
            ola[start + i] += buf[i].re * scale * w;
            wsum[start + i] += w * w;
        }
    }
    for (v, &w) in ola.iter_mut().zip(wsum.iter()) {
        if w > 1e-12 {
            *v /= w;
        }
    }
    let prepad = n - hop;
    let out_len = frames * hop;
    Ok(ola[prepad..prepad + out_len].to_vec())
}

/// Frame-wise Parseval check helper: spectral energy of one analysis frame
/// divided by the window scaling (N), for comparison against the windowed
/// time-frame energy.
pub fn frame_spectral_energy(spec: &Spectrogram, cfg: &StftConfig, l: usize) -> f64 {
    let n = cfg.frame_size;
    let mut e = spec.at(0, l).norm_sqr() + spec.at(n / 2, l).norm_sqr();
    for k in 1..n / 2 {
        e += 2.0 * spec.at(k, l).norm_sqr();
    }
    e / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{rms, white_noise};

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let cfg = StftConfig::default_24k();
        let spec = analyze(&vec![0.0; 4096], &cfg).unwrap();
        assert_eq!(spec.energy(), 0.0);
        assert_eq!(spec.frames(), 4096 / 128);
        assert_eq!(spec.bands(), 129);
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let cfg = StftConfig::default_24k();
        let err = analyze(&vec![0.0; 255], &cfg).unwrap_err();
        assert!(matches!(err, IccError::SignalTooShort { .. }));
    }

    #[test]
    fn analyze_is_linear() {
        let cfg = StftConfig::default_24k();
        let x = white_noise(2048, 11);
        let y = white_noise(2048, 12);
        let (a, b) = (0.7, -1.3);
        let mixed: Vec<f64> = x.iter().zip(y.iter()).map(|(u, v)| a * u + b * v).collect();
        let sx = analyze(&x, &cfg).unwrap();
        let sy = analyze(&y, &cfg).unwrap();
        let sm = analyze(&mixed, &cfg).unwrap();
        let mut err: f64 = 0.0;
        for k in 0..sm.bands() {
            for l in 0..sm.frames() {
                let want = a * sx.at(k, l) + b * sy.at(k, l);
                err += (sm.at(k, l) - want).norm_sqr();
            }
        }
        assert!(err / sm.energy() < 1e-24);
    }

    #[test]
    fn bin_centered_cosine_concentrates_in_hann_mainlobe() {
        // A cosine at bin center k0 windowed by periodic Hann has exactly
        // three nonzero DFT bins: |X[k0]| = N/4 and |X[k0 +/- 1]| = N/8.
        let cfg = StftConfig::default_24k();
        let n = cfg.frame_size as f64;
        let k0 = 20usize;
        let x: Vec<f64> = (0..24000)
            .map(|i| (2.0 * PI * k0 as f64 * i as f64 / n).cos())
            .collect();
        let spec = analyze(&x, &cfg).unwrap();
        // Interior frame (fully inside the signal).
        let l = spec.frames() / 2;
        let peak = spec.at(k0, l).norm();
        assert!((peak - n / 4.0).abs() / (n / 4.0) < 1e-9, "peak {peak}");
        for side in [k0 - 1, k0 + 1] {
            let v = spec.at(side, l).norm();
            assert!((v - n / 8.0).abs() / (n / 8.0) < 1e-9, "side {v}");
        }
        for k in 0..spec.bands() {
            if (k as isize - k0 as isize).unsigned_abs() > 1 {
                assert!(spec.at(k, l).norm() < 1e-9 * peak, "leak at band {k}");
            }
        }
    }

    #[test]
    fn round_trip_white_noise() {
        let cfg = StftConfig::default_24k();
        let x = white_noise(24000, 42);
        let spec = analyze(&x, &cfg).unwrap();
        let y = synthesize(&spec, &cfg).unwrap();
        // Output is the input span rounded up to the hop grid.
        assert_eq!(y.len(), x.len().div_ceil(cfg.hop) * cfg.hop);
        let n = cfg.frame_size;
        let interior = rel_l2(&y[n..x.len() - n], &x[n..x.len() - n]);
        assert!(interior < 1e-10, "interior relative error {interior}");
    }

    #[test]
    fn round_trip_speech_shaped_burst() {
        let cfg = StftConfig::default_24k();
        let x = crate::dsp::speech_shaped_noise(24000, cfg.sample_rate, 5);
        let spec = analyze(&x, &cfg).unwrap();
        let y = synthesize(&spec, &cfg).unwrap();
        let n = cfg.frame_size;
        let interior = rel_l2(&y[n..x.len() - n], &x[n..x.len() - n]);
        assert!(interior < 1e-10, "interior relative error {interior}");
    }

    #[test]
    fn round_trip_covers_every_sample_within_peak_bound() {
        let cfg = StftConfig::default_24k();
        let x = white_noise(4 * 256 + 128, 9);
        let spec = analyze(&x, &cfg).unwrap();
        let y = synthesize(&spec, &cfg).unwrap();
        assert_eq!(y.len(), x.len().div_ceil(128) * 128);
        let peak = crate::dsp::max_abs(&x);
        let n = cfg.frame_size;
        for i in n..x.len() - n {
            assert!((y[i] - x[i]).abs() <= 1e-9 * peak);
        }
    }

    #[test]
    fn zero_spectrogram_synthesizes_to_zeros() {
        let cfg = StftConfig::default_24k();
        let spec = Spectrogram::zeros(cfg.bands(), 10);
        let y = synthesize(&spec, &cfg).unwrap();
        assert_eq!(y.len(), 10 * 128);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_rejects_band_mismatch() {
        let cfg = StftConfig::default_24k();
        let spec = Spectrogram::zeros(64, 10);
        assert!(matches!(
            synthesize(&spec, &cfg).unwrap_err(),
            IccError::BandMismatch { .. }
        ));
    }

    #[test]
    fn band_frequencies_match_grid() {
        let cfg = StftConfig::default_24k();
        let f = band_frequencies(&cfg);
        assert_eq!(f.len(), 129);
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 93.75).abs() < 1e-12);
        assert!((f[128] - 12000.0).abs() < 1e-12);
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default_24k();
        let x = white_noise(6000, 33);
        let spec = analyze(&x, &cfg).unwrap();
        let n = cfg.frame_size;
        let hop = cfg.hop;
        let prepad = n - hop;
        // Reconstruct the windowed frame energy directly for an interior frame.
        for l in [5usize, 17, 30] {
            let mut te = 0.0;
            for i in 0..n {
                let idx = (l * hop + i) as isize - prepad as isize;
                let v = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize]
                } else {
                    0.0
                };
                let w = cfg.window[i] * v;
                te += w * w;
            }
            let se = frame_spectral_energy(&spec, &cfg, l);
            assert!((se - te).abs() / te < 1e-9, "frame {l}: {se} vs {te}");
        }
    }

    #[test]
    fn hop_shift_moves_spectrogram_one_frame() {
        let cfg = StftConfig::default_24k();
        let x = white_noise(3000, 21);
        let mut shifted = vec![0.0; cfg.hop];
        shifted.extend_from_slice(&x);
        let sx = analyze(&x, &cfg).unwrap();
        let sy = analyze(&shifted, &cfg).unwrap();
        let mut err = 0.0;
        let mut norm = 0.0;
        for k in 0..sx.bands() {
            for l in 0..sx.frames() {
                err += (sy.at(k, l + 1) - sx.at(k, l)).norm_sqr();
                norm += sx.at(k, l).norm_sqr();
            }
        }
        assert!(err / norm < 1e-24);
    }

    #[test]
    fn synthesize_is_linear() {
        let cfg = StftConfig::default_24k();
        let x = white_noise(2048, 14);
        let y = white_noise(2048, 15);
        let sx = analyze(&x, &cfg).unwrap();
        let sy = analyze(&y, &cfg).unwrap();
        let mut mixed = Spectrogram::zeros(sx.bands(), sx.frames());
        for k in 0..sx.bands() {
            for l in 0..sx.frames() {
                mixed.set(k, l, 2.0 * sx.at(k, l) - 0.5 * sy.at(k, l));
            }
        }
        let tx = synthesize(&sx, &cfg).unwrap();
        let ty = synthesize(&sy, &cfg).unwrap();
        let tm = synthesize(&mixed, &cfg).unwrap();
        for i in 0..tm.len() {
            let want = 2.0 * tx[i] - 0.5 * ty[i];
            assert!((tm[i] - want).abs() < 1e-9);
        }
    }
}
