//! Small shared DSP helpers: level conversions, deterministic noise sources
//! and FFT convolution.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// dB (amplitude convention) to linear gain: `10^(db/20)`.
///
/// `-inf` maps to 0, which is how "system off" gains are encoded.
pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Linear amplitude gain to dB: `20 log10(a)`.
pub fn amplitude_to_db(a: f64) -> f64 {
    20.0 * a.log10()
}

/// Power ratio to dB: `10 log10(p)`.
pub fn power_to_db(p: f64) -> f64 {
    10.0 * p.log10()
}

/// Root-mean-square of a sequence (0 for an empty slice).
pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Largest absolute value in a sequence (0 for an empty slice).
pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Deterministic stream of standard-normal samples (Box-Muller over a
/// ChaCha8 stream). The same seed always produces the same sequence.
pub struct NormalSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn take_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_sample()).collect()
    }
}

/// Seeded white Gaussian noise, unit variance.
pub fn white_noise(n: usize, seed: u64) -> Vec<f64> {
    NormalSource::new(seed).take_vec(n)
}

/// Deterministic speech-shaped noise burst at sample rate `fs`.
///
/// White Gaussian noise is tilted by a one-pole lowpass at 450 Hz
/// (about -6 dB/oct above the knee, mimicking the long-term speech
/// spectrum) and high-passed at 90 Hz, then scaled to an RMS of 0.1.
pub fn speech_shaped_noise(n: usize, fs: f64, seed: u64) -> Vec<f64> {
    let mut x = white_noise(n, seed);

    // One-pole lowpass tilt.
    let a = (-2.0 * PI * 450.0 / fs).exp();
    let mut state = 0.0;
    for v in x.iter_mut() {
        state = (1.0 - a) * *v + a * state;
        *v = state;
    }

    // RBJ highpass biquad at 90 Hz, Q = 0.707.
    let w0 = 2.0 * PI * 90.0 / fs;
    let alpha = w0.sin() / (2.0 * 0.707);
    let cw = w0.cos();
    let a0 = 1.0 + alpha;
    let b0 = (1.0 + cw) / 2.0 / a0;
    let b1 = -(1.0 + cw) / a0;
    let b2 = (1.0 + cw) / 2.0 / a0;
    let a1 = -2.0 * cw / a0;
    let a2 = (1.0 - alpha) / a0;
    let (mut d1, mut d2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let xin = *v;
        let y = b0 * xin + d1;
        d1 = b1 * xin - a1 * y + d2;
        d2 = b2 * xin - a2 * y;
        *v = y;
    }

    let r = rms(&x);
    if r > 0.0 {
        let scale = 0.1 / r;
        for v in x.iter_mut() {
            *v *= scale;
        }
    }
    x
}

/// Deterministic speech-like noise: the spectral shape of
/// [`speech_shaped_noise`] plus a syllabic amplitude envelope (slow seeded
/// noise, lowpassed at about 3 Hz, swinging `depth_db` around the mean).
/// RMS-normalized to 0.1. This is the bundled stand-in for a dry talker
/// recording: the envelope modulation is what makes closed-loop detection
/// experiments behave like they do with real speech, because the loop's
/// delayed and reverberant feedback keeps arriving while the direct sound
/// dips.
pub fn speech_like_noise(n: usize, fs: f64, seed: u64, depth_db: f64) -> Vec<f64> {
    let mut x = speech_shaped_noise(n, fs, seed);

    // Slow envelope: one-pole lowpassed white noise at ~3 Hz, normalized to
    // unit standard deviation after warm-up, clamped to +/- 1.5 sigma.
    let mut env_src = NormalSource::new(seed ^ 0x5EED_E0E0);
    let a = (-2.0 * PI * 3.0 / fs).exp();
    let mut state = 0.0;
    let mut env = Vec::with_capacity(n);
    for _ in 0..n {
        state = (1.0 - a) * env_src.next_sample() + a * state;
        env.push(state);
    }
    let mean = env.iter().sum::<f64>() / n as f64;
    let std = (env.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    if std > 0.0 {
        for (xi, e) in x.iter_mut().zip(env.iter()) {
            let m = ((e - mean) / std).clamp(-1.5, 1.5);
            *xi *= 10f64.powf(depth_db * m / 20.0);
        }
    }
    let r = rms(&x);
    if r > 0.0 {
        let scale = 0.1 / r;
        for v in x.iter_mut() {
            *v *= scale;
        }
    }
    x
}

/// Full linear convolution of two real sequences via FFT.
///
/// Returns `a.len() + b.len() - 1` samples; empty input gives an empty
/// output. Accurate to roughly 1e-12 relative, which is fine for signal
/// filtering but not for exact tap algebra (see `ctf::convolve_time`).
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut fa: Vec<Complex64> = a
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(n)
        .collect();
    let mut fb: Vec<Complex64> = b
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(n)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa.iter().take(out_len).map(|c| c.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    #[test]
    fn db_round_trip() {
        assert!((db_to_amplitude(0.0) - 1.0).abs() < 1e-12);
        assert!((db_to_amplitude(20.0) - 10.0).abs() < 1e-12);
        assert!((amplitude_to_db(db_to_amplitude(-3.7)) + 3.7).abs() < 1e-12);
        assert_eq!(db_to_amplitude(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn rms_of_known_signal() {
        assert!((rms(&[1.0, -1.0, 1.0, -1.0]) - 1.0).abs() < 1e-15);
        assert!((rms(&[3.0, 4.0]) - (12.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(rms(&[]), 0.0);
    }

    #[test]
    fn normal_source_is_deterministic_and_plausible() {
        let a = white_noise(20000, 7);
        let b = white_noise(20000, 7);
        assert_eq!(a, b);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn fft_convolve_matches_direct() {
        let a = white_noise(73, 1);
        let b = white_noise(41, 2);
        let fast = fft_convolve(&a, &b);
        let slow = direct_convolve(&a, &b);
        assert_eq!(fast.len(), slow.len());
        let err: f64 = fast
            .iter()
            .zip(slow.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = slow.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-12, "relative error {}", err / norm);
    }

    #[test]
    fn speech_noise_is_low_frequency_weighted() {
        let fs = 24000.0;
        let x = speech_shaped_noise(48000, fs, 3);
        assert!((rms(&x) - 0.1).abs() < 1e-9);
        // Compare mean per-bin band energies via a Hann-windowed DFT slice.
        let n = 4096;
        let win: Vec<f64> = (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
            .collect();
        let energy = |f_lo: f64, f_hi: f64| -> f64 {
            let mut e = 0.0;
            let mut bins = 0usize;
            for k in 0..n / 2 {
                let f = k as f64 * fs / n as f64;
                if f < f_lo || f >= f_hi {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x[..n].iter().enumerate() {
                    let ph = -2.0 * PI * k as f64 * i as f64 / n as f64;
                    re += v * win[i] * ph.cos();
                    im += v * win[i] * ph.sin();
                }
                e += re * re + im * im;
                bins += 1;
            }
            e / bins as f64
        };
        let low = energy(150.0, 600.0);
        let high = energy(4000.0, 8000.0);
        assert!(low > 30.0 * high, "per-bin low {low} high {high}");
    }
}
