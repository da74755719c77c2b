//! Energy-based speech zone detection and the direct-signal PSD estimate
//! that makes it robust against ICC feedback.
//!
//! PSDs are tracked by exponential smoothing of squared spectral
//! magnitudes. The signal power ratio (SPR) of a microphone compares its
//! PSD against the strongest of the other microphones, per band; averaging
//! over the speech band and taking the argmax yields the active zone. With
//! feedback suppression, the SPR runs on `max(psd_mic - psd_feedback, 0)`
//! instead of the raw microphone PSDs.

use crate::dsp::power_to_db;
use crate::error::{IccError, Result};
use crate::sim::SimOutput;
use crate::stft::{analyze, StftConfig};

/// Per-band running PSD estimates for a set of channels, updated by
/// exponential smoothing: `phi <- beta * phi + (1 - beta) * |X|^2`.
/// Initialized to zero. Single-owner streaming state.
#[derive(Debug, Clone)]
pub struct PsdTracker {
    beta: f64,
    psd: Vec<Vec<f64>>,
}

impl PsdTracker {
    pub fn new(channels: usize, bands: usize, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(IccError::InvalidConfig(format!(
                "smoothing factor {beta} outside [0, 1)"
            )));
        }
        Ok(Self {
            beta,
            psd: vec![vec![0.0; bands]; channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.psd.len()
    }

    /// Advance one channel by a frame of squared magnitudes.
    pub fn update_channel(&mut self, channel: usize, mags_sq: &[f64]) {
        let psd = &mut self.psd[channel];
        debug_assert_eq!(psd.len(), mags_sq.len());
        for (p, &m) in psd.iter_mut().zip(mags_sq.iter()) {
            *p = self.beta * *p + (1.0 - self.beta) * m;
        }
    }

    pub fn psd(&self, channel: usize) -> &[f64] {
        &self.psd[channel]
    }
}

/// Direct-signal PSD by spectral subtraction of the estimated feedback PSD,
/// lower-limited at zero.
pub fn direct_psd(phi_y: &[f64], phi_fb: &[f64]) -> Vec<f64> {
    phi_y
        .iter()
        .zip(phi_fb.iter())
        .map(|(&y, &fb)| (y - fb).max(0.0))
        .collect()
}

/// SPR configuration: the PSD floor and the speech band.
#[derive(Debug, Clone)]
pub struct SprConfig {
    pub epsilon: f64,
    /// Speech band in Hz; bands strictly inside contribute to the broadband
    /// SPR.
    pub speech_band_hz: (f64, f64),
}

impl Default for SprConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-12,
            speech_band_hz: (100.0, 8000.0),
        }
    }
}

impl SprConfig {
    /// Band indices strictly inside the speech interval:
    /// `lo < k * fs / N < hi`.
    pub fn speech_bands(&self, stft: &StftConfig) -> Vec<usize> {
        (0..stft.bands())
            .filter(|&k| {
                let f = stft.band_frequency(k);
                f > self.speech_band_hz.0 && f < self.speech_band_hz.1
            })
            .collect()
    }
}

/// Per-band signal power ratios in dB: channel PSD against the maximum of
/// the other channels, both floored at epsilon.
pub fn spr(psds: &[&[f64]], epsilon: f64) -> Vec<Vec<f64>> {
    let channels = psds.len();
    debug_assert!(channels >= 2);
    let bands = psds[0].len();
    let mut out = vec![vec![0.0; bands]; channels];
    for k in 0..bands {
        for m in 0..channels {
            let own = psds[m][k].max(epsilon);
            let mut other = f64::NEG_INFINITY;
            for (mm, p) in psds.iter().enumerate() {
                if mm != m {
                    other = other.max(p[k]);
                }
            }
            let other = other.max(epsilon);
            out[m][k] = power_to_db(own / other);
        }
    }
    out
}

/// Broadband SPR: arithmetic mean over the speech-band indices.
pub fn broadband_spr(spr_maps: &[Vec<f64>], speech_bands: &[usize]) -> Vec<f64> {
    spr_maps
        .iter()
        .map(|map| speech_bands.iter().map(|&k| map[k]).sum::<f64>() / speech_bands.len() as f64)
        .collect()
}

/// The zone decision for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneDecision {
    /// Active zone: index of the largest broadband SPR, ties broken by the
    /// lowest index.
    pub zone: usize,
    pub spr_db: Vec<f64>,
}

/// Argmax of the broadband SPRs; ties break to the lowest index.
pub fn detect_zone(broadband: &[f64]) -> ZoneDecision {
    let mut zone = 0;
    let mut best = f64::NEG_INFINITY;
    for (m, &v) in broadband.iter().enumerate() {
        if v > best {
            best = v;
            zone = m;
        }
    }
    ZoneDecision {
        zone,
        spr_db: broadband.to_vec(),
    }
}

/// Fraction of (optionally masked) frames whose decision matches `zone`.
pub fn zone_detection_rate(
    decisions: &[usize],
    zone: usize,
    active: Option<&[bool]>,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (l, &d) in decisions.iter().enumerate() {
        if let Some(mask) = active {
            if !mask[l] {
                continue;
            }
        }
        total += 1;
        if d == zone {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(IccError::EmptyFrameSet);
    }
    Ok(hits as f64 / total as f64)
}

/// Normalized direct/feedback cross-term per microphone and band, with the
/// frame-size condition the analysis rests on.
#[derive(Debug, Clone)]
pub struct CrossTermReport {
    /// `ratios[m][k] = |mean_l D conj(F)| / sqrt(mean |D|^2 mean |F|^2)`.
    pub ratios: Vec<Vec<f64>>,
    /// Whether `N < tau_icc * fs + min_i tau_{i,m}` holds, per microphone.
    pub condition_satisfied: Vec<bool>,
}

impl CrossTermReport {
    /// Mean ratio over the given bands for one microphone.
    pub fn band_mean(&self, mic: usize, bands: &[usize]) -> f64 {
        bands.iter().map(|&k| self.ratios[mic][k]).sum::<f64>() / bands.len() as f64
    }
}

/// Measure how strongly the direct and feedback components correlate within
/// frames. The PSD subtraction assumes this cross term is negligible, which
/// needs the frame to be shorter than the loop delay.
pub fn cross_term_diagnostic(sim: &SimOutput, stft: &StftConfig) -> Result<CrossTermReport> {
    let mut ratios = Vec::with_capacity(sim.mics());
    for m in 0..sim.mics() {
        let d = analyze(&sim.y_direct[m], stft)?;
        let f = analyze(&sim.y_feedback[m], stft)?;
        let frames = d.frames().min(f.frames());
        let mut per_band = Vec::with_capacity(d.bands());
        for k in 0..d.bands() {
            let mut cross = num_complex::Complex64::ZERO;
            let mut pd = 0.0;
            let mut pf = 0.0;
            for l in 0..frames {
                let dv = d.at(k, l);
                let fv = f.at(k, l);
                cross += dv * fv.conj();
                pd += dv.norm_sqr();
                pf += fv.norm_sqr();
            }
            let denom = (pd * pf).sqrt();
            per_band.push(if denom > 0.0 { cross.norm() / denom } else { 0.0 });
        }
        ratios.push(per_band);
    }
    let condition_satisfied = sim
        .loop_delay_samples
        .iter()
        .map(|&bound| stft.frame_size < bound)
        .collect();
    Ok(CrossTermReport {
        ratios,
        condition_satisfied,
    })
}
