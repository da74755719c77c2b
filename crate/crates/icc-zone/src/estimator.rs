//! Model-based feedback signal estimation.
//!
//! The zone detector never sees the loudspeaker signal, so the feedback
//! spectra are estimated from the observed reference microphone alone. Per
//! band and frame the estimator runs
//!
//! ```text
//! Yfb_m(k,l) = alpha(k)   * (Hf_m * Y0 )(k,l)
//!            - alpha_r(k) * (Hr   * Yfb_m)(k,l)
//! ```
//!
//! with the feed-forward CTF `Hf_m` built from the ICC forward path composed
//! with a free-field model of the loudspeaker-to-microphone responses, and
//! the recursive CTF `Hr` from the forward path composed with the modeled
//! canceller `(1 - lambda) * h_L0`. Both CTFs are strictly causal, so the
//! recursion only touches past frames. The recursive gain is limited to
//! `min(alpha, alpha_r_max - delta)` per band, which keeps the estimator
//! stable even when the modeled loop would not be.

use crate::acoustics::{free_field_ir, sum_loudspeaker_ir, Geometry, ImpulseResponse};
use crate::ctf::{identify_ctf, max_stable_gain, Ctf, StabilityProfile};
use crate::dsp::db_to_amplitude;
use crate::error::{IccError, Result};
use crate::stft::{Spectrogram, StftConfig};
use num_complex::Complex64;
use std::collections::VecDeque;

/// The static part of the ICC forward path known to the detector: the
/// processing delay and the fixed calibrated gain. The variable gain
/// `alpha` is transmitted separately.
#[derive(Debug, Clone, Copy)]
pub struct IccForwardModel {
    pub tau_icc: f64,
    pub fixed_gain: f64,
}

/// ICC gain as transmitted to the detector: broadband or per band, in dB.
#[derive(Debug, Clone)]
pub enum AlphaSpec {
    BroadbandDb(f64),
    PerBandDb(Vec<f64>),
}

impl AlphaSpec {
    fn linear(&self, bands: usize) -> Result<Vec<f64>> {
        match self {
            AlphaSpec::BroadbandDb(db) => Ok(vec![db_to_amplitude(*db); bands]),
            AlphaSpec::PerBandDb(v) => {
                if v.len() != bands {
                    return Err(IccError::BandMismatch {
                        left: v.len(),
                        right: bands,
                    });
                }
                Ok(v.iter().map(|db| db_to_amplitude(*db)).collect())
            }
        }
    }
}

/// Estimator tuning.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub alpha: AlphaSpec,
    /// Mismatch factor in [0, 1]: the modeled canceller is
    /// `(1 - lambda) * h_L0`; 0 models perfect cancellation, 1 none.
    pub lambda: f64,
    /// Safety margin below the per-band stability border.
    pub delta: f64,
    /// CTF tap count; default `ceil((len + N) / R)` per composed filter.
    pub n_taps: Option<usize>,
    /// Per-pair model gains `beta[i][m]`; all 1 when absent.
    pub model_betas: Option<Vec<Vec<f64>>>,
}

impl EstimatorConfig {
    pub fn new(alpha_db: f64) -> Self {
        Self {
            alpha: AlphaSpec::BroadbandDb(alpha_db),
            lambda: 0.0,
            delta: 0.2,
            n_taps: None,
            model_betas: None,
        }
    }
}

/// Immutable estimator model: CTFs, gains and the certified stability data.
#[derive(Debug, Clone)]
pub struct EstimatorModel {
    ctf_feedforward: Vec<Ctf>,
    ctf_recursive: Ctf,
    alpha: Vec<f64>,
    alpha_r: Vec<f64>,
    stability: StabilityProfile,
    delta: f64,
    lambda: f64,
    bands: usize,
    /// Modeled combined loudspeaker responses (free field), for audit.
    feedback_path_model: Vec<ImpulseResponse>,
    /// Modeled canceller (1 - lambda) * h_L0, for audit.
    canceller_model: ImpulseResponse,
}

/// Per-stream ring buffers of past reference and feedback-estimate frames.
/// Single-owner: one state per audio stream.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    y0_history: FrameRing,
    fb_history: Vec<FrameRing>,
}

#[derive(Debug, Clone)]
struct FrameRing {
    depth: usize,
    frames: VecDeque<Vec<Complex64>>,
}

impl FrameRing {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            frames: VecDeque::with_capacity(depth),
        }
    }

    /// Frame `lag` steps in the past (lag >= 1); zero history reads as None.
    #[inline]
    fn lag(&self, lag: usize) -> Option<&[Complex64]> {
        self.frames.get(lag - 1).map(|f| f.as_slice())
    }

    fn push(&mut self, frame: Vec<Complex64>) {
        if self.depth == 0 {
            return;
        }
        if self.frames.len() == self.depth {
            self.frames.pop_back();
        }
        self.frames.push_front(frame);
    }
}

/// Per-band gain limiting `min(alpha, alpha_r_max - delta)`, floored at
/// zero when the border sits below the margin.
pub fn limit_gain(alpha: &[f64], profile: &StabilityProfile, delta: f64) -> Vec<f64> {
    alpha
        .iter()
        .zip(profile.max_gain.iter())
        .map(|(&a, &border)| a.min(border - delta).max(0.0))
        .collect()
}

/// Build the estimator model from geometry and the transmitted ICC
/// parameters: free-field feedback paths, composed CTFs, stability border
/// and the limited recursive gain.
pub fn build_model(
    geometry: &Geometry,
    stft: &StftConfig,
    forward: &IccForwardModel,
    cfg: &EstimatorConfig,
) -> Result<EstimatorModel> {
    geometry.validate()?;
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(IccError::InvalidConfig(format!(
            "lambda {} outside [0, 1]",
            cfg.lambda
        )));
    }
    if !(cfg.delta > 0.0) {
        return Err(IccError::InvalidConfig("delta must be positive".into()));
    }
    let fs = stft.sample_rate;
    let c = geometry.speed_of_sound;
    let mics = geometry.mics();
    let speakers = geometry.loudspeakers();
    if let Some(betas) = &cfg.model_betas {
        if betas.len() != speakers || betas.iter().any(|row| row.len() != mics) {
            return Err(IccError::InvalidConfig(
                "model_betas must be loudspeakers x microphones".into(),
            ));
        }
    }
    let beta = |i: usize, m: usize| cfg.model_betas.as_ref().map_or(1.0, |b| b[i][m]);

    // Free-field loudspeaker-to-microphone models, summed per microphone.
    let mut h_l_model = Vec::with_capacity(mics);
    for m in 0..mics {
        let per_speaker: Vec<ImpulseResponse> = (0..speakers)
            .map(|i| free_field_ir(geometry.speaker_mic_distance(i, m), beta(i, m), fs, c))
            .collect();
        h_l_model.push(sum_loudspeaker_ir(&per_speaker)?);
    }

    // Cross-term frame-size condition: N < tau_icc*fs + min_i tau_{i,m}.
    let d = (forward.tau_icc * fs).round() as usize;
    for m in 0..mics {
        let bound = d + geometry.min_speaker_delay(m, fs);
        if stft.frame_size >= bound {
            log::warn!(
                "cross-term condition violated at microphone {m}: frame size {} >= {bound}",
                stft.frame_size
            );
        }
    }

    let h_icc = ImpulseResponse::impulse_at(d, forward.fixed_gain, fs);
    let canceller_model = h_l_model[0].scaled(1.0 - cfg.lambda);
    let h_recursive = crate::ctf::convolve_time(&h_icc, &canceller_model);

    let taps_for = |len: usize| cfg.n_taps.unwrap_or_else(|| Ctf::default_taps(len, stft));

    let mut ctf_feedforward = Vec::with_capacity(mics);
    for h_l in &h_l_model {
        let h_ff = crate::ctf::convolve_time(&h_icc, h_l);
        ctf_feedforward.push(identify_ctf(&h_ff, stft, taps_for(h_ff.len()), true)?);
    }
    let ctf_recursive = identify_ctf(&h_recursive, stft, taps_for(h_recursive.len()), true)?;

    let stability = max_stable_gain(&ctf_recursive)?;
    let bands = stft.bands();
    let alpha = cfg.alpha.linear(bands)?;
    let alpha_r = limit_gain(&alpha, &stability, cfg.delta);

    Ok(EstimatorModel {
        ctf_feedforward,
        ctf_recursive,
        alpha,
        alpha_r,
        stability,
        delta: cfg.delta,
        lambda: cfg.lambda,
        bands,
        feedback_path_model: h_l_model,
        canceller_model,
    })
}

impl EstimatorModel {
    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn mics(&self) -> usize {
        self.ctf_feedforward.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// The stability-limited recursive gain per band.
    pub fn alpha_r(&self) -> &[f64] {
        &self.alpha_r
    }

    pub fn stability(&self) -> &StabilityProfile {
        &self.stability
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn feedforward_ctf(&self, mic: usize) -> &Ctf {
        &self.ctf_feedforward[mic]
    }

    pub fn recursive_ctf(&self) -> &Ctf {
        &self.ctf_recursive
    }

    /// Modeled combined loudspeaker response for a microphone (free field).
    pub fn feedback_path_model(&self, mic: usize) -> &ImpulseResponse {
        &self.feedback_path_model[mic]
    }

    /// Modeled canceller `(1 - lambda) * h_L0`.
    pub fn canceller_model(&self) -> &ImpulseResponse {
        &self.canceller_model
    }

    /// The same model with a different transmitted gain; CTFs and the
    /// stability border are reused, only the limited gain is recomputed.
    pub fn with_alpha(&self, alpha: &AlphaSpec) -> Result<EstimatorModel> {
        let alpha = alpha.linear(self.bands)?;
        let alpha_r = limit_gain(&alpha, &self.stability, self.delta);
        Ok(EstimatorModel {
            alpha,
            alpha_r,
            ..self.clone()
        })
    }

    pub fn new_state(&self) -> EstimatorState {
        let depth_ff = self
            .ctf_feedforward
            .iter()
            .map(|c| c.last_lag())
            .max()
            .unwrap_or(0);
        EstimatorState {
            y0_history: FrameRing::new(depth_ff),
            fb_history: (0..self.mics())
                .map(|_| FrameRing::new(self.ctf_recursive.last_lag()))
                .collect(),
        }
    }

    /// Advance the estimator by one frame of the observed reference
    /// spectrogram; returns the per-microphone feedback estimates for this
    /// frame. Strictly causal: the current frame enters only the history.
    pub fn estimate_frame(
        &self,
        state: &mut EstimatorState,
        y0_frame: &[Complex64],
    ) -> Result<Vec<Vec<Complex64>>> {
        if y0_frame.len() != self.bands {
            return Err(IccError::BandMismatch {
                left: y0_frame.len(),
                right: self.bands,
            });
        }
        let mut outputs = Vec::with_capacity(self.mics());
        for m in 0..self.mics() {
            let ff = &self.ctf_feedforward[m];
            let mut out = vec![Complex64::ZERO; self.bands];
            for t in 0..ff.taps() {
                if let Some(past) = state.y0_history.lag(ff.lag_start() + t) {
                    for k in 0..self.bands {
                        out[k] += ff.coeff(k, t) * past[k];
                    }
                }
            }
            for (k, v) in out.iter_mut().enumerate() {
                *v *= self.alpha[k];
            }
            let rc = &self.ctf_recursive;
            for t in 0..rc.taps() {
                if let Some(past) = state.fb_history[m].lag(rc.lag_start() + t) {
                    for k in 0..self.bands {
                        out[k] -= self.alpha_r[k] * rc.coeff(k, t) * past[k];
                    }
                }
            }
            outputs.push(out);
        }
        for (m, out) in outputs.iter().enumerate() {
            state.fb_history[m].push(out.clone());
        }
        state.y0_history.push(y0_frame.to_vec());
        Ok(outputs)
    }

    /// Run the estimator over a whole reference spectrogram.
    pub fn estimate_spectrograms(&self, y0: &Spectrogram) -> Result<Vec<Spectrogram>> {
        if y0.bands() != self.bands {
            return Err(IccError::BandMismatch {
                left: y0.bands(),
                right: self.bands,
            });
        }
        let mut state = self.new_state();
        let mut outs = vec![Spectrogram::zeros(self.bands, y0.frames()); self.mics()];
        for l in 0..y0.frames() {
            let frame = y0.frame(l);
            let estimates = self.estimate_frame(&mut state, &frame)?;
            for (m, est) in estimates.iter().enumerate() {
                for k in 0..self.bands {
                    outs[m].set(k, l, est[k]);
                }
            }
        }
        Ok(outs)
    }
}
