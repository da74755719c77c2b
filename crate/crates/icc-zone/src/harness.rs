//! Experiment harness: configuration, calibration, gain sweeps, SPR traces
//! and file emission. The `icc-zone` binary is a thin wrapper around the
//! functions here, so everything is scriptable and testable in-process.
//!
//! Outputs are deterministic for a fixed config and seed: CSV and JSON are
//! byte-identical across runs, WAV float payloads bit-identical.
//!
//! CSV column orders, fixed:
//!
//! * sweep: `alpha_db,variant,zone,rate,stable` with variant in
//!   `unprocessed | processed`, zones ascending, grid sorted by gain;
//! * SPR trace: `frame_time,zone,spr_db,processing_enabled`, one row per
//!   frame and zone.

use crate::acoustics::{Geometry, IrModel, Scene};
use crate::ctf::{self, CtfError};
use crate::dsp;
use crate::error::{IccError, Result};
use crate::estimator::{build_model, AlphaSpec, EstimatorConfig, EstimatorModel, IccForwardModel};
use crate::sim::{self, IccConfig, NoiseSpec, SimOutput};
use crate::stft::{analyze, StftConfig};
use crate::wav;
use crate::zone::{broadband_spr, detect_zone, direct_psd, spr, PsdTracker, SprConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

fn default_seed() -> u64 {
    1
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_frame_size() -> usize {
    256
}
fn default_hop() -> usize {
    128
}
fn default_sample_rate() -> f64 {
    24000.0
}
fn default_ir_model() -> IrModel {
    IrModel::ImageSource {
        room: [2.5, 1.5, 1.3],
        t60: 0.08,
        max_order: None,
    }
}
fn default_geometry() -> Geometry {
    Geometry::default_cabin()
}
fn default_alpha_db() -> f64 {
    0.0
}
fn default_tau_icc() -> f64 {
    0.015
}
fn default_snr_db() -> f64 {
    20.0
}
fn default_target_unstable() -> f64 {
    4.0
}
fn default_mismatch_seed() -> u64 {
    7001
}
fn default_lambda() -> f64 {
    0.0
}
fn default_delta() -> f64 {
    0.2
}
fn default_beta_s() -> f64 {
    0.8
}
fn default_duration() -> f64 {
    8.0
}
fn default_epsilon() -> f64 {
    1e-12
}
fn default_speech_band() -> (f64, f64) {
    (100.0, 8000.0)
}
fn default_gate_threshold() -> f64 {
    40.0
}
fn default_alpha_grid() -> Vec<f64> {
    (-10..=4).map(|a| a as f64).collect()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StftParams {
    pub frame_size: usize,
    pub hop: usize,
    pub sample_rate: f64,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            frame_size: default_frame_size(),
            hop: default_hop(),
            sample_rate: default_sample_rate(),
        }
    }
}

impl StftParams {
    pub fn to_config(&self) -> Result<StftConfig> {
        StftConfig::new(self.frame_size, self.hop, self.sample_rate)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub ir: IrModel,
    pub geometry: Geometry,
    pub source_zone: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            ir: default_ir_model(),
            geometry: default_geometry(),
            source_zone: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IccParams {
    /// Gain for single runs (`simulate`, `spr-trace`); sweeps use the grid.
    pub alpha_db: f64,
    /// Processing delay in seconds.
    pub tau_icc: f64,
    /// SNR at the reference microphone in dB; `inf` disables noise.
    pub snr_db: f64,
    /// Calibration target: the loop must become unstable just above this.
    pub target_unstable_above_db: f64,
    /// Seed of the canceller perturbation direction.
    pub mismatch_seed: u64,
}

impl Default for IccParams {
    fn default() -> Self {
        Self {
            alpha_db: default_alpha_db(),
            tau_icc: default_tau_icc(),
            snr_db: default_snr_db(),
            target_unstable_above_db: default_target_unstable(),
            mismatch_seed: default_mismatch_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorParams {
    pub lambda: f64,
    pub delta: f64,
    pub n_taps: Option<usize>,
    /// PSD smoothing factor per frame.
    pub beta_s: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            delta: default_delta(),
            n_taps: None,
            beta_s: default_beta_s(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceParams {
    /// Mono WAV path; the bundled speech-like noise generator is used when
    /// absent.
    pub wav: Option<PathBuf>,
    /// Generated source duration in seconds.
    pub duration_s: f64,
    /// Syllabic envelope depth of the generated source, in dB.
    pub modulation_depth_db: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            wav: None,
            duration_s: default_duration(),
            modulation_depth_db: 6.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub epsilon: f64,
    pub speech_band_hz: (f64, f64),
    /// Restrict rate counting to speech-active frames.
    pub gate_speech_activity: bool,
    /// Frames more than this far (dB) below the peak reference direct power
    /// are inactive.
    pub gate_threshold_db: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            speech_band_hz: default_speech_band(),
            gate_speech_activity: false,
            gate_threshold_db: default_gate_threshold(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepParams {
    pub alpha_grid_db: Vec<f64>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            alpha_grid_db: default_alpha_grid(),
        }
    }
}

/// Calibration results consumed by the other commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationData {
    pub forward_gain: f64,
    pub mismatch_sigma: f64,
    pub target_unstable_above_db: f64,
    /// Per-band stability border of the estimator's recursive CTF;
    /// `null` marks bands with no feedback path (unbounded).
    pub alpha_r_max: Vec<Option<f64>>,
}

/// Full experiment configuration; every field has a default, a TOML file
/// overrides fields, CLI flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Write per-component WAVs (direct/feedback/noise) from `simulate`.
    #[serde(default = "default_true")]
    pub write_components: bool,
    pub stft: StftParams,
    pub scene: SceneParams,
    pub icc: IccParams,
    pub estimator: EstimatorParams,
    pub source: SourceParams,
    pub detection: DetectionParams,
    pub sweep: SweepParams,
    pub calibration: Option<CalibrationData>,
}

impl ExperimentConfig {
    /// Parse a TOML config file; parse errors carry line/field diagnostics.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| {
            IccError::InvalidConfig(format!("{}: {e}", path.as_ref().display()))
        })
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        self.stft.to_config()
    }

    pub fn build_scene(&self) -> Result<Scene> {
        Scene::build(
            self.scene.geometry.clone(),
            self.stft.sample_rate,
            &self.scene.ir,
            self.scene.source_zone,
        )
    }

    /// The dry source: a WAV file when configured, otherwise the bundled
    /// deterministic speech-shaped noise generator.
    pub fn source_signal(&self) -> Result<Vec<f64>> {
        match &self.source.wav {
            Some(path) => {
                let data = wav::read_wav_mono(path)?;
                if data.sample_rate != self.stft.sample_rate {
                    return Err(IccError::SampleRateMismatch {
                        left: data.sample_rate,
                        right: self.stft.sample_rate,
                    });
                }
                Ok(data.samples)
            }
            None => {
                let n = (self.source.duration_s * self.stft.sample_rate) as usize;
                Ok(dsp::speech_like_noise(
                    n,
                    self.stft.sample_rate,
                    self.seed.wrapping_add(0x50_0C),
                    self.source.modulation_depth_db,
                ))
            }
        }
    }

    fn noise_spec(&self) -> NoiseSpec {
        if self.icc.snr_db.is_infinite() {
            NoiseSpec::Off
        } else {
            NoiseSpec::SnrDb(self.icc.snr_db)
        }
    }

    fn icc_config(&self, calibration: &CalibrationData) -> IccConfig {
        IccConfig {
            alpha_db: self.icc.alpha_db,
            tau_icc: self.icc.tau_icc,
            forward_gain: calibration.forward_gain,
            canceller: None,
            mismatch_sigma: calibration.mismatch_sigma,
            mismatch_seed: self.icc.mismatch_seed,
        }
    }

    fn spr_config(&self) -> SprConfig {
        SprConfig {
            epsilon: self.detection.epsilon,
            speech_band_hz: self.detection.speech_band_hz,
        }
    }

    fn estimator_config(&self, alpha_db: f64) -> EstimatorConfig {
        EstimatorConfig {
            alpha: AlphaSpec::BroadbandDb(alpha_db),
            lambda: self.estimator.lambda,
            delta: self.estimator.delta,
            n_taps: self.estimator.n_taps,
            model_betas: None,
        }
    }

    /// Noise seed for grid point `index`, derived from the master seed.
    fn noise_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(0x401_5E00).wrapping_add(index as u64)
    }
}

/// Use the configured calibration or compute one.
pub fn ensure_calibration(cfg: &ExperimentConfig, scene: &Scene) -> Result<CalibrationData> {
    match &cfg.calibration {
        Some(c) => Ok(c.clone()),
        None => calibrate(cfg, scene),
    }
}

/// Run both calibrations and the stability audit of the estimator model.
pub fn calibrate(cfg: &ExperimentConfig, scene: &Scene) -> Result<CalibrationData> {
    let probe = cfg.source_signal()?;
    let mut icc = IccConfig {
        alpha_db: 0.0,
        tau_icc: cfg.icc.tau_icc,
        forward_gain: 1.0,
        canceller: None,
        mismatch_sigma: 0.0,
        mismatch_seed: cfg.icc.mismatch_seed,
    };
    icc.forward_gain = sim::calibrate_forward_gain(scene, &icc, &probe)?;
    let sigma = sim::calibrate_mismatch(scene, &icc, cfg.icc.target_unstable_above_db)?;

    // Per-band stability border of the estimator recursion, for audit.
    let stft = cfg.stft_config()?;
    let model = build_model(
        &scene.geometry,
        &stft,
        &IccForwardModel {
            tau_icc: cfg.icc.tau_icc,
            fixed_gain: icc.forward_gain,
        },
        &cfg.estimator_config(0.0),
    )?;
    let alpha_r_max = model
        .stability()
        .max_gain
        .iter()
        .map(|&g| if g.is_finite() { Some(g) } else { None })
        .collect();

    Ok(CalibrationData {
        forward_gain: icc.forward_gain,
        mismatch_sigma: sigma,
        target_unstable_above_db: cfg.icc.target_unstable_above_db,
        alpha_r_max,
    })
}

/// `calibrate` command: compute and write `calibration.json`.
pub fn run_calibrate(cfg: &ExperimentConfig) -> Result<CalibrationData> {
    let scene = cfg.build_scene()?;
    let data = calibrate(cfg, &scene)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(cfg.out_dir.join("calibration.json"), &data)?;
    Ok(data)
}

/// Streaming zone-detection results for one simulated signal: per-frame
/// broadband SPRs and decisions for both PSD variants.
#[derive(Debug, Clone)]
pub struct DetectionTrace {
    pub frame_times: Vec<f64>,
    /// `[frame][zone]`, SPR on raw microphone PSDs.
    pub spr_unprocessed: Vec<Vec<f64>>,
    /// `[frame][zone]`, SPR on direct-signal PSD estimates.
    pub spr_processed: Vec<Vec<f64>>,
    pub decisions_unprocessed: Vec<usize>,
    pub decisions_processed: Vec<usize>,
    /// Speech-activity mask from the reference direct signal.
    pub active: Vec<bool>,
}

impl DetectionTrace {
    pub fn frames(&self) -> usize {
        self.frame_times.len()
    }
}

/// Run PSD tracking, feedback estimation and zone detection over a
/// simulated scene, producing both the unprocessed and the processed
/// (direct-PSD) variant in one pass.
pub fn run_detection(
    sim_out: &SimOutput,
    model: &EstimatorModel,
    stft: &StftConfig,
    spr_cfg: &SprConfig,
    beta_s: f64,
    gate_threshold_db: f64,
) -> Result<DetectionTrace> {
    let mics = sim_out.mics();
    let specs: Vec<_> = sim_out
        .y
        .iter()
        .map(|y| analyze(y, stft))
        .collect::<Result<Vec<_>>>()?;
    let frames = specs.iter().map(|s| s.frames()).min().unwrap_or(0);
    let bands = stft.bands();
    let speech_bands = spr_cfg.speech_bands(stft);

    // Speech-activity gate from the ground-truth reference direct signal.
    let direct_ref = analyze(&sim_out.y_direct[0], stft)?;
    let mut direct_power: Vec<f64> = (0..frames)
        .map(|l| speech_bands.iter().map(|&k| direct_ref.at(k, l).norm_sqr()).sum())
        .collect();
    let peak = direct_power.iter().cloned().fold(0.0f64, f64::max);
    let floor = peak * dsp::db_to_amplitude(-gate_threshold_db * 2.0).max(0.0); // power dB
    for p in direct_power.iter_mut() {
        *p = if *p >= floor { 1.0 } else { 0.0 };
    }

    let mut mic_tracker = PsdTracker::new(mics, bands, beta_s)?;
    let mut fb_tracker = PsdTracker::new(mics, bands, beta_s)?;
    let mut state = model.new_state();

    let mut trace = DetectionTrace {
        frame_times: Vec::with_capacity(frames),
        spr_unprocessed: Vec::with_capacity(frames),
        spr_processed: Vec::with_capacity(frames),
        decisions_unprocessed: Vec::with_capacity(frames),
        decisions_processed: Vec::with_capacity(frames),
        active: direct_power.iter().map(|&p| p > 0.0).collect(),
    };

    for l in 0..frames {
        let y0_frame = specs[0].frame(l);
        let fb_frames = model.estimate_frame(&mut state, &y0_frame)?;
        for m in 0..mics {
            mic_tracker.update_channel(m, &specs[m].frame_power(l));
            let fb_power: Vec<f64> = fb_frames[m].iter().map(|c| c.norm_sqr()).collect();
            fb_tracker.update_channel(m, &fb_power);
        }

        let raw: Vec<&[f64]> = (0..mics).map(|m| mic_tracker.psd(m)).collect();
        let spr_raw = spr(&raw, spr_cfg.epsilon);
        let bb_raw = broadband_spr(&spr_raw, &speech_bands);

        let direct: Vec<Vec<f64>> = (0..mics)
            .map(|m| direct_psd(mic_tracker.psd(m), fb_tracker.psd(m)))
            .collect();
        let direct_refs: Vec<&[f64]> = direct.iter().map(|v| v.as_slice()).collect();
        let spr_dir = spr(&direct_refs, spr_cfg.epsilon);
        let bb_dir = broadband_spr(&spr_dir, &speech_bands);

        trace.frame_times.push(stft.frame_time(l));
        trace.decisions_unprocessed.push(detect_zone(&bb_raw).zone);
        trace.decisions_processed.push(detect_zone(&bb_dir).zone);
        trace.spr_unprocessed.push(bb_raw);
        trace.spr_processed.push(bb_dir);
    }
    Ok(trace)
}

/// One gain grid point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub alpha_db: f64,
    pub stable: bool,
    pub rates_unprocessed: Vec<f64>,
    pub rates_processed: Vec<f64>,
    pub mean_spr_unprocessed: Vec<f64>,
    pub mean_spr_processed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Largest grid gain whose correct-zone rate stays at or above `level`.
    pub fn alpha_at_rate(&self, zone: usize, level: f64, processed: bool) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| {
                let r = if processed {
                    p.rates_processed[zone]
                } else {
                    p.rates_unprocessed[zone]
                };
                r >= level
            })
            .map(|p| p.alpha_db)
            .fold(None, |acc, a| Some(acc.map_or(a, |b: f64| b.max(a))))
    }
}

/// `sweep` command: simulate and detect across the gain grid, write
/// `sweep.csv`. Failed grid points are skipped with a warning; the sweep
/// continues.
pub fn run_sweep(cfg: &ExperimentConfig, no_processing: bool) -> Result<SweepResult> {
    let scene = cfg.build_scene()?;
    let calibration = ensure_calibration(cfg, &scene)?;
    let stft = cfg.stft_config()?;
    let source = cfg.source_signal()?;
    let spr_cfg = cfg.spr_config();
    let model_base = build_model(
        &scene.geometry,
        &stft,
        &IccForwardModel {
            tau_icc: cfg.icc.tau_icc,
            fixed_gain: calibration.forward_gain,
        },
        &cfg.estimator_config(0.0),
    )?;

    let mut grid = cfg.sweep.alpha_grid_db.clone();
    grid.sort_by(|a, b| a.total_cmp(b));
    let mics = scene.mics();
    let mut points = Vec::with_capacity(grid.len());
    for (index, &alpha_db) in grid.iter().enumerate() {
        let run = || -> Result<SweepPoint> {
            let icc = cfg.icc_config(&calibration).with_alpha_db(alpha_db);
            let sim_out = sim::simulate(&scene, &icc, &source, cfg.noise_spec(), cfg.noise_seed(index))?;
            let model = model_base.with_alpha(&AlphaSpec::BroadbandDb(alpha_db))?;
            let trace = run_detection(
                &sim_out,
                &model,
                &stft,
                &spr_cfg,
                cfg.estimator.beta_s,
                cfg.detection.gate_threshold_db,
            )?;
            let mask = cfg
                .detection
                .gate_speech_activity
                .then_some(trace.active.as_slice());
            let mut rates_unprocessed = Vec::with_capacity(mics);
            let mut rates_processed = Vec::with_capacity(mics);
            for z in 0..mics {
                rates_unprocessed.push(crate::zone::zone_detection_rate(
                    &trace.decisions_unprocessed,
                    z,
                    mask,
                )?);
                rates_processed.push(crate::zone::zone_detection_rate(
                    &trace.decisions_processed,
                    z,
                    mask,
                )?);
            }
            let frames = trace.frames() as f64;
            let mean_spr = |per_frame: &Vec<Vec<f64>>| -> Vec<f64> {
                (0..mics)
                    .map(|z| per_frame.iter().map(|f| f[z]).sum::<f64>() / frames)
                    .collect()
            };
            Ok(SweepPoint {
                alpha_db,
                stable: !sim_out.unstable,
                mean_spr_unprocessed: mean_spr(&trace.spr_unprocessed),
                mean_spr_processed: mean_spr(&trace.spr_processed),
                rates_unprocessed,
                rates_processed,
            })
        };
        match run() {
            Ok(point) => points.push(point),
            Err(e) => log::warn!("sweep point alpha = {alpha_db} dB failed: {e}"),
        }
    }

    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from("alpha_db,variant,zone,rate,stable\n");
    for p in &points {
        let variants: &[(&str, &Vec<f64>)] = if no_processing {
            &[("unprocessed", &p.rates_unprocessed)]
        } else {
            &[
                ("unprocessed", &p.rates_unprocessed),
                ("processed", &p.rates_processed),
            ]
        };
        for (name, rates) in variants {
            for (z, r) in rates.iter().enumerate() {
                csv.push_str(&format!(
                    "{:.2},{name},{z},{r:.6},{}\n",
                    p.alpha_db, p.stable
                ));
            }
        }
    }
    fs::write(cfg.out_dir.join("sweep.csv"), csv)?;
    Ok(SweepResult { points })
}

/// Result of the `spr-trace` command.
#[derive(Debug, Clone)]
pub struct TraceResult {
    pub trace: DetectionTrace,
    /// First frame with processing enabled (half the signal), or
    /// `usize::MAX` when processing is disabled throughout.
    pub toggle_frame: usize,
}

/// `spr-trace` command: per-frame broadband SPR per zone with the
/// direct-PSD processing toggled on at the midpoint (Fig.-3-style run).
pub fn run_spr_trace(cfg: &ExperimentConfig, no_processing: bool) -> Result<TraceResult> {
    let fs = cfg.stft.sample_rate;
    let source = cfg.source_signal()?;
    if (source.len() as f64) < 8.0 * fs {
        return Err(IccError::SourceTooShort(format!(
            "spr-trace needs at least 8 s of source, got {:.2} s",
            source.len() as f64 / fs
        )));
    }
    let scene = cfg.build_scene()?;
    let calibration = ensure_calibration(cfg, &scene)?;
    let stft = cfg.stft_config()?;
    let icc = cfg.icc_config(&calibration);
    let sim_out = sim::simulate(&scene, &icc, &source, cfg.noise_spec(), cfg.noise_seed(0))?;
    let model = build_model(
        &scene.geometry,
        &stft,
        &IccForwardModel {
            tau_icc: cfg.icc.tau_icc,
            fixed_gain: calibration.forward_gain,
        },
        &cfg.estimator_config(cfg.icc.alpha_db),
    )?;
    let trace = run_detection(
        &sim_out,
        &model,
        &stft,
        &cfg.spr_config(),
        cfg.estimator.beta_s,
        cfg.detection.gate_threshold_db,
    )?;

    let toggle_frame = if no_processing {
        usize::MAX
    } else {
        trace.frames() / 2
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from("frame_time,zone,spr_db,processing_enabled\n");
    for l in 0..trace.frames() {
        let enabled = l >= toggle_frame;
        let sprs = if enabled {
            &trace.spr_processed[l]
        } else {
            &trace.spr_unprocessed[l]
        };
        for (z, v) in sprs.iter().enumerate() {
            csv.push_str(&format!(
                "{:.6},{z},{v:.6},{enabled}\n",
                trace.frame_times[l]
            ));
        }
    }
    fs::write(cfg.out_dir.join("spr_trace.csv"), csv)?;
    Ok(TraceResult { trace, toggle_frame })
}

/// Summary written next to simulation WAVs.
#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub alpha_db: f64,
    pub forward_gain: f64,
    pub mismatch_sigma: f64,
    pub seed: u64,
    pub sample_rate: f64,
    pub unstable: bool,
    pub rms_mic: Vec<f64>,
    pub rms_direct: Vec<f64>,
    pub rms_feedback: Vec<f64>,
    pub rms_noise: Vec<f64>,
    pub rms_loudspeaker: f64,
}

/// `simulate` command: run the loop once and write WAVs plus
/// `metadata.json`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<SimulateReport> {
    let scene = cfg.build_scene()?;
    let calibration = ensure_calibration(cfg, &scene)?;
    let source = cfg.source_signal()?;
    let icc = cfg.icc_config(&calibration);
    let out = sim::simulate(&scene, &icc, &source, cfg.noise_spec(), cfg.noise_seed(0))?;

    fs::create_dir_all(&cfg.out_dir)?;
    let fs_hz = out.sample_rate;
    for m in 0..out.mics() {
        wav::write_wav_f32(cfg.out_dir.join(format!("mic_{m}.wav")), &out.y[m], fs_hz)?;
        if cfg.write_components {
            wav::write_wav_f32(cfg.out_dir.join(format!("direct_{m}.wav")), &out.y_direct[m], fs_hz)?;
            wav::write_wav_f32(
                cfg.out_dir.join(format!("feedback_{m}.wav")),
                &out.y_feedback[m],
                fs_hz,
            )?;
            wav::write_wav_f32(cfg.out_dir.join(format!("noise_{m}.wav")), &out.noise[m], fs_hz)?;
        }
    }
    wav::write_wav_f32(cfg.out_dir.join("loudspeaker.wav"), &out.u, fs_hz)?;

    let report = SimulateReport {
        alpha_db: cfg.icc.alpha_db,
        forward_gain: calibration.forward_gain,
        mismatch_sigma: calibration.mismatch_sigma,
        seed: cfg.seed,
        sample_rate: fs_hz,
        unstable: out.unstable,
        rms_mic: out.y.iter().map(|v| dsp::rms(v)).collect(),
        rms_direct: out.y_direct.iter().map(|v| dsp::rms(v)).collect(),
        rms_feedback: out.y_feedback.iter().map(|v| dsp::rms(v)).collect(),
        rms_noise: out.noise.iter().map(|v| dsp::rms(v)).collect(),
        rms_loudspeaker: dsp::rms(&out.u),
    };
    write_json(cfg.out_dir.join("metadata.json"), &report)?;
    Ok(report)
}

/// One filter of the `ctf-check` oracle run.
#[derive(Debug, Clone, Serialize)]
pub struct CtfCheckRow {
    pub filter_len: usize,
    pub taps: usize,
    pub power_db: f64,
    pub complex_db: f64,
    pub pass: bool,
}

/// `ctf-check` command: identify CTFs for seeded random filters and print
/// the spectral error against time-domain filtering. The pass bound is the
/// -15 dB accuracy contract on the power-spectrum error.
pub fn run_ctf_check(cfg: &ExperimentConfig, count: usize) -> Result<Vec<CtfCheckRow>> {
    let stft = cfg.stft_config()?;
    let max_len = 12 * stft.hop;
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(0xC7F + i as u64);
        // Deterministic length in [hop, 12 hop].
        let len = stft.hop + (seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) % (max_len - stft.hop) as u64) as usize;
        let taps = dsp::white_noise(len, seed);
        let h = crate::acoustics::ImpulseResponse::new(taps, stft.sample_rate)?;
        let n_taps = ctf::Ctf::default_taps(h.len(), &stft);
        let err: CtfError = ctf::spectral_error(&h, &stft, n_taps, seed.wrapping_add(1));
        rows.push(CtfCheckRow {
            filter_len: len,
            taps: n_taps,
            power_db: err.power_db,
            complex_db: err.complex_db,
            pass: err.power_db <= -15.0,
        });
    }
    Ok(rows)
}

fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| IccError::Numerical(format!("json serialization failed: {e}")))?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
