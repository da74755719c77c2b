//! Ground-truth time-domain simulation of the closed electroacoustic loop:
//! talker -> microphones -> ICC forward path (delay + gain) -> rear
//! loudspeakers -> feedback back into the microphones, with an imperfect
//! feedback canceller in the ICC.
//!
//! The loudspeaker signal obeys the sample recursion
//!
//! ```text
//! u(n) = G * [ y_0(n - d) - (g * u)(n - d) ]
//!      = G * [ y_open_0(n - d) + ((h_L0 - g) * u)(n - d) ]
//! ```
//!
//! with `G = forward_gain * alpha_lin`, `d` the ICC processing delay in
//! samples, `g` the canceller and `y_open_0` the open-loop reference
//! microphone signal (direct sound plus noise). Only the canceller mismatch
//! `h_L0 - g` feeds back, so a perfect canceller leaves an exactly open
//! loop. The ICC forward path is simulated as a pure broadband delay and
//! gain in the time domain, which keeps the ground truth independent of any
//! STFT machinery.
//!
//! Divergence is data: a run that blows past the hard amplitude threshold or
//! shows sustained growth is flagged `unstable` instead of failing.

use crate::acoustics::{ImpulseResponse, Scene};
use crate::dsp::{self, db_to_amplitude, rms};
use crate::error::{IccError, Result};

/// Fixed seed for the calibration probe signal.
const CALIBRATION_PROBE_SEED: u64 = 4242;

/// Microphone noise specification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    /// No additive noise.
    Off,
    /// White noise scaled for this SNR (dB) against the direct signal at the
    /// reference microphone; the same absolute level goes to every
    /// microphone.
    SnrDb(f64),
    /// Explicit per-microphone noise standard deviation.
    Sigma(f64),
}

/// ICC forward path and canceller configuration.
#[derive(Debug, Clone)]
pub struct IccConfig {
    /// Broadband ICC gain in dB; `-inf` switches the ICC off.
    pub alpha_db: f64,
    /// Processing delay in seconds.
    pub tau_icc: f64,
    /// Fixed linear forward gain (from [`calibrate_forward_gain`]).
    pub forward_gain: f64,
    /// Canceller baseline; `None` uses the scene's true `h_L0`.
    pub canceller: Option<ImpulseResponse>,
    /// l2 norm of the white canceller perturbation.
    pub mismatch_sigma: f64,
    /// Seed of the (fixed) perturbation direction.
    pub mismatch_seed: u64,
}

impl IccConfig {
    pub fn new(alpha_db: f64) -> Self {
        Self {
            alpha_db,
            tau_icc: 0.015,
            forward_gain: 1.0,
            canceller: None,
            mismatch_sigma: 0.0,
            mismatch_seed: 7001,
        }
    }

    pub fn with_alpha_db(&self, alpha_db: f64) -> Self {
        Self {
            alpha_db,
            ..self.clone()
        }
    }

    /// Processing delay in samples at rate `fs`.
    pub fn delay_samples(&self, fs: f64) -> usize {
        (self.tau_icc * fs).round() as usize
    }
}

/// Per-microphone component signals plus the loudspeaker signal.
///
/// `y[m] = y_direct[m] + y_feedback[m] + noise[m]` holds exactly,
/// sample-wise, by construction.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub y: Vec<Vec<f64>>,
    pub y_direct: Vec<Vec<f64>>,
    pub y_feedback: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    /// Divergence flag: hard amplitude threshold or sustained growth.
    pub unstable: bool,
    pub sample_rate: f64,
    /// Per microphone: ICC delay plus the shortest loudspeaker path, in
    /// samples. The cross-term analysis compares the frame size against it.
    pub loop_delay_samples: Vec<usize>,
}

impl SimOutput {
    pub fn mics(&self) -> usize {
        self.y.len()
    }
}

/// The effective canceller taps `g = base - sigma * w` with `w` a fixed
/// unit-norm white direction.
fn effective_canceller(scene: &Scene, icc: &IccConfig) -> Result<Vec<f64>> {
    let base = match &icc.canceller {
        Some(ir) => {
            if ir.sample_rate != scene.sample_rate {
                return Err(IccError::SampleRateMismatch {
                    left: ir.sample_rate,
                    right: scene.sample_rate,
                });
            }
            ir.taps.clone()
        }
        None => scene.h_combined[0].taps.clone(),
    };
    if icc.mismatch_sigma == 0.0 {
        return Ok(base);
    }
    let w = dsp::white_noise(base.len(), icc.mismatch_seed);
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = icc.mismatch_sigma / norm;
    Ok(base
        .iter()
        .zip(w.iter())
        .map(|(b, wi)| b - wi * scale)
        .collect())
}

/// Simulate the closed loop for a dry source signal played from the scene's
/// source zone. Deterministic for fixed seeds.
pub fn simulate(
    scene: &Scene,
    icc: &IccConfig,
    source: &[f64],
    noise: NoiseSpec,
    noise_seed: u64,
) -> Result<SimOutput> {
    if source.is_empty() {
        return Err(IccError::InvalidConfig("source signal is empty".into()));
    }
    let fs = scene.sample_rate;
    let mics = scene.mics();
    let len = source.len();
    let d = icc.delay_samples(fs);
    if d + scene.geometry.min_speaker_delay(0, fs) == 0 {
        return Err(IccError::ZeroLoopDelay);
    }
    let alpha_lin = db_to_amplitude(icc.alpha_db);
    let loop_gain = icc.forward_gain * alpha_lin;

    // Open-loop direct components.
    let y_direct: Vec<Vec<f64>> = scene
        .h_direct
        .iter()
        .map(|h| {
            let mut v = dsp::fft_convolve(source, &h.taps);
            v.resize(len, 0.0);
            v
        })
        .collect();

    // Microphone noise, equal absolute level on every channel.
    let sigma = match noise {
        NoiseSpec::Off => 0.0,
        NoiseSpec::Sigma(s) => s,
        NoiseSpec::SnrDb(snr) => rms(&y_direct[0]) * db_to_amplitude(-snr),
    };
    let noise_signals: Vec<Vec<f64>> = (0..mics)
        .map(|m| {
            if sigma == 0.0 {
                vec![0.0; len]
            } else {
                let seed = noise_seed.wrapping_add((m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                dsp::white_noise(len, seed)
                    .into_iter()
                    .map(|v| v * sigma)
                    .collect()
            }
        })
        .collect();

    // Canceller mismatch path: only h_L0 - g re-enters the loop.
    let g_eff = effective_canceller(scene, icc)?;
    let h_l0 = &scene.h_combined[0].taps;
    let delta_len = h_l0.len().max(g_eff.len());
    let mut delta = vec![0.0; delta_len];
    for (i, dst) in delta.iter_mut().enumerate() {
        let h = h_l0.get(i).copied().unwrap_or(0.0);
        let g = g_eff.get(i).copied().unwrap_or(0.0);
        *dst = h - g;
    }
    let j0 = delta.iter().position(|&v| v != 0.0);
    if let Some(j0) = j0 {
        // The recursion needs at least one sample of loop delay.
        if d + j0 == 0 {
            return Err(IccError::ZeroLoopDelay);
        }
    }

    // Loop drive: open-loop reference microphone signal.
    let drive: Vec<f64> = y_direct[0]
        .iter()
        .zip(noise_signals[0].iter())
        .map(|(a, b)| a + b)
        .collect();

    // Sample recursion for the loudspeaker signal.
    let mut u = vec![0.0; len];
    let hard_threshold = 1e6 * dsp::max_abs(source).max(1e-12);
    let mut hard_tripped = false;
    if loop_gain != 0.0 {
        for n in d..len {
            let mut acc = drive[n - d];
            if let Some(j0) = j0 {
                let j_max = (n - d).min(delta_len - 1);
                let base = n - d;
                for j in j0..=j_max {
                    acc += delta[j] * u[base - j];
                }
            }
            let v = loop_gain * acc;
            if v.abs() > hard_threshold {
                hard_tripped = true;
            }
            u[n] = v;
        }
    }

    // Feedback components and the assembled microphone signals.
    let y_feedback: Vec<Vec<f64>> = scene
        .h_combined
        .iter()
        .map(|h| {
            let mut v = dsp::fft_convolve(&u, &h.taps);
            v.resize(len, 0.0);
            v
        })
        .collect();
    let y: Vec<Vec<f64>> = (0..mics)
        .map(|m| {
            (0..len)
                .map(|i| y_direct[m][i] + y_feedback[m][i] + noise_signals[m][i])
                .collect()
        })
        .collect();

    // Growth detector: sustained level rise of u between the middle and the
    // last quarter. Stable runs stay below 2x (see module tests); 4x flags.
    let rms_mid = rms(&u[3 * len / 8..5 * len / 8]);
    let rms_last = rms(&u[3 * len / 4..]);
    let growing = if rms_mid == 0.0 {
        rms_last > 0.0
    } else {
        rms_last > 4.0 * rms_mid
    };

    Ok(SimOutput {
        y,
        y_direct,
        y_feedback,
        noise: noise_signals,
        u,
        unstable: hard_tripped || growing,
        sample_rate: fs,
        loop_delay_samples: scene.loop_delay_samples(icc.tau_icc),
    })
}

/// Fixed ICC gain such that the loop at alpha = 0 dB induces the same RMS at
/// the rear microphones (mean over m >= 2) as the direct signal at the
/// co-driver microphone (m = 1), for a probe played from the driver zone.
///
/// One open-loop pass suffices: with a perfect canceller during calibration
/// the feedback RMS is linear in the forward gain.
pub fn calibrate_forward_gain(scene: &Scene, icc: &IccConfig, probe: &[f64]) -> Result<f64> {
    if scene.mics() < 3 {
        return Err(IccError::InvalidGeometry(
            "forward-gain calibration needs a co-driver and rear microphones".into(),
        ));
    }
    if scene.source_zone != 0 {
        return Err(IccError::InvalidConfig(
            "calibration probe must come from zone 0 (driver)".into(),
        ));
    }
    let unit = IccConfig {
        alpha_db: 0.0,
        forward_gain: 1.0,
        canceller: None,
        mismatch_sigma: 0.0,
        ..icc.clone()
    };
    let out = simulate(scene, &unit, probe, NoiseSpec::Off, 0)?;
    let direct_codriver = rms(&out.y_direct[1]);
    let rear: Vec<f64> = (2..scene.mics()).map(|m| rms(&out.y_feedback[m])).collect();
    let rear_mean = rear.iter().sum::<f64>() / rear.len() as f64;
    if direct_codriver == 0.0 || rear_mean == 0.0 {
        return Err(IccError::SilentProbe);
    }
    Ok(direct_codriver / rear_mean)
}

/// Whether the loop with this mismatch is stable at `alpha_db`, measured by
/// a short simulation of a stationary probe and the divergence flag.
fn stable_at(scene: &Scene, icc: &IccConfig, sigma: f64, alpha_db: f64, probe: &[f64]) -> Result<bool> {
    let cfg = IccConfig {
        alpha_db,
        mismatch_sigma: sigma,
        ..icc.clone()
    };
    Ok(!simulate(scene, &cfg, probe, NoiseSpec::Off, 0)?.unstable)
}

/// Scale of the white canceller perturbation such that the simulated loop is
/// still stable at `target_unstable_above_db` but unstable half a dB higher.
///
/// Bisection on the perturbation norm against short probe simulations; the
/// perturbation direction is fixed by `icc.mismatch_seed`, so the result is
/// deterministic and remains valid for later runs with the same seed.
pub fn calibrate_mismatch(scene: &Scene, icc: &IccConfig, target_unstable_above_db: f64) -> Result<f64> {
    let fs = scene.sample_rate;
    let probe = dsp::speech_shaped_noise((3.0 * fs) as usize, fs, CALIBRATION_PROBE_SEED);
    let lo_db = target_unstable_above_db;
    let hi_db = target_unstable_above_db + 0.5;

    let cap = scene.h_combined[0].l2_norm();
    if stable_at(scene, icc, cap, hi_db, &probe)? {
        return Err(IccError::CalibrationUnreachable(format!(
            "loop still stable at {hi_db} dB with mismatch sigma {cap}"
        )));
    }
    let mut lo = 0.0f64; // stable at hi_db (sigma 0 trivially is)
    let mut hi = cap; // unstable at hi_db
    for _ in 0..64 {
        let mid = if lo == 0.0 { hi * 1e-3 } else { (lo * hi).sqrt() };
        if !stable_at(scene, icc, mid, lo_db, &probe)? {
            hi = mid;
        } else if stable_at(scene, icc, mid, hi_db, &probe)? {
            lo = mid;
        } else {
            return Ok(mid);
        }
        if lo > 0.0 && hi / lo < 1.0001 {
            break;
        }
    }
    Err(IccError::CalibrationUnreachable(format!(
        "no sigma found with the loop stable at {lo_db} dB and unstable at {hi_db} dB"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{Geometry, IrModel, Point3, Scene};
    use crate::dsp::{speech_shaped_noise, white_noise};

    fn free_field_scene() -> Scene {
        Scene::build(Geometry::default_cabin(), 24000.0, &IrModel::FreeField, 0).unwrap()
    }

    #[test]
    fn icc_off_means_silent_loudspeaker() {
        let scene = free_field_scene();
        let icc = IccConfig::new(f64::NEG_INFINITY);
        let src = speech_shaped_noise(12000, 24000.0, 1);
        let out = simulate(&scene, &icc, &src, NoiseSpec::SnrDb(20.0), 99).unwrap();
        assert!(out.u.iter().all(|&v| v == 0.0));
        assert!(out.y_feedback.iter().all(|ch| ch.iter().all(|&v| v == 0.0)));
        assert!(!out.unstable);
        // y = y_d + v when the ICC is off.
        for m in 0..out.mics() {
            for i in 0..src.len() {
                assert_eq!(out.y[m][i], out.y_direct[m][i] + out.noise[m][i]);
            }
        }
    }

    #[test]
    fn decomposition_holds_exactly() {
        let scene = free_field_scene();
        let mut icc = IccConfig::new(0.0);
        icc.mismatch_sigma = 0.05;
        let src = speech_shaped_noise(10000, 24000.0, 2);
        let out = simulate(&scene, &icc, &src, NoiseSpec::SnrDb(20.0), 3).unwrap();
        for m in 0..out.mics() {
            for i in 0..src.len() {
                assert_eq!(
                    out.y[m][i],
                    out.y_direct[m][i] + out.y_feedback[m][i] + out.noise[m][i]
                );
            }
        }
    }

    #[test]
    fn perfect_canceller_leaves_open_loop() {
        let scene = free_field_scene();
        let icc = IccConfig::new(0.0); // sigma = 0, canceller = true h_L0
        let src = speech_shaped_noise(12000, 24000.0, 4);
        let out = simulate(&scene, &icc, &src, NoiseSpec::Off, 0).unwrap();
        // u(n) = G * y_d0(n - d), with y_d0 from an independent direct
        // convolution.
        let d = icc.delay_samples(24000.0);
        let h = &scene.h_direct[0].taps;
        for n in 0..src.len() {
            let mut want = 0.0;
            if n >= d {
                let t = n - d;
                for (j, &hj) in h.iter().enumerate() {
                    if j <= t {
                        want += hj * src[t - j];
                    }
                }
            }
            want *= icc.forward_gain;
            assert!(
                (out.u[n] - want).abs() <= 1e-9,
                "sample {n}: {} vs {want}",
                out.u[n]
            );
        }
        assert!(!out.unstable);
    }

    #[test]
    fn superposition_of_sources() {
        let scene = free_field_scene();
        let mut icc = IccConfig::new(0.0);
        icc.mismatch_sigma = 0.02;
        let s1 = speech_shaped_noise(8000, 24000.0, 5);
        let s2: Vec<f64> = white_noise(8000, 6).iter().map(|v| v * 0.05).collect();
        let sum: Vec<f64> = s1.iter().zip(s2.iter()).map(|(a, b)| a + b).collect();

        // Noise enters once with a fixed absolute level.
        let out_sum = simulate(&scene, &icc, &sum, NoiseSpec::Sigma(0.01), 7).unwrap();
        let out_1 = simulate(&scene, &icc, &s1, NoiseSpec::Sigma(0.01), 7).unwrap();
        let out_2 = simulate(&scene, &icc, &s2, NoiseSpec::Off, 0).unwrap();

        let scale = crate::dsp::max_abs(&out_sum.u).max(1e-12);
        for n in 0..sum.len() {
            let want = out_1.u[n] + out_2.u[n];
            assert!((out_sum.u[n] - want).abs() <= 1e-9 * scale);
        }
        for m in 0..out_sum.mics() {
            let scale = crate::dsp::max_abs(&out_sum.y[m]).max(1e-12);
            for n in 0..sum.len() {
                let want = out_1.y[m][n] + out_2.y[m][n];
                assert!((out_sum.y[m][n] - want).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn runaway_gain_is_flagged_with_monotone_growth() {
        let scene = free_field_scene();
        let mut icc = IccConfig::new(6.0);
        icc.canceller = Some(ImpulseResponse::impulse_at(0, 0.0, 24000.0)); // no cancellation
        icc.forward_gain = 2.0;
        let src = speech_shaped_noise(24000, 24000.0, 8);
        let out = simulate(&scene, &icc, &src, NoiseSpec::Off, 0).unwrap();
        assert!(out.unstable);
        // Energy grows monotonically over the last 10%.
        let len = out.u.len();
        let tail = &out.u[len - len / 10..];
        let quarter = tail.len() / 4;
        let mut last = 0.0;
        for w in 0..4 {
            let r = rms(&tail[w * quarter..(w + 1) * quarter]);
            assert!(r > last, "window {w} rms {r} <= {last}");
            last = r;
        }
    }

    #[test]
    fn stable_run_keeps_bounded_tail() {
        let scene = free_field_scene();
        let mut icc = IccConfig::new(0.0);
        icc.mismatch_sigma = 0.01;
        let src = speech_shaped_noise(48000, 24000.0, 9);
        let out = simulate(&scene, &icc, &src, NoiseSpec::Off, 0).unwrap();
        assert!(!out.unstable);
        let len = out.u.len();
        let mid = rms(&out.u[3 * len / 8..5 * len / 8]);
        let last = rms(&out.u[3 * len / 4..]);
        assert!(last <= 2.0 * mid, "last {last} vs mid {mid}");
    }

    #[test]
    fn forward_gain_calibration_is_linear_and_self_consistent() {
        let scene = free_field_scene();
        let icc = IccConfig::new(0.0);
        let probe = speech_shaped_noise(24000, 24000.0, 10);
        let gain = calibrate_forward_gain(&scene, &icc, &probe).unwrap();
        assert!(gain > 0.0);

        // Doubling all loudspeaker responses halves the gain.
        let mut doubled = scene.clone();
        for ir in doubled.h_combined.iter_mut() {
            *ir = ir.scaled(2.0);
        }
        for row in doubled.h_speaker.iter_mut() {
            for ir in row.iter_mut() {
                *ir = ir.scaled(2.0);
            }
        }
        let gain2 = calibrate_forward_gain(&doubled, &icc, &probe).unwrap();
        assert!((gain2 - gain / 2.0).abs() / gain < 1e-9);

        // Simulating at alpha = 0 dB with the calibrated gain reproduces the
        // RMS match within 5%.
        let mut cal = IccConfig::new(0.0);
        cal.forward_gain = gain;
        let out = simulate(&scene, &cal, &probe, NoiseSpec::Off, 0).unwrap();
        let rear = (rms(&out.y_feedback[2]) + rms(&out.y_feedback[3])) / 2.0;
        let codriver = rms(&out.y_direct[1]);
        assert!((rear - codriver).abs() / codriver < 0.05);
    }

    #[test]
    fn forward_gain_rejects_silent_probe() {
        let scene = free_field_scene();
        let icc = IccConfig::new(0.0);
        let err = calibrate_forward_gain(&scene, &icc, &vec![0.0; 4000]).unwrap_err();
        assert!(matches!(err, IccError::SilentProbe));
    }

    #[test]
    fn zero_mismatch_is_stable_at_high_gain_on_free_field() {
        let scene = free_field_scene();
        let probe = speech_shaped_noise(24000, 24000.0, 11);
        let mut icc = IccConfig::new(0.0);
        icc.forward_gain = calibrate_forward_gain(&scene, &icc, &probe).unwrap();
        for alpha in [0.0, 10.0, 20.0] {
            let out =
                simulate(&scene, &icc.with_alpha_db(alpha), &probe, NoiseSpec::Off, 0).unwrap();
            assert!(!out.unstable, "alpha {alpha} dB flagged unstable");
        }
    }

    #[test]
    fn mismatch_calibration_brackets_the_instability() {
        let scene = free_field_scene();
        let probe = speech_shaped_noise(24000, 24000.0, 12);
        let mut icc = IccConfig::new(0.0);
        icc.forward_gain = calibrate_forward_gain(&scene, &icc, &probe).unwrap();
        let sigma = calibrate_mismatch(&scene, &icc, 4.0).unwrap();
        assert!(sigma > 0.0);
        icc.mismatch_sigma = sigma;

        let long_probe = speech_shaped_noise(72000, 24000.0, 13);
        let stable =
            simulate(&scene, &icc.with_alpha_db(3.5), &long_probe, NoiseSpec::Off, 0).unwrap();
        assert!(!stable.unstable, "expected stability at 3.5 dB");
        let unstable =
            simulate(&scene, &icc.with_alpha_db(5.0), &long_probe, NoiseSpec::Off, 0).unwrap();
        assert!(unstable.unstable, "expected divergence at 5 dB");
    }

    #[test]
    fn doubling_mismatch_shifts_border_about_six_db() {
        let scene = free_field_scene();
        let probe = speech_shaped_noise(36000, 24000.0, 14);
        let mut icc = IccConfig::new(0.0);
        icc.forward_gain = calibrate_forward_gain(&scene, &icc, &probe).unwrap();
        let sigma = calibrate_mismatch(&scene, &icc, 4.0).unwrap();

        // Measure the border on a coarse grid for sigma and 2*sigma.
        let border = |s: f64| -> f64 {
            let mut last_stable = -10.0;
            let mut a = -10.0;
            while a <= 12.0 {
                if stable_at(&scene, &icc, s, a, &probe).unwrap() {
                    last_stable = a;
                }
                a += 0.5;
            }
            last_stable
        };
        let b1 = border(sigma);
        let b2 = border(2.0 * sigma);
        // 1/sigma amplitude scaling: doubling costs 20 log10(2) = 6.02 dB.
        assert!(
            ((b1 - b2) - 6.02).abs() <= 1.1,
            "border shift {} dB, expected about 6",
            b1 - b2
        );
    }

    #[test]
    fn zero_loop_delay_is_rejected() {
        // tau_icc = 0 and a loudspeaker 1 cm from the reference microphone:
        // no delay is left in the loop.
        let geometry = Geometry {
            mic_positions: vec![
                Point3::new(0.5, 0.5, 0.5),
                Point3::new(1.0, 0.5, 0.5),
                Point3::new(1.5, 0.5, 0.5),
            ],
            loudspeaker_positions: vec![Point3::new(0.5, 0.51, 0.5)],
            zone_sources: vec![
                Point3::new(0.4, 0.4, 0.5),
                Point3::new(1.1, 0.4, 0.5),
                Point3::new(1.6, 0.4, 0.5),
            ],
            speed_of_sound: 343.0,
        };
        let scene = Scene::build(geometry, 24000.0, &IrModel::FreeField, 0).unwrap();
        assert_eq!(scene.geometry.min_speaker_delay(0, 24000.0), 0);
        let mut icc = IccConfig::new(0.0);
        icc.tau_icc = 0.0;
        let err = simulate(&scene, &icc, &[1.0, 0.0, 0.0], NoiseSpec::Off, 0).unwrap_err();
        assert!(matches!(err, IccError::ZeroLoopDelay));
    }
}
