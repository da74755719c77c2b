//! Cabin acoustics: geometry, free-field propagation and synthetic shoebox
//! impulse responses.
//!
//! Two kinds of responses appear in the pipeline. The feedback estimator
//! only ever sees the single-tap free-field model (delay `floor(fs D / c)`,
//! amplitude `beta / D`). The simulator can additionally use image-source
//! responses of a reverberant cabin as the ground truth the free-field model
//! is then mismatched against.
//!
//! All fractional delays are rounded down (`floor`), for the free-field
//! model and the image-source generator alike, so the direct path of a
//! shoebox response lands on exactly the tap the free-field model predicts.
//! Image amplitudes are `beta^order / distance` with no extra spherical
//! normalization, again so the direct tap equals the free-field tap.

use crate::error::{IccError, Result};
use crate::wav;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A point in cabin coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Microphone, loudspeaker and talker positions of the cabin.
///
/// There is one passenger-dedicated microphone per speech zone, so the
/// number of zones equals the number of microphones. Zone 0 is the driver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Geometry {
    pub mic_positions: Vec<Point3>,
    pub loudspeaker_positions: Vec<Point3>,
    /// Talker (head) position per zone; index matches the microphone index.
    pub zone_sources: Vec<Point3>,
    /// Speed of sound in m/s.
    pub speed_of_sound: f64,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let m = self.mic_positions.len();
        if m < 2 {
            return Err(IccError::InvalidGeometry(format!(
                "need at least 2 microphones, got {m}"
            )));
        }
        if self.loudspeaker_positions.is_empty() {
            return Err(IccError::InvalidGeometry("need at least 1 loudspeaker".into()));
        }
        if self.zone_sources.len() != m {
            return Err(IccError::InvalidGeometry(format!(
                "{} zone sources for {m} microphones",
                self.zone_sources.len()
            )));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(IccError::InvalidGeometry("speed of sound must be positive".into()));
        }
        for (i, ls) in self.loudspeaker_positions.iter().enumerate() {
            for (m_idx, mic) in self.mic_positions.iter().enumerate() {
                if ls.distance(mic) <= 0.0 {
                    return Err(IccError::InvalidGeometry(format!(
                        "loudspeaker {i} coincides with microphone {m_idx}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn loudspeakers(&self) -> usize {
        self.loudspeaker_positions.len()
    }

    /// Distance from loudspeaker `i` to microphone `m` in meters.
    pub fn speaker_mic_distance(&self, i: usize, m: usize) -> f64 {
        self.loudspeaker_positions[i].distance(&self.mic_positions[m])
    }

    /// Smallest loudspeaker-to-microphone delay for microphone `m`, in
    /// samples at rate `fs`.
    pub fn min_speaker_delay(&self, m: usize, fs: f64) -> usize {
        self.loudspeaker_positions
            .iter()
            .map(|ls| (fs * ls.distance(&self.mic_positions[m]) / self.speed_of_sound) as usize)
            .min()
            .unwrap_or(0)
    }

    /// Default cabin layout: four passenger-dedicated roof microphones, two
    /// rear-door loudspeakers, talker heads at the four seats. These
    /// coordinates are a stand-in for a measured car and are exposed in the
    /// experiment config.
    pub fn default_cabin() -> Self {
        Self {
            mic_positions: vec![
                Point3::new(1.35, 0.40, 1.22),
                Point3::new(1.35, 1.10, 1.22),
                Point3::new(2.30, 0.42, 1.10),
                Point3::new(2.30, 1.08, 1.10),
            ],
            loudspeaker_positions: vec![
                Point3::new(2.35, 0.10, 0.90),
                Point3::new(2.35, 1.40, 0.90),
            ],
            zone_sources: vec![
                Point3::new(0.90, 0.40, 0.95),
                Point3::new(0.90, 1.10, 0.95),
                Point3::new(1.95, 0.42, 0.95),
                Point3::new(1.95, 1.08, 0.95),
            ],
            speed_of_sound: 343.0,
        }
    }
}

/// Real time-domain filter taps at a sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: f64,
}

impl ImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(IccError::InvalidConfig("impulse response must be non-empty".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(IccError::InvalidConfig("impulse response has non-finite taps".into()));
        }
        Ok(Self { taps, sample_rate })
    }

    /// A single tap of `amplitude` at `delay` samples.
    pub fn impulse_at(delay: usize, amplitude: f64, sample_rate: f64) -> Self {
        let mut taps = vec![0.0; delay + 1];
        taps[delay] = amplitude;
        Self { taps, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    /// Index of the first tap with non-negligible magnitude, if any.
    pub fn first_active_tap(&self, threshold: f64) -> Option<usize> {
        self.taps.iter().position(|t| t.abs() > threshold)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            taps: self.taps.iter().map(|t| t * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Free-field propagation: one tap of amplitude `beta / distance` at the
/// integer delay `floor(fs * distance / c)`.
pub fn free_field_ir(distance: f64, beta: f64, fs: f64, c: f64) -> ImpulseResponse {
    assert!(distance > 0.0 && fs > 0.0 && c > 0.0, "free-field parameters must be positive");
    let delay = (fs * distance / c).floor() as usize;
    ImpulseResponse::impulse_at(delay, beta / distance, fs)
}

/// Combined loudspeaker-to-microphone response: tap-wise sum over the
/// loudspeakers driven by the common signal.
pub fn sum_loudspeaker_ir(irs: &[ImpulseResponse]) -> Result<ImpulseResponse> {
    let first = irs
        .first()
        .ok_or_else(|| IccError::InvalidConfig("cannot sum zero impulse responses".into()))?;
    let fs = first.sample_rate;
    for ir in irs {
        if ir.sample_rate != fs {
            return Err(IccError::SampleRateMismatch {
                left: fs,
                right: ir.sample_rate,
            });
        }
    }
    let len = irs.iter().map(|ir| ir.len()).max().unwrap();
    let mut taps = vec![0.0; len];
    for ir in irs {
        for (i, t) in ir.taps.iter().enumerate() {
            taps[i] += t;
        }
    }
    ImpulseResponse::new(taps, fs)
}

/// Shoebox room for the image-source generator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Shoebox {
    /// Inner dimensions in meters (length, width, height).
    pub dims: [f64; 3],
}

impl Shoebox {
    pub fn new(lx: f64, ly: f64, lz: f64) -> Self {
        Self { dims: [lx, ly, lz] }
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn surface(&self) -> f64 {
        let [a, b, c] = self.dims;
        2.0 * (a * b + a * c + b * c)
    }

    fn contains_strictly(&self, p: &Point3) -> bool {
        p.x > 0.0 && p.x < self.dims[0] && p.y > 0.0 && p.y < self.dims[1] && p.z > 0.0 && p.z < self.dims[2]
    }

    /// Uniform wall amplitude reflection coefficient for `t60` from Eyring's
    /// formula. Used as the starting point of the decay calibration in
    /// [`image_source_ir`]; at the high absorptions of a car cabin the
    /// image lattice decays slower than Eyring predicts (grazing paths along
    /// the long axis hit few walls), so the coefficient is refined against
    /// the measured Schroeder decay.
    pub fn reflection_coefficient(&self, t60: f64) -> f64 {
        (-0.161 * self.volume() / (2.0 * self.surface() * t60)).exp()
    }
}

/// Decay-rate estimate used to calibrate the wall coefficient: least-squares
/// slope of the Schroeder backward-integrated energy decay over its
/// [-10, -30] dB span. The unit tests check the result with an independent
/// fit over a different span.
fn schroeder_decay_time(taps: &[f64], fs: f64) -> Option<f64> {
    let total: f64 = taps.iter().map(|t| t * t).sum();
    if total <= 0.0 {
        return None;
    }
    let mut tail = 0.0;
    let mut edc_db: Vec<f64> = Vec::with_capacity(taps.len());
    for &t in taps.iter().rev() {
        tail += t * t;
        edc_db.push(10.0 * (tail / total).log10());
    }
    edc_db.reverse();
    let first = edc_db.iter().position(|&d| d <= -10.0)?;
    let last = edc_db.iter().position(|&d| d <= -30.0)?;
    if last <= first + 16 {
        return None;
    }
    let n = (last - first) as f64;
    let mx = (first + last - 1) as f64 / 2.0;
    let my = edc_db[first..last].iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in edc_db[first..last].iter().enumerate() {
        let x = (first + i) as f64;
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    let slope = num / den;
    if slope >= 0.0 {
        return None;
    }
    Some(-60.0 / slope / fs)
}

/// Image-source impulse response of a shoebox room.
///
/// Image delays are rounded down to samples (same `floor` as the free-field
/// model, so the direct tap lands where the model predicts) and carry the
/// amplitude `beta^order / distance`. The uniform wall coefficient starts at
/// Eyring's value for `t60` and is then calibrated so the Schroeder decay of
/// the rendered response matches `t60`. The response is truncated
/// `1.5 * t60` after the direct arrival; `max_order`, when given, caps the
/// number of wall reflections per image.
pub fn image_source_ir(
    room: &Shoebox,
    src: &Point3,
    mic: &Point3,
    t60: f64,
    fs: f64,
    max_order: Option<usize>,
) -> Result<ImpulseResponse> {
    if !room.contains_strictly(src) {
        return Err(IccError::OutsideRoom(format!("source {src:?} not strictly inside {room:?}")));
    }
    if !room.contains_strictly(mic) {
        return Err(IccError::OutsideRoom(format!("microphone {mic:?} not strictly inside {room:?}")));
    }
    if !(t60 > 0.0) {
        return Err(IccError::InvalidConfig("t60 must be positive".into()));
    }
    let c = 343.0;
    let direct = src.distance(mic);
    if direct <= 1e-9 {
        return Err(IccError::InvalidGeometry("source coincides with microphone".into()));
    }
    let direct_delay = (fs * direct / c).floor() as usize;
    let len = direct_delay + (1.5 * t60 * fs).ceil() as usize + 1;

    let d_max = c * len as f64 / fs;
    let [lx, ly, lz] = room.dims;
    let n_x = (d_max / (2.0 * lx)).ceil() as i64;
    let n_y = (d_max / (2.0 * ly)).ceil() as i64;
    let n_z = (d_max / (2.0 * lz)).ceil() as i64;
    let order_cap = max_order.map(|o| o as i64).unwrap_or(i64::MAX);

    let render = |beta: f64| -> Vec<f64> {
        let mut taps = vec![0.0; len];
        for mx in -n_x..=n_x {
            for my in -n_y..=n_y {
                for mz in -n_z..=n_z {
                    for q in 0..2i64 {
                        for j in 0..2i64 {
                            for k in 0..2i64 {
                                let order = (mx - q).abs()
                                    + mx.abs()
                                    + (my - j).abs()
                                    + my.abs()
                                    + (mz - k).abs()
                                    + mz.abs();
                                if order > order_cap {
                                    continue;
                                }
                                let ix = (1 - 2 * q) as f64 * src.x + 2.0 * mx as f64 * lx;
                                let iy = (1 - 2 * j) as f64 * src.y + 2.0 * my as f64 * ly;
                                let iz = (1 - 2 * k) as f64 * src.z + 2.0 * mz as f64 * lz;
                                let dx = ix - mic.x;
                                let dy = iy - mic.y;
                                let dz = iz - mic.z;
                                let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                                if dist <= 1e-9 {
                                    continue;
                                }
                                let delay = (fs * dist / c).floor() as usize;
                                if delay < len {
                                    taps[delay] += beta.powi(order as i32) / dist;
                                }
                            }
                        }
                    }
                }
            }
        }
        taps
    };

    let mut beta = room.reflection_coefficient(t60);
    let mut taps = render(beta);
    if beta > 0.05 {
        for _ in 0..4 {
            let Some(measured) = schroeder_decay_time(&taps, fs) else {
                break;
            };
            if (measured - t60).abs() <= 0.03 * t60 {
                break;
            }
            beta = beta.powf((measured / t60).clamp(0.25, 4.0));
            taps = render(beta);
        }
    }
    ImpulseResponse::new(taps, fs)
}

/// Load an impulse response from a mono WAV file. The sample rate comes from
/// the header; callers compare it against the scene rate (no resampling).
pub fn load_ir_wav<P: AsRef<Path>>(path: P) -> Result<ImpulseResponse> {
    let data = wav::read_wav_mono(path)?;
    ImpulseResponse::new(data.samples, data.sample_rate)
}

/// How the scene's ground-truth impulse responses are produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IrModel {
    /// Single-tap free-field responses everywhere (matched-model scenes).
    FreeField,
    /// Image-source shoebox responses (the default reverberant cabin).
    ImageSource {
        room: [f64; 3],
        t60: f64,
        #[serde(default)]
        max_order: Option<usize>,
    },
    /// Measured responses from WAV files.
    WavFiles {
        /// One file per microphone: talker at the source zone to mic m.
        direct: Vec<String>,
        /// `speakers[i][m]`: loudspeaker i to mic m.
        speakers: Vec<Vec<String>>,
    },
}

/// A fully realized acoustic scene: geometry plus ground-truth responses.
#[derive(Debug, Clone)]
pub struct Scene {
    pub geometry: Geometry,
    pub sample_rate: f64,
    /// Zone whose talker drives the simulation.
    pub source_zone: usize,
    /// Talker-to-microphone responses, one per microphone.
    pub h_direct: Vec<ImpulseResponse>,
    /// Per loudspeaker-microphone pair: `h_speaker[i][m]`.
    pub h_speaker: Vec<Vec<ImpulseResponse>>,
    /// Combined loudspeaker response per microphone (sum over loudspeakers).
    pub h_combined: Vec<ImpulseResponse>,
}

impl Scene {
    pub fn build(geometry: Geometry, fs: f64, model: &IrModel, source_zone: usize) -> Result<Self> {
        geometry.validate()?;
        if source_zone >= geometry.zone_sources.len() {
            return Err(IccError::InvalidGeometry(format!(
                "source zone {source_zone} out of range"
            )));
        }
        let c = geometry.speed_of_sound;
        let src = geometry.zone_sources[source_zone];
        let m_count = geometry.mics();
        let l_count = geometry.loudspeakers();

        let (h_direct, h_speaker): (Vec<_>, Vec<Vec<_>>) = match model {
            IrModel::FreeField => {
                let direct = geometry
                    .mic_positions
                    .iter()
                    .map(|mic| free_field_ir(src.distance(mic), 1.0, fs, c))
                    .collect();
                let speakers = geometry
                    .loudspeaker_positions
                    .iter()
                    .map(|ls| {
                        geometry
                            .mic_positions
                            .iter()
                            .map(|mic| free_field_ir(ls.distance(mic), 1.0, fs, c))
                            .collect()
                    })
                    .collect();
                (direct, speakers)
            }
            IrModel::ImageSource { room, t60, max_order } => {
                let room = Shoebox::new(room[0], room[1], room[2]);
                let direct = geometry
                    .mic_positions
                    .iter()
                    .map(|mic| image_source_ir(&room, &src, mic, *t60, fs, *max_order))
                    .collect::<Result<Vec<_>>>()?;
                let speakers = geometry
                    .loudspeaker_positions
                    .iter()
                    .map(|ls| {
                        geometry
                            .mic_positions
                            .iter()
                            .map(|mic| image_source_ir(&room, ls, mic, *t60, fs, *max_order))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                (direct, speakers)
            }
            IrModel::WavFiles { direct, speakers } => {
                if direct.len() != m_count || speakers.len() != l_count {
                    return Err(IccError::InvalidConfig(format!(
                        "wav scene needs {m_count} direct files and {l_count} speaker rows"
                    )));
                }
                let load = |p: &String| -> Result<ImpulseResponse> {
                    let ir = load_ir_wav(p)?;
                    if ir.sample_rate != fs {
                        return Err(IccError::SampleRateMismatch {
                            left: ir.sample_rate,
                            right: fs,
                        });
                    }
                    Ok(ir)
                };
                let direct = direct.iter().map(load).collect::<Result<Vec<_>>>()?;
                let speakers = speakers
                    .iter()
                    .map(|row| {
                        if row.len() != m_count {
                            return Err(IccError::InvalidConfig(format!(
                                "speaker row needs {m_count} files"
                            )));
                        }
                        row.iter().map(load).collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                (direct, speakers)
            }
        };

        let mut h_combined = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let per_mic: Vec<ImpulseResponse> =
                (0..l_count).map(|i| h_speaker[i][m].clone()).collect();
            h_combined.push(sum_loudspeaker_ir(&per_mic)?);
        }

        Ok(Self {
            geometry,
            sample_rate: fs,
            source_zone,
            h_direct,
            h_speaker,
            h_combined,
        })
    }

    pub fn mics(&self) -> usize {
        self.geometry.mics()
    }

    /// `tau_icc * fs + min_i tau_{i,m}` per microphone: the loop delay that
    /// the frame-size condition of the cross-term analysis compares against.
    pub fn loop_delay_samples(&self, tau_icc: f64) -> Vec<usize> {
        let fs = self.sample_rate;
        (0..self.mics())
            .map(|m| (tau_icc * fs).round() as usize + self.geometry.min_speaker_delay(m, fs))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_field_matches_hand_arithmetic() {
        let ir = free_field_ir(1.0, 1.0, 24000.0, 343.0);
        assert_eq!(ir.len(), 70);
        assert_eq!(ir.taps[69], 1.0); // floor(69.97)
        assert!(ir.taps[..69].iter().all(|&t| t == 0.0));

        let ir2 = free_field_ir(2.0, 1.0, 24000.0, 343.0);
        assert_eq!(ir2.taps.last().copied().unwrap(), 0.5);

        // Exactly one sample of propagation.
        let fs = 24000.0;
        let c = 343.0;
        let ir3 = free_field_ir(c / fs, 1.0, fs, c);
        assert_eq!(ir3.len(), 2);
        assert!(ir3.taps[1] > 0.0);
    }

    #[test]
    fn free_field_monotonicity() {
        let mut last_delay = 0;
        let mut last_amp = f64::INFINITY;
        for i in 1..50 {
            let d = 0.1 * i as f64;
            let ir = free_field_ir(d, 1.0, 24000.0, 343.0);
            let delay = ir.len() - 1;
            let amp = ir.taps[delay];
            assert!(delay >= last_delay);
            assert!(amp < last_amp);
            last_delay = delay;
            last_amp = amp;
        }
    }

    #[test]
    fn sum_of_single_ir_is_identity() {
        let ir = free_field_ir(1.0, 1.0, 24000.0, 343.0);
        let sum = sum_loudspeaker_ir(std::slice::from_ref(&ir)).unwrap();
        assert_eq!(sum, ir);
    }

    #[test]
    fn sum_doubles_identical_taps_and_keeps_distinct_delays() {
        let a = ImpulseResponse::impulse_at(69, 1.0, 24000.0);
        let two = sum_loudspeaker_ir(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(two.taps[69], 2.0);

        let b = ImpulseResponse::impulse_at(83, 0.5, 24000.0);
        let mixed = sum_loudspeaker_ir(&[a, b]).unwrap();
        assert_eq!(mixed.taps[69], 1.0);
        assert_eq!(mixed.taps[83], 0.5);
        assert_eq!(mixed.len(), 84);
    }

    #[test]
    fn sum_is_commutative_and_associative() {
        let a = ImpulseResponse::new(crate::dsp::white_noise(40, 1), 24000.0).unwrap();
        let b = ImpulseResponse::new(crate::dsp::white_noise(55, 2), 24000.0).unwrap();
        let c = ImpulseResponse::new(crate::dsp::white_noise(23, 3), 24000.0).unwrap();
        let ab_c =
            sum_loudspeaker_ir(&[sum_loudspeaker_ir(&[a.clone(), b.clone()]).unwrap(), c.clone()])
                .unwrap();
        let a_bc =
            sum_loudspeaker_ir(&[a.clone(), sum_loudspeaker_ir(&[c, b]).unwrap()]).unwrap();
        for (x, y) in ab_c.taps.iter().zip(a_bc.taps.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_rejects_rate_mismatch() {
        let a = ImpulseResponse::impulse_at(0, 1.0, 24000.0);
        let b = ImpulseResponse::impulse_at(0, 1.0, 16000.0);
        assert!(matches!(
            sum_loudspeaker_ir(&[a, b]),
            Err(IccError::SampleRateMismatch { .. })
        ));
    }

    #[test]
    fn image_source_anechoic_limit_is_direct_path() {
        let room = Shoebox::new(2.5, 1.5, 1.3);
        let src = Point3::new(0.7, 0.4, 0.9);
        let mic = Point3::new(1.7, 0.4, 0.9);
        let ir = image_source_ir(&room, &src, &mic, 1e-6, 24000.0, None).unwrap();
        let ff = free_field_ir(1.0, 1.0, 24000.0, 343.0);
        let peak = ir
            .taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        assert!((peak.0 as isize - 69).unsigned_abs() <= 1);
        assert!((peak.1 - ff.taps[69]).abs() < 1e-6);
        // Nothing else survives: reflections carry beta ~ 0.
        let rest: f64 = ir
            .taps
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != peak.0)
            .map(|(_, t)| t * t)
            .sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn image_source_direct_tap_in_cabin() {
        let room = Shoebox::new(2.5, 1.5, 1.3);
        let src = Point3::new(0.7, 0.3, 0.2);
        let mic = Point3::new(1.7, 0.3, 0.2);
        let ir = image_source_ir(&room, &src, &mic, 0.08, 24000.0, None).unwrap();
        // Direct tap at floor(24000 * 1.0 / 343) = 69 with amplitude 1/D = 1.
        assert!((ir.taps[69] - 1.0).abs() < 0.35, "direct tap {}", ir.taps[69]);
        assert!(ir.taps[..69].iter().all(|&t| t == 0.0), "nothing before the direct path");
    }

    #[test]
    fn image_source_rejects_outside_positions() {
        let room = Shoebox::new(2.5, 1.5, 1.3);
        let inside = Point3::new(1.0, 0.7, 0.6);
        let outside = Point3::new(2.6, 0.7, 0.6);
        assert!(matches!(
            image_source_ir(&room, &outside, &inside, 0.08, 24000.0, None),
            Err(IccError::OutsideRoom(_))
        ));
        assert!(matches!(
            image_source_ir(&room, &inside, &outside, 0.08, 24000.0, None),
            Err(IccError::OutsideRoom(_))
        ));
    }

    /// Schroeder backward integration, fit of the energy decay curve over
    /// the [-5, -25] dB range, independent of the generator internals.
    fn schroeder_t60(ir: &ImpulseResponse) -> f64 {
        let e: Vec<f64> = ir.taps.iter().map(|t| t * t).collect();
        let total: f64 = e.iter().sum();
        let mut tail = 0.0;
        let mut edc_db: Vec<f64> = Vec::with_capacity(e.len());
        for &v in e.iter().rev() {
            tail += v;
            edc_db.push(10.0 * (tail / total).log10());
        }
        edc_db.reverse();
        let first = edc_db.iter().position(|&d| d <= -5.0).unwrap();
        let last = edc_db.iter().position(|&d| d <= -25.0).unwrap();
        // Least-squares line through (sample index, dB).
        let xs: Vec<f64> = (first..last).map(|i| i as f64).collect();
        let ys = &edc_db[first..last];
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in xs.iter().zip(ys.iter()) {
            num += (x - mx) * (y - my);
            den += (x - mx) * (x - mx);
        }
        let slope_db_per_sample = num / den;
        -60.0 / slope_db_per_sample / ir.sample_rate
    }

    #[test]
    fn image_source_hits_requested_t60() {
        let room = Shoebox::new(2.5, 1.5, 1.3);
        let src = Point3::new(0.9, 0.4, 0.95);
        let mic = Point3::new(2.2, 0.95, 1.15);
        let ir = image_source_ir(&room, &src, &mic, 0.08, 24000.0, None).unwrap();
        let t60 = schroeder_t60(&ir);
        assert!(
            (t60 - 0.08).abs() <= 0.016,
            "schroeder fit gave {t60} s, wanted 0.08 +/- 0.016"
        );
    }

    #[test]
    fn default_cabin_is_valid_and_scene_builds() {
        let g = Geometry::default_cabin();
        g.validate().unwrap();
        let scene = Scene::build(
            g,
            24000.0,
            &IrModel::ImageSource {
                room: [2.5, 1.5, 1.3],
                t60: 0.08,
                max_order: None,
            },
            0,
        )
        .unwrap();
        assert_eq!(scene.mics(), 4);
        assert_eq!(scene.h_combined.len(), 4);
        // Direct arrival of the combined speaker response never precedes the
        // free-field prediction.
        for m in 0..4 {
            let min_delay = scene.geometry.min_speaker_delay(m, 24000.0);
            let first = scene.h_combined[m].first_active_tap(1e-12).unwrap();
            assert_eq!(first, min_delay);
        }
    }

    #[test]
    fn wav_scene_reports_rate_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry {
            mic_positions: vec![Point3::new(0.5, 0.5, 0.5), Point3::new(1.0, 0.5, 0.5)],
            loudspeaker_positions: vec![Point3::new(1.5, 0.5, 0.5)],
            zone_sources: vec![Point3::new(0.4, 0.4, 0.5), Point3::new(1.1, 0.4, 0.5)],
            speed_of_sound: 343.0,
        };
        let mut paths = Vec::new();
        for name in ["d0.wav", "d1.wav", "s00.wav", "s01.wav"] {
            let p = dir.path().join(name);
            crate::wav::write_wav_f32(&p, &[1.0, 0.2, 0.1], 16000.0).unwrap();
            paths.push(p.to_string_lossy().into_owned());
        }
        let model = IrModel::WavFiles {
            direct: vec![paths[0].clone(), paths[1].clone()],
            speakers: vec![vec![paths[2].clone(), paths[3].clone()]],
        };
        let err = Scene::build(g, 24000.0, &model, 0).unwrap_err();
        assert!(matches!(err, IccError::SampleRateMismatch { .. }));
    }
}
