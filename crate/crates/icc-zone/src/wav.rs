//! Minimal RIFF/WAV reader and writer.
//!
//! Supports mono 16-bit PCM and 32-bit IEEE float, which covers impulse
//! response import/export and simulation output. Anything else (stereo
//! files, other codecs, WAVE_FORMAT_EXTENSIBLE) is rejected with an error
//! rather than guessed at.

use crate::error::{IccError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// A decoded mono WAV file: samples as `f64` in roughly [-1, 1], plus the
/// header sample rate. 16-bit PCM is scaled by 1/32768, so a full-scale
/// positive sample decodes to 32767/32768.
#[derive(Debug, Clone)]
pub struct WavData {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

fn read_u16(buf: &[u8], pos: usize) -> u16 {
    u16::from_le_bytes([buf[pos], buf[pos + 1]])
}

fn read_u32(buf: &[u8], pos: usize) -> u32 {
    u32::from_le_bytes([buf[pos], buf[pos + 1], buf[pos + 2], buf[pos + 3]])
}

/// Read a mono WAV file.
pub fn read_wav_mono<P: AsRef<Path>>(path: P) -> Result<WavData> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(IccError::UnsupportedWav("not a RIFF/WAVE file".into()));
    }

    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(IccError::UnsupportedWav("truncated fmt chunk".into()));
                }
                format = Some((
                    read_u16(body, 0),
                    read_u16(body, 2),
                    read_u32(body, 4),
                    read_u16(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size & 1);
    }

    let (tag, channels, rate, bits) =
        format.ok_or_else(|| IccError::UnsupportedWav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| IccError::UnsupportedWav("missing data chunk".into()))?;
    if channels != 1 {
        return Err(IccError::UnsupportedWav(format!(
            "expected mono, got {channels} channels"
        )));
    }
    let samples = match (tag, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(IccError::UnsupportedWav(format!(
                "format tag {tag} with {bits} bits is not supported (PCM16 or float32 only)"
            )))
        }
    };
    Ok(WavData {
        samples,
        sample_rate: rate as f64,
    })
}

fn write_header(
    w: &mut impl Write,
    format: u16,
    sample_rate: u32,
    bytes_per_sample: u32,
    data_len: u32,
) -> Result<()> {
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&format.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&sample_rate.to_le_bytes())?;
    w.write_all(&(sample_rate * bytes_per_sample).to_le_bytes())?;
    w.write_all(&(bytes_per_sample as u16).to_le_bytes())?;
    w.write_all(&(8 * bytes_per_sample as u16).to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    Ok(())
}

/// Write mono 32-bit float WAV. The float payload is the `f32` cast of the
/// samples, bit-exact for a given input.
pub fn write_wav_f32<P: AsRef<Path>>(path: P, samples: &[f64], sample_rate: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(
        &mut w,
        FORMAT_IEEE_FLOAT,
        sample_rate.round() as u32,
        4,
        (samples.len() * 4) as u32,
    )?;
    for &s in samples {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Write mono 16-bit PCM WAV; samples are scaled by 32768 and clamped.
pub fn write_wav_pcm16<P: AsRef<Path>>(path: P, samples: &[f64], sample_rate: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(
        &mut w,
        FORMAT_PCM,
        sample_rate.round() as u32,
        2,
        (samples.len() * 2) as u32,
    )?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
