//! Mono WAV I/O in IEEE float-32 format (format tag 3) at 16 kHz.
//!
//! Integer PCM output is deliberately unsupported: the smallest perturbation
//! budgets used by the attack campaign sit below the 16-bit quantization
//! step and would be destroyed on disk. Files are written as float-32, and
//! reads reject anything else.

use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

fn spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    }
}

/// Writes a waveform as mono float-32 WAV. Samples round to f32 on disk.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = hound::WavWriter::create(path, spec())
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for &s in wave.samples() {
        writer
            .write_sample(s as f32)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Reads a mono float-32 16 kHz WAV back into a waveform.
pub fn read_wav(path: &Path, utterance_id: impl Into<String>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let s = reader.spec();
    if s.sample_format != hound::SampleFormat::Float || s.bits_per_sample != 32 {
        return Err(Error::format(format!(
            "{}: expected IEEE float-32 samples, got {}-bit {:?}",
            path.display(),
            s.bits_per_sample,
            s.sample_format
        )));
    }
    if s.channels != 1 || s.sample_rate != SAMPLE_RATE {
        return Err(Error::format(format!(
            "{}: expected mono {SAMPLE_RATE} Hz, got {} ch {} Hz",
            path.display(),
            s.channels,
            s.sample_rate
        )));
    }
    let samples: std::result::Result<Vec<f32>, _> = reader.samples::<f32>().collect();
    let samples = samples.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Waveform::new(utterance_id, samples.into_iter().map(f64::from).collect())
}

/// Rounds samples through the float-32 grid without touching the disk.
/// Audio that survives this is bit-identical after a write/read cycle.
pub fn quantize_f32(samples: &[f64]) -> Vec<f64> {
    samples.iter().map(|&v| f64::from(v as f32)).collect()
}
