//! Waveforms, perturbations, Lp-norm bookkeeping and SNR computation.
//!
//! L1 and L2 norms are optionally normalized by the sample count (`/n` and
//! `/sqrt(n)` respectively) so norm values stay comparable across utterances
//! of different lengths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed sample rate of the toolkit.
pub const SAMPLE_RATE: u32 = 16_000;

/// Entries with magnitude at or below this count as zero for the L0 norm.
pub const L0_ZERO_THRESHOLD: f64 = 1e-12;

/// Which Lp norm bounds or measures a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lp {
    L0,
    L1,
    L2,
    LInf,
}

impl Lp {
    pub fn label(self) -> &'static str {
        match self {
            Lp::L0 => "L0",
            Lp::L1 => "L1",
            Lp::L2 => "L2",
            Lp::LInf => "Linf",
        }
    }
}

impl std::fmt::Display for Lp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Mono audio utterance; samples stay inside `[-1, 1]` (tiny rounding slack).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub utterance_id: String,
    pub sample_rate: u32,
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(utterance_id: impl Into<String>, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::precondition("waveform must be non-empty"));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::numeric("waveform", format!("non-finite sample at {i}")));
            }
            if s.abs() > 1.0 + 1e-9 {
                return Err(Error::precondition(format!(
                    "sample {i} = {s} outside [-1, 1]"
                )));
            }
        }
        Ok(Waveform { utterance_id: utterance_id.into(), sample_rate: SAMPLE_RATE, samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Signal power `sum(x^2)`.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Additive perturbation tied to a base waveform of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    delta: Vec<f64>,
}

impl Perturbation {
    pub fn new(base: &Waveform, delta: Vec<f64>) -> Result<Self> {
        if delta.len() != base.len() {
            return Err(Error::shape(format!(
                "perturbation length {} != waveform length {}",
                delta.len(),
                base.len()
            )));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("perturbation", "non-finite entry"));
        }
        Ok(Perturbation { delta })
    }

    pub fn from_pair(base: &Waveform, attacked: &Waveform) -> Result<Self> {
        if base.len() != attacked.len() {
            return Err(Error::shape("waveform lengths differ"));
        }
        let delta = attacked
            .samples()
            .iter()
            .zip(base.samples())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Perturbation { delta })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn energy(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum()
    }
}

/// Lp norm of a perturbation. With `normalized`, L1 is divided by the sample
/// count and L2 by its square root; normalization is undefined for L0/Linf.
pub fn lp_norm(delta: &Perturbation, p: Lp, normalized: bool) -> Result<f64> {
    lp_norm_slice(delta.delta(), p, normalized)
}

/// [`lp_norm`] on a raw slice; used internally before a perturbation is tied
/// to its base waveform.
pub fn lp_norm_slice(delta: &[f64], p: Lp, normalized: bool) -> Result<f64> {
    if normalized && !matches!(p, Lp::L1 | Lp::L2) {
        return Err(Error::usage(format!("normalization undefined for {p}")));
    }
    let n = delta.len() as f64;
    let v = match p {
        Lp::L0 => delta.iter().filter(|v| v.abs() > L0_ZERO_THRESHOLD).count() as f64,
        Lp::L1 => {
            let s: f64 = delta.iter().map(|v| v.abs()).sum();
            if normalized {
                s / n
            } else {
                s
            }
        }
        Lp::L2 => {
            let s: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if normalized {
                s / n.sqrt()
            } else {
                s
            }
        }
        Lp::LInf => delta.iter().fold(0.0f64, |a, v| a.max(v.abs())),
    };
    Ok(v)
}

/// Signal-to-adversarial-noise ratio `10 log10(sum x^2 / sum d^2)` in dB.
pub fn snr_db(x: &Waveform, delta: &Perturbation) -> Result<f64> {
    if delta.delta().len() != x.len() {
        return Err(Error::shape("perturbation length mismatch"));
    }
    let pd = delta.energy();
    if pd == 0.0 {
        return Err(Error::precondition(
            "zero perturbation has no SNR; treat the utterance as benign",
        ));
    }
    Ok(10.0 * (x.energy() / pd).log10())
}

/// Nearest multiple of 10 dB, clamped to `[0, 60]`; ties round up.
pub fn snr_bin(snr: f64) -> u32 {
    let bin = ((snr / 10.0 + 0.5).floor() * 10.0).clamp(0.0, 60.0);
    bin as u32
}

/// Clips samples into the valid `[-1, 1]` audio range.
pub fn clamp_audio(x: &Waveform) -> Waveform {
    let samples = x.samples().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Waveform {
        utterance_id: x.utterance_id.clone(),
        sample_rate: x.sample_rate,
        samples,
    }
}

/// Clips a raw sample buffer into `[-1, 1]` in place.
pub fn clamp_samples(samples: &mut [f64]) {
    for v in samples.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}
