//! Deterministic synthetic multi-speaker corpus.
//!
//! Each speaker is a seeded profile: a fundamental frequency, three resonance
//! peaks shaping the harmonic amplitudes, an amplitude-modulation rate and a
//! noise floor. Utterances are harmonic stacks filtered by the resonances,
//! amplitude-modulated, with seeded Gaussian noise, peak-normalized to 0.5.
//! The point is a corpus a small classifier separates cleanly, not realism.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::wav;

/// Per-speaker synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Fundamental frequency in Hz.
    pub f0: f64,
    /// Resonance centers in Hz, low to high.
    pub resonances: [f64; 3],
    /// Resonance bandwidths in Hz.
    pub bandwidths: [f64; 3],
    /// Amplitude-modulation rate in Hz.
    pub am_rate: f64,
    /// Gaussian noise floor amplitude.
    pub noise_floor: f64,
}

impl SpeakerProfile {
    fn check(&self) -> Result<()> {
        let freqs = [self.f0, self.am_rate]
            .into_iter()
            .chain(self.resonances)
            .chain(self.bandwidths);
        for f in freqs {
            if !(f > 0.0 && f < 7000.0) {
                return Err(Error::precondition(format!(
                    "profile frequency {f} outside (0, 7000)"
                )));
            }
        }
        if !(0.001..=0.05).contains(&self.noise_floor) {
            return Err(Error::precondition(format!(
                "noise floor {} outside [0.001, 0.05]",
                self.noise_floor
            )));
        }
        Ok(())
    }
}

/// One corpus entry. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub path: String,
    pub speaker_id: String,
    pub split: Split,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Corpus manifest: one entry per utterance, JSONL on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn speakers(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.speaker_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, utterance_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == utterance_id)
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_audio(&self, entry: &ManifestEntry) -> Result<Waveform> {
        wav::read_wav(&self.audio_path(entry), entry.utterance_id.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::format(format!("cannot open manifest {}: {e}", path.display()))
        })?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("manifest line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(DatasetManifest { entries, root })
    }
}

/// Configuration for [`make_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
}

fn default_duration() -> f64 {
    2.0
}

/// Deterministic speaker profile for a seed. Parameter ranges are spread so
/// sampled speakers differ in pitch, spectral envelope and noise character.
pub fn synth_speaker(seed: u64) -> SpeakerProfile {
    let mut rng = rng_from_seed(derive_seed(seed, &["speaker"]));
    let f0 = rng.gen_range(85.0..280.0);
    // Non-overlapping bands keep the envelope ordering stable per speaker.
    let resonances = [
        rng.gen_range(350.0..950.0),
        rng.gen_range(1000.0..2600.0),
        rng.gen_range(2700.0..5600.0),
    ];
    let bandwidths = [
        rng.gen_range(60.0..180.0),
        rng.gen_range(80.0..260.0),
        rng.gen_range(120.0..400.0),
    ];
    let am_rate = rng.gen_range(1.5..7.0);
    let noise_floor = (rng.gen_range(0.002f64.ln()..0.03f64.ln())).exp();
    let profile = SpeakerProfile {
        speaker_id: format!("spk{seed:04}"),
        f0,
        resonances,
        bandwidths,
        am_rate,
        noise_floor,
    };
    profile.check().expect("sampled profile inside declared ranges");
    profile
}

/// Synthesizes one utterance for a profile. Deterministic in
/// `(profile, seed, duration_s)`; peak-normalized to 0.5.
pub fn synth_utterance(profile: &SpeakerProfile, seed: u64, duration_s: f64) -> Result<Waveform> {
    if !(1.0..=4.0).contains(&duration_s) {
        return Err(Error::precondition(format!(
            "duration {duration_s}s outside [1.0, 4.0]"
        )));
    }
    profile.check()?;
    let mut rng = rng_from_seed(derive_seed(seed, &["utterance", &profile.speaker_id]));
    let n = (duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    let dt = 1.0 / f64::from(SAMPLE_RATE);

    // Per-utterance variation: small pitch jitter and random phases.
    let f0 = profile.f0 * rng.gen_range(0.97..1.03);
    let max_freq = 6800.0;
    let num_harmonics = (max_freq / f0).floor() as usize;
    let mut harmonics: Vec<(f64, f64, f64)> = Vec::new(); // (freq, amp, phase)
    for h in 1..=num_harmonics {
        let freq = f0 * h as f64;
        let gain: f64 = profile
            .resonances
            .iter()
            .zip(&profile.bandwidths)
            .map(|(&c, &bw)| bw * bw / ((freq - c) * (freq - c) + bw * bw))
            .sum();
        // Mild spectral tilt so low harmonics dominate like voiced speech.
        let amp = gain / (h as f64).sqrt();
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        if amp > 1e-4 {
            harmonics.push((freq, amp, phase));
        }
    }
    let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, profile.noise_floor).expect("positive std");

    let mut samples = vec![0.0f64; n];
    for (freq, amp, phase) in &harmonics {
        let w = std::f64::consts::TAU * freq;
        for (i, s) in samples.iter_mut().enumerate() {
            *s += amp * (w * i as f64 * dt + phase).sin();
        }
    }
    let am_w = std::f64::consts::TAU * profile.am_rate;
    for (i, s) in samples.iter_mut().enumerate() {
        let am = 1.0 + 0.35 * (am_w * i as f64 * dt + am_phase).sin();
        *s = *s * am + noise.sample(&mut rng);
    }
    let peak = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::numeric("synth", "silent utterance"));
    }
    let scale = 0.5 / peak;
    for s in &mut samples {
        *s *= scale;
    }
    Waveform::new(format!("{}_u{seed:04}", profile.speaker_id), samples)
}

/// Generates the corpus on disk and returns its manifest. Per speaker, the
/// first `ceil(0.9 * utts)` utterances go to the train split.
pub fn make_dataset(config: &DatasetConfig) -> Result<DatasetManifest> {
    if config.num_speakers < 10 || config.utts_per_speaker < 10 {
        return Err(Error::precondition(
            "need at least 10 speakers and 10 utterances per speaker",
        ));
    }
    std::fs::create_dir_all(config.out_dir.join("wav"))?;
    let train_per_speaker =
        (0.9 * config.utts_per_speaker as f64).ceil() as usize;

    // Synthesis jobs are independent; each derives its own seed, so the
    // result is the same regardless of scheduling.
    let jobs: Vec<(usize, usize)> = (0..config.num_speakers)
        .flat_map(|s| (0..config.utts_per_speaker).map(move |u| (s, u)))
        .collect();
    use rayon::prelude::*;
    let entries: Result<Vec<ManifestEntry>> = jobs
        .par_iter()
        .map(|&(s, u)| {
            let speaker_seed = derive_seed(config.seed, &["corpus", &s.to_string()]);
            let profile = synth_speaker(speaker_seed);
            let utt_seed = derive_seed(config.seed, &[
                "corpus-utt",
                &s.to_string(),
                &u.to_string(),
            ]);
            let mut wave = synth_utterance(&profile, utt_seed, config.duration_s)?;
            let utterance_id = format!("{}_{u:03}", profile.speaker_id);
            wave.utterance_id = utterance_id.clone();
            let rel = format!("wav/{utterance_id}.wav");
            wav::write_wav(&config.out_dir.join(&rel), &wave)?;
            Ok(ManifestEntry {
                utterance_id,
                path: rel,
                speaker_id: profile.speaker_id.clone(),
                split: if u < train_per_speaker { Split::Train } else { Split::Test },
                duration_s: config.duration_s,
            })
        })
        .collect();
    let mut entries = entries?;
    entries.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    let manifest = DatasetManifest { entries, root: config.out_dir.clone() };
    manifest.save(&config.out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_profiles() {
        assert_eq!(synth_speaker(7), synth_speaker(7));
        assert_ne!(synth_speaker(7), synth_speaker(8));
    }

    #[test]
    fn speaker_ids_are_distinct_and_ranges_hold() {
        let mut ids = std::collections::BTreeSet::new();
        for seed in 0..100 {
            let p = synth_speaker(seed);
            assert!(p.f0 > 50.0 && p.f0 < 7000.0);
            for f in p.resonances.iter().chain(&p.bandwidths) {
                assert!(*f > 0.0 && *f < 7000.0);
            }
            assert!((0.001..=0.05).contains(&p.noise_floor));
            ids.insert(p.speaker_id);
        }
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn utterances_are_peak_normalized_and_deterministic() {
        let p = synth_speaker(3);
        let a = synth_utterance(&p, 11, 1.0).unwrap();
        let b = synth_utterance(&p, 11, 1.0).unwrap();
        assert_eq!(a.samples(), b.samples());
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-9);
    }

    #[test]
    fn different_speakers_differ() {
        let a = synth_utterance(&synth_speaker(1), 5, 1.0).unwrap();
        let b = synth_utterance(&synth_speaker(2), 5, 1.0).unwrap();
        let differing = a
            .samples()
            .iter()
            .zip(b.samples())
            .filter(|(x, y)| (**x - **y).abs() > 1e-12)
            .count();
        assert!(differing as f64 >= 0.01 * a.len() as f64);
    }

    #[test]
    fn duration_range_is_enforced() {
        let p = synth_speaker(0);
        assert!(synth_utterance(&p, 0, 0.5).is_err());
        assert!(synth_utterance(&p, 0, 4.5).is_err());
    }

    #[test]
    fn dataset_split_counts_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetConfig {
            num_speakers: 10,
            utts_per_speaker: 10,
            seed: 5,
            out_dir: dir.path().to_path_buf(),
            duration_s: 1.0,
        };
        let manifest = make_dataset(&config).unwrap();
        assert_eq!(manifest.entries.len(), 100);
        assert_eq!(manifest.split(Split::Train).count(), 90);
        assert_eq!(manifest.split(Split::Test).count(), 10);
        // 9 train / 1 test per speaker
        for spk in manifest.speakers() {
            let train = manifest
                .split(Split::Train)
                .filter(|e| e.speaker_id == spk)
                .count();
            assert_eq!(train, 9);
        }
        let loaded = DatasetManifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, manifest);
        // Audio is readable through the manifest.
        let w = manifest.load_audio(&manifest.entries[0]).unwrap();
        assert_eq!(w.len(), 16_000);
    }

    #[test]
    fn dataset_rerun_is_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mk = |out: &Path| {
            make_dataset(&DatasetConfig {
                num_speakers: 10,
                utts_per_speaker: 10,
                seed: 9,
                out_dir: out.to_path_buf(),
                duration_s: 1.0,
            })
            .unwrap()
        };
        let a = mk(dir1.path());
        let b = mk(dir2.path());
        assert_eq!(a.entries, b.entries);
        let wav_a = std::fs::read(dir1.path().join(&a.entries[0].path)).unwrap();
        let wav_b = std::fs::read(dir2.path().join(&b.entries[0].path)).unwrap();
        assert_eq!(wav_a, wav_b);
    }
}
