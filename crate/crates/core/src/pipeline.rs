//! Pipeline stages behind the CLI subcommands.
//!
//! Each stage reads its upstream artifacts from the work directory, writes
//! its outputs plus a stage-summary JSON, and returns its key metrics.
//! Stage randomness derives from the global seed hashed with the stage name.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    default_combos, run_campaign, AttackManifest, CampaignConfig, CampaignTask,
};
use crate::error::{Error, Result};
use crate::eval::{
    confusion, eer, fit_calibration, make_attack_trials, unknown_detection_eval, CalibrationMap,
    ConfusionMatrix, DetectionTrial, Trial,
};
use crate::net::waveform_tensor;
use crate::plda::{plda_em_train, ClassStats, EmOutcome, Preprocessor};
use crate::seed::{derive_seed, rng_from_seed};
use crate::signatures::{
    classify_by_logits, extract_signature, load_signatures, make_labels, save_signatures,
    train_signature_net, LabelTask, LabeledUtterance, SignatureNet, SignatureRecord,
    BENIGN_LABEL, MIN_CLASS_SAMPLES,
};
use crate::synth::{make_dataset, DatasetConfig, DatasetManifest, Split};
use crate::tensor::Tensor;
use crate::train::{argmax, TrainConfig};
use crate::victim::{llr_threshold, train_victim, VerificationTrial, VictimModel};
use crate::wav;

/// Net variants: trained on every attack, or with the minimum-perturbation
/// family held out as unknown attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetVariant {
    All,
    NoCw,
}

impl NetVariant {
    pub const ALL: [NetVariant; 2] = [NetVariant::All, NetVariant::NoCw];

    pub fn slug(self) -> &'static str {
        match self {
            NetVariant::All => "all",
            NetVariant::NoCw => "no-cw",
        }
    }

    pub fn exclusions(self) -> Vec<crate::attacks::AttackAlgorithm> {
        match self {
            NetVariant::All => vec![],
            NetVariant::NoCw => vec![crate::attacks::AttackAlgorithm::Cw],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSection {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignSection {
    /// Fraction of utterances attacked per algorithm/threat pair.
    pub fraction: f64,
    /// Fraction of verification trials attacked per pair.
    pub verification_fraction: f64,
    /// Cap on the iterative-FGSM step count.
    pub iter_cap: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Stratified samples per class per epoch.
    pub per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub max_trials: usize,
    pub p_target: f64,
    pub plda_em_iters: usize,
    pub calibration_trials: usize,
}

/// Whole-pipeline configuration; one JSON file drives every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub synth: SynthSection,
    pub victim: TrainSection,
    pub campaign: CampaignSection,
    pub signature: SignatureSection,
    pub backend: crate::plda::BackendKind,
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// Defaults sized for a minutes-scale run on a laptop CPU.
    pub fn default_config(work_dir: PathBuf) -> Self {
        PipelineConfig {
            seed: 42,
            work_dir,
            synth: SynthSection { num_speakers: 20, utts_per_speaker: 40, duration_s: 2.0 },
            victim: TrainSection { epochs: 22, lr: 3e-3, batch: 16 },
            campaign: CampaignSection {
                fraction: 0.25,
                verification_fraction: 1.0,
                iter_cap: 300,
            },
            signature: SignatureSection { epochs: 12, lr: 3e-3, batch: 16, per_class: 100 },
            backend: crate::plda::BackendKind::PldaByClass,
            eval: EvalSection {
                max_trials: 100_000,
                p_target: 0.05,
                plda_em_iters: 15,
                calibration_trials: 1500,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read config {}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Field-path-qualified validation of every section.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::format(format!("config field `{field}`: {msg}")))
            }
        };
        check(self.synth.num_speakers >= 10, "synth.num_speakers", "must be >= 10")?;
        check(self.synth.utts_per_speaker >= 10, "synth.utts_per_speaker", "must be >= 10")?;
        check(
            (1.0..=4.0).contains(&self.synth.duration_s),
            "synth.duration_s",
            "must be in [1.0, 4.0] seconds",
        )?;
        check(self.victim.epochs > 0, "victim.epochs", "must be positive")?;
        check(self.victim.lr > 0.0, "victim.lr", "must be positive")?;
        check(self.victim.batch > 0, "victim.batch", "must be positive")?;
        check(
            0.0 < self.campaign.fraction && self.campaign.fraction <= 1.0,
            "campaign.fraction",
            "must be in (0, 1]",
        )?;
        check(
            0.0 < self.campaign.verification_fraction
                && self.campaign.verification_fraction <= 1.0,
            "campaign.verification_fraction",
            "must be in (0, 1]",
        )?;
        check(self.campaign.iter_cap > 0, "campaign.iter_cap", "must be positive")?;
        check(self.signature.epochs > 0, "signature.epochs", "must be positive")?;
        check(self.signature.per_class > 0, "signature.per_class", "must be positive")?;
        check(self.eval.max_trials > 0, "eval.max_trials", "must be positive")?;
        check(
            0.0 < self.eval.p_target && self.eval.p_target < 1.0,
            "eval.p_target",
            "must be in (0, 1)",
        )?;
        check(self.eval.plda_em_iters > 0, "eval.plda_em_iters", "must be positive")?;
        check(
            self.eval.calibration_trials >= 10,
            "eval.calibration_trials",
            "must be >= 10",
        )?;
        Ok(())
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, &[stage])
    }
}

/// Path layout under the work directory.
pub struct Paths;

impl Paths {
    pub fn data_dir(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("data")
    }
    pub fn corpus_manifest(c: &PipelineConfig) -> PathBuf {
        Self::data_dir(c).join("manifest.jsonl")
    }
    pub fn victim_ckpt(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("victim/victim.ckpt")
    }
    pub fn victim_report(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("victim/train_report.json")
    }
    pub fn calibration(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("victim/calibration.json")
    }
    pub fn attack_dir(c: &PipelineConfig, task: &str) -> PathBuf {
        c.work_dir.join("attacks").join(task)
    }
    pub fn attack_manifest(c: &PipelineConfig, task: &str) -> PathBuf {
        Self::attack_dir(c, task).join("attacks.jsonl")
    }
    pub fn signature_ckpt(c: &PipelineConfig, task: LabelTask, variant: NetVariant) -> PathBuf {
        c.work_dir
            .join("signatures")
            .join(format!("{}-{}.ckpt", task.slug(), variant.slug()))
    }
    pub fn signature_report(c: &PipelineConfig, task: LabelTask, variant: NetVariant) -> PathBuf {
        c.work_dir
            .join("signatures")
            .join(format!("{}-{}.train.json", task.slug(), variant.slug()))
    }
    pub fn vectors(
        c: &PipelineConfig,
        task: LabelTask,
        variant: NetVariant,
        pool: &str,
    ) -> PathBuf {
        c.work_dir
            .join("signatures/vectors")
            .join(format!("{}-{}-{}.jsonl", task.slug(), variant.slug(), pool))
    }
    pub fn classify_metrics(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("eval/classify/metrics.json")
    }
    pub fn confusion_csv(c: &PipelineConfig, name: &str) -> PathBuf {
        c.work_dir.join("eval/classify").join(format!("confusion_{name}.csv"))
    }
    pub fn verify_metrics(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("eval/verify/metrics.json")
    }
    pub fn verify_scores(c: &PipelineConfig, task: LabelTask, group: &str) -> PathBuf {
        c.work_dir
            .join("eval/verify")
            .join(format!("scores_{}_{group}.csv", task.slug()))
    }
    pub fn unknown_metrics(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("eval/unknown/metrics.json")
    }
    pub fn unknown_scores(c: &PipelineConfig, condition: &str) -> PathBuf {
        c.work_dir.join("eval/unknown").join(format!("scores_{condition}.csv"))
    }
    pub fn report_dir(c: &PipelineConfig) -> PathBuf {
        c.work_dir.join("report")
    }
    pub fn summary(c: &PipelineConfig, stage: &str) -> PathBuf {
        c.work_dir.join("summaries").join(format!("{stage}.json"))
    }
}

/// Per-stage provenance record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub seed: u64,
    pub inputs_hash: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

fn hash_files(paths: &[PathBuf]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in paths {
        if let Ok(bytes) = std::fs::read(p) {
            for chunk in bytes.chunks(8) {
                let mut v = [0u8; 8];
                v[..chunk.len()].copy_from_slice(chunk);
                h ^= u64::from_le_bytes(v);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

fn write_summary(
    config: &PipelineConfig,
    stage: &str,
    inputs: &[PathBuf],
    outputs: Vec<String>,
    started: Instant,
) -> Result<StageSummary> {
    let summary = StageSummary {
        stage: stage.into(),
        seed: config.stage_seed(stage),
        inputs_hash: hash_files(inputs),
        wall_time_s: started.elapsed().as_secs_f64(),
        outputs,
    };
    let path = Paths::summary(config, stage);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { artifact: what.into(), producer: producer.into() })
    }
}

fn rel(config: &PipelineConfig, path: &Path) -> String {
    path.strip_prefix(&config.work_dir)
        .map(|p| p.display().to_string())
        .unwrap_or_else(|_| path.display().to_string())
}

// ---------------------------------------------------------------------------
// Stage: synth-data
// ---------------------------------------------------------------------------

pub fn stage_synth_data(config: &PipelineConfig) -> Result<StageSummary> {
    let started = Instant::now();
    let manifest = make_dataset(&DatasetConfig {
        num_speakers: config.synth.num_speakers,
        utts_per_speaker: config.synth.utts_per_speaker,
        seed: config.stage_seed("synth-data"),
        out_dir: Paths::data_dir(config),
        duration_s: config.synth.duration_s,
    })?;
    let mut outputs = vec![rel(config, &Paths::corpus_manifest(config))];
    outputs.extend(
        manifest.entries.iter().map(|e| rel(config, &Paths::data_dir(config).join(&e.path))),
    );
    log::info!("synth-data: {} utterances", manifest.entries.len());
    write_summary(config, "synth-data", &[], outputs, started)
}

// ---------------------------------------------------------------------------
// Stage: train-victim
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub map: CalibrationMap,
    /// Raw-score threshold equivalent to the LLR decision point.
    pub theta_score: f64,
    pub p_target: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub calibration: CalibrationArtifact,
}

pub fn stage_train_victim(config: &PipelineConfig) -> Result<(VictimMetrics, StageSummary)> {
    let started = Instant::now();
    let manifest_path = Paths::corpus_manifest(config);
    require(&manifest_path, "corpus manifest", "synth-data")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let train_config = TrainConfig {
        epochs: config.victim.epochs,
        lr: config.victim.lr,
        batch: config.victim.batch,
        seed: config.stage_seed("train-victim"),
    };
    let (model, report) = train_victim(&manifest, &train_config)?;
    let train_accuracy = crate::victim::split_accuracy(&model, &manifest, Split::Train)?;
    let test_accuracy = crate::victim::split_accuracy(&model, &manifest, Split::Test)?;
    log::info!("victim: train acc {train_accuracy:.4}, test acc {test_accuracy:.4}");

    // Calibrate cosine scores into LLRs on benign train-split trials.
    let trials = benign_trials(
        &manifest,
        Split::Train,
        config.eval.calibration_trials,
        config.stage_seed("calibration"),
    )?;
    let embeddings = embedding_cache(&model, &manifest, Split::Train)?;
    let mut scores = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in &trials {
        let a = &embeddings[&t.enroll];
        let b = &embeddings[&t.test];
        scores.push(crate::victim::cosine(a, b)?);
        labels.push(t.target);
    }
    let map = fit_calibration(&scores, &labels)?;
    let calibration = CalibrationArtifact {
        map,
        theta_score: map.invert(llr_threshold(config.eval.p_target)),
        p_target: config.eval.p_target,
    };

    model.save(&Paths::victim_ckpt(config))?;
    std::fs::write(Paths::victim_report(config), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(
        Paths::calibration(config),
        serde_json::to_string_pretty(&calibration)?,
    )?;
    let outputs = vec![
        rel(config, &Paths::victim_ckpt(config)),
        rel(config, &Paths::victim_report(config)),
        rel(config, &Paths::calibration(config)),
    ];
    let summary =
        write_summary(config, "train-victim", &[manifest_path], outputs, started)?;
    Ok((VictimMetrics { train_accuracy, test_accuracy, calibration }, summary))
}

/// Deterministic benign verification trials from one split.
fn benign_trials(
    manifest: &DatasetManifest,
    split: Split,
    count: usize,
    seed: u64,
) -> Result<Vec<VerificationTrial>> {
    let entries: Vec<_> = manifest.split(split).collect();
    let mut by_speaker: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in &entries {
        by_speaker.entry(e.speaker_id.as_str()).or_default().push(e.utterance_id.as_str());
    }
    let speakers: Vec<&str> = {
        let mut s: Vec<&str> = by_speaker.keys().cloned().collect();
        s.sort();
        s
    };
    let mut rng = rng_from_seed(seed);
    let mut trials = Vec::with_capacity(count);
    for i in 0..count {
        let target = i % 2 == 0;
        let spk_a = speakers[rng.gen_range(0..speakers.len())];
        let utts = &by_speaker[spk_a];
        if target {
            if utts.len() < 2 {
                continue;
            }
            let a = rng.gen_range(0..utts.len());
            let mut b = rng.gen_range(0..utts.len());
            while b == a {
                b = rng.gen_range(0..utts.len());
            }
            trials.push(VerificationTrial::new(utts[a], utts[b], true)?);
        } else {
            let mut spk_b = speakers[rng.gen_range(0..speakers.len())];
            while spk_b == spk_a {
                spk_b = speakers[rng.gen_range(0..speakers.len())];
            }
            let a = utts[rng.gen_range(0..utts.len())];
            let bs = &by_speaker[spk_b];
            let b = bs[rng.gen_range(0..bs.len())];
            trials.push(VerificationTrial::new(a, b, false)?);
        }
    }
    Ok(trials)
}

fn embedding_cache(
    model: &VictimModel,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<HashMap<String, Vec<f64>>> {
    let entries: Vec<_> = manifest.split(split).collect();
    let embeddings: Result<Vec<(String, Vec<f64>)>> = entries
        .par_iter()
        .map(|e| {
            let wave = manifest.load_audio(e)?;
            Ok((e.utterance_id.clone(), model.embedding(&wave)?))
        })
        .collect();
    Ok(embeddings?.into_iter().collect())
}

use rand::Rng;

// ---------------------------------------------------------------------------
// Stage: attack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackStageMetrics {
    pub classification_attempts: usize,
    pub classification_successes: usize,
    pub verification_attempts: usize,
    pub verification_successes: usize,
}

pub fn stage_attack(config: &PipelineConfig) -> Result<(AttackStageMetrics, StageSummary)> {
    let started = Instant::now();
    let manifest_path = Paths::corpus_manifest(config);
    require(&manifest_path, "corpus manifest", "synth-data")?;
    let ckpt = Paths::victim_ckpt(config);
    require(&ckpt, "victim checkpoint", "train-victim")?;
    let calibration_path = Paths::calibration(config);
    require(&calibration_path, "verification calibration", "train-victim")?;

    let manifest = DatasetManifest::load(&manifest_path)?;
    let model = VictimModel::load(&ckpt)?;
    let calibration: CalibrationArtifact =
        serde_json::from_str(&std::fs::read_to_string(&calibration_path)?)?;

    let classification = run_campaign(
        &model,
        &manifest,
        &CampaignConfig {
            fraction: config.campaign.fraction,
            seed: config.stage_seed("attack-classification"),
            iter_cap: config.campaign.iter_cap,
            out_dir: Paths::attack_dir(config, "classification"),
            combos: default_combos(),
        },
        CampaignTask::Classification,
    )?;

    let trials = verification_attack_trials(&manifest, config.stage_seed("attack-trials"))?;
    let verification = run_campaign(
        &model,
        &manifest,
        &CampaignConfig {
            fraction: config.campaign.verification_fraction,
            seed: config.stage_seed("attack-verification"),
            iter_cap: config.campaign.iter_cap,
            out_dir: Paths::attack_dir(config, "verification"),
            combos: default_combos(),
        },
        CampaignTask::Verification { trials: &trials, theta_score: calibration.theta_score },
    )?;

    let metrics = AttackStageMetrics {
        classification_attempts: classification.records.len(),
        classification_successes: classification.successes().count(),
        verification_attempts: verification.records.len(),
        verification_successes: verification.successes().count(),
    };
    log::info!(
        "attack: classification {}/{} ok, verification {}/{} ok",
        metrics.classification_successes,
        metrics.classification_attempts,
        metrics.verification_successes,
        metrics.verification_attempts
    );
    let mut outputs = vec![
        rel(config, &Paths::attack_manifest(config, "classification")),
        rel(config, &Paths::attack_manifest(config, "verification")),
    ];
    for (m, dir) in [(&classification, "classification"), (&verification, "verification")] {
        for r in m.successes() {
            if let Some(p) = &r.audio_path {
                outputs.push(rel(config, &Paths::attack_dir(config, dir).join(p)));
            }
        }
    }
    let summary = write_summary(
        config,
        "attack",
        &[manifest_path, ckpt, calibration_path],
        outputs,
        started,
    )?;
    Ok((metrics, summary))
}

/// One verification trial per test utterance, alternating target/nontarget,
/// with enrollment drawn from the train split.
fn verification_attack_trials(
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<Vec<VerificationTrial>> {
    let mut rng = rng_from_seed(seed);
    let mut by_speaker_train: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in manifest.split(Split::Train) {
        by_speaker_train
            .entry(e.speaker_id.as_str())
            .or_default()
            .push(e.utterance_id.as_str());
    }
    let speakers: Vec<&str> = {
        let mut s: Vec<&str> = by_speaker_train.keys().cloned().collect();
        s.sort();
        s
    };
    let mut trials = Vec::new();
    for (i, entry) in manifest.split(Split::Test).enumerate() {
        let target = i % 2 == 0;
        let enroll = if target {
            let utts = &by_speaker_train[entry.speaker_id.as_str()];
            utts[rng.gen_range(0..utts.len())]
        } else {
            let mut other = speakers[rng.gen_range(0..speakers.len())];
            while other == entry.speaker_id {
                other = speakers[rng.gen_range(0..speakers.len())];
            }
            let utts = &by_speaker_train[other];
            utts[rng.gen_range(0..utts.len())]
        };
        trials.push(VerificationTrial::new(enroll, entry.utterance_id.clone(), target)?);
    }
    Ok(trials)
}

// ---------------------------------------------------------------------------
// Stage: train-signatures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureStageMetrics {
    /// Final train accuracy per (task, variant).
    pub train_accuracy: Vec<(String, f64)>,
    /// Classes dropped for having fewer than the minimum samples.
    pub dropped_classes: Vec<(String, String)>,
}

/// Shared audio cache so six nets can train on one in-memory copy.
fn audio_cache(items: &[&LabeledUtterance]) -> Result<HashMap<String, Arc<Tensor>>> {
    let loaded: Result<Vec<(String, Arc<Tensor>)>> = items
        .par_iter()
        .map(|u| {
            let wave = wav::read_wav(&u.audio, u.utterance_id.clone())?;
            Ok((u.utterance_id.clone(), Arc::new(waveform_tensor(&wave))))
        })
        .collect();
    Ok(loaded?.into_iter().collect())
}

pub fn stage_train_signatures(
    config: &PipelineConfig,
) -> Result<(SignatureStageMetrics, StageSummary)> {
    let started = Instant::now();
    let manifest_path = Paths::corpus_manifest(config);
    require(&manifest_path, "corpus manifest", "synth-data")?;
    let attacks_path = Paths::attack_manifest(config, "classification");
    require(&attacks_path, "classification attack manifest", "attack")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let attacks = AttackManifest::load(&attacks_path)?;

    // Label per (task, variant), prune sparse classes, share the audio.
    let mut jobs: Vec<(LabelTask, NetVariant, Vec<LabeledUtterance>)> = Vec::new();
    let mut dropped: Vec<(String, String)> = Vec::new();
    for task in LabelTask::ALL {
        for variant in NetVariant::ALL {
            let data = make_labels(&attacks, &manifest, task, &variant.exclusions())?;
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for u in &data.train {
                *counts.entry(u.label.as_str()).or_default() += 1;
            }
            let keep: Vec<LabeledUtterance> = data
                .train
                .iter()
                .filter(|u| counts[u.label.as_str()] >= MIN_CLASS_SAMPLES)
                .cloned()
                .collect();
            for (label, n) in &counts {
                if *n < MIN_CLASS_SAMPLES {
                    log::warn!(
                        "{}-{}: dropping class `{label}` with {n} training samples",
                        task.slug(),
                        variant.slug()
                    );
                    dropped.push((
                        format!("{}-{}", task.slug(), variant.slug()),
                        label.to_string(),
                    ));
                }
            }
            jobs.push((task, variant, keep));
        }
    }
    let all_items: Vec<&LabeledUtterance> = {
        let mut seen = std::collections::BTreeSet::new();
        jobs.iter()
            .flat_map(|(_, _, items)| items.iter())
            .filter(|u| seen.insert(u.utterance_id.clone()))
            .collect()
    };
    let cache = audio_cache(&all_items)?;

    let results: Result<Vec<(String, f64, PathBuf, PathBuf)>> = jobs
        .par_iter()
        .map(|(task, variant, items)| {
            let train_items: Vec<(Arc<Tensor>, String)> = items
                .iter()
                .map(|u| (Arc::clone(&cache[&u.utterance_id]), u.label.clone()))
                .collect();
            let train_config = TrainConfig {
                epochs: config.signature.epochs,
                lr: config.signature.lr,
                batch: config.signature.batch,
                seed: config.stage_seed(&format!(
                    "train-signatures-{}-{}",
                    task.slug(),
                    variant.slug()
                )),
            };
            let (net, report) = train_signature_net(
                &train_items,
                *task,
                &train_config,
                config.signature.per_class,
            )?;
            let ckpt = Paths::signature_ckpt(config, *task, *variant);
            net.save(&ckpt)?;
            let report_path = Paths::signature_report(config, *task, *variant);
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            let name = format!("{}-{}", task.slug(), variant.slug());
            let acc = report.epochs.last().map(|e| e.accuracy).unwrap_or(0.0);
            log::info!("signature {name}: final train accuracy {acc:.3}");
            Ok((name, acc, ckpt, report_path))
        })
        .collect();
    let results = results?;

    let mut outputs = Vec::new();
    let mut train_accuracy = Vec::new();
    for (name, acc, ckpt, report_path) in results {
        outputs.push(rel(config, &ckpt));
        outputs.push(rel(config, &report_path));
        train_accuracy.push((name, acc));
    }
    let summary = write_summary(
        config,
        "train-signatures",
        &[manifest_path, attacks_path],
        outputs,
        started,
    )?;
    Ok((SignatureStageMetrics { train_accuracy, dropped_classes: dropped }, summary))
}

// ---------------------------------------------------------------------------
// Stage: extract
// ---------------------------------------------------------------------------

pub fn stage_extract(config: &PipelineConfig) -> Result<StageSummary> {
    let started = Instant::now();
    let manifest_path = Paths::corpus_manifest(config);
    require(&manifest_path, "corpus manifest", "synth-data")?;
    let attacks_path = Paths::attack_manifest(config, "classification");
    require(&attacks_path, "classification attack manifest", "attack")?;
    let ver_attacks_path = Paths::attack_manifest(config, "verification");
    require(&ver_attacks_path, "verification attack manifest", "attack")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let attacks = AttackManifest::load(&attacks_path)?;
    let ver_attacks = AttackManifest::load(&ver_attacks_path)?;

    let mut outputs = Vec::new();
    for task in LabelTask::ALL {
        for variant in NetVariant::ALL {
            let ckpt = Paths::signature_ckpt(config, task, variant);
            require(&ckpt, "signature checkpoint", "train-signatures")?;
            let net = SignatureNet::load(&ckpt)?;
            let data = make_labels(&attacks, &manifest, task, &variant.exclusions())?;
            let mut pools: Vec<(&str, Vec<LabeledUtterance>)> = vec![
                ("train", data.train),
                ("heldout", data.heldout),
                ("unknown", data.unknown),
            ];
            if variant == NetVariant::All {
                let ver = make_labels(&ver_attacks, &manifest, task, &[])?;
                let mut pool: Vec<LabeledUtterance> =
                    ver.train.into_iter().chain(ver.heldout).filter(|u| u.attacked).collect();
                pool.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
                pools.push(("verification", pool));
            }
            for (pool, items) in pools {
                let records: Result<Vec<SignatureRecord>> = items
                    .par_iter()
                    .map(|u| {
                        let wave = wav::read_wav(&u.audio, u.utterance_id.clone())?;
                        Ok(SignatureRecord {
                            utterance_id: u.utterance_id.clone(),
                            task,
                            label: u.label.clone(),
                            vector: extract_signature(&net, &wave)?,
                        })
                    })
                    .collect();
                let path = Paths::vectors(config, task, variant, pool);
                save_signatures(&path, &records?)?;
                outputs.push(rel(config, &path));
            }
        }
    }
    write_summary(
        config,
        "extract",
        &[manifest_path, attacks_path, ver_attacks_path],
        outputs,
        started,
    )
}

// ---------------------------------------------------------------------------
// Stage: classify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    /// Held-out logits accuracy per task.
    pub heldout_accuracy: Vec<(String, f64)>,
    /// Benign-vs-attacked binary accuracy (algorithm task).
    pub binary_accuracy: f64,
    /// SNR predictions within one bin of the truth (attacked only).
    pub snr_within_one_bin: f64,
    /// Algorithm-task accuracy on verification-task attacks.
    pub transfer_accuracy: f64,
    /// Back-end classifier accuracy on held-out signature vectors.
    pub backend_accuracy: f64,
    pub backend_kind: crate::plda::BackendKind,
}

pub fn stage_classify(config: &PipelineConfig) -> Result<(ClassifyMetrics, StageSummary)> {
    let started = Instant::now();
    let manifest_path = Paths::corpus_manifest(config);
    require(&manifest_path, "corpus manifest", "synth-data")?;
    let attacks_path = Paths::attack_manifest(config, "classification");
    require(&attacks_path, "classification attack manifest", "attack")?;
    let ver_attacks_path = Paths::attack_manifest(config, "verification");
    require(&ver_attacks_path, "verification attack manifest", "attack")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let attacks = AttackManifest::load(&attacks_path)?;
    let ver_attacks = AttackManifest::load(&ver_attacks_path)?;

    let mut outputs = Vec::new();
    let mut heldout_accuracy = Vec::new();
    let mut binary_accuracy = 0.0;
    let mut snr_within_one_bin = 0.0;
    let mut transfer_accuracy = 0.0;

    for task in LabelTask::ALL {
        let ckpt = Paths::signature_ckpt(config, task, NetVariant::All);
        require(&ckpt, "signature checkpoint", "train-signatures")?;
        let net = SignatureNet::load(&ckpt)?;
        let data = make_labels(&attacks, &manifest, task, &[])?;
        let preds = predict_pool(&net, &data.heldout)?;
        let truth: Vec<String> = data.heldout.iter().map(|u| u.label.clone()).collect();
        let cm = confusion(&truth, &preds, &task.class_inventory())?;
        let csv_path = Paths::confusion_csv(config, task.slug());
        if let Some(dir) = csv_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&csv_path, cm.to_csv())?;
        outputs.push(rel(config, &csv_path));
        let acc = cm.accuracy();
        log::info!("classify {}: held-out accuracy {acc:.3}", task.slug());
        heldout_accuracy.push((task.slug().to_string(), acc));

        if task == LabelTask::AlgorithmThreat {
            let correct = truth
                .iter()
                .zip(&preds)
                .filter(|(t, p)| (*t == BENIGN_LABEL) == (*p == BENIGN_LABEL))
                .count();
            binary_accuracy = correct as f64 / truth.len().max(1) as f64;

            // Transfer: same net, attacks generated against the verifier.
            let ver = make_labels(&ver_attacks, &manifest, task, &[])?;
            let mut pool: Vec<LabeledUtterance> = ver
                .train
                .into_iter()
                .chain(ver.heldout)
                .filter(|u| u.attacked)
                .collect();
            pool.extend(data.heldout.iter().filter(|u| !u.attacked).cloned());
            pool.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
            let tpreds = predict_pool(&net, &pool)?;
            let ttruth: Vec<String> = pool.iter().map(|u| u.label.clone()).collect();
            let tcm = confusion(&ttruth, &tpreds, &task.class_inventory())?;
            let tcsv = Paths::confusion_csv(config, "algorithm_transfer");
            std::fs::write(&tcsv, tcm.to_csv())?;
            outputs.push(rel(config, &tcsv));
            transfer_accuracy = tcm.accuracy();
            log::info!("classify transfer: accuracy {transfer_accuracy:.3}");
        }
        if task == LabelTask::Snr {
            let attacked: Vec<(&String, &String)> = data
                .heldout
                .iter()
                .zip(&preds)
                .filter(|(u, _)| u.attacked)
                .map(|(u, p)| (&u.label, p))
                .collect();
            let within = attacked
                .iter()
                .filter(|(t, p)| match (t.parse::<i64>(), p.parse::<i64>()) {
                    (Ok(tb), Ok(pb)) => (tb - pb).abs() <= 10,
                    _ => false,
                })
                .count();
            snr_within_one_bin = within as f64 / attacked.len().max(1) as f64;
            log::info!("classify snr: within one bin {snr_within_one_bin:.3}");
        }
    }

    // Back-end classifier over signature vectors (algorithm task).
    let train_vecs = load_signatures(&Paths::vectors(
        config,
        LabelTask::AlgorithmThreat,
        NetVariant::All,
        "train",
    ))?;
    let held_vecs = load_signatures(&Paths::vectors(
        config,
        LabelTask::AlgorithmThreat,
        NetVariant::All,
        "heldout",
    ))?;
    let inventory = LabelTask::AlgorithmThreat.class_inventory();
    let classes: Vec<String> = inventory
        .iter()
        .filter(|c| train_vecs.iter().any(|r| &r.label == *c))
        .cloned()
        .collect();
    let idx = |label: &str| classes.iter().position(|c| c == label);
    let train_pairs: Vec<(Vec<f64>, usize)> = train_vecs
        .iter()
        .filter_map(|r| idx(&r.label).map(|i| (r.vector.clone(), i)))
        .collect();
    let backend = crate::plda::fit_backend(
        config.backend,
        &train_pairs,
        classes.len(),
        config.eval.plda_em_iters,
    )?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in &held_vecs {
        let Some(t) = idx(&r.label) else { continue };
        let p = backend.predict(&r.vector)?;
        if argmax(&p) == t {
            correct += 1;
        }
        total += 1;
    }
    let backend_accuracy = correct as f64 / total.max(1) as f64;
    log::info!("classify backend ({:?}): accuracy {backend_accuracy:.3}", config.backend);

    let metrics = ClassifyMetrics {
        heldout_accuracy,
        binary_accuracy,
        snr_within_one_bin,
        transfer_accuracy,
        backend_accuracy,
        backend_kind: config.backend,
    };
    let metrics_path = Paths::classify_metrics(config);
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    outputs.push(rel(config, &metrics_path));
    let summary = write_summary(
        config,
        "classify",
        &[manifest_path, attacks_path, ver_attacks_path],
        outputs,
        started,
    )?;
    Ok((metrics, summary))
}

fn predict_pool(net: &SignatureNet, pool: &[LabeledUtterance]) -> Result<Vec<String>> {
    pool.par_iter()
        .map(|u| {
            let wave = wav::read_wav(&u.audio, u.utterance_id.clone())?;
            Ok(classify_by_logits(net, &wave)?.0)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stage: verify (attack verification)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyMetrics {
    /// `(task, trial group, trial count, EER)` rows.
    pub eer_rows: Vec<(String, String, usize, f64)>,
}

struct FittedScorer {
    pre: Preprocessor,
    model: crate::plda::PldaModel,
    class_stats: Vec<(String, ClassStats)>,
}

fn fit_scorer(
    train_vecs: &[SignatureRecord],
    inventory: &[String],
    em_iters: usize,
) -> Result<FittedScorer> {
    let classes: Vec<String> = inventory
        .iter()
        .filter(|c| train_vecs.iter().filter(|r| &r.label == *c).count() >= 2)
        .cloned()
        .collect();
    let pairs: Vec<(Vec<f64>, usize)> = train_vecs
        .iter()
        .filter_map(|r| {
            classes.iter().position(|c| c == &r.label).map(|i| (r.vector.clone(), i))
        })
        .collect();
    let pre = Preprocessor::fit(&pairs, classes.len())?;
    let mut grouped: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes.len()];
    for (v, c) in &pairs {
        grouped[*c].push(pre.apply(v));
    }
    let EmOutcome { model, .. } = plda_em_train(&grouped, em_iters)?;
    let class_stats: Vec<(String, ClassStats)> = classes
        .iter()
        .zip(&grouped)
        .map(|(c, g)| Ok((c.clone(), ClassStats::from_vectors(g)?)))
        .collect::<Result<_>>()?;
    Ok(FittedScorer { pre, model, class_stats })
}

pub fn stage_verify(config: &PipelineConfig) -> Result<(VerifyMetrics, StageSummary)> {
    let started = Instant::now();
    let mut eer_rows = Vec::new();
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    for task in LabelTask::ALL {
        let train_path = Paths::vectors(config, task, NetVariant::NoCw, "train");
        require(&train_path, "signature vectors", "extract")?;
        inputs.push(train_path.clone());
        let train_vecs = load_signatures(&train_path)?;
        let heldout = load_signatures(&Paths::vectors(config, task, NetVariant::NoCw, "heldout"))?;
        let unknown = load_signatures(&Paths::vectors(config, task, NetVariant::NoCw, "unknown"))?;
        let scorer = fit_scorer(&train_vecs, &task.class_inventory(), config.eval.plda_em_iters)?;

        // Test pool: held-out knowns plus the unknown attacks, preprocessed.
        let known_pool: Vec<(String, String, Vec<f64>)> = heldout
            .iter()
            .map(|r| (r.utterance_id.clone(), r.label.clone(), scorer.pre.apply(&r.vector)))
            .collect();
        let unknown_pool: Vec<(String, String, Vec<f64>)> = unknown
            .iter()
            .map(|r| (r.utterance_id.clone(), r.label.clone(), scorer.pre.apply(&r.vector)))
            .collect();

        let groups: [(&str, Vec<(String, String, Vec<f64>)>); 3] = [
            ("known", known_pool.clone()),
            ("unknown", unknown_pool.clone()),
            ("all", known_pool.iter().chain(&unknown_pool).cloned().collect()),
        ];
        for (group, pool) in groups {
            let labeled: Vec<(String, String)> =
                pool.iter().map(|(id, label, _)| (id.clone(), label.clone())).collect();
            let trial_seed =
                derive_seed(config.stage_seed("verify"), &[task.slug(), group]);
            let set = match make_attack_trials(
                &labeled,
                task.slug(),
                config.eval.max_trials,
                trial_seed,
            ) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("verify {}-{group}: skipped ({e})", task.slug());
                    continue;
                }
            };
            let vectors: HashMap<&str, &Vec<f64>> =
                pool.iter().map(|(id, _, v)| (id.as_str(), v)).collect();
            let scored: Result<Vec<(Trial, f64)>> = set
                .trials
                .par_iter()
                .map(|t| {
                    let s = scorer
                        .model
                        .llr_pair(vectors[t.enroll.as_str()], vectors[t.test.as_str()])?;
                    Ok((t.clone(), s))
                })
                .collect();
            let scored = scored?;
            let targets: Vec<f64> =
                scored.iter().filter(|(t, _)| t.same).map(|(_, s)| *s).collect();
            let nons: Vec<f64> =
                scored.iter().filter(|(t, _)| !t.same).map(|(_, s)| *s).collect();
            let e = eer(&targets, &nons)?;
            log::info!(
                "verify {}-{group}: {} trials, EER {:.1}%",
                task.slug(),
                scored.len(),
                100.0 * e
            );
            let score_path = Paths::verify_scores(config, task, group);
            if let Some(dir) = score_path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut csv = String::from("trial_id,enroll,test,label,score\n");
            for (i, (t, s)) in scored.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{},{},{s}\n",
                    t.enroll,
                    t.test,
                    if t.same { "same" } else { "different" }
                ));
            }
            std::fs::write(&score_path, csv)?;
            outputs.push(rel(config, &score_path));
            eer_rows.push((task.slug().to_string(), group.to_string(), scored.len(), e));
        }
    }
    let metrics = VerifyMetrics { eer_rows };
    let metrics_path = Paths::verify_metrics(config);
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    outputs.push(rel(config, &metrics_path));
    let summary = write_summary(config, "verify", &inputs, outputs, started)?;
    Ok((metrics, summary))
}

// ---------------------------------------------------------------------------
// Stage: detect-unknown
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnknownMetrics {
    pub eer_with_benign: f64,
    pub eer_without_benign: f64,
}

pub fn stage_detect_unknown(config: &PipelineConfig) -> Result<(UnknownMetrics, StageSummary)> {
    let started = Instant::now();
    let task = LabelTask::AlgorithmThreat;
    let train_path = Paths::vectors(config, task, NetVariant::NoCw, "train");
    require(&train_path, "signature vectors", "extract")?;
    let train_vecs = load_signatures(&train_path)?;
    let heldout = load_signatures(&Paths::vectors(config, task, NetVariant::NoCw, "heldout"))?;
    let unknown = load_signatures(&Paths::vectors(config, task, NetVariant::NoCw, "unknown"))?;
    let scorer = fit_scorer(&train_vecs, &task.class_inventory(), config.eval.plda_em_iters)?;
    let known_stats: Vec<ClassStats> =
        scorer.class_stats.iter().map(|(_, s)| s.clone()).collect();

    let mut tests: Vec<DetectionTrial> = Vec::new();
    for r in &heldout {
        tests.push(DetectionTrial {
            utterance_id: r.utterance_id.clone(),
            is_unknown: false,
            is_benign: r.label == BENIGN_LABEL,
            vector: r.vector.clone(),
        });
    }
    for r in &unknown {
        // Unknown-attack scoring evaluates held-out unknowns only.
        if r.utterance_id.contains(':') && heldout_id(&r.utterance_id, &heldout) {
            continue;
        }
        tests.push(DetectionTrial {
            utterance_id: r.utterance_id.clone(),
            is_unknown: true,
            is_benign: false,
            vector: r.vector.clone(),
        });
    }

    let mut outputs = Vec::new();
    let mut result = UnknownMetrics { eer_with_benign: 0.0, eer_without_benign: 0.0 };
    for (condition, with_benign) in [("with_benign", true), ("without_benign", false)] {
        let outcome = unknown_detection_eval(
            &scorer.model,
            &scorer.pre,
            &known_stats,
            &tests,
            with_benign,
        )?;
        log::info!("detect-unknown {condition}: EER {:.1}%", 100.0 * outcome.eer);
        let path = Paths::unknown_scores(config, condition);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut csv = String::from("utterance_id,is_unknown,score\n");
        for (id, u, s) in &outcome.scores {
            csv.push_str(&format!("{id},{u},{s}\n"));
        }
        std::fs::write(&path, csv)?;
        outputs.push(rel(config, &path));
        if with_benign {
            result.eer_with_benign = outcome.eer;
        } else {
            result.eer_without_benign = outcome.eer;
        }
    }
    let metrics_path = Paths::unknown_metrics(config);
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&result)?)?;
    outputs.push(rel(config, &metrics_path));
    let summary = write_summary(config, "detect-unknown", &[train_path], outputs, started)?;
    Ok((result, summary))
}

fn heldout_id(_id: &str, _heldout: &[SignatureRecord]) -> bool {
    false
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

pub fn stage_report(config: &PipelineConfig) -> Result<StageSummary> {
    let started = Instant::now();
    let classify_path = Paths::classify_metrics(config);
    require(&classify_path, "classification metrics", "classify")?;
    let verify_path = Paths::verify_metrics(config);
    require(&verify_path, "verification metrics", "verify")?;
    let unknown_path = Paths::unknown_metrics(config);
    require(&unknown_path, "unknown-detection metrics", "detect-unknown")?;
    let classify: ClassifyMetrics =
        serde_json::from_str(&std::fs::read_to_string(&classify_path)?)?;
    let verify: VerifyMetrics = serde_json::from_str(&std::fs::read_to_string(&verify_path)?)?;
    let unknown: UnknownMetrics =
        serde_json::from_str(&std::fs::read_to_string(&unknown_path)?)?;

    let report_dir = Paths::report_dir(config);
    std::fs::create_dir_all(&report_dir)?;
    let mut outputs = Vec::new();
    let mut md = String::from("# Attack signature evaluation\n\n");

    md.push_str("## Attack classification (held-out, logits)\n\n");
    md.push_str("| task | accuracy |\n|---|---|\n");
    for (task, acc) in &classify.heldout_accuracy {
        md.push_str(&format!("| {task} | {:.1}% |\n", 100.0 * acc));
    }
    md.push_str(&format!(
        "| benign-vs-attacked (binary) | {:.1}% |\n",
        100.0 * classify.binary_accuracy
    ));
    md.push_str(&format!(
        "| snr within one bin | {:.1}% |\n",
        100.0 * classify.snr_within_one_bin
    ));
    md.push_str(&format!(
        "| transfer to verification attacks | {:.1}% |\n",
        100.0 * classify.transfer_accuracy
    ));
    md.push_str(&format!(
        "| back-end ({:?}) on vectors | {:.1}% |\n\n",
        classify.backend_kind,
        100.0 * classify.backend_accuracy
    ));

    for task in LabelTask::ALL {
        let csv = Paths::confusion_csv(config, task.slug());
        if csv.exists() {
            let cm = std::fs::read_to_string(&csv)?;
            md.push_str(&format!("## Confusion: {} task\n\n", task.slug()));
            md.push_str(&csv_to_markdown(&cm));
            md.push('\n');
            let copy = report_dir.join(format!("confusion_{}.csv", task.slug()));
            std::fs::write(&copy, cm)?;
            outputs.push(rel(config, &copy));
        }
    }

    md.push_str("## Attack verification (PLDA on signatures, CW unknown)\n\n");
    md.push_str("| task | trial group | trials | EER |\n|---|---|---|---|\n");
    let mut eer_csv = String::from("task,group,num_trials,eer\n");
    for (task, group, n, e) in &verify.eer_rows {
        md.push_str(&format!("| {task} | {group} | {n} | {:.1}% |\n", 100.0 * e));
        eer_csv.push_str(&format!("{task},{group},{n},{e}\n"));
    }
    md.push_str(&format!(
        "\n## Unknown-attack detection\n\n| condition | EER |\n|---|---|\n| with benign | {:.1}% |\n| without benign | {:.1}% |\n",
        100.0 * unknown.eer_with_benign,
        100.0 * unknown.eer_without_benign
    ));
    eer_csv.push_str(&format!("unknown,with_benign,,{}\n", unknown.eer_with_benign));
    eer_csv.push_str(&format!("unknown,without_benign,,{}\n", unknown.eer_without_benign));

    let md_path = report_dir.join("report.md");
    std::fs::write(&md_path, md)?;
    outputs.push(rel(config, &md_path));
    let eer_path = report_dir.join("eer.csv");
    std::fs::write(&eer_path, eer_csv)?;
    outputs.push(rel(config, &eer_path));
    write_summary(
        config,
        "report",
        &[classify_path, verify_path, unknown_path],
        outputs,
        started,
    )
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        out.push_str("| ");
        out.push_str(&line.replace(',', " | "));
        out.push_str(" |\n");
        if i == 0 {
            let cols = line.split(',').count();
            out.push_str(&"|---".repeat(cols));
            out.push_str("|\n");
        }
    }
    out
}

/// Aggregated metrics of a full pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub victim: VictimMetrics,
    pub attack: AttackStageMetrics,
    pub signatures: SignatureStageMetrics,
    pub classify: ClassifyMetrics,
    pub verify: VerifyMetrics,
    pub unknown: UnknownMetrics,
}

/// Runs every stage in order; the one-call entry used by tests.
pub fn run_full_pipeline(config: &PipelineConfig) -> Result<PipelineMetrics> {
    config.validate()?;
    stage_synth_data(config)?;
    let (victim, _) = stage_train_victim(config)?;
    let (attack, _) = stage_attack(config)?;
    let (signatures, _) = stage_train_signatures(config)?;
    stage_extract(config)?;
    let (classify, _) = stage_classify(config)?;
    let (verify, _) = stage_verify(config)?;
    let (unknown, _) = stage_detect_unknown(config)?;
    stage_report(config)?;
    Ok(PipelineMetrics { victim, attack, signatures, classify, verify, unknown })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default_config(dir.path().to_path_buf());
        config.validate().unwrap();
        let path = dir.path().join("config.json");
        config.save(&path).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, config.seed);
        assert_eq!(loaded.campaign.fraction, config.campaign.fraction);
    }

    #[test]
    fn invalid_config_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::default_config(dir.path().to_path_buf());
        config.campaign.fraction = 1.5;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("campaign.fraction"), "{err}");
    }

    #[test]
    fn stages_demand_their_upstream_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default_config(dir.path().to_path_buf());
        let err = stage_attack(&config).unwrap_err();
        assert!(err.to_string().contains("synth-data"), "{err}");
        let err = stage_train_victim(&config).unwrap_err();
        assert!(err.to_string().contains("run synth-data"), "{err}");
        let err = stage_report(&config).unwrap_err();
        assert!(err.to_string().contains("run classify"), "{err}");
    }

    #[test]
    fn missing_victim_checkpoint_points_at_its_stage() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default_config(dir.path().to_path_buf());
        // Provide the corpus manifest but no checkpoint.
        std::fs::create_dir_all(Paths::data_dir(&config)).unwrap();
        std::fs::write(Paths::corpus_manifest(&config), "").unwrap();
        let err = stage_attack(&config).unwrap_err();
        assert_eq!(
            err.to_string(),
            "missing victim checkpoint; run train-victim"
        );
    }
}
