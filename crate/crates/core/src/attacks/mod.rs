//! Attack algorithms, randomized hyperparameter sampling, success filtering
//! and campaign orchestration.

pub mod cw;
pub mod gradsign;
pub mod objective;
pub mod project;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};
use crate::signal::{clamp_audio, lp_norm, snr_bin, snr_db, Lp, Perturbation, Waveform};
use crate::synth::{DatasetManifest, Split};
use crate::victim::{VerificationTrial, VictimModel};
use crate::wav;

pub use cw::{cw_attack, cw_objective, CwConfig, CwMode, CwReport};
pub use gradsign::{fgsm, iter_fgsm, pgd, PgdInit};
pub use objective::{AttackObjective, ClassificationObjective, VerificationObjective};
pub use project::project_lp;

/// Attack algorithm family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackAlgorithm {
    Fgsm,
    IterFgsm,
    Pgd,
    Cw,
}

impl AttackAlgorithm {
    pub fn slug(self) -> &'static str {
        match self {
            AttackAlgorithm::Fgsm => "fgsm",
            AttackAlgorithm::IterFgsm => "iter-fgsm",
            AttackAlgorithm::Pgd => "pgd",
            AttackAlgorithm::Cw => "cw",
        }
    }
}

/// Algorithm-specific hyperparameters; only the fields that exist for an
/// algorithm are representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "kebab-case")]
pub enum AttackParams {
    Fgsm { epsilon: f64 },
    IterFgsm { epsilon: f64, alpha: f64, num_iters: usize },
    Pgd { epsilon: f64, alpha: f64, num_iters: usize, num_random_inits: usize },
    Cw { kappa: f64, learning_rate: f64, num_iters: usize, search_steps: usize },
}

/// A fully specified attack: algorithm parameters, threat model, seed.
/// Epsilon is in normalized units for L1/L2 threats and raw for Linf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub threat: Lp,
    #[serde(flatten)]
    pub params: AttackParams,
    pub seed: u64,
}

impl AttackSpec {
    pub fn algorithm(&self) -> AttackAlgorithm {
        match self.params {
            AttackParams::Fgsm { .. } => AttackAlgorithm::Fgsm,
            AttackParams::IterFgsm { .. } => AttackAlgorithm::IterFgsm,
            AttackParams::Pgd { .. } => AttackAlgorithm::Pgd,
            AttackParams::Cw { .. } => AttackAlgorithm::Cw,
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self.params {
            AttackParams::Fgsm { epsilon }
            | AttackParams::IterFgsm { epsilon, .. }
            | AttackParams::Pgd { epsilon, .. } => Some(epsilon),
            AttackParams::Cw { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_pair(self.algorithm(), self.threat) {
            return Err(Error::usage(format!(
                "attack {:?} is not defined for threat model {}",
                self.algorithm(),
                self.threat
            )));
        }
        if let Some(eps) = self.epsilon() {
            if !(EPS_MIN..=EPS_MAX).contains(&eps) {
                return Err(Error::precondition(format!(
                    "epsilon {eps} outside [{EPS_MIN}, {EPS_MAX}]"
                )));
            }
        }
        if let AttackParams::Cw { kappa, .. } = self.params {
            if !(0.0..=3.0).contains(&kappa) {
                return Err(Error::precondition(format!("kappa {kappa} outside [0, 3]")));
            }
        }
        Ok(())
    }

    /// Confusion-table label: `FGSM`, `Iter-FGSM`, `PGD-L2`, `CW-Linf`, ...
    pub fn class_label(&self) -> String {
        match self.algorithm() {
            AttackAlgorithm::Fgsm => "FGSM".into(),
            AttackAlgorithm::IterFgsm => "Iter-FGSM".into(),
            AttackAlgorithm::Pgd => format!("PGD-{}", self.threat.label()),
            AttackAlgorithm::Cw => format!("CW-{}", self.threat.label()),
        }
    }

    /// Directory slug: `<algorithm>-<threat>`.
    pub fn combo_slug(&self) -> String {
        combo_slug(self.algorithm(), self.threat)
    }
}

pub fn combo_slug(algorithm: AttackAlgorithm, threat: Lp) -> String {
    format!("{}-{}", algorithm.slug(), threat.label().to_lowercase())
}

/// The algorithm/threat-model pairs the campaign generates.
pub fn default_combos() -> Vec<(AttackAlgorithm, Lp)> {
    vec![
        (AttackAlgorithm::Fgsm, Lp::LInf),
        (AttackAlgorithm::IterFgsm, Lp::LInf),
        (AttackAlgorithm::Pgd, Lp::L1),
        (AttackAlgorithm::Pgd, Lp::L2),
        (AttackAlgorithm::Pgd, Lp::LInf),
        (AttackAlgorithm::Cw, Lp::L0),
        (AttackAlgorithm::Cw, Lp::L2),
        (AttackAlgorithm::Cw, Lp::LInf),
    ]
}

fn valid_pair(algorithm: AttackAlgorithm, threat: Lp) -> bool {
    matches!(
        (algorithm, threat),
        (AttackAlgorithm::Fgsm, Lp::LInf)
            | (AttackAlgorithm::IterFgsm, Lp::LInf)
            | (AttackAlgorithm::Pgd, Lp::L1 | Lp::L2 | Lp::LInf)
            | (AttackAlgorithm::Cw, Lp::L0 | Lp::L2 | Lp::LInf)
    )
}

pub const EPS_MIN: f64 = 3e-6;
pub const EPS_MAX: f64 = 0.03;
const ALPHA_MIN: f64 = 1e-6;
const ALPHA_MAX: f64 = 5e-3;

/// Draws attack hyperparameters from the campaign distributions:
/// log-uniform perturbation budgets and step sizes, uniform iteration
/// counts/restarts, uniform confidence for the minimum-perturbation family.
pub fn sample_hyperparams(
    algorithm: AttackAlgorithm,
    threat: Lp,
    rng_seed: u64,
) -> Result<AttackSpec> {
    if !valid_pair(algorithm, threat) {
        return Err(Error::usage(format!(
            "attack {algorithm:?} is not defined for threat model {threat}"
        )));
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut log_uniform =
        |lo: f64, hi: f64| -> f64 { rng.gen_range(lo.ln()..hi.ln()).exp() };
    let params = match algorithm {
        AttackAlgorithm::Fgsm => AttackParams::Fgsm { epsilon: log_uniform(EPS_MIN, EPS_MAX) },
        AttackAlgorithm::IterFgsm => {
            let epsilon = log_uniform(EPS_MIN, EPS_MAX);
            let alpha = log_uniform(ALPHA_MIN, ALPHA_MAX);
            let num_iters = ((1.25 * epsilon / alpha).ceil() as usize).max(1);
            AttackParams::IterFgsm { epsilon, alpha, num_iters }
        }
        AttackAlgorithm::Pgd => {
            let epsilon = log_uniform(EPS_MIN, EPS_MAX);
            let alpha = log_uniform(ALPHA_MIN, ALPHA_MAX);
            let num_iters = rng.gen_range(10..=100);
            let num_random_inits = rng.gen_range(2..=5);
            AttackParams::Pgd { epsilon, alpha, num_iters, num_random_inits }
        }
        AttackAlgorithm::Cw => {
            let learning_rate = rng.gen_range(1e-5..=1e-3);
            let kappa = rng.gen_range(0.0..=3.0);
            let num_iters = match threat {
                Lp::L0 => rng.gen_range(10..=100),
                _ => rng.gen_range(10..=200),
            };
            AttackParams::Cw { kappa, learning_rate, num_iters, search_steps: 5 }
        }
    };
    Ok(AttackSpec { threat, params, seed: rng_seed })
}

/// Enrollment context recorded for verification-task attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub enroll: String,
    pub target: bool,
}

/// One attacked utterance and its labels. Success-dependent fields are
/// present exactly when the attack flipped the deployed decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub utterance_id: String,
    pub base_speaker: String,
    pub spec: AttackSpec,
    pub success: bool,
    /// Norm of the achieved perturbation in the threat model's own units
    /// (normalized for L1/L2), measured after float-32 quantization.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub achieved_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_bin: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub audio_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trial: Option<TrialInfo>,
}

impl AttackRecord {
    pub fn class_label(&self) -> String {
        self.spec.class_label()
    }
}

/// Attack records plus the directory their audio paths are relative to.
#[derive(Debug, Clone)]
pub struct AttackManifest {
    pub records: Vec<AttackRecord>,
    pub root: PathBuf,
}

impl AttackManifest {
    pub fn successes(&self) -> impl Iterator<Item = &AttackRecord> {
        self.records.iter().filter(|r| r.success)
    }

    pub fn load_audio(&self, record: &AttackRecord) -> Result<Waveform> {
        let rel = record.audio_path.as_ref().ok_or_else(|| {
            Error::precondition(format!("record {} has no audio", record.utterance_id))
        })?;
        wav::read_wav(&self.root.join(rel), record.utterance_id.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::format(format!("cannot open attack manifest {}: {e}", path.display()))
        })?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(format!("attack record line {}: {e}", i + 1)))?,
            );
        }
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(AttackManifest { records, root })
    }
}

/// Campaign settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignConfig {
    /// Fraction of utterances attacked per algorithm/threat pair.
    pub fraction: f64,
    pub seed: u64,
    /// Iteration cap applied to the multiplicative iterative-FGSM schedule;
    /// the sampled step size can otherwise demand five-digit iteration
    /// counts at this scale.
    pub iter_cap: usize,
    pub out_dir: PathBuf,
    #[serde(default = "default_combos_config")]
    pub combos: Vec<(AttackAlgorithm, Lp)>,
}

fn default_combos_config() -> Vec<(AttackAlgorithm, Lp)> {
    default_combos()
}

/// Which victim task the campaign targets.
pub enum CampaignTask<'a> {
    Classification,
    /// Attacks on verification trials; the threshold is the decision point
    /// mapped into raw cosine-score space.
    Verification { trials: &'a [VerificationTrial], theta_score: f64 },
}

struct PreparedAttack<'a> {
    utterance_id: String,
    base_entry_id: String,
    base_speaker: String,
    trial: Option<TrialInfo>,
    objective: Box<dyn AttackObjective + 'a>,
}

/// Runs one campaign: samples utterances per combo, draws hyperparameters,
/// runs the attack, keeps records (successes carry norms, SNR labels and an
/// audio file that replays the decision flip bit-exactly).
pub fn run_campaign(
    model: &VictimModel,
    manifest: &DatasetManifest,
    config: &CampaignConfig,
    task: CampaignTask<'_>,
) -> Result<AttackManifest> {
    if !(0.0 < config.fraction && config.fraction <= 1.0) {
        return Err(Error::precondition("campaign fraction must be in (0, 1]"));
    }
    let mut records: Vec<AttackRecord> = Vec::new();
    for &(algorithm, threat) in &config.combos {
        let slug = combo_slug(algorithm, threat);
        let targets = select_targets(model, manifest, config, &task, &slug)?;
        let combo_records: Result<Vec<Option<AttackRecord>>> = targets
            .par_iter()
            .map(|t| attack_one(model, manifest, config, t, algorithm, threat, &slug))
            .collect();
        records.extend(combo_records?.into_iter().flatten());
        let done = records.iter().filter(|r| r.spec.combo_slug() == slug).count();
        let ok = records
            .iter()
            .filter(|r| r.spec.combo_slug() == slug && r.success)
            .count();
        log::info!("{slug}: {ok}/{done} attacks successful");
    }
    records.sort_by(|a, b| {
        (a.spec.combo_slug(), &a.utterance_id).cmp(&(b.spec.combo_slug(), &b.utterance_id))
    });
    let out = AttackManifest { records, root: config.out_dir.clone() };
    out.save(&config.out_dir.join("attacks.jsonl"))?;
    Ok(out)
}

/// Picks the attack targets for one combo: a seeded sample of
/// `ceil(fraction * N)` items, spread over both splits.
fn select_targets<'a>(
    model: &'a VictimModel,
    manifest: &DatasetManifest,
    config: &CampaignConfig,
    task: &CampaignTask<'_>,
    slug: &str,
) -> Result<Vec<PreparedAttack<'a>>> {
    let mut rng = rng_from_seed(derive_seed(config.seed, &["sample", slug]));
    match task {
        CampaignTask::Classification => {
            let mut train: Vec<&crate::synth::ManifestEntry> =
                manifest.split(Split::Train).collect();
            let mut test: Vec<&crate::synth::ManifestEntry> =
                manifest.split(Split::Test).collect();
            let total =
                ((config.fraction * manifest.entries.len() as f64).ceil() as usize).max(1);
            let take_test = ((config.fraction * test.len() as f64).ceil() as usize).min(total);
            let take_train = (total - take_test).min(train.len());
            train.shuffle(&mut rng);
            test.shuffle(&mut rng);
            let mut out = Vec::new();
            for entry in train.into_iter().take(take_train).chain(test.into_iter().take(take_test))
            {
                let class = model.speaker_index(&entry.speaker_id)?;
                out.push(PreparedAttack {
                    utterance_id: entry.utterance_id.clone(),
                    base_entry_id: entry.utterance_id.clone(),
                    base_speaker: entry.speaker_id.clone(),
                    trial: None,
                    objective: Box::new(ClassificationObjective::new(model, class)?),
                });
            }
            Ok(out)
        }
        CampaignTask::Verification { trials, theta_score } => {
            let mut picked: Vec<&VerificationTrial> = trials.iter().collect();
            picked.shuffle(&mut rng);
            let take = ((config.fraction * trials.len() as f64).ceil() as usize).max(1);
            picked.truncate(take);
            let mut seen = std::collections::BTreeSet::new();
            let mut out = Vec::new();
            for trial in picked {
                if !seen.insert(trial.test.clone()) {
                    return Err(Error::precondition(format!(
                        "verification campaign needs unique test utterances; `{}` repeats",
                        trial.test
                    )));
                }
                let enroll_entry = manifest.entry(&trial.enroll).ok_or_else(|| {
                    Error::precondition(format!("unknown enroll utterance `{}`", trial.enroll))
                })?;
                let test_entry = manifest.entry(&trial.test).ok_or_else(|| {
                    Error::precondition(format!("unknown test utterance `{}`", trial.test))
                })?;
                let enroll_emb = model.embedding(&manifest.load_audio(enroll_entry)?)?;
                out.push(PreparedAttack {
                    utterance_id: test_entry.utterance_id.clone(),
                    base_entry_id: test_entry.utterance_id.clone(),
                    base_speaker: test_entry.speaker_id.clone(),
                    trial: Some(TrialInfo { enroll: trial.enroll.clone(), target: trial.target }),
                    objective: Box::new(VerificationObjective::new(
                        model,
                        &enroll_emb,
                        *theta_score,
                        trial.target,
                    )?),
                });
            }
            Ok(out)
        }
    }
}

fn attack_one(
    _model: &VictimModel,
    manifest: &DatasetManifest,
    config: &CampaignConfig,
    prepared: &PreparedAttack<'_>,
    algorithm: AttackAlgorithm,
    threat: Lp,
    slug: &str,
) -> Result<Option<AttackRecord>> {
    let entry = manifest
        .entry(&prepared.base_entry_id)
        .ok_or_else(|| Error::precondition("missing manifest entry"))?;
    let benign = manifest.load_audio(entry)?;
    let objective = prepared.objective.as_ref();
    // Only correct benign decisions can flip from correct to incorrect.
    if objective.is_adversarial(&benign)? {
        return Ok(None);
    }
    let seed = derive_seed(config.seed, &["attack", slug, &prepared.utterance_id]);
    let mut spec = sample_hyperparams(algorithm, threat, seed)?;
    if let AttackParams::IterFgsm { num_iters, .. } = &mut spec.params {
        *num_iters = (*num_iters).min(config.iter_cap.max(1));
    }

    let n = benign.len() as f64;
    let candidate: Option<Waveform> = match &spec.params {
        AttackParams::Fgsm { epsilon } => Some(fgsm(objective, &benign, *epsilon)?),
        AttackParams::IterFgsm { epsilon, alpha, num_iters } => {
            Some(iter_fgsm(objective, &benign, *epsilon, *alpha, *num_iters)?)
        }
        AttackParams::Pgd { epsilon, alpha, num_iters, num_random_inits } => {
            let raw = match threat {
                Lp::L1 => epsilon * n,
                Lp::L2 => epsilon * n.sqrt(),
                _ => *epsilon,
            };
            let (adv, _) = pgd(
                objective,
                &benign,
                threat,
                raw,
                *alpha,
                *num_iters,
                PgdInit::Random { count: *num_random_inits },
                seed,
            )?;
            Some(adv)
        }
        AttackParams::Cw { kappa, learning_rate, num_iters, search_steps } => {
            let mode = match threat {
                Lp::L0 => CwMode::L0,
                Lp::L2 => CwMode::L2,
                Lp::LInf => CwMode::LInf,
                Lp::L1 => return Err(Error::usage("CW has no L1 mode")),
            };
            let report = cw_attack(
                objective,
                &benign,
                &CwConfig {
                    mode,
                    kappa: *kappa,
                    learning_rate: *learning_rate,
                    num_iters: *num_iters,
                    search_steps: *search_steps,
                },
            )?;
            report.adversarial
        }
    };

    let mut record = AttackRecord {
        utterance_id: prepared.utterance_id.clone(),
        base_speaker: prepared.base_speaker.clone(),
        spec,
        success: false,
        achieved_norm: None,
        snr_db: None,
        snr_bin: None,
        audio_path: None,
        trial: prepared.trial.clone(),
    };
    let Some(adv) = candidate else {
        return Ok(Some(record));
    };

    // Success and every recorded measurement refer to the float-32 audio
    // that actually lands on disk.
    let quantized = clamp_audio(&Waveform::new(
        adv.utterance_id.clone(),
        wav::quantize_f32(adv.samples()),
    )?);
    let delta = Perturbation::from_pair(&benign, &quantized)?;
    if delta.energy() == 0.0 {
        return Ok(Some(record));
    }
    if !objective.is_adversarial(&quantized)? {
        return Ok(Some(record));
    }
    let normalized = matches!(threat, Lp::L1 | Lp::L2);
    record.success = true;
    record.achieved_norm = Some(lp_norm(&delta, threat, normalized)?);
    let snr = snr_db(&benign, &delta)?;
    record.snr_db = Some(snr);
    record.snr_bin = Some(snr_bin(snr));
    let rel = format!("{slug}/{}.wav", prepared.utterance_id);
    wav::write_wav(&config.out_dir.join(&rel), &quantized)?;
    record.audio_path = Some(rel);
    Ok(Some(record))
}
