//! Attack-signature embedding networks: label construction for the three
//! classification tasks, training, signature extraction and logits-based
//! classification.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackAlgorithm, AttackManifest};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::net::{EmbedNet, EncoderConfig};
use crate::signal::Waveform;
use crate::synth::{DatasetManifest, Split};
use crate::tensor::Tensor;
use crate::train::{self, argmax, BatchScheme, TrainConfig, TrainItem, TrainReport};
use crate::victim::net_from_checkpoint;

pub const SIGNATURE_EMB_DIM: usize = 10;
pub const SIGNATURE_MARGIN: f64 = 0.2;
pub const SIGNATURE_SCALE: f64 = 30.0;

pub const BENIGN_LABEL: &str = "Benign";

/// Which attack property a signature net discriminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelTask {
    /// Attack algorithm + threat model (9 classes incl. benign).
    AlgorithmThreat,
    /// Threat model alone (5 classes incl. benign).
    Threat,
    /// Signal-to-adversarial-noise bin (8 classes incl. benign).
    Snr,
}

impl LabelTask {
    pub const ALL: [LabelTask; 3] = [LabelTask::AlgorithmThreat, LabelTask::Threat, LabelTask::Snr];

    pub fn slug(self) -> &'static str {
        match self {
            LabelTask::AlgorithmThreat => "algorithm",
            LabelTask::Threat => "threat",
            LabelTask::Snr => "snr",
        }
    }

    /// Full class inventory in report row order.
    pub fn class_inventory(self) -> Vec<String> {
        match self {
            LabelTask::AlgorithmThreat => [
                BENIGN_LABEL,
                "CW-L0",
                "CW-L2",
                "CW-Linf",
                "FGSM",
                "Iter-FGSM",
                "PGD-L1",
                "PGD-L2",
                "PGD-Linf",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            LabelTask::Threat => [BENIGN_LABEL, "L0", "L1", "L2", "Linf"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            LabelTask::Snr => {
                let mut v = vec![BENIGN_LABEL.to_string()];
                v.extend((0..=60).step_by(10).map(|b| b.to_string()));
                v
            }
        }
    }

    /// Task label of a successful attack record.
    pub fn label_of(self, record: &crate::attacks::AttackRecord) -> Result<String> {
        match self {
            LabelTask::AlgorithmThreat => Ok(record.class_label()),
            LabelTask::Threat => Ok(record.spec.threat.label().to_string()),
            LabelTask::Snr => record
                .snr_bin
                .map(|b| b.to_string())
                .ok_or_else(|| Error::precondition("record has no SNR bin")),
        }
    }
}

/// One labeled utterance for signature training or evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    /// Unique within a labeling: benign utterances keep their corpus id,
    /// attacked ones are prefixed with the algorithm/threat slug.
    pub utterance_id: String,
    pub label: String,
    pub split: Split,
    /// Resolved audio path.
    pub audio: PathBuf,
    pub attacked: bool,
}

/// Output of [`make_labels`]: training data, held-out data for evaluation,
/// and the records of excluded algorithms kept aside as unknown attacks.
#[derive(Debug, Clone, Default)]
pub struct LabeledData {
    pub train: Vec<LabeledUtterance>,
    pub heldout: Vec<LabeledUtterance>,
    pub unknown: Vec<LabeledUtterance>,
    /// Failed attack attempts rejected from every list.
    pub rejected: usize,
}

/// Maps every successful attack and every benign utterance to its task
/// class. Excluded algorithms are dropped from training and kept in the
/// `unknown` list; failed attacks are never used anywhere.
pub fn make_labels(
    attacks: &AttackManifest,
    benign: &DatasetManifest,
    task: LabelTask,
    exclusions: &[AttackAlgorithm],
) -> Result<LabeledData> {
    let mut out = LabeledData::default();
    for entry in &benign.entries {
        let item = LabeledUtterance {
            utterance_id: entry.utterance_id.clone(),
            label: BENIGN_LABEL.into(),
            split: entry.split,
            audio: benign.audio_path(entry),
            attacked: false,
        };
        match entry.split {
            Split::Train => out.train.push(item),
            Split::Test => out.heldout.push(item),
        }
    }
    for record in &attacks.records {
        if !record.success {
            out.rejected += 1;
            continue;
        }
        let entry = benign.entry(&record.utterance_id).ok_or_else(|| {
            Error::precondition(format!(
                "attack record `{}` has no benign counterpart in the corpus manifest",
                record.utterance_id
            ))
        })?;
        let rel = record.audio_path.as_ref().ok_or_else(|| {
            Error::precondition(format!("successful record `{}` lacks audio", record.utterance_id))
        })?;
        let item = LabeledUtterance {
            utterance_id: format!("{}:{}", record.spec.combo_slug(), record.utterance_id),
            label: task.label_of(record)?,
            split: entry.split,
            audio: attacks.root.join(rel),
            attacked: true,
        };
        if exclusions.contains(&record.spec.algorithm()) {
            out.unknown.push(item);
        } else {
            match entry.split {
                Split::Train => out.train.push(item),
                Split::Test => out.heldout.push(item),
            }
        }
    }
    Ok(out)
}

/// Minimum per-class sample count required to train on a class.
pub const MIN_CLASS_SAMPLES: usize = 10;

/// A trained signature extractor.
#[derive(Debug, Clone)]
pub struct SignatureNet {
    pub net: EmbedNet,
    pub task: LabelTask,
}

impl SignatureNet {
    pub fn classes(&self) -> &[String] {
        &self.net.classes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "encoder": self.net.encoder,
            "emb_dim": self.net.emb_dim,
            "classes": self.net.classes,
            "scale": self.net.scale,
            "margin": self.net.margin,
            "train_seed": self.net.train_seed,
            "task": self.task,
            "layers": self.net.train_graph()?.layers,
        });
        Checkpoint::from_params("signature", meta, &self.net.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "signature" {
            return Err(Error::format(format!(
                "{}: expected a signature checkpoint, found `{}`",
                path.display(),
                ckpt.kind
            )));
        }
        let task: LabelTask = serde_json::from_value(ckpt.meta["task"].clone())?;
        Ok(SignatureNet { net: net_from_checkpoint(&ckpt)?, task })
    }
}

/// Trains a signature extractor on labeled audio. Classes follow the task
/// inventory order; batches are stratified by class so unequal success
/// counts per attack do not skew training.
pub fn train_signature_net(
    items: &[(Arc<Tensor>, String)],
    task: LabelTask,
    config: &TrainConfig,
    per_class: usize,
) -> Result<(SignatureNet, TrainReport)> {
    let inventory = task.class_inventory();
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for (_, label) in items {
        if !inventory.iter().any(|c| c == label) {
            return Err(Error::usage(format!(
                "label `{label}` is not in the {} inventory",
                task.slug()
            )));
        }
        *counts.entry(label).or_default() += 1;
    }
    let classes: Vec<String> =
        inventory.iter().filter(|c| counts.contains_key(c.as_str())).cloned().collect();
    if classes.len() < 2 {
        return Err(Error::precondition(format!(
            "signature training needs >= 2 classes, found {}",
            classes.len()
        )));
    }
    for class in &classes {
        let n = counts[class.as_str()];
        if n < MIN_CLASS_SAMPLES {
            return Err(Error::precondition(format!(
                "class `{class}` has {n} samples, need >= {MIN_CLASS_SAMPLES}"
            )));
        }
    }
    let train_items: Vec<TrainItem> = items
        .iter()
        .map(|(audio, label)| TrainItem {
            input: Arc::clone(audio),
            class: classes.iter().position(|c| c == label).expect("validated"),
        })
        .collect();
    let mut net = EmbedNet::new(
        EncoderConfig::signature(),
        SIGNATURE_EMB_DIM,
        classes,
        SIGNATURE_SCALE,
        SIGNATURE_MARGIN,
        config.seed,
    )?;
    let graph = net.train_graph()?;
    let num_classes = net.num_classes();
    let mut params = std::mem::take(&mut net.params);
    let report = train::train(
        &graph,
        &mut params,
        &train_items,
        num_classes,
        config,
        BatchScheme::Stratified { per_class },
    )?;
    net.params = params;
    Ok((SignatureNet { net, task }, report))
}

/// A 10-dimensional attack signature with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureRecord {
    pub utterance_id: String,
    pub task: LabelTask,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Embedding from the first affine transform after pooling; the class head
/// is never applied.
pub fn extract_signature(net: &SignatureNet, wave: &Waveform) -> Result<Vec<f64>> {
    net.net.embedding(wave)
}

/// Softmax posteriors over the margin-free head logits plus the argmax class.
pub fn classify_by_logits(net: &SignatureNet, wave: &Waveform) -> Result<(String, Vec<f64>)> {
    let logits = net.net.logits(wave)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let posteriors: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let pred = net.classes()[argmax(&logits)].clone();
    Ok((pred, posteriors))
}

/// JSONL signature dump.
pub fn save_signatures(path: &Path, records: &[SignatureRecord]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_signatures(path: &Path) -> Result<Vec<SignatureRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| {
        Error::format(format!("cannot open signature dump {}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("signature line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{sample_hyperparams, AttackRecord};
    use crate::net::waveform_tensor;
    use crate::signal::Lp;
    use crate::synth::{make_dataset, DatasetConfig};

    fn fake_record(
        algorithm: AttackAlgorithm,
        threat: Lp,
        utt: &str,
        speaker: &str,
        success: bool,
        snr: f64,
    ) -> AttackRecord {
        let spec = sample_hyperparams(algorithm, threat, 1).unwrap();
        AttackRecord {
            utterance_id: utt.into(),
            base_speaker: speaker.into(),
            spec,
            success,
            achieved_norm: success.then_some(0.001),
            snr_db: success.then_some(snr),
            snr_bin: success.then(|| crate::signal::snr_bin(snr)),
            audio_path: success.then(|| format!("x/{utt}.wav")),
            trial: None,
        }
    }

    fn corpus() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_dataset(&DatasetConfig {
            num_speakers: 10,
            utts_per_speaker: 10,
            seed: 2,
            out_dir: dir.path().to_path_buf(),
            duration_s: 1.0,
        })
        .unwrap();
        (dir, manifest)
    }

    #[test]
    fn class_inventories_match_report_tables() {
        assert_eq!(
            LabelTask::AlgorithmThreat.class_inventory(),
            [
                "Benign",
                "CW-L0",
                "CW-L2",
                "CW-Linf",
                "FGSM",
                "Iter-FGSM",
                "PGD-L1",
                "PGD-L2",
                "PGD-Linf"
            ]
        );
        assert_eq!(LabelTask::Threat.class_inventory(), ["Benign", "L0", "L1", "L2", "Linf"]);
        assert_eq!(
            LabelTask::Snr.class_inventory(),
            ["Benign", "0", "10", "20", "30", "40", "50", "60"]
        );
    }

    #[test]
    fn labels_rejects_failures_and_sets_unknown_aside() {
        let (dir, manifest) = corpus();
        let ids: Vec<String> =
            manifest.entries.iter().map(|e| e.utterance_id.clone()).collect();
        let records = vec![
            fake_record(AttackAlgorithm::Fgsm, Lp::LInf, &ids[0], "s", true, 25.0),
            fake_record(AttackAlgorithm::Cw, Lp::L2, &ids[1], "s", true, 41.0),
            fake_record(AttackAlgorithm::Pgd, Lp::L2, &ids[2], "s", false, 0.0),
        ];
        let attacks = AttackManifest { records, root: dir.path().to_path_buf() };
        let data =
            make_labels(&attacks, &manifest, LabelTask::AlgorithmThreat, &[AttackAlgorithm::Cw])
                .unwrap();
        assert_eq!(data.rejected, 1);
        assert_eq!(data.unknown.len(), 1);
        assert_eq!(data.unknown[0].label, "CW-L2");
        // 100 benign + 1 FGSM split across train/heldout
        let total = data.train.len() + data.heldout.len();
        assert_eq!(total, 101);
        assert!(data.train.iter().chain(&data.heldout).all(|u| u.label != "CW-L2"));
        // Benign rows are labeled benign.
        assert!(data.train.iter().filter(|u| !u.attacked).all(|u| u.label == "Benign"));
    }

    #[test]
    fn snr_task_labels_use_bins() {
        let (dir, manifest) = corpus();
        let id = manifest.entries[0].utterance_id.clone();
        let records =
            vec![fake_record(AttackAlgorithm::Pgd, Lp::LInf, &id, "s", true, 33.0)];
        let attacks = AttackManifest { records, root: dir.path().to_path_buf() };
        let data = make_labels(&attacks, &manifest, LabelTask::Snr, &[]).unwrap();
        let attacked: Vec<&LabeledUtterance> =
            data.train.iter().chain(&data.heldout).filter(|u| u.attacked).collect();
        assert_eq!(attacked.len(), 1);
        assert_eq!(attacked[0].label, "30");
    }

    #[test]
    fn training_rejects_single_class_and_sparse_classes() {
        let (_dir, manifest) = corpus();
        let wave = manifest.load_audio(&manifest.entries[0]).unwrap();
        let audio = Arc::new(waveform_tensor(&wave));
        let config = TrainConfig { epochs: 1, lr: 1e-3, batch: 4, seed: 0 };
        let single: Vec<(Arc<Tensor>, String)> =
            (0..12).map(|_| (Arc::clone(&audio), "Benign".to_string())).collect();
        assert!(matches!(
            train_signature_net(&single, LabelTask::AlgorithmThreat, &config, 4),
            Err(Error::Precondition(_))
        ));
        let mut sparse = single.clone();
        for _ in 0..3 {
            sparse.push((Arc::clone(&audio), "FGSM".to_string()));
        }
        let err =
            train_signature_net(&sparse, LabelTask::AlgorithmThreat, &config, 4).unwrap_err();
        assert!(err.to_string().contains("FGSM"), "{err}");
    }

    #[test]
    fn trains_extracts_and_classifies() {
        let (_dir, manifest) = corpus();
        // Two synthetic classes: clean audio vs audio with heavy uniform
        // noise, 12 samples each.
        let mut items: Vec<(Arc<Tensor>, String)> = Vec::new();
        use rand::Rng;
        let mut rng = crate::seed::rng_from_seed(1);
        for (i, entry) in manifest.entries.iter().take(24).enumerate() {
            let wave = manifest.load_audio(entry).unwrap();
            if i % 2 == 0 {
                items.push((Arc::new(waveform_tensor(&wave)), "Benign".into()));
            } else {
                let noisy: Vec<f64> = wave
                    .samples()
                    .iter()
                    .map(|v| (v + rng.gen_range(-0.15..0.15)).clamp(-1.0, 1.0))
                    .collect();
                let noisy = Waveform::new("n", noisy).unwrap();
                items.push((Arc::new(waveform_tensor(&noisy)), "FGSM".into()));
            }
        }
        let config = TrainConfig { epochs: 25, lr: 3e-3, batch: 8, seed: 3 };
        let (net, report) =
            train_signature_net(&items, LabelTask::AlgorithmThreat, &config, 12).unwrap();
        assert_eq!(net.classes(), ["Benign", "FGSM"]);
        assert!(report.epochs.last().unwrap().accuracy > 0.75);

        let wave = manifest.load_audio(&manifest.entries[0]).unwrap();
        let sig = extract_signature(&net, &wave).unwrap();
        assert_eq!(sig.len(), SIGNATURE_EMB_DIM);
        let sig2 = extract_signature(&net, &wave).unwrap();
        assert_eq!(sig, sig2);

        let (pred, post) = classify_by_logits(&net, &wave).unwrap();
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(net.classes().contains(&pred));

        // Determinism of the whole training run.
        let (net2, _) =
            train_signature_net(&items, LabelTask::AlgorithmThreat, &config, 12).unwrap();
        assert_eq!(net.net.params, net2.net.params);

        // Checkpoint round trip.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.ckpt");
        net.save(&path).unwrap();
        let loaded = SignatureNet::load(&path).unwrap();
        assert_eq!(loaded.task, LabelTask::AlgorithmThreat);
        assert_eq!(extract_signature(&loaded, &wave).unwrap(), sig);
    }

    #[test]
    fn signature_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sigs.jsonl");
        let records = vec![SignatureRecord {
            utterance_id: "pgd-l2:utt".into(),
            task: LabelTask::Threat,
            label: "L2".into(),
            vector: vec![0.1; 10],
        }];
        save_signatures(&path, &records).unwrap();
        assert_eq!(load_signatures(&path).unwrap(), records);
    }
}
