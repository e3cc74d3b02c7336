//! The attacked systems: a closed-set speaker classifier and a cosine-scoring
//! speaker verifier trained on the synthetic corpus.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::CalibrationMap;
use crate::net::{waveform_tensor, EmbedNet, EncoderConfig};
use crate::signal::Waveform;
use crate::synth::{DatasetManifest, Split};
use crate::train::{self, argmax, BatchScheme, TrainConfig, TrainItem, TrainReport};

pub const VICTIM_EMB_DIM: usize = 32;
pub const VICTIM_MARGIN: f64 = 0.3;
pub const VICTIM_SCALE: f64 = 30.0;

/// Default decision prior for speaker verification.
pub const P_TARGET: f64 = 0.05;

/// Decision threshold in LLR space: `logit(p_target)`.
pub fn llr_threshold(p_target: f64) -> f64 {
    (p_target / (1.0 - p_target)).ln()
}

/// A verification trial: does `test` come from the speaker enrolled by
/// `enroll`?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationTrial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

impl VerificationTrial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, target: bool) -> Result<Self> {
        let (enroll, test) = (enroll.into(), test.into());
        if enroll == test {
            return Err(Error::precondition("trial cannot pair an utterance with itself"));
        }
        Ok(VerificationTrial { enroll, test, target })
    }
}

/// Accept/reject outcome of a verification trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Target,
    Nontarget,
}

/// Trained speaker model. Immutable after training; safe to share across
/// parallel attack workers.
#[derive(Debug, Clone)]
pub struct VictimModel {
    pub net: EmbedNet,
}

impl VictimModel {
    pub fn speakers(&self) -> &[String] {
        &self.net.classes
    }

    /// Margin-free logits plus the argmax speaker.
    pub fn classify(&self, x: &Waveform) -> Result<(Vec<f64>, usize)> {
        let logits = self.net.logits(x)?;
        let pred = argmax(&logits);
        Ok((logits, pred))
    }

    pub fn speaker_index(&self, speaker_id: &str) -> Result<usize> {
        self.net
            .classes
            .iter()
            .position(|s| s == speaker_id)
            .ok_or_else(|| Error::precondition(format!("unknown speaker `{speaker_id}`")))
    }

    pub fn embedding(&self, x: &Waveform) -> Result<Vec<f64>> {
        self.net.embedding(x)
    }

    /// Cosine similarity of the pooled embeddings of two utterances.
    pub fn cosine_verify(&self, enroll: &Waveform, test: &Waveform) -> Result<f64> {
        let a = self.net.embedding(enroll)?;
        let b = self.net.embedding(test)?;
        cosine(&a, &b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "encoder": self.net.encoder,
            "emb_dim": self.net.emb_dim,
            "classes": self.net.classes,
            "scale": self.net.scale,
            "margin": self.net.margin,
            "train_seed": self.net.train_seed,
            "layers": self.net.train_graph()?.layers,
        });
        Checkpoint::from_params("victim", meta, &self.net.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "victim" {
            return Err(Error::format(format!(
                "{}: expected a victim checkpoint, found `{}`",
                path.display(),
                ckpt.kind
            )));
        }
        let net = net_from_checkpoint(&ckpt)?;
        Ok(VictimModel { net })
    }
}

pub(crate) fn net_from_checkpoint(ckpt: &Checkpoint) -> Result<EmbedNet> {
    let meta = &ckpt.meta;
    let encoder: EncoderConfig = serde_json::from_value(meta["encoder"].clone())?;
    let classes: Vec<String> = serde_json::from_value(meta["classes"].clone())?;
    let emb_dim = meta["emb_dim"].as_u64().ok_or_else(|| Error::format("missing emb_dim"))?;
    let scale = meta["scale"].as_f64().ok_or_else(|| Error::format("missing scale"))?;
    let margin = meta["margin"].as_f64().ok_or_else(|| Error::format("missing margin"))?;
    let train_seed = meta["train_seed"].as_u64().unwrap_or(0);
    Ok(EmbedNet {
        encoder,
        emb_dim: emb_dim as usize,
        classes,
        scale,
        margin,
        params: ckpt.params()?,
        train_seed,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("embedding dims differ"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return Err(Error::numeric("cosine", "zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Applies the calibration map and decides at `logit(p_target)`. The boundary
/// itself accepts.
pub fn verify_decision(score: f64, calibration: &CalibrationMap, p_target: f64) -> Decision {
    let llr = calibration.apply(score);
    if llr >= llr_threshold(p_target) {
        Decision::Target
    } else {
        Decision::Nontarget
    }
}

/// Trains the victim on the manifest's train split.
pub fn train_victim(
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(VictimModel, TrainReport)> {
    let speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::precondition(format!(
            "victim training needs >= 2 speakers, found {}",
            speakers.len()
        )));
    }
    let mut items = Vec::new();
    for entry in manifest.split(Split::Train) {
        let wave = manifest.load_audio(entry)?;
        let class = speakers
            .iter()
            .position(|s| *s == entry.speaker_id)
            .expect("speaker from manifest");
        items.push(TrainItem { input: Arc::new(waveform_tensor(&wave)), class });
    }
    let net = EmbedNet::new(
        EncoderConfig::victim(),
        VICTIM_EMB_DIM,
        speakers,
        VICTIM_SCALE,
        VICTIM_MARGIN,
        config.seed,
    )?;
    let mut net = net;
    let graph = net.train_graph()?;
    let num_classes = net.num_classes();
    let mut params = std::mem::take(&mut net.params);
    let report =
        train::train(&graph, &mut params, &items, num_classes, config, BatchScheme::Shuffle)?;
    net.params = params;
    Ok((VictimModel { net }, report))
}

/// Accuracy of `classify` over one split of the manifest.
pub fn split_accuracy(
    model: &VictimModel,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for entry in manifest.split(split) {
        let wave = manifest.load_audio(entry)?;
        let (_, pred) = model.classify(&wave)?;
        if model.speakers()[pred] == entry.speaker_id {
            correct += 1;
        }
        total += 1;
    }
    Ok(correct as f64 / total.max(1) as f64)
}
