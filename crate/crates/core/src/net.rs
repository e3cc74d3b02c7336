//! Shared embedding-network architecture.
//!
//! Both the victim speaker model and the attack-signature extractors use the
//! same family: a small 1-D convolutional residual stack on the raw waveform,
//! mean/std pooling over time, an affine embedding layer, and a cosine
//! classification head (additive angular margin during training). The
//! embedding is the output of the first affine transform after pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{infer, GraphSpec, Layer, ShapeKind};
use crate::seed::rng_from_seed;
use crate::signal::Waveform;
use crate::tensor::{ParamStore, Tensor};

/// Channel/kernel plan for the convolutional frame encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels after the waveform-framing conv.
    pub c0: usize,
    /// Channels in the downsampling conv.
    pub c1: usize,
    /// Channels in the residual conv.
    pub c2: usize,
    /// Kernel and stride of the framing conv.
    pub k0: usize,
    pub s0: usize,
}

impl EncoderConfig {
    /// Encoder used by the victim speaker model.
    pub fn victim() -> Self {
        EncoderConfig { c0: 12, c1: 16, c2: 16, k0: 48, s0: 32 }
    }

    /// Slightly narrower encoder used by signature extractors.
    pub fn signature() -> Self {
        EncoderConfig { c0: 10, c1: 14, c2: 14, k0: 48, s0: 32 }
    }

    /// Pooled feature dimension (mean + std per channel).
    pub fn pooled_dim(&self) -> usize {
        2 * self.c2
    }

    fn layers(&self) -> Vec<Layer> {
        vec![
            Layer::Conv1d {
                name: "enc0".into(),
                in_ch: 1,
                out_ch: self.c0,
                kernel: self.k0,
                stride: self.s0,
                pad: 0,
                residual: false,
                frozen: false,
            },
            Layer::Relu,
            Layer::Conv1d {
                name: "enc1".into(),
                in_ch: self.c0,
                out_ch: self.c1,
                kernel: 5,
                stride: 4,
                pad: 2,
                residual: false,
                frozen: false,
            },
            Layer::Relu,
            Layer::Conv1d {
                name: "enc2".into(),
                in_ch: self.c1,
                out_ch: self.c2,
                kernel: 3,
                stride: 1,
                pad: 1,
                residual: true,
                frozen: false,
            },
            Layer::Relu,
            Layer::MeanStdPool,
        ]
    }
}

/// Embedding network with a class head: encoder + pooling + affine embedding
/// + cosine head. Immutable once trained; cheap to share across workers.
#[derive(Debug, Clone)]
pub struct EmbedNet {
    pub encoder: EncoderConfig,
    pub emb_dim: usize,
    /// Class label strings in head-row order.
    pub classes: Vec<String>,
    pub scale: f64,
    pub margin: f64,
    pub params: ParamStore,
    pub train_seed: u64,
}

impl EmbedNet {
    pub fn new(
        encoder: EncoderConfig,
        emb_dim: usize,
        classes: Vec<String>,
        scale: f64,
        margin: f64,
        init_seed: u64,
    ) -> Result<Self> {
        let mut net = EmbedNet {
            encoder,
            emb_dim,
            classes,
            scale,
            margin,
            params: ParamStore::new(),
            train_seed: init_seed,
        };
        net.params = init_params(&net.train_graph()?, init_seed)?;
        Ok(net)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn base_layers(&self) -> Vec<Layer> {
        let mut layers = self.encoder.layers();
        layers.push(Layer::Affine {
            name: "embed".into(),
            in_dim: self.encoder.pooled_dim(),
            out_dim: self.emb_dim,
            frozen: false,
        });
        layers
    }

    /// Encoder through the embedding affine; `infer` on this yields the
    /// embedding vector.
    pub fn embed_graph(&self) -> Result<GraphSpec> {
        GraphSpec::new(ShapeKind::Frames { channels: 1 }, self.base_layers())
    }

    /// Training graph: angular-margin head + cross-entropy.
    pub fn train_graph(&self) -> Result<GraphSpec> {
        let mut layers = self.base_layers();
        layers.push(Layer::AamHead {
            name: "head".into(),
            classes: self.num_classes(),
            emb_dim: self.emb_dim,
            scale: self.scale,
            margin: self.margin,
            frozen: false,
        });
        layers.push(Layer::CrossEntropy);
        GraphSpec::new(ShapeKind::Frames { channels: 1 }, layers)
    }

    /// Deployment graph: plain scaled-cosine head + cross-entropy. The loss
    /// node is ignored by `infer` and used by attacks as their objective.
    pub fn infer_graph(&self) -> Result<GraphSpec> {
        let mut layers = self.base_layers();
        layers.push(Layer::CosineHead {
            name: "head".into(),
            classes: self.num_classes(),
            emb_dim: self.emb_dim,
            scale: self.scale,
            frozen: false,
        });
        layers.push(Layer::CrossEntropy);
        GraphSpec::new(ShapeKind::Frames { channels: 1 }, layers)
    }

    /// Deployment graph ending in a class hinge (margin-to-runner-up) loss.
    pub fn hinge_graph(&self, kappa: f64) -> Result<GraphSpec> {
        let mut layers = self.base_layers();
        layers.push(Layer::CosineHead {
            name: "head".into(),
            classes: self.num_classes(),
            emb_dim: self.emb_dim,
            scale: self.scale,
            frozen: false,
        });
        layers.push(Layer::Hinge { kappa, threshold: 0.0 });
        GraphSpec::new(ShapeKind::Frames { channels: 1 }, layers)
    }

    /// Margin-free logits for a waveform.
    pub fn logits(&self, wave: &Waveform) -> Result<Vec<f64>> {
        let out = infer(&self.infer_graph()?, &self.params, &waveform_tensor(wave))?;
        Ok(out.into_values())
    }

    /// Embedding from the first affine transform after pooling.
    pub fn embedding(&self, wave: &Waveform) -> Result<Vec<f64>> {
        let out = infer(&self.embed_graph()?, &self.params, &waveform_tensor(wave))?;
        Ok(out.into_values())
    }
}

/// `[1, T]` tensor view of a waveform.
pub fn waveform_tensor(wave: &Waveform) -> Tensor {
    Tensor::new(vec![1, wave.len()], wave.samples().to_vec()).expect("waveform tensor")
}

/// Seeded parameter initialization: fan-in scaled normal weights, zero biases.
pub fn init_params(graph: &GraphSpec, seed: u64) -> Result<ParamStore> {
    let mut rng = rng_from_seed(seed);
    let mut params = ParamStore::new();
    let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                // Box-Muller keeps the dependency surface small here.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                std * (-2.0 * u1.ln()).sqrt() * u2.cos()
            })
            .collect();
        Tensor::new(shape, v).expect("init tensor")
    };
    for layer in &graph.layers {
        match layer {
            Layer::Conv1d { name, in_ch, out_ch, kernel, .. } => {
                let fan_in = (in_ch * kernel) as f64;
                params.insert(
                    format!("{name}.w"),
                    normal(vec![*out_ch, *in_ch, *kernel], (2.0 / fan_in).sqrt()),
                )?;
                params.insert(format!("{name}.b"), Tensor::zeros(vec![*out_ch]))?;
            }
            Layer::Affine { name, in_dim, out_dim, .. } => {
                params.insert(
                    format!("{name}.w"),
                    normal(vec![*out_dim, *in_dim], (2.0 / *in_dim as f64).sqrt()),
                )?;
                params.insert(format!("{name}.b"), Tensor::zeros(vec![*out_dim]))?;
            }
            Layer::CosineHead { name, classes, emb_dim, .. }
            | Layer::AamHead { name, classes, emb_dim, .. } => {
                params.insert(format!("{name}.w"), normal(vec![*classes, *emb_dim], 1.0))?;
            }
            _ => {}
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_speaker, synth_utterance};

    #[test]
    fn embedding_dim_follows_config() {
        let net = EmbedNet::new(
            EncoderConfig::signature(),
            10,
            vec!["a".into(), "b".into()],
            30.0,
            0.2,
            1,
        )
        .unwrap();
        let wave = synth_utterance(&synth_speaker(0), 0, 1.0).unwrap();
        let emb = net.embedding(&wave).unwrap();
        assert_eq!(emb.len(), 10);
        let logits = net.logits(&wave).unwrap();
        assert_eq!(logits.len(), 2);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mk = |seed| {
            EmbedNet::new(
                EncoderConfig::victim(),
                32,
                vec!["a".into(), "b".into(), "c".into()],
                30.0,
                0.3,
                seed,
            )
            .unwrap()
        };
        assert_eq!(mk(4).params, mk(4).params);
        assert_ne!(mk(4).params, mk(5).params);
    }
}
