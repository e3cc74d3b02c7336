//! What an attack optimizes against: a differentiable loss to ascend, a
//! margin function for minimum-perturbation objectives, and the deployed
//! decision rule that defines success.

use crate::error::Result;
use crate::graph::{grad_input_scaled, GraphSpec, Label, Layer, ShapeKind};
use crate::net::waveform_tensor;
use crate::signal::Waveform;
use crate::tensor::{ParamStore, Tensor};
use crate::train::argmax;
use crate::victim::VictimModel;

/// Margin hinge graphs use an effectively infinite kappa so the hinge stays
/// active and the backward pass returns the raw margin gradient.
const ALWAYS_ACTIVE_KAPPA: f64 = 1e9;

/// One evaluation of the attack surface at a candidate input.
pub struct MarginEval {
    /// Margin `m`: positive while the victim still decides correctly. The
    /// attack hinge is `f = max(m + kappa, 0)`; `f <= 0` at `kappa = 0`
    /// exactly when the decision flipped.
    pub margin: f64,
    /// Gradient of the margin with respect to the input samples.
    pub grad: Vec<f64>,
    /// Deployed decision differs from the true label.
    pub adversarial: bool,
}

/// A victim decision surface an attack can query.
pub trait AttackObjective: Sync {
    /// Cross-entropy-style loss and its input gradient (ascended by the
    /// gradient-sign family).
    fn loss_grad(&self, x: &Waveform) -> Result<(f64, Vec<f64>)>;

    /// Margin, margin gradient and decision at a candidate.
    fn margin_eval(&self, x: &Waveform) -> Result<MarginEval>;

    /// Deployed decision differs from the true label.
    fn is_adversarial(&self, x: &Waveform) -> Result<bool> {
        Ok(self.margin_eval(x)?.adversarial)
    }
}

/// Untargeted attack on the closed-set speaker classifier: push the true
/// speaker's logit below the best rival.
pub struct ClassificationObjective<'a> {
    model: &'a VictimModel,
    true_class: usize,
    loss_graph: GraphSpec,
    hinge_graph: GraphSpec,
}

impl<'a> ClassificationObjective<'a> {
    pub fn new(model: &'a VictimModel, true_class: usize) -> Result<Self> {
        Ok(ClassificationObjective {
            model,
            true_class,
            loss_graph: model.net.infer_graph()?,
            hinge_graph: model.net.hinge_graph(ALWAYS_ACTIVE_KAPPA)?,
        })
    }
}

impl AttackObjective for ClassificationObjective<'_> {
    fn loss_grad(&self, x: &Waveform) -> Result<(f64, Vec<f64>)> {
        let (loss, g) = grad_input_scaled(
            &self.loss_graph,
            &self.model.net.params,
            &waveform_tensor(x),
            Label::Class(self.true_class),
            1.0,
        )?;
        Ok((loss, g.into_values()))
    }

    fn margin_eval(&self, x: &Waveform) -> Result<MarginEval> {
        let label = Label::Class(self.true_class);
        let input = waveform_tensor(x);
        let (hinge_loss, grad, cache) = crate::graph::loss_and_grad_input(
            &self.hinge_graph,
            &self.model.net.params,
            &input,
            label,
        )?;
        let logits = cache.loss_input().values();
        let adversarial = argmax(logits) != self.true_class;
        Ok(MarginEval {
            margin: hinge_loss - ALWAYS_ACTIVE_KAPPA,
            grad: grad.into_values(),
            adversarial,
        })
    }
}

/// Attack on a speaker-verification trial: drive the cosine score across the
/// operating threshold, in whichever direction flips the decision.
pub struct VerificationObjective {
    params: ParamStore,
    loss_graph: GraphSpec,
    hinge_graph: GraphSpec,
    target: bool,
}

impl VerificationObjective {
    /// `theta_score` is the decision threshold mapped back into cosine-score
    /// space through the calibration.
    pub fn new(
        model: &VictimModel,
        enroll_embedding: &[f64],
        theta_score: f64,
        target: bool,
    ) -> Result<Self> {
        // Base layers produce the test embedding; a one-class cosine head
        // against the enrollment embedding yields the verification score,
        // and a frozen shift recenters it at the threshold.
        let mut params = model.net.params.clone();
        params.insert(
            "enroll.w",
            Tensor::new(vec![1, enroll_embedding.len()], enroll_embedding.to_vec())?,
        )?;
        params.insert("shift.w", Tensor::new(vec![1, 1], vec![1.0])?)?;
        params.insert("shift.b", Tensor::new(vec![1], vec![-theta_score])?)?;

        let mut base = model.net.embed_graph()?.layers;
        base.push(Layer::CosineHead {
            name: "enroll".into(),
            classes: 1,
            emb_dim: enroll_embedding.len(),
            scale: 1.0,
            frozen: true,
        });
        base.push(Layer::Affine { name: "shift".into(), in_dim: 1, out_dim: 1, frozen: true });
        let mut loss_layers = base.clone();
        loss_layers.push(Layer::CrossEntropy);
        let mut hinge_layers = base;
        hinge_layers.push(Layer::Hinge { kappa: ALWAYS_ACTIVE_KAPPA, threshold: 0.0 });
        Ok(VerificationObjective {
            params,
            loss_graph: GraphSpec::new(ShapeKind::Frames { channels: 1 }, loss_layers)?,
            hinge_graph: GraphSpec::new(ShapeKind::Frames { channels: 1 }, hinge_layers)?,
            target,
        })
    }
}

impl AttackObjective for VerificationObjective {
    fn loss_grad(&self, x: &Waveform) -> Result<(f64, Vec<f64>)> {
        let (loss, g) = grad_input_scaled(
            &self.loss_graph,
            &self.params,
            &waveform_tensor(x),
            Label::Trial { target: self.target },
            1.0,
        )?;
        Ok((loss, g.into_values()))
    }

    fn margin_eval(&self, x: &Waveform) -> Result<MarginEval> {
        let (hinge_loss, grad, cache) = crate::graph::loss_and_grad_input(
            &self.hinge_graph,
            &self.params,
            &waveform_tensor(x),
            Label::Trial { target: self.target },
        )?;
        // The hinge input is the threshold-centered score.
        let z = cache.loss_input().values()[0];
        let decision_target = z >= 0.0;
        Ok(MarginEval {
            margin: hinge_loss - ALWAYS_ACTIVE_KAPPA,
            grad: grad.into_values(),
            adversarial: decision_target != self.target,
        })
    }
}
