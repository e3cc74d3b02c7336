//! The gradient-sign attack family: FGSM, iterative FGSM, and projected
//! gradient descent with random restarts.
//!
//! All three share one step rule: ascend the loss by `alpha * sign(grad)`,
//! project back into the threat ball, clamp to valid audio. This way the
//! documented reductions (FGSM = 1-step Iter-FGSM = 1-restart zero-init
//! PGD-Linf) hold bit-exactly.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::signal::{Lp, Waveform};

use super::objective::AttackObjective;
use super::project::project_lp;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step followed by the threat-ball projection and the audio
/// validity clamp. `delta` is updated in place.
fn step_project_clamp(
    x: &[f64],
    delta: &mut [f64],
    grad: &[f64],
    alpha: f64,
    epsilon_raw: f64,
    p: Lp,
) -> Result<()> {
    for (d, g) in delta.iter_mut().zip(grad) {
        *d += alpha * sign(*g);
    }
    project_lp(delta, epsilon_raw, p)?;
    // Clamping x + delta into [-1, 1] never grows any |delta_i|, so the
    // ball constraint survives.
    for (d, xv) in delta.iter_mut().zip(x) {
        *d = (*xv + *d).clamp(-1.0, 1.0) - *xv;
    }
    Ok(())
}

fn apply(x: &Waveform, delta: &[f64]) -> Result<Waveform> {
    let samples: Vec<f64> =
        x.samples().iter().zip(delta).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect();
    Waveform::new(x.utterance_id.clone(), samples)
}

/// Single-step sign attack with budget `epsilon` (raw Linf radius).
pub fn fgsm(objective: &dyn AttackObjective, x: &Waveform, epsilon: f64) -> Result<Waveform> {
    if epsilon <= 0.0 {
        return Err(Error::precondition("epsilon must be positive"));
    }
    let (_, grad) = objective.loss_grad(x)?;
    let mut delta = vec![0.0; x.len()];
    step_project_clamp(x.samples(), &mut delta, &grad, epsilon, epsilon, Lp::LInf)?;
    apply(x, &delta)
}

/// Iterative FGSM: `num_iters` sign steps from a zero init, Linf projection
/// after every step.
pub fn iter_fgsm(
    objective: &dyn AttackObjective,
    x: &Waveform,
    epsilon: f64,
    alpha: f64,
    num_iters: usize,
) -> Result<Waveform> {
    if epsilon <= 0.0 || alpha <= 0.0 || num_iters == 0 {
        return Err(Error::precondition("epsilon, alpha and num_iters must be positive"));
    }
    let mut delta = vec![0.0; x.len()];
    for _ in 0..num_iters {
        let (_, grad) = objective.loss_grad(&apply(x, &delta)?)?;
        step_project_clamp(x.samples(), &mut delta, &grad, alpha, epsilon, Lp::LInf)?;
    }
    apply(x, &delta)
}

/// How PGD restarts are initialized.
#[derive(Debug, Clone, Copy)]
pub enum PgdInit {
    /// `count` restarts drawn uniformly inside the threat ball.
    Random { count: usize },
    /// A single restart from zero (the Iter-FGSM reduction).
    Zero,
}

/// PGD: per restart, iterate sign steps with projection; return the restart
/// whose final iterate has the highest loss.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    objective: &dyn AttackObjective,
    x: &Waveform,
    p: Lp,
    epsilon_raw: f64,
    alpha: f64,
    num_iters: usize,
    init: PgdInit,
    seed: u64,
) -> Result<(Waveform, f64)> {
    if !matches!(p, Lp::L1 | Lp::L2 | Lp::LInf) {
        return Err(Error::usage("PGD threat model must be L1, L2 or Linf"));
    }
    if epsilon_raw <= 0.0 || alpha <= 0.0 || num_iters == 0 {
        return Err(Error::precondition("epsilon, alpha and num_iters must be positive"));
    }
    let mut rng = rng_from_seed(seed);
    let restarts = match init {
        PgdInit::Random { count } => count.max(1),
        PgdInit::Zero => 1,
    };
    let mut best: Option<(Waveform, f64)> = None;
    for _ in 0..restarts {
        let mut delta = match init {
            PgdInit::Zero => vec![0.0; x.len()],
            PgdInit::Random { .. } => sample_in_ball(&mut rng, x.len(), epsilon_raw, p),
        };
        // The random init must respect valid audio too.
        for (d, xv) in delta.iter_mut().zip(x.samples()) {
            *d = (*xv + *d).clamp(-1.0, 1.0) - *xv;
        }
        for _ in 0..num_iters {
            let (_, grad) = objective.loss_grad(&apply(x, &delta)?)?;
            step_project_clamp(x.samples(), &mut delta, &grad, alpha, epsilon_raw, p)?;
        }
        let candidate = apply(x, &delta)?;
        let (loss, _) = objective.loss_grad(&candidate)?;
        if best.as_ref().is_none_or(|(_, b)| loss > *b) {
            best = Some((candidate, loss));
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Uniform sample inside the raw-radius Lp ball.
fn sample_in_ball(rng: &mut rand_chacha::ChaCha8Rng, n: usize, radius: f64, p: Lp) -> Vec<f64> {
    match p {
        Lp::LInf => (0..n).map(|_| rng.gen_range(-radius..=radius)).collect(),
        Lp::L2 => {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            let u: f64 = rng.gen_range(0.0f64..1.0);
            let scale = radius * u.powf(1.0 / n as f64) / norm;
            for a in &mut v {
                *a *= scale;
            }
            v
        }
        Lp::L1 => {
            // Exponential spacings give a uniform point on the simplex;
            // random signs and a radial factor fill the ball.
            let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum::<f64>().max(1e-300);
            let u: f64 = rng.gen_range(0.0f64..1.0);
            let r = radius * u.powf(1.0 / n as f64);
            e.iter()
                .map(|v| {
                    let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    s * r * v / total
                })
                .collect()
        }
        Lp::L0 => unreachable!("rejected above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{EmbedNet, EncoderConfig};
    use crate::signal::{lp_norm_slice, Perturbation};
    use crate::synth::{synth_speaker, synth_utterance};
    use crate::victim::VictimModel;

    use super::super::objective::ClassificationObjective;

    fn toy_model() -> VictimModel {
        // Random (untrained) weights are fine: the gradients are real.
        let net = EmbedNet::new(
            EncoderConfig::signature(),
            10,
            (0..4).map(|i| format!("s{i}")).collect(),
            30.0,
            0.0,
            9,
        )
        .unwrap();
        VictimModel { net }
    }

    fn toy_wave() -> Waveform {
        synth_utterance(&synth_speaker(1), 2, 1.0).unwrap()
    }

    #[test]
    fn fgsm_moves_every_nonzero_gradient_coordinate() {
        let model = toy_model();
        let obj = ClassificationObjective::new(&model, 0).unwrap();
        let x = toy_wave();
        let adv = fgsm(&obj, &x, 0.01).unwrap();
        let delta = Perturbation::from_pair(&x, &adv).unwrap();
        let linf = lp_norm_slice(delta.delta(), Lp::LInf, false).unwrap();
        assert!(linf <= 0.01 + 1e-12);
        assert!(linf > 0.0);
    }

    #[test]
    fn fgsm_equals_single_step_iter_fgsm() {
        let model = toy_model();
        let obj = ClassificationObjective::new(&model, 1).unwrap();
        let x = toy_wave();
        let a = fgsm(&obj, &x, 0.004).unwrap();
        let b = iter_fgsm(&obj, &x, 0.004, 0.004, 1).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn iter_fgsm_equals_zero_init_pgd_linf() {
        let model = toy_model();
        let obj = ClassificationObjective::new(&model, 2).unwrap();
        let x = toy_wave();
        let a = iter_fgsm(&obj, &x, 0.006, 0.002, 5).unwrap();
        let (b, _) = pgd(&obj, &x, Lp::LInf, 0.006, 0.002, 5, PgdInit::Zero, 0).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn fgsm_direction_is_invariant_to_loss_scale() {
        // sign(grad) ignores positive scaling, so two models whose losses
        // differ by a constant factor produce the same step; here we check
        // the cheaper internal property directly.
        let g = [0.3, -0.8, 0.0, 1.4];
        let scaled: Vec<f64> = g.iter().map(|v| v * 7.5).collect();
        let s1: Vec<f64> = g.iter().map(|v| sign(*v)).collect();
        let s2: Vec<f64> = scaled.iter().map(|v| sign(*v)).collect();
        assert_eq!(s1, s2);
    }

    #[test]
    fn pgd_returns_highest_loss_restart_and_respects_ball() {
        let model = toy_model();
        let obj = ClassificationObjective::new(&model, 0).unwrap();
        let x = toy_wave();
        for p in [Lp::L1, Lp::L2, Lp::LInf] {
            let eps = match p {
                Lp::L1 => 3.0,
                Lp::L2 => 0.5,
                _ => 0.005,
            };
            let (adv, best_loss) =
                pgd(&obj, &x, p, eps, 0.002, 4, PgdInit::Random { count: 3 }, 7).unwrap();
            let delta = Perturbation::from_pair(&x, &adv).unwrap();
            assert!(lp_norm_slice(delta.delta(), p, false).unwrap() <= eps + 1e-9);
            let (final_loss, _) = obj.loss_grad(&adv).unwrap();
            assert!((final_loss - best_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn pgd_is_reproducible_under_seed() {
        let model = toy_model();
        let obj = ClassificationObjective::new(&model, 3).unwrap();
        let x = toy_wave();
        let (a, la) =
            pgd(&obj, &x, Lp::L2, 0.4, 0.003, 3, PgdInit::Random { count: 2 }, 42).unwrap();
        let (b, lb) =
            pgd(&obj, &x, Lp::L2, 0.4, 0.003, 3, PgdInit::Random { count: 2 }, 42).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(la, lb);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = rng_from_seed(4);
        for p in [Lp::L1, Lp::L2, Lp::LInf] {
            for _ in 0..50 {
                let v = sample_in_ball(&mut rng, 20, 0.3, p);
                assert!(lp_norm_slice(&v, p, false).unwrap() <= 0.3 + 1e-12);
            }
        }
    }
}
