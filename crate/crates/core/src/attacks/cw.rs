//! Minimum-perturbation attacks: distance-plus-hinge objective
//! `C(delta) = D(delta) + c * f(x + delta)` minimized with Adam, with an
//! outer binary search over the hinge weight `c`.
//!
//! Modes: L2 (distance is the Euclidean norm), Linf (soft per-sample cap
//! `sum max(|d_i| - tau, 0)` with a shrinking tau schedule), and L0
//! (repeated L2 solves, progressively freezing the least useful samples).

use crate::error::{Error, Result};
use crate::signal::Waveform;

use super::objective::AttackObjective;

/// Threat-model flavor of the minimum-perturbation attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CwMode {
    L2,
    L0,
    LInf,
}

/// Hyperparameters, typically drawn from the campaign distributions.
#[derive(Debug, Clone, Copy)]
pub struct CwConfig {
    pub mode: CwMode,
    pub kappa: f64,
    pub learning_rate: f64,
    pub num_iters: usize,
    pub search_steps: usize,
}

/// Bounds and start of the binary search over the hinge weight.
const C_START: f64 = 1.0;
const C_LO: f64 = 1e-3;
const C_HI: f64 = 1e3;
/// Tau shrink factor and round cap for the Linf schedule.
const TAU_SHRINK: f64 = 0.9;
const MAX_TAU_ROUNDS: usize = 6;
/// Outer round cap and per-round freeze fraction for L0.
const MAX_L0_ROUNDS: usize = 8;
const L0_FREEZE_FRACTION: f64 = 0.2;

/// Attack outcome; `adversarial` is `None` when no iterate ever flipped the
/// decision (the campaign filters such records out).
#[derive(Debug, Clone)]
pub struct CwReport {
    pub adversarial: Option<Waveform>,
    /// Distance term of the returned iterate, in the mode's own D.
    pub d_value: Option<f64>,
    /// Frozen-coordinate counts per outer round (L0 mode only).
    pub frozen_history: Vec<usize>,
}

/// Distance term D of the objective.
fn d_term(delta: &[f64], mode: CwMode, tau: f64) -> f64 {
    match mode {
        CwMode::L2 | CwMode::L0 => delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        CwMode::LInf => delta.iter().map(|v| (v.abs() - tau).max(0.0)).sum(),
    }
}

fn d_grad(delta: &[f64], mode: CwMode, tau: f64) -> Vec<f64> {
    match mode {
        CwMode::L2 | CwMode::L0 => {
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                vec![0.0; delta.len()]
            } else {
                delta.iter().map(|v| v / norm).collect()
            }
        }
        CwMode::LInf => delta
            .iter()
            .map(|v| if v.abs() > tau { v.signum() } else { 0.0 })
            .collect(),
    }
}

/// Hinge term `f = max(m + kappa, 0)`; the attack succeeds exactly when the
/// kappa-free hinge is at zero.
pub fn f_term(margin: f64, kappa: f64) -> f64 {
    (margin + kappa).max(0.0)
}

/// Full objective value `D + c * f` at a candidate perturbation.
pub fn cw_objective(
    objective: &dyn AttackObjective,
    x: &Waveform,
    delta: &[f64],
    c: f64,
    kappa: f64,
    mode: CwMode,
    tau: f64,
) -> Result<f64> {
    let adv = apply(x, delta)?;
    let eval = objective.margin_eval(&adv)?;
    Ok(d_term(delta, mode, tau) + c * f_term(eval.margin, kappa))
}

fn apply(x: &Waveform, delta: &[f64]) -> Result<Waveform> {
    let samples: Vec<f64> =
        x.samples().iter().zip(delta).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect();
    Waveform::new(x.utterance_id.clone(), samples)
}

struct InnerSolution {
    delta: Vec<f64>,
    d_value: f64,
}

/// Adam descent on `D + c*f` from a warm start; returns the successful
/// iterate with the smallest D, if any iterate flipped the decision.
#[allow(clippy::too_many_arguments)]
fn cw_inner(
    objective: &dyn AttackObjective,
    x: &Waveform,
    c: f64,
    cfg: &CwConfig,
    mode: CwMode,
    tau: f64,
    delta: &mut Vec<f64>,
    frozen: Option<&[bool]>,
) -> Result<Option<InnerSolution>> {
    let n = x.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut best: Option<InnerSolution> = None;
    let mask = |d: &mut [f64]| {
        if let Some(f) = frozen {
            for (dv, &fr) in d.iter_mut().zip(f) {
                if fr {
                    *dv = 0.0;
                }
            }
        }
    };
    mask(delta);
    for it in 0..=cfg.num_iters {
        let adv = apply(x, delta)?;
        // Effective perturbation after the audio clamp.
        let eff: Vec<f64> = adv.samples().iter().zip(x.samples()).map(|(a, b)| a - b).collect();
        let eval = objective.margin_eval(&adv)?;
        if eval.adversarial {
            let d = d_term(&eff, mode, tau);
            if best.as_ref().is_none_or(|b| d < b.d_value) {
                best = Some(InnerSolution { delta: eff.clone(), d_value: d });
            }
        }
        if it == cfg.num_iters {
            break;
        }
        let f_active = eval.margin + cfg.kappa > 0.0;
        let dg = d_grad(&eff, mode, tau);
        let t = (it + 1) as i32;
        for i in 0..n {
            let g = dg[i] + if f_active { c * eval.grad[i] } else { 0.0 };
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / (1.0 - b1.powi(t));
            let vhat = v[i] / (1.0 - b2.powi(t));
            delta[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + eps);
        }
        mask(delta);
        for (d, xv) in delta.iter_mut().zip(x.samples()) {
            *d = (*xv + *d).clamp(-1.0, 1.0) - *xv;
        }
    }
    Ok(best)
}

/// L2 attack with binary search over c. Returns the best success and the
/// hinge weight that produced it.
fn cw_l2_search(
    objective: &dyn AttackObjective,
    x: &Waveform,
    cfg: &CwConfig,
) -> Result<Option<(InnerSolution, f64)>> {
    let (mut lo, mut hi) = (C_LO, C_HI);
    let mut c = C_START;
    let mut best: Option<(InnerSolution, f64)> = None;
    for _ in 0..cfg.search_steps {
        let mut delta = vec![0.0; x.len()];
        let sol = cw_inner(objective, x, c, cfg, CwMode::L2, 0.0, &mut delta, None)?;
        match sol {
            Some(s) => {
                if best.as_ref().is_none_or(|(b, _)| s.d_value < b.d_value) {
                    best = Some((s, c));
                }
                hi = c;
            }
            None => lo = c,
        }
        c = (lo * hi).sqrt();
    }
    Ok(best)
}

/// Runs the configured minimum-perturbation attack.
pub fn cw_attack(
    objective: &dyn AttackObjective,
    x: &Waveform,
    cfg: &CwConfig,
) -> Result<CwReport> {
    if cfg.learning_rate <= 0.0 || cfg.num_iters == 0 || cfg.search_steps == 0 {
        return Err(Error::precondition("CW needs positive learning rate and iterations"));
    }
    if !(0.0..=3.0).contains(&cfg.kappa) {
        return Err(Error::precondition("confidence kappa outside [0, 3]"));
    }
    match cfg.mode {
        CwMode::L2 => {
            let best = cw_l2_search(objective, x, cfg)?;
            Ok(match best {
                Some((s, _)) => CwReport {
                    adversarial: Some(apply(x, &s.delta)?),
                    d_value: Some(s.d_value),
                    frozen_history: vec![],
                },
                None => CwReport { adversarial: None, d_value: None, frozen_history: vec![] },
            })
        }
        CwMode::LInf => {
            let Some((base, c)) = cw_l2_search(objective, x, cfg)? else {
                return Ok(CwReport { adversarial: None, d_value: None, frozen_history: vec![] });
            };
            let mut best_delta = base.delta.clone();
            let mut best_linf = max_abs(&best_delta);
            let mut tau = best_linf;
            let mut delta = base.delta;
            for _ in 0..MAX_TAU_ROUNDS {
                if tau < 1e-9 {
                    break;
                }
                let sol =
                    cw_inner(objective, x, c, cfg, CwMode::LInf, tau, &mut delta, None)?;
                match sol {
                    Some(s) => {
                        let linf = max_abs(&s.delta);
                        if linf < best_linf {
                            best_linf = linf;
                            best_delta = s.delta.clone();
                        }
                        if linf < tau {
                            tau *= TAU_SHRINK;
                            delta = s.delta;
                        } else {
                            break;
                        }
                    }
                    None => break,
                }
            }
            Ok(CwReport {
                adversarial: Some(apply(x, &best_delta)?),
                d_value: Some(best_linf),
                frozen_history: vec![],
            })
        }
        CwMode::L0 => {
            let Some((base, c)) = cw_l2_search(objective, x, cfg)? else {
                return Ok(CwReport { adversarial: None, d_value: None, frozen_history: vec![] });
            };
            let n = x.len();
            let mut frozen = vec![false; n];
            let mut last = base;
            let mut history = vec![0usize];
            for _ in 0..MAX_L0_ROUNDS {
                // Rank active samples by |delta_i * grad_i| at the current
                // success point; the cheapest-to-lose ones get frozen.
                let eval = objective.margin_eval(&apply(x, &last.delta)?)?;
                let mut scored: Vec<(f64, usize)> = (0..n)
                    .filter(|&i| !frozen[i])
                    .map(|i| ((last.delta[i] * eval.grad[i]).abs(), i))
                    .collect();
                let active = scored.len();
                let freeze_n = ((active as f64 * L0_FREEZE_FRACTION) as usize).max(1);
                if freeze_n >= active {
                    break;
                }
                scored.sort_by(|a, b| a.0.total_cmp(&b.0));
                for &(_, i) in scored.iter().take(freeze_n) {
                    frozen[i] = true;
                }
                history.push(frozen.iter().filter(|&&f| f).count());
                let mut delta = last.delta.clone();
                let sol = cw_inner(objective, x, c, cfg, CwMode::L2, 0.0, &mut delta, Some(&frozen))?;
                match sol {
                    Some(s) => last = s,
                    None => break,
                }
            }
            Ok(CwReport {
                adversarial: Some(apply(x, &last.delta)?),
                d_value: Some(last.d_value),
                frozen_history: history,
            })
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}
