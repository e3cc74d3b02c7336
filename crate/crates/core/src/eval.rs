//! Evaluation machinery: row-normalized confusion matrices, equal error
//! rate, logistic score calibration, trial generation and the
//! unknown-attack detection protocol.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plda::{ClassStats, PldaModel, Preprocessor};
use crate::seed::rng_from_seed;

/// Confusion counts with ground truth in rows and predictions in columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    /// Row-normalized percentages; rows without a single sample are `None`.
    pub fn normalized(&self) -> Vec<Option<Vec<f64>>> {
        self.counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    None
                } else {
                    Some(row.iter().map(|&c| 100.0 * c as f64 / total as f64).collect())
                }
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        let total: usize = self.counts.iter().flatten().sum();
        correct as f64 / total.max(1) as f64
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// CSV with a header row; empty rows are written with empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (row, norm) in self.classes.iter().zip(self.normalized()) {
            out.push_str(row);
            match norm {
                Some(vals) => {
                    for v in vals {
                        out.push_str(&format!(",{v:.2}"));
                    }
                }
                None => {
                    for _ in &self.classes {
                        out.push(',');
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Markdown table of the row-normalized percentages.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| truth \\ pred |");
        for c in &self.classes {
            out.push_str(&format!(" {c} |"));
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &self.classes {
            out.push_str("---|");
        }
        out.push('\n');
        for (row, norm) in self.classes.iter().zip(self.normalized()) {
            out.push_str(&format!("| {row} |"));
            match norm {
                Some(vals) => {
                    for v in vals {
                        out.push_str(&format!(" {v:.1} |"));
                    }
                }
                None => {
                    for _ in &self.classes {
                        out.push_str(" - |");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Builds a confusion matrix over a fixed class list.
pub fn confusion(
    truth: &[String],
    predicted: &[String],
    classes: &[String],
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::precondition("truth/prediction length mismatch"));
    }
    let index = |label: &String| -> Result<usize> {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::usage(format!("label `{label}` not in the class list")))
    };
    let mut counts = vec![vec![0usize; classes.len()]; classes.len()];
    for (t, p) in truth.iter().zip(predicted) {
        counts[index(t)?][index(p)?] += 1;
    }
    Ok(ConfusionMatrix { classes: classes.to_vec(), counts })
}

/// Equal error rate of a detector that accepts scores `>= threshold`.
///
/// Sweeps every distinct score as a threshold and linearly interpolates
/// between the two operating points where the miss and false-alarm rates
/// cross.
pub fn eer(target_scores: &[f64], nontarget_scores: &[f64]) -> Result<f64> {
    if target_scores.is_empty() || nontarget_scores.is_empty() {
        return Err(Error::precondition("EER needs both target and nontarget scores"));
    }
    let nt = target_scores.len() as f64;
    let nn = nontarget_scores.len() as f64;
    let mut all: Vec<(f64, bool)> = target_scores
        .iter()
        .map(|&s| (s, true))
        .chain(nontarget_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Operating points at every distinct threshold, then "reject all".
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut miss_count = 0usize; // targets strictly below the threshold
    let mut fa_count = nontarget_scores.len(); // nontargets at or above it
    let mut i = 0usize;
    while i < all.len() {
        points.push((miss_count as f64 / nt, fa_count as f64 / nn));
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                miss_count += 1;
            } else {
                fa_count -= 1;
            }
            i += 1;
        }
    }
    points.push((1.0, 0.0));

    for w in points.windows(2) {
        let (m1, f1) = w[0];
        let (m2, f2) = w[1];
        if m2 >= f2 {
            // Crossing inside this segment (m1 <= f1 held before).
            let denom = (m2 - m1) - (f2 - f1);
            if denom.abs() < 1e-300 {
                return Ok(0.5 * (m1 + f1));
            }
            let s = (f1 - m1) / denom;
            return Ok(m1 + s * (m2 - m1));
        }
    }
    Ok(0.5) // unreachable for non-empty inputs
}

/// Affine map from raw scores to calibrated log-likelihood ratios.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub slope: f64,
    pub offset: f64,
}

impl CalibrationMap {
    pub fn apply(&self, score: f64) -> f64 {
        self.slope * score + self.offset
    }

    /// Raw score that maps to a given LLR.
    pub fn invert(&self, llr: f64) -> f64 {
        (llr - self.offset) / self.slope
    }
}

const CALIBRATION_SLOPE_CAP: f64 = 1e3;

/// Fits binary logistic regression on scalar scores, class-weighted to an
/// effective prior of 0.5, so the fitted affine map outputs LLRs directly.
pub fn fit_calibration(scores: &[f64], labels: &[bool]) -> Result<CalibrationMap> {
    if scores.len() != labels.len() {
        return Err(Error::precondition("score/label length mismatch"));
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::precondition("calibration needs both classes"));
    }
    let w_tar = 0.5 / n_tar as f64;
    let w_non = 0.5 / n_non as f64;
    let (mut a, mut b) = (1.0f64, 0.0f64);
    for _ in 0..100 {
        let (mut g0, mut g1) = (0.0, 0.0);
        let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            let w = if l { w_tar } else { w_non };
            let z = a * s + b;
            let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
            let r = p - if l { 1.0 } else { 0.0 };
            g0 += w * r * s;
            g1 += w * r;
            let q = (p * (1.0 - p)).max(1e-12);
            h00 += w * q * s * s;
            h01 += w * q * s;
            h11 += w * q;
        }
        if g0.abs().max(g1.abs()) < 1e-10 {
            break;
        }
        let det = h00 * h11 - h01 * h01;
        if det.abs() < 1e-300 {
            break;
        }
        let da = (h11 * g0 - h01 * g1) / det;
        let db = (h00 * g1 - h01 * g0) / det;
        a -= da;
        b -= db;
        if a.abs() > CALIBRATION_SLOPE_CAP {
            log::warn!("calibration slope capped at {CALIBRATION_SLOPE_CAP} (separable scores)");
            a = a.signum() * CALIBRATION_SLOPE_CAP;
            b = refit_offset(scores, labels, a, w_tar, w_non);
            break;
        }
        if da.abs() < 1e-12 && db.abs() < 1e-12 {
            break;
        }
    }
    if a <= 0.0 {
        log::warn!("calibration slope {a:.3e} non-positive; clamping to keep the map monotone");
        a = 1e-6;
    }
    Ok(CalibrationMap { slope: a, offset: b })
}

/// 1-D Newton on the offset alone, used once the slope has been capped.
fn refit_offset(scores: &[f64], labels: &[bool], a: f64, w_tar: f64, w_non: f64) -> f64 {
    let mut b = 0.0f64;
    for _ in 0..100 {
        let (mut g, mut h) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            let w = if l { w_tar } else { w_non };
            let z = a * s + b;
            let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
            g += w * (p - if l { 1.0 } else { 0.0 });
            h += w * (p * (1.0 - p)).max(1e-12);
        }
        let db = g / h;
        b -= db;
        if db.abs() < 1e-12 {
            break;
        }
    }
    b
}

/// One verification trial between two utterances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub same: bool,
}

/// A set of trials for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSet {
    pub task: String,
    pub trials: Vec<Trial>,
}

/// Builds balanced same/different trials from `(utterance_id, label)` pairs.
/// Never pairs an utterance with itself; deterministic under the seed.
pub fn make_attack_trials(
    labeled: &[(String, String)],
    task: &str,
    max_trials: usize,
    seed: u64,
) -> Result<TrialSet> {
    let mut by_label: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    for (id, label) in labeled {
        by_label.entry(label).or_default().push(id);
    }
    if by_label.len() < 2 {
        let counts: Vec<String> =
            by_label.iter().map(|(l, v)| format!("{l}: {}", v.len())).collect();
        return Err(Error::precondition(format!(
            "trial generation needs >= 2 classes; have {}",
            counts.join(", ")
        )));
    }
    let mut same: Vec<Trial> = Vec::new();
    let labels: Vec<&str> = by_label.keys().cloned().collect();
    for ids in by_label.values() {
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                same.push(Trial { enroll: ids[i].into(), test: ids[j].into(), same: true });
            }
        }
    }
    let mut diff: Vec<Trial> = Vec::new();
    for (i, la) in labels.iter().enumerate() {
        for lb in labels.iter().skip(i + 1) {
            for a in &by_label[la] {
                for b in &by_label[lb] {
                    diff.push(Trial { enroll: (*a).into(), test: (*b).into(), same: false });
                }
            }
        }
    }
    if same.is_empty() || diff.is_empty() {
        let counts: Vec<String> =
            by_label.iter().map(|(l, v)| format!("{l}: {}", v.len())).collect();
        return Err(Error::precondition(format!(
            "cannot build both same and different trials from class counts {}",
            counts.join(", ")
        )));
    }
    let mut rng = rng_from_seed(seed);
    let half = max_trials / 2;
    let mut pick = |pool: &mut Vec<Trial>, want: usize| -> Vec<Trial> {
        if pool.len() <= want {
            return std::mem::take(pool);
        }
        pool.shuffle(&mut rng);
        pool.truncate(want);
        std::mem::take(pool)
    };
    let mut trials = pick(&mut same, half.max(1));
    trials.extend(pick(&mut diff, half.max(1)));
    Ok(TrialSet { task: task.into(), trials })
}

/// A test item for unknown-attack detection.
#[derive(Debug, Clone)]
pub struct DetectionTrial {
    pub utterance_id: String,
    /// Truth: the attack class was absent from signature/PLDA training.
    pub is_unknown: bool,
    pub is_benign: bool,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnknownDetectionOutcome {
    pub eer: f64,
    /// `(utterance_id, is_unknown, score)` per evaluated trial.
    pub scores: Vec<(String, bool, f64)>,
}

/// Scores every test vector with the unknown-vs-known LLR and reports the
/// EER of detecting unknown attacks. `with_benign = false` restricts the
/// pool to attacked utterances (an oracle says "you are under attack");
/// the PLDA model itself never changes.
pub fn unknown_detection_eval(
    model: &PldaModel,
    pre: &Preprocessor,
    known: &[ClassStats],
    tests: &[DetectionTrial],
    with_benign: bool,
) -> Result<UnknownDetectionOutcome> {
    let mut scores = Vec::new();
    for t in tests {
        if !with_benign && t.is_benign {
            continue;
        }
        let z = pre.apply(&t.vector);
        let llr = model.unknown_llr(known, &z)?;
        scores.push((t.utterance_id.clone(), t.is_unknown, llr));
    }
    let targets: Vec<f64> =
        scores.iter().filter(|(_, u, _)| *u).map(|(_, _, s)| *s).collect();
    let nontargets: Vec<f64> =
        scores.iter().filter(|(_, u, _)| !*u).map(|(_, _, s)| *s).collect();
    let e = eer(&targets, &nontargets)?;
    Ok(UnknownDetectionOutcome { eer: e, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn s(v: &str) -> String {
        v.into()
    }

    #[test]
    fn confusion_small_example() {
        let m = confusion(
            &[s("A"), s("A"), s("B")],
            &[s("A"), s("B"), s("B")],
            &[s("A"), s("B")],
        )
        .unwrap();
        let norm = m.normalized();
        assert_eq!(norm[0].as_ref().unwrap(), &vec![50.0, 50.0]);
        assert_eq!(norm[1].as_ref().unwrap(), &vec![0.0, 100.0]);
        assert_abs_diff_eq!(m.accuracy(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn confusion_perfect_predictions_are_diagonal() {
        let t = vec![s("A"), s("B"), s("C"), s("B")];
        let m = confusion(&t, &t, &[s("A"), s("B"), s("C")]).unwrap();
        for (i, row) in m.normalized().iter().enumerate() {
            let row = row.as_ref().unwrap();
            assert_abs_diff_eq!(row[i], 100.0, epsilon = 1e-9);
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 100.0, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(m.accuracy(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn confusion_rejects_unknown_label() {
        let err =
            confusion(&[s("A")], &[s("Z")], &[s("A"), s("B")]).unwrap_err();
        assert!(err.to_string().contains('Z'), "{err}");
    }

    #[test]
    fn confusion_marks_empty_rows() {
        let m = confusion(&[s("A")], &[s("A")], &[s("A"), s("B")]).unwrap();
        assert!(m.normalized()[1].is_none());
    }

    #[test]
    fn eer_perfect_separation_is_zero() {
        let e = eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_abs_diff_eq!(e, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn eer_identical_distributions_is_half() {
        let e = eer(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(e, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn eer_interleaved_example() {
        let e = eer(&[2.0, 1.0, 0.0], &[1.5, 0.5, -0.5]).unwrap();
        assert_abs_diff_eq!(e, 1.0 / 3.0, epsilon = 1e-12);
    }

    /// Independent oracle: brute-force counting at every candidate threshold,
    /// same crossing interpolation.
    pub fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let mut points = Vec::new();
        for t in &thresholds {
            let miss = targets.iter().filter(|&&s| s < *t).count() as f64
                / targets.len() as f64;
            let fa = nontargets.iter().filter(|&&s| s >= *t).count() as f64
                / nontargets.len() as f64;
            points.push((miss, fa));
        }
        points.push((1.0, 0.0));
        for w in points.windows(2) {
            let (m1, f1) = w[0];
            let (m2, f2) = w[1];
            if m2 >= f2 {
                let denom = (m2 - m1) - (f2 - f1);
                if denom.abs() < 1e-300 {
                    return 0.5 * (m1 + f1);
                }
                return m1 + (f1 - m1) / denom * (m2 - m1);
            }
        }
        0.5
    }

    #[test]
    fn eer_matches_bruteforce_oracle() {
        let mut rng = rng_from_seed(21);
        for _ in 0..50 {
            let nt = rng.gen_range(2..40);
            let nn = rng.gen_range(2..40);
            let shift: f64 = rng.gen_range(-1.0..2.0);
            let targets: Vec<f64> = (0..nt).map(|_| rng.gen_range(0.0..2.0) + shift).collect();
            let nons: Vec<f64> = (0..nn).map(|_| rng.gen_range(-1.0..1.5)).collect();
            let fast = eer(&targets, &nons).unwrap();
            let slow = eer_oracle(&targets, &nons);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-9);
            assert!((0.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn calibration_symmetric_scores_have_zero_offset() {
        // Overlapping mirrored scores: finite optimum, offset exactly zero.
        let scores = vec![1.0, 2.0, -0.5, -1.0, -2.0, 0.5];
        let labels = vec![true, true, true, false, false, false];
        let cal = fit_calibration(&scores, &labels).unwrap();
        assert!(cal.offset.abs() < 1e-9, "offset {}", cal.offset);
        assert!(cal.slope > 0.0);
        // Separable mirrored scores: optimum at infinite slope; the offset
        // stays pinned near zero by symmetry while the slope grows.
        let scores = vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0];
        let labels = vec![true, true, true, false, false, false];
        let cal = fit_calibration(&scores, &labels).unwrap();
        assert!(cal.offset.abs() < 1e-4, "offset {}", cal.offset);
        assert!(cal.slope > 1.0);
    }

    #[test]
    fn calibration_preserves_order_and_eer() {
        let mut rng = rng_from_seed(8);
        let targets: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
        let nons: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut scores = targets.clone();
        scores.extend(&nons);
        let mut labels = vec![true; targets.len()];
        labels.extend(vec![false; nons.len()]);
        let cal = fit_calibration(&scores, &labels).unwrap();
        let ct: Vec<f64> = targets.iter().map(|&v| cal.apply(v)).collect();
        let cn: Vec<f64> = nons.iter().map(|&v| cal.apply(v)).collect();
        // Positive slope keeps the ROC (and so the EER) unchanged.
        assert_abs_diff_eq!(
            eer(&targets, &nons).unwrap(),
            eer(&ct, &cn).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn trials_enumerate_small_classes_fully() {
        let labeled = vec![
            (s("a1"), s("X")),
            (s("a2"), s("X")),
            (s("b1"), s("Y")),
        ];
        let set = make_attack_trials(&labeled, "algo", 100, 3).unwrap();
        let same: Vec<&Trial> = set.trials.iter().filter(|t| t.same).collect();
        let diff: Vec<&Trial> = set.trials.iter().filter(|t| !t.same).collect();
        assert_eq!(same.len(), 1);
        assert_eq!(diff.len(), 2);
        assert!(set.trials.iter().all(|t| t.enroll != t.test));
    }

    #[test]
    fn trials_are_seed_deterministic() {
        let labeled: Vec<(String, String)> = (0..30)
            .map(|i| (format!("u{i}"), if i % 3 == 0 { s("A") } else { s("B") }))
            .collect();
        let a = make_attack_trials(&labeled, "t", 20, 5).unwrap();
        let b = make_attack_trials(&labeled, "t", 20, 5).unwrap();
        assert_eq!(a.trials, b.trials);
        assert!(a.trials.len() <= 20);
    }

    #[test]
    fn trials_error_lists_class_counts() {
        let labeled = vec![(s("a"), s("X")), (s("b"), s("X"))];
        let err = make_attack_trials(&labeled, "t", 10, 0).unwrap_err();
        assert!(err.to_string().contains("X"), "{err}");
    }

    proptest! {
        #[test]
        fn eer_invariant_under_increasing_transform(
            t in proptest::collection::vec(-3.0f64..3.0, 2..24),
            n in proptest::collection::vec(-3.0f64..3.0, 2..24),
        ) {
            let f = |v: f64| (v * 0.7).exp() + 2.0 * v; // strictly increasing
            let e1 = eer(&t, &n).unwrap();
            let tf: Vec<f64> = t.iter().map(|&v| f(v)).collect();
            let nf: Vec<f64> = n.iter().map(|&v| f(v)).collect();
            let e2 = eer(&tf, &nf).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&e1));
        }
    }

    use crate::seed::rng_from_seed;
}
