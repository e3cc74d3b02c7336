//! Two-covariance PLDA on signature vectors, plus the simpler back-end
//! classifiers (linear-Gaussian, multiclass logistic regression).
//!
//! The generative model is `x = mu + y + e` with `y ~ N(0, B)` shared inside
//! a class and `e ~ N(0, W)` per vector. Marginal likelihoods are evaluated
//! through the orthogonal split of a class into its scaled mean
//! (`cov W + nB`) and within-class deviations (`cov W`), which keeps every
//! formula valid for singular B.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Symmetry tolerance for model covariances.
const SYM_TOL: f64 = 1e-10;

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYM_TOL {
                return Err(Error::precondition(format!("{what} is not symmetric")));
            }
        }
    }
    Ok(())
}

/// Adds `1e-6 * trace/dim` to the diagonal until Cholesky succeeds.
fn cholesky_with_ridge(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let dim = m.nrows();
    let ridge = 1e-6 * m.trace().abs().max(1e-12) / dim as f64;
    let mut fixed = m.clone();
    for _ in 0..8 {
        for i in 0..dim {
            fixed[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(fixed.clone()) {
            log::warn!("{what}: covariance regularized with ridge {ridge:.3e}");
            return Ok(ch);
        }
    }
    Err(Error::numeric("plda", format!("{what} is not positive definite")))
}

fn log_det(ch: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Sufficient statistics of a set of same-class vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Scatter around the class mean: `sum_j (x_j - mean)(x_j - mean)'`.
    pub scatter: Vec<f64>,
}

impl ClassStats {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let n = vectors.len();
        if n == 0 {
            return Err(Error::precondition("class stats need at least one vector"));
        }
        let d = vectors[0].len();
        let mut mean = vec![0.0; d];
        for v in vectors {
            if v.len() != d {
                return Err(Error::shape("inconsistent vector dims"));
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut scatter = vec![0.0; d * d];
        for v in vectors {
            for i in 0..d {
                let di = v[i] - mean[i];
                for j in 0..d {
                    scatter[i * d + j] += di * (v[j] - mean[j]);
                }
            }
        }
        Ok(ClassStats { count: n, mean, scatter })
    }

    fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    fn scatter_mat(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_row_slice(d, d, &self.scatter)
    }

    /// Stats of this class with one extra vector appended.
    fn with_extra(&self, x: &DVector<f64>) -> (usize, DVector<f64>, DMatrix<f64>) {
        let n = self.count as f64;
        let mean = self.mean_vec();
        let new_mean = (&mean * n + x) / (n + 1.0);
        let dx = x - &mean;
        let scatter = self.scatter_mat() + (&dx * dx.transpose()) * (n / (n + 1.0));
        (self.count + 1, new_mean, scatter)
    }
}

/// Trained two-covariance model.
#[derive(Debug, Clone)]
pub struct PldaModel {
    pub mean: Vec<f64>,
    /// Between-class covariance (PSD).
    pub between: Vec<f64>,
    /// Within-class covariance (PD).
    pub within: Vec<f64>,
    pub dim: usize,
}

impl PldaModel {
    pub fn new(mean: Vec<f64>, between: Vec<f64>, within: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if between.len() != d * d || within.len() != d * d {
            return Err(Error::shape("covariance dims do not match the mean"));
        }
        let model = PldaModel { mean, between, within, dim: d };
        check_symmetric(&model.between_mat(), "between-class covariance")?;
        check_symmetric(&model.within_mat(), "within-class covariance")?;
        // W must be PD; B only PSD.
        cholesky_with_ridge(&model.within_mat(), "within-class covariance")?;
        Ok(model)
    }

    fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    fn between_mat(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.between)
    }

    fn within_mat(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.within)
    }

    /// Log marginal likelihood of `n` same-class vectors summarized by their
    /// mean and scatter:
    /// `log integral N(y; 0, B) prod_j N(x_j; mu + y, W) dy`.
    pub fn log_marginal(&self, count: usize, mean: &DVector<f64>, scatter: &DMatrix<f64>) -> f64 {
        let n = count as f64;
        let d = self.dim as f64;
        let w = self.within_mat();
        let wch = cholesky_with_ridge(&w, "within").expect("validated at construction");
        let mut wnb = self.between_mat() * n;
        wnb += &w;
        let wnb_ch = cholesky_with_ridge(&wnb, "within + n*between").expect("PSD + PD");

        let centered = mean - self.mean_vec();
        let quad_mean = n * centered.dot(&wnb_ch.solve(&centered));
        let quad_dev = (wch.solve(scatter)).trace();
        -0.5 * (n * d * LN_2PI
            + log_det(&wnb_ch)
            + (n - 1.0) * log_det(&wch)
            + quad_mean
            + quad_dev)
    }

    fn log_marginal_single(&self, x: &DVector<f64>) -> f64 {
        let d = self.dim;
        self.log_marginal(1, x, &DMatrix::zeros(d, d))
    }

    /// Log-likelihood ratio for "same class" vs "different classes" on a
    /// pair of vectors. Symmetric in its arguments.
    pub fn llr_pair(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        if x1.len() != self.dim || x2.len() != self.dim {
            return Err(Error::shape("vector dim does not match the model"));
        }
        let a = DVector::from_column_slice(x1);
        let b = DVector::from_column_slice(x2);
        let mean = (&a + &b) * 0.5;
        let da = &a - &mean;
        let scatter = (&da * da.transpose()) * 2.0;
        let joint = self.log_marginal(2, &mean, &scatter);
        Ok(joint - self.log_marginal_single(&a) - self.log_marginal_single(&b))
    }

    /// LLR of "test shares the enrollment set's class" vs "independent".
    /// With a single-vector enrollment this reduces to [`Self::llr_pair`].
    pub fn llr_multi(&self, enrollment: &ClassStats, x_test: &[f64]) -> Result<f64> {
        if x_test.len() != self.dim || enrollment.mean.len() != self.dim {
            return Err(Error::shape("vector dim does not match the model"));
        }
        let x = DVector::from_column_slice(x_test);
        let (n1, mean1, scatter1) = enrollment.with_extra(&x);
        let joint = self.log_marginal(n1, &mean1, &scatter1);
        let enroll_only =
            self.log_marginal(enrollment.count, &enrollment.mean_vec(), &enrollment.scatter_mat());
        Ok(joint - enroll_only - self.log_marginal_single(&x))
    }

    /// LLR of "the test vector's class is unknown" vs "it is one of the
    /// known classes": `-log mean_i exp(llr_multi_i)`, overflow-safe.
    pub fn unknown_llr(&self, known: &[ClassStats], x_test: &[f64]) -> Result<f64> {
        if known.is_empty() {
            return Err(Error::precondition("unknown-attack LLR needs >= 1 known class"));
        }
        let llrs: Result<Vec<f64>> =
            known.iter().map(|stats| self.llr_multi(stats, x_test)).collect();
        let llrs = llrs?;
        Ok((known.len() as f64).ln() - log_sum_exp(&llrs))
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Result of EM training: the model and the observed-data log-likelihood per
/// iteration (non-decreasing up to rounding).
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub model: PldaModel,
    pub log_likelihood: Vec<f64>,
}

/// EM for the two-covariance model on vectors grouped by class.
///
/// Initialization: global mean, between-class scatter of class means, pooled
/// within-class scatter.
pub fn plda_em_train(classes: &[Vec<Vec<f64>>], num_iters: usize) -> Result<EmOutcome> {
    let groups: Vec<&Vec<Vec<f64>>> = classes.iter().filter(|c| !c.is_empty()).collect();
    if groups.len() < 2 {
        return Err(Error::precondition("PLDA needs >= 2 non-empty classes"));
    }
    if !groups.iter().any(|c| c.len() >= 2) {
        return Err(Error::precondition(
            "within-class covariance unidentifiable: every class has a single vector",
        ));
    }
    let d = groups[0][0].len();
    let stats: Vec<ClassStats> = groups
        .iter()
        .map(|c| ClassStats::from_vectors(c))
        .collect::<Result<_>>()?;
    let total: usize = stats.iter().map(|s| s.count).sum();

    // Scatter-based initialization.
    let mut mu = DVector::zeros(d);
    for s in &stats {
        mu += s.mean_vec() * s.count as f64;
    }
    mu /= total as f64;
    let mut between = DMatrix::zeros(d, d);
    for s in &stats {
        let dm = s.mean_vec() - &mu;
        between += &dm * dm.transpose();
    }
    between /= stats.len() as f64;
    let mut within = DMatrix::zeros(d, d);
    for s in &stats {
        within += s.scatter_mat();
    }
    within /= total as f64;
    // A degenerate pooled scatter gets the standard ridge treatment.
    within = cholesky_with_ridge(&within, "initial within-class scatter")?
        .l()
        .clone()
        * cholesky_with_ridge(&within, "initial within-class scatter")?.l().transpose();

    let mut model = PldaModel::new(
        mu.iter().cloned().collect(),
        between.as_slice().to_vec(),
        within.as_slice().to_vec(),
    )?;

    let mut curve = Vec::with_capacity(num_iters);
    for _ in 0..num_iters {
        // Observed-data log-likelihood under the current parameters.
        let ll: f64 = stats
            .iter()
            .map(|s| model.log_marginal(s.count, &s.mean_vec(), &s.scatter_mat()))
            .sum();
        curve.push(ll);

        // E-step: posterior of the latent class variable y per class.
        let b = model.between_mat();
        let w = model.within_mat();
        let mu = model.mean_vec();
        let mut new_mu_acc = DVector::zeros(d);
        let mut b_acc = DMatrix::zeros(d, d);
        let mut posteriors = Vec::with_capacity(stats.len());
        for s in &stats {
            let n = s.count as f64;
            let wnb = &w + &b * n;
            let wnb_ch = cholesky_with_ridge(&wnb, "W + nB")?;
            // m = nB (W + nB)^-1 (mean - mu); C = B - nB (W + nB)^-1 B
            let centered = s.mean_vec() - &mu;
            let solve_c = wnb_ch.solve(&centered);
            let m = (&b * solve_c) * n;
            let solve_b = wnb_ch.solve(&b);
            let c = &b - (&b * solve_b) * n;
            b_acc += &c + &m * m.transpose();
            new_mu_acc += (s.mean_vec() - &m) * n;
            posteriors.push((m, c));
        }

        // M-step.
        let new_mu = new_mu_acc / total as f64;
        let mut new_b = b_acc / stats.len() as f64;
        symmetrize(&mut new_b);
        let mut w_acc = DMatrix::zeros(d, d);
        for (s, (m, c)) in stats.iter().zip(&posteriors) {
            let n = s.count as f64;
            let resid = s.mean_vec() - &new_mu - m;
            w_acc += s.scatter_mat() + (&resid * resid.transpose()) * n + c * n;
        }
        let mut new_w = w_acc / total as f64;
        symmetrize(&mut new_w);
        model = PldaModel::new(
            new_mu.iter().cloned().collect(),
            new_b.as_slice().to_vec(),
            new_w.as_slice().to_vec(),
        )?;
    }
    Ok(EmOutcome { model, log_likelihood: curve })
}

/// Centering + within-class whitening applied before PLDA training/scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preprocessor {
    pub mean: Vec<f64>,
    /// Row-major `L^-1` where the pooled within-class scatter is `L L'`.
    pub transform: Vec<f64>,
    pub dim: usize,
}

impl Preprocessor {
    /// Fits on labeled vectors: mean over everything, whitening from the
    /// pooled within-class covariance.
    pub fn fit(vectors: &[(Vec<f64>, usize)], num_classes: usize) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::precondition("preprocessor needs vectors"));
        }
        let d = vectors[0].0.len();
        let mut grouped: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
        for (v, c) in vectors {
            grouped[*c].push(v.clone());
        }
        let mut mean = DVector::<f64>::zeros(d);
        for (v, _) in vectors {
            mean += DVector::from_column_slice(v);
        }
        mean /= vectors.len() as f64;
        let mut within = DMatrix::<f64>::zeros(d, d);
        for group in grouped.iter().filter(|g| !g.is_empty()) {
            let s = ClassStats::from_vectors(group)?;
            within += s.scatter_mat();
        }
        within /= vectors.len() as f64;
        let ch = cholesky_with_ridge(&within, "whitening covariance")?;
        let l_inv = ch
            .l()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::numeric("plda", "singular whitening factor"))?;
        Ok(Preprocessor {
            mean: mean.iter().cloned().collect(),
            transform: l_inv.transpose().as_slice().to_vec(), // row-major
            dim: d,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.transform[i * d..(i + 1) * d];
            *o = row
                .iter()
                .zip(x.iter().zip(&self.mean))
                .map(|(t, (v, m))| t * (v - m))
                .sum();
        }
        out
    }
}

/// Back-end classifier flavors over signature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    PldaByClass,
    LinearGaussian,
    LogisticRegression,
}

/// A fitted back-end classifier with a fixed class inventory.
#[derive(Debug, Clone)]
pub enum BackendClassifier {
    PldaByClass { pre: Preprocessor, model: PldaModel, stats: Vec<ClassStats> },
    LinearGaussian { means: Vec<Vec<f64>>, precision: Vec<f64>, dim: usize },
    LogisticRegression { weights: Vec<f64>, classes: usize, dim: usize },
}

impl BackendClassifier {
    /// Class posteriors for a vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let scores = self.scores(x)?;
        let lse = log_sum_exp(&scores);
        Ok(scores.iter().map(|s| (s - lse).exp()).collect())
    }

    /// Unnormalized log-posterior per class.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            BackendClassifier::PldaByClass { pre, model, stats } => {
                let z = pre.apply(x);
                stats.iter().map(|s| model.llr_multi(s, &z)).collect()
            }
            BackendClassifier::LinearGaussian { means, precision, dim } => {
                let d = *dim;
                Ok(means
                    .iter()
                    .map(|m| {
                        let mut quad = 0.0;
                        for i in 0..d {
                            for j in 0..d {
                                quad += (x[i] - m[i]) * precision[i * d + j] * (x[j] - m[j]);
                            }
                        }
                        -0.5 * quad
                    })
                    .collect())
            }
            BackendClassifier::LogisticRegression { weights, classes, dim } => {
                Ok((0..*classes)
                    .map(|c| {
                        let row = &weights[c * (dim + 1)..(c + 1) * (dim + 1)];
                        row[*dim] + row[..*dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    })
                    .collect())
            }
        }
    }
}

/// Fits a back-end classifier on labeled vectors.
pub fn fit_backend(
    kind: BackendKind,
    vectors: &[(Vec<f64>, usize)],
    num_classes: usize,
    em_iters: usize,
) -> Result<BackendClassifier> {
    if num_classes < 2 {
        return Err(Error::precondition("back-end needs >= 2 classes"));
    }
    if vectors.is_empty() {
        return Err(Error::precondition("back-end needs training vectors"));
    }
    let d = vectors[0].0.len();
    match kind {
        BackendKind::PldaByClass => {
            let pre = Preprocessor::fit(vectors, num_classes)?;
            let mut grouped: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
            for (v, c) in vectors {
                grouped[*c].push(pre.apply(v));
            }
            let outcome = plda_em_train(&grouped, em_iters)?;
            let stats: Vec<ClassStats> = grouped
                .iter()
                .map(|g| ClassStats::from_vectors(g))
                .collect::<Result<_>>()?;
            Ok(BackendClassifier::PldaByClass { pre, model: outcome.model, stats })
        }
        BackendKind::LinearGaussian => {
            let mut grouped: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
            for (v, c) in vectors {
                grouped[*c].push(v.clone());
            }
            let mut means = Vec::with_capacity(num_classes);
            let mut pooled = DMatrix::<f64>::zeros(d, d);
            for g in &grouped {
                if g.is_empty() {
                    return Err(Error::precondition("linear-Gaussian: empty class"));
                }
                let s = ClassStats::from_vectors(g)?;
                pooled += s.scatter_mat();
                means.push(s.mean.clone());
            }
            pooled /= vectors.len() as f64;
            let ch = cholesky_with_ridge(&pooled, "shared covariance")?;
            let precision = ch.inverse();
            Ok(BackendClassifier::LinearGaussian {
                means,
                precision: precision.transpose().as_slice().to_vec(),
                dim: d,
            })
        }
        BackendKind::LogisticRegression => {
            let weights = fit_multiclass_logistic(vectors, num_classes, d)?;
            Ok(BackendClassifier::LogisticRegression { weights, classes: num_classes, dim: d })
        }
    }
}

/// Newton-Raphson softmax regression with a small ridge so separable data
/// still has a finite optimum; runs to gradient max-norm < 1e-6.
fn fit_multiclass_logistic(
    vectors: &[(Vec<f64>, usize)],
    classes: usize,
    d: usize,
) -> Result<Vec<f64>> {
    let p = d + 1; // features + bias
    let dim = classes * p;
    let ridge = 1e-6;
    let mut w = DVector::<f64>::zeros(dim);
    for iter in 0..200 {
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for (x, y) in vectors {
            let mut phi = Vec::with_capacity(p);
            phi.extend_from_slice(x);
            phi.push(1.0);
            let logits: Vec<f64> = (0..classes)
                .map(|c| {
                    (0..p).map(|j| w[c * p + j] * phi[j]).sum::<f64>()
                })
                .collect();
            let lse = log_sum_exp(&logits);
            let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
            for c in 0..classes {
                let coeff = probs[c] - if c == *y { 1.0 } else { 0.0 };
                for j in 0..p {
                    grad[c * p + j] += coeff * phi[j];
                }
                for c2 in 0..classes {
                    let h = probs[c] * (if c == c2 { 1.0 } else { 0.0 } - probs[c2]);
                    for j in 0..p {
                        for k in 0..p {
                            hess[(c * p + j, c2 * p + k)] += h * phi[j] * phi[k];
                        }
                    }
                }
            }
        }
        grad += &w * ridge;
        for i in 0..dim {
            hess[(i, i)] += ridge + 1e-9;
        }
        let gnorm = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gnorm < 1e-6 {
            return Ok(w.iter().cloned().collect());
        }
        let step = Cholesky::new(hess)
            .ok_or_else(|| Error::numeric("logistic", "Hessian not PD"))?
            .solve(&grad);
        w -= step;
        if iter == 199 {
            log::warn!("logistic regression hit the iteration cap at grad norm {gnorm:.2e}");
        }
    }
    Ok(w.iter().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn model_1d(b: f64, w: f64) -> PldaModel {
        PldaModel::new(vec![0.0], vec![b], vec![w]).unwrap()
    }

    #[test]
    fn pair_llr_matches_hand_computed_value() {
        let m = model_1d(1.0, 1.0);
        let llr = m.llr_pair(&[0.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(llr, 0.5 * (4.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(llr, 0.14384103622589045, epsilon = 1e-12);
    }

    #[test]
    fn zero_between_class_covariance_gives_zero_llr() {
        let m = model_1d(0.0, 1.0);
        for (a, b) in [(0.0, 0.0), (1.0, -2.0), (0.3, 0.4)] {
            assert_abs_diff_eq!(m.llr_pair(&[a], &[b]).unwrap(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn pair_llr_is_symmetric() {
        let m = PldaModel::new(
            vec![0.1, -0.2],
            vec![1.0, 0.3, 0.3, 0.8],
            vec![0.5, -0.1, -0.1, 0.7],
        )
        .unwrap();
        let a = [0.4, -0.6];
        let b = [-1.2, 0.9];
        assert_eq!(m.llr_pair(&a, &b).unwrap(), m.llr_pair(&b, &a).unwrap());
    }

    #[test]
    fn multi_with_single_enrollment_reduces_to_pair() {
        let m = PldaModel::new(
            vec![0.1, -0.2],
            vec![1.0, 0.3, 0.3, 0.8],
            vec![0.5, -0.1, -0.1, 0.7],
        )
        .unwrap();
        let e = vec![vec![0.4, -0.6]];
        let stats = ClassStats::from_vectors(&e).unwrap();
        let x = [-1.2, 0.9];
        assert_abs_diff_eq!(
            m.llr_multi(&stats, &x).unwrap(),
            m.llr_pair(&e[0], &x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn tight_cluster_center_scores_positive() {
        let m = model_1d(4.0, 0.1);
        let cluster: Vec<Vec<f64>> = vec![vec![2.0], vec![2.1], vec![1.9], vec![2.05]];
        let stats = ClassStats::from_vectors(&cluster).unwrap();
        assert!(m.llr_multi(&stats, &[2.0]).unwrap() > 0.0);
    }

    /// Brute-force quadrature for `log p(X)` in one dimension.
    fn quadrature_log_marginal_1d(model: &PldaModel, xs: &[f64]) -> f64 {
        let b = model.between[0];
        let w = model.within[0];
        let mu = model.mean[0];
        let half_width = 10.0 * b.sqrt().max(1.0);
        let n = 40_001;
        let h = 2.0 * half_width / (n - 1) as f64;
        let log_terms: Vec<f64> = (0..n)
            .map(|i| {
                let y = -half_width + i as f64 * h;
                let mut lt = -0.5 * (y * y / b + LN_2PI + b.ln());
                for x in xs {
                    let r = x - mu - y;
                    lt += -0.5 * (r * r / w + LN_2PI + w.ln());
                }
                // Simpson weights
                let wgt: f64 = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                lt + wgt.ln()
            })
            .collect();
        log_sum_exp(&log_terms) + (h / 3.0).ln()
    }

    #[test]
    fn closed_form_matches_quadrature_in_1d() {
        let m = model_1d(1.7, 0.6);
        let xs = [0.3, -0.5, 1.1];
        let stats = ClassStats::from_vectors(&[vec![0.3], vec![-0.5], vec![1.1]]).unwrap();
        let closed = m.log_marginal(3, &stats.mean_vec(), &stats.scatter_mat());
        let quad = quadrature_log_marginal_1d(&m, &xs);
        assert_abs_diff_eq!(closed, quad, epsilon = 1e-6);
    }

    #[test]
    fn unknown_llr_identities() {
        let m = model_1d(1.0, 1.0);
        let c1 = ClassStats::from_vectors(&[vec![0.5], vec![0.7]]).unwrap();
        let c2 = ClassStats::from_vectors(&[vec![-1.0], vec![-1.2]]).unwrap();
        let x = [0.6];
        // N = 1 reduces to the negated multi-LLR.
        let u1 = m.unknown_llr(std::slice::from_ref(&c1), &x).unwrap();
        assert_abs_diff_eq!(u1, -m.llr_multi(&c1, &x).unwrap(), epsilon = 1e-12);
        // Log-sum-exp path equals the naive mean when it is finite.
        let l1 = m.llr_multi(&c1, &x).unwrap();
        let l2 = m.llr_multi(&c2, &x).unwrap();
        let naive = -((l1.exp() + l2.exp()) / 2.0).ln();
        let u = m.unknown_llr(&[c1, c2], &x).unwrap();
        assert_abs_diff_eq!(u, naive, epsilon = 1e-9);
    }

    #[test]
    fn unknown_llr_of_equal_terms_negates_them() {
        // Per-class LLRs {ln 2, 0} -> -ln 1.5.
        let vals = [std::f64::consts::LN_2, 0.0];
        let out = (2.0f64).ln() - log_sum_exp(&vals);
        assert_abs_diff_eq!(out, -(1.5f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out, -0.4054651081081644, epsilon = 1e-12);
    }

    fn simulate(
        seed: u64,
        num_classes: usize,
        per_class: usize,
        mu: &[f64],
        b_diag: &[f64],
        w_diag: &[f64],
    ) -> Vec<Vec<Vec<f64>>> {
        let mut rng = rng_from_seed(seed);
        let d = mu.len();
        let norm = Normal::new(0.0, 1.0).unwrap();
        (0..num_classes)
            .map(|_| {
                let y: Vec<f64> =
                    (0..d).map(|i| norm.sample(&mut rng) * b_diag[i].sqrt()).collect();
                (0..per_class)
                    .map(|_| {
                        (0..d)
                            .map(|i| mu[i] + y[i] + norm.sample(&mut rng) * w_diag[i].sqrt())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn em_log_likelihood_is_non_decreasing() {
        let data = simulate(3, 60, 6, &[0.5, -1.0], &[2.0, 0.7], &[0.4, 0.9]);
        let out = plda_em_train(&data, 15).unwrap();
        for pair in out.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-8, "LL decreased: {pair:?}");
        }
    }

    #[test]
    fn em_recovers_simulation_parameters_small() {
        let mu = [0.5, -1.0, 0.0];
        let b = [2.0, 1.0, 0.5];
        let w = [0.4, 0.6, 0.8];
        let data = simulate(11, 400, 8, &mu, &b, &w);
        let out = plda_em_train(&data, 20).unwrap();
        let m = out.model;
        for i in 0..3 {
            assert!((m.mean[i] - mu[i]).abs() < 0.2, "mean {:?}", m.mean);
            assert!(
                (m.between[i * 3 + i] - b[i]).abs() / b[i] < 0.35,
                "B diag {:?}",
                m.between
            );
            assert!(
                (m.within[i * 3 + i] - w[i]).abs() / w[i] < 0.15,
                "W diag {:?}",
                m.within
            );
        }
    }

    #[test]
    fn em_rejects_degenerate_grouping() {
        let data = vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]];
        assert!(matches!(plda_em_train(&data, 5), Err(Error::Precondition(_))));
        let one_class = vec![vec![vec![0.0], vec![1.0]]];
        assert!(plda_em_train(&one_class, 5).is_err());
    }

    #[test]
    fn em_is_equivariant_under_affine_reparameterization() {
        // Train in original coordinates and in affinely mapped coordinates; the
        // pair LLR of corresponding points must agree.
        let data = simulate(17, 80, 5, &[0.2, -0.4], &[1.5, 0.8], &[0.5, 0.3]);
        let a = [[1.2, 0.4], [-0.3, 0.9]]; // invertible
        let t = [0.7, -1.1];
        let map = |v: &Vec<f64>| -> Vec<f64> {
            vec![
                a[0][0] * v[0] + a[0][1] * v[1] + t[0],
                a[1][0] * v[0] + a[1][1] * v[1] + t[1],
            ]
        };
        let mapped: Vec<Vec<Vec<f64>>> =
            data.iter().map(|c| c.iter().map(map).collect()).collect();
        let m1 = plda_em_train(&data, 8).unwrap().model;
        let m2 = plda_em_train(&mapped, 8).unwrap().model;
        let x1 = vec![0.3, 0.9];
        let x2 = vec![-0.6, 0.2];
        let llr_orig = m1.llr_pair(&x1, &x2).unwrap();
        let llr_mapped = m2.llr_pair(&map(&x1), &map(&x2)).unwrap();
        assert_abs_diff_eq!(llr_orig, llr_mapped, epsilon = 1e-6);
    }

    #[test]
    fn linear_gaussian_separates_point_clouds() {
        let mut rng = rng_from_seed(5);
        let mut vectors = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { -3.0 } else { 3.0 };
            vectors.push((
                vec![center + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                c,
            ));
        }
        let backend = fit_backend(BackendKind::LinearGaussian, &vectors, 2, 0).unwrap();
        let correct = vectors
            .iter()
            .filter(|(v, c)| {
                let p = backend.predict(v).unwrap();
                crate::train::argmax(&p) == *c
            })
            .count();
        assert_eq!(correct, vectors.len());
        let p = backend.predict(&vectors[0].0).unwrap();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn logistic_backend_converges_and_scores() {
        let mut rng = rng_from_seed(6);
        let mut train = Vec::new();
        let mut held = Vec::new();
        // 20 samples per class, mirroring a small-backend protocol.
        for i in 0..60 {
            let c = i % 3;
            let center = [(c as f64) * 2.0 - 2.0, (c as f64) - 1.0];
            let v = vec![
                center[0] + rng.gen_range(-0.4..0.4),
                center[1] + rng.gen_range(-0.4..0.4),
            ];
            if i < 60 - 15 {
                train.push((v, c));
            } else {
                held.push((v, c));
            }
        }
        let backend = fit_backend(BackendKind::LogisticRegression, &train, 3, 0).unwrap();
        let correct = held
            .iter()
            .filter(|(v, c)| crate::train::argmax(&backend.predict(v).unwrap()) == *c)
            .count();
        assert!(correct >= held.len() - 1, "held-out correct: {correct}/{}", held.len());
    }

    #[test]
    fn plda_backend_reduces_to_pairwise_for_singleton_classes() {
        let data = simulate(23, 30, 4, &[0.0, 0.0], &[1.0, 1.0], &[0.3, 0.3]);
        let mut vectors = Vec::new();
        for (c, group) in data.iter().enumerate().take(4) {
            for v in group.iter().take(3) {
                vectors.push((v.clone(), c));
            }
        }
        let backend = fit_backend(BackendKind::PldaByClass, &vectors, 4, 10).unwrap();
        let BackendClassifier::PldaByClass { pre, model, stats } = &backend else {
            panic!("wrong variant")
        };
        // Singleton enrollment: scores equal pairwise LLRs.
        let single = ClassStats::from_vectors(&[pre.apply(&vectors[0].0)]).unwrap();
        let x = pre.apply(&vectors[5].0);
        assert_abs_diff_eq!(
            model.llr_multi(&single, &x).unwrap(),
            model.llr_pair(&single.mean, &x).unwrap(),
            epsilon = 1e-12
        );
        assert_eq!(stats.len(), 4);
    }
}
