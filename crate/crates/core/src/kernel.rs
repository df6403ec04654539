//! Kernels on (action, covariates) pairs and everything downstream of the
//! Gram matrix: truncated spectral decompositions, kernel-PCA feature maps,
//! the Gaussian-process quadratic forms (full and low-rank), chi-squared
//! radii, and the default posterior-noise variance.
//!
//! The quadratic forms share one eigenstructure: with K = V diag(lambda) V^T,
//! the GP matrix is V diag(lambda / (sigma^2 (lambda + sigma^2))) V^T, so the
//! full path (Cholesky solves against K + sigma^2 I and the posterior
//! covariance) and the truncated spectral path agree exactly at full rank.

use crate::data::LoggedDataset;
use crate::num::chol::Cholesky;
use crate::num::special::{gamma_p, ln_gamma, normal_quantile};
use crate::sensitivity::SensitivityModel;
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// An RBF kernel over encoded (t, x) points. Actions enter as one-hot
/// coordinates scaled by `action_scale`, so two points with equal covariates
/// and different actions sit at squared distance 2 * action_scale^2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub lengthscale: f64,
    pub action_scale: f64,
}

impl KernelSpec {
    /// RBF kernel with the action scale defaulting to the lengthscale.
    pub fn rbf(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) {
            return Err(Error::InvalidArgument(format!("lengthscale must be positive, got {lengthscale}")));
        }
        Ok(KernelSpec { lengthscale, action_scale: lengthscale })
    }

    pub fn value(&self, t1: usize, x1: ndarray::ArrayView1<'_, f64>, t2: usize, x2: ndarray::ArrayView1<'_, f64>) -> f64 {
        let mut d2 = 0.0;
        for (a, b) in x1.iter().zip(x2.iter()) {
            d2 += (a - b) * (a - b);
        }
        if t1 != t2 {
            d2 += 2.0 * self.action_scale * self.action_scale;
        }
        (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

/// Gram matrix K[i][j] = k((T_i, X_i), (T_j, X_j)); exactly symmetric by
/// single evaluation per pair, unit diagonal.
pub fn gram_matrix(kernel: &KernelSpec, data: &LoggedDataset) -> Array2<f64> {
    let n = data.n();
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let v = kernel.value(data.actions[i], data.covariate_row(i), data.actions[j], data.covariate_row(j));
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Median pairwise covariate distance, the default lengthscale. Covariates
/// only: the action one-hot scale is set from the result afterwards, so it
/// cannot feed back into the heuristic. Subsamples to at most 2000 points by
/// even striding for large n.
pub fn median_heuristic(data: &LoggedDataset) -> Result<f64> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidArgument("median heuristic needs at least two points".into()));
    }
    let stride = n.div_ceil(2000);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in idx.iter().skip(a + 1) {
            let mut d2 = 0.0;
            for (u, v) in data.covariate_row(i).iter().zip(data.covariate_row(j).iter()) {
                d2 += (u - v) * (u - v);
            }
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = dists[(dists.len() - 1) / 2];
    if median <= 0.0 {
        return Err(Error::Data("median heuristic degenerate: all sampled points identical".into()));
    }
    Ok(median)
}

/// Top-D eigenpairs of a Gram matrix together with the GP noise variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralDecomposition {
    /// Descending, clamped to be nonnegative.
    pub eigenvalues: Array1<f64>,
    /// n x D, orthonormal columns, first nonzero component positive.
    pub eigenvectors: Array2<f64>,
    pub n: usize,
    pub sigma2: f64,
    /// 1 - sum(kept eigenvalues) / trace(K): spectrum mass not captured.
    pub tail_mass: f64,
}

impl SpectralDecomposition {
    pub fn d(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Boundary between the dense eigensolver and blocked subspace iteration.
const DENSE_EIG_LIMIT: usize = 800;

/// Truncated spectral decomposition of a symmetric PSD matrix.
pub fn truncated_eig(k: &Array2<f64>, d: usize, sigma2: f64) -> Result<SpectralDecomposition> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    if d == 0 || d > n {
        return Err(Error::InvalidArgument(format!("need 1 <= D <= n, got D={d}, n={n}")));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((k[[i, j]] - k[[j, i]]).abs());
        }
    }
    if asym > 1e-8 {
        return Err(Error::InvalidArgument(format!("matrix is not symmetric: max off-diagonal gap {asym:.3e}")));
    }

    let (vals, vecs) = if n <= DENSE_EIG_LIMIT {
        let (vals, vecs) = crate::num::eig::sym_eig_dense(k)?;
        (vals.slice(ndarray::s![..d]).to_owned(), vecs.slice(ndarray::s![.., ..d]).to_owned())
    } else {
        crate::num::eig::sym_eig_topk_subspace(k, d)?
    };

    let scale = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let mut eigenvalues = vals.clone();
    for v in eigenvalues.iter_mut() {
        if *v < -1e-10 * scale {
            return Err(Error::InvalidArgument(format!("matrix is not PSD: eigenvalue {v:.3e}")));
        }
        *v = v.max(0.0);
    }
    let trace: f64 = (0..n).map(|i| k[[i, i]]).sum();
    let kept: f64 = eigenvalues.sum();
    let tail_mass = if trace > 0.0 { (1.0 - kept / trace).max(0.0) } else { 0.0 };
    Ok(SpectralDecomposition { eigenvalues, eigenvectors: vecs, n, sigma2, tail_mass })
}

/// Feature functions evaluated on the sample: psi[i][d] = psi_d(T_i, X_i).
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub psi: Array2<f64>,
    pub labels: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(psi: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if psi.ncols() != labels.len() {
            return Err(Error::InvalidArgument("one label per feature column required".into()));
        }
        Ok(FeatureMatrix { psi, labels })
    }

    pub fn d(&self) -> usize {
        self.psi.ncols()
    }

    /// Column-wise concatenation.
    pub fn concat(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.psi.nrows() != other.psi.nrows() {
            return Err(Error::InvalidArgument("feature matrices have different sample sizes".into()));
        }
        let n = self.psi.nrows();
        let d = self.d() + other.d();
        let mut psi = Array2::<f64>::zeros((n, d));
        psi.slice_mut(ndarray::s![.., ..self.d()]).assign(&self.psi);
        psi.slice_mut(ndarray::s![.., self.d()..]).assign(&other.psi);
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        FeatureMatrix::new(psi, labels)
    }
}

/// Kernel-PCA features: sqrt(n) times the eigenvector columns, which makes
/// the empirical second moment of each column exactly one. Columns whose
/// eigenvalue is negligible against the top one carry no spectrum and are
/// dropped; the count of dropped columns is returned for the caller to
/// surface.
pub fn kpca_features(dec: &SpectralDecomposition) -> (FeatureMatrix, usize) {
    let n = dec.n;
    let top = dec.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let keep: Vec<usize> = (0..dec.d()).filter(|&d| dec.eigenvalues[d] > 1e-12 * top).collect();
    let dropped = dec.d() - keep.len();
    let mut psi = Array2::<f64>::zeros((n, keep.len()));
    let mut labels = Vec::with_capacity(keep.len());
    let root_n = (n as f64).sqrt();
    for (col, &d) in keep.iter().enumerate() {
        for i in 0..n {
            psi[[i, col]] = root_n * dec.eigenvectors[[i, d]];
        }
        labels.push(format!("kpca{}", d + 1));
    }
    (FeatureMatrix { psi, labels }, dropped)
}

/// Evaluator of the GP credible-ball quadratic e -> e^T M e, its gradient
/// 2 M e, and the operator norm of M (for Lipschitz constants).
#[derive(Debug, Clone)]
pub enum QuadraticForm {
    /// Truncated spectral form: weights lambda_d / (sigma^2 (lambda_d + sigma^2))
    /// on the coordinates v_d^T e.
    Spectral { weights: Array1<f64>, vectors: Array2<f64>, opnorm: f64 },
    /// Dense form via Cholesky solves against K + sigma^2 I and the ridge-
    /// regularized posterior covariance.
    Full { k: Array2<f64>, noise_chol: Cholesky, posterior_chol: Cholesky, opnorm: f64 },
}

impl QuadraticForm {
    pub fn value(&self, e: &Array1<f64>) -> f64 {
        match self {
            QuadraticForm::Spectral { weights, vectors, .. } => {
                let coords = vectors.t().dot(e);
                weights.iter().zip(coords.iter()).map(|(w, c)| w * c * c).sum()
            }
            QuadraticForm::Full { k, noise_chol, posterior_chol, .. } => {
                let a = k.dot(&noise_chol.solve(e));
                let y = posterior_chol.solve(&a);
                a.dot(&y)
            }
        }
    }

    /// Gradient 2 M e.
    pub fn grad(&self, e: &Array1<f64>) -> Array1<f64> {
        match self {
            QuadraticForm::Spectral { weights, vectors, .. } => {
                let mut coords = vectors.t().dot(e);
                for (c, w) in coords.iter_mut().zip(weights.iter()) {
                    *c *= 2.0 * w;
                }
                vectors.dot(&coords)
            }
            QuadraticForm::Full { k, noise_chol, posterior_chol, .. } => {
                let a = k.dot(&noise_chol.solve(e));
                let y = posterior_chol.solve(&a);
                k.dot(&noise_chol.solve(&y)) * 2.0
            }
        }
    }

    pub fn opnorm(&self) -> f64 {
        match self {
            QuadraticForm::Spectral { opnorm, .. } | QuadraticForm::Full { opnorm, .. } => *opnorm,
        }
    }
}

fn gp_weight(lambda: f64, sigma2: f64) -> f64 {
    lambda / (sigma2 * (lambda + sigma2))
}

/// Full-rank GP quadratic form. O(n^3) setup and O(n^2) evaluation:
/// test scale only.
pub fn gp_quadratic_full(k: &Array2<f64>, sigma2: f64) -> Result<QuadraticForm> {
    let n = k.nrows();
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let mut noisy = k.clone();
    for i in 0..n {
        noisy[[i, i]] += sigma2;
    }
    let noise_chol = Cholesky::new(&noisy).ok_or(Error::Singular { context: "gp noise matrix" })?;
    // Posterior covariance K - K (K + sigma^2 I)^{-1} K, ridge-regularized.
    let kinvk = k.dot(&noise_chol.solve_mat(k));
    let mut posterior = k - &kinvk;
    for i in 0..n {
        posterior[[i, i]] += 1e-10;
    }
    let posterior_chol = Cholesky::new(&posterior).ok_or(Error::Singular { context: "gp posterior covariance" })?;
    // Operator norm from the top eigenvalue of K by power iteration; the GP
    // weight is increasing in lambda.
    let lambda1 = power_iteration_top(k);
    let opnorm = gp_weight(lambda1.max(0.0), sigma2);
    Ok(QuadraticForm::Full { k: k.clone(), noise_chol, posterior_chol, opnorm })
}

fn power_iteration_top(k: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let mut v = Array1::<f64>::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let kv = k.dot(&v);
        let norm = kv.dot(&kv).sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        let next = &kv / norm;
        let new_lambda = next.dot(&k.dot(&next));
        let done = (new_lambda - lambda).abs() <= 1e-12 * (1.0 + new_lambda.abs());
        lambda = new_lambda;
        v = next;
        if done {
            break;
        }
    }
    lambda
}

/// Low-rank GP quadratic form from a truncated decomposition: cost O(nD).
pub fn gp_quadratic_lowrank(dec: &SpectralDecomposition) -> QuadraticForm {
    let weights = Array1::from_iter(dec.eigenvalues.iter().map(|&l| gp_weight(l, dec.sigma2)));
    let opnorm = weights.iter().fold(0.0f64, |a, &b| a.max(b));
    QuadraticForm::Spectral { weights, vectors: dec.eigenvectors.clone(), opnorm }
}

/// Chi-squared quantile by Newton iterations on the regularized incomplete
/// gamma function, Wilson-Hilferty initialization.
pub fn chi2_quantile(dof: usize, level: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidArgument("dof must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must be in (0,1), got {level}")));
    }
    let k = dof as f64;
    let z = normal_quantile(level);
    let c = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - c + z * c.sqrt()).powi(3)).max(1e-8);
    let shape = k / 2.0;
    let log_norm = -shape * (2.0f64).ln() - ln_gamma(shape);
    for _ in 0..100 {
        let g = gamma_p(shape, x / 2.0) - level;
        let density = (log_norm + (shape - 1.0) * x.ln() - x / 2.0).exp();
        if density <= 0.0 {
            break;
        }
        let mut step = g / density;
        // Keep the iterate positive.
        while x - step <= 0.0 {
            step /= 2.0;
        }
        x -= step;
        if step.abs() <= 1e-10 {
            break;
        }
    }
    Ok(x)
}

/// Default GP noise variance. Box-type models bound the conditional
/// variance of w - 1 by the squared half-width of the per-sample box; pure
/// f-divergence budgets admit no such bound, so a fallback constant is
/// returned with the warning flag set.
pub fn default_sigma2(model: &SensitivityModel, prop: &crate::data::PropensityEstimate) -> Result<(f64, bool)> {
    match model {
        SensitivityModel::Box(b) => {
            let bounds = b.bind(prop)?;
            let half = bounds.max_half_width();
            Ok(((half * half).max(1e-6), false))
        }
        SensitivityModel::FDivergence(_) => Ok((1.0, true)),
    }
}
