//! Constraint sets restricting the adversary's weights: hard orthogonality
//! to a feature span, soft Gaussian-process credible balls, zero-sum
//! balancing columns, and the quantile-balancing feature. Also the little
//! grammar that names them on the command line.

use crate::data::{LoggedDataset, PropensityEstimate};
use crate::kernel::{gp_quadratic_lowrank, kpca_features, FeatureMatrix, QuadraticForm, SpectralDecomposition};
use crate::policy::Policy;
use crate::{Error, Result};
use ndarray::{Array1, Array2};

/// Parsed form of one constraint request, before any data is seen.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    /// Hard orthogonality to D kernel-PCA features plus the balancing columns.
    KcmcHard { d: usize },
    /// Soft credible-ball constraint at miscoverage alpha, rank D.
    KcmcGp { d: usize, alpha: f64 },
    /// Zero-sum balancing columns only.
    Zsb,
    /// Single quantile-balancing feature.
    Qb,
}

pub const DEFAULT_GP_ALPHA: f64 = 0.05;

impl ConstraintSpec {
    /// Grammar: `kcmc:hard,D=100`, `kcmc:gp,D=100,alpha=0.05`, `zsb`, `qb`.
    /// The alpha key is optional and defaults to 0.05.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "zsb" => return Ok(ConstraintSpec::Zsb),
            "qb" => return Ok(ConstraintSpec::Qb),
            _ => {}
        }
        let rest = s
            .strip_prefix("kcmc:")
            .ok_or_else(|| Error::Parse(format!("unknown constraint spec '{s}' (expected kcmc:..., zsb, or qb)")))?;
        let mut items = rest.split(',');
        let mode = items.next().unwrap_or("").trim();
        let mut d: Option<usize> = None;
        let mut alpha: Option<f64> = None;
        for item in items {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("constraint spec item '{item}' is not KEY=VALUE")))?;
            match k.trim() {
                "D" => d = Some(v.trim().parse().map_err(|e| Error::Parse(format!("D: {e}")))?),
                "alpha" if mode == "gp" => {
                    alpha = Some(v.trim().parse().map_err(|e| Error::Parse(format!("alpha: {e}")))?)
                }
                other => return Err(Error::Parse(format!("constraint spec '{s}' has unknown key {other}"))),
            }
        }
        let d = d.ok_or_else(|| Error::Parse(format!("constraint spec '{s}' is missing D")))?;
        if d == 0 {
            return Err(Error::Parse("constraint spec needs D >= 1".into()));
        }
        match mode {
            "hard" => Ok(ConstraintSpec::KcmcHard { d }),
            "gp" => {
                let alpha = alpha.unwrap_or(DEFAULT_GP_ALPHA);
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::Parse(format!("alpha must be in (0,1), got {alpha}")));
                }
                Ok(ConstraintSpec::KcmcGp { d, alpha })
            }
            other => Err(Error::Parse(format!("unknown kcmc mode '{other}' (expected hard or gp)"))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ConstraintSpec::KcmcHard { d } => format!("kcmc:hard,D={d}"),
            ConstraintSpec::KcmcGp { d, alpha } => format!("kcmc:gp,D={d},alpha={alpha}"),
            ConstraintSpec::Zsb => "zsb".into(),
            ConstraintSpec::Qb => "qb".into(),
        }
    }
}

/// A constraint set bound to a concrete sample.
#[derive(Debug, Clone)]
pub enum ConstraintSet {
    /// E_n[psi_d (wtilde - 1)] = 0 for every feature column.
    HardOrtho { features: FeatureMatrix },
    /// (wtilde - 1)^T M (wtilde - 1) <= radius.
    GpSoft { quad: QuadraticForm, radius: f64, alpha: f64, dof: usize },
}

impl ConstraintSet {
    pub fn describe(&self) -> String {
        match self {
            ConstraintSet::HardOrtho { features } => format!("hard ortho, D={}", features.d()),
            ConstraintSet::GpSoft { radius, alpha, dof, .. } => {
                format!("gp ball, dof={dof}, alpha={alpha}, radius={radius:.6}")
            }
        }
    }
}

/// Per-column orthogonality residuals E_n[psi_d (wtilde - 1)].
pub fn ortho_residuals(features: &FeatureMatrix, wtilde: &Array1<f64>) -> Array1<f64> {
    let n = wtilde.len() as f64;
    let shifted = wtilde.mapv(|w| w - 1.0);
    features.psi.t().dot(&shifted) / n
}

/// Validates a hard orthogonality set: at most n-1 columns (with n columns
/// the weights are pinned to 1 and every bound collapses), and full column
/// rank by pivoted Gram-Schmidt at a relative tolerance.
pub fn build_hard_ortho(features: FeatureMatrix) -> Result<ConstraintSet> {
    let n = features.psi.nrows();
    let d = features.d();
    if d == 0 {
        return Err(Error::InvalidArgument("hard constraint set needs at least one feature".into()));
    }
    if d > n.saturating_sub(1) {
        return Err(Error::TooManyConstraints { d, n });
    }
    check_full_rank(&features.psi)?;
    Ok(ConstraintSet::HardOrtho { features })
}

pub(crate) fn check_full_rank(psi: &Array2<f64>) -> Result<()> {
    let d = psi.ncols();
    let frob = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-8 * frob.max(f64::MIN_POSITIVE);
    let mut cols: Vec<Array1<f64>> = (0..d).map(|j| psi.column(j).to_owned()).collect();
    let mut remaining: Vec<usize> = (0..d).collect();
    while !remaining.is_empty() {
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let na = cols[*a.1].dot(&cols[*a.1]);
                let nb = cols[*b.1].dot(&cols[*b.1]);
                na.partial_cmp(&nb).unwrap()
            })
            .unwrap();
        let norm = cols[best].dot(&cols[best]).sqrt();
        if norm <= tol {
            let mut columns = remaining.clone();
            columns.sort_unstable();
            return Err(Error::RankDeficient { columns, tol });
        }
        let q = &cols[best] / norm;
        remaining.swap_remove(pos);
        for &j in &remaining {
            let proj = q.dot(&cols[j]);
            cols[j] = &cols[j] - &(&q * proj);
        }
    }
    Ok(())
}

/// Zero-sum balancing columns, one per action: psi_t(i) = 1{T_i = t} / phat_i.
/// Orthogonality of wtilde - 1 to these recovers the self-normalized
/// estimator inside each action arm.
pub fn build_zsb(data: &LoggedDataset, prop: &PropensityEstimate) -> Result<FeatureMatrix> {
    let n = data.n();
    if prop.probabilities.len() != n {
        return Err(Error::InvalidArgument("propensity estimate does not match the sample".into()));
    }
    let mut psi = Array2::<f64>::zeros((n, data.action_count));
    let mut seen = vec![false; data.action_count];
    for i in 0..n {
        let t = data.actions[i];
        seen[t] = true;
        psi[[i, t]] = 1.0 / prop.probabilities[i];
    }
    if let Some(t) = seen.iter().position(|s| !s) {
        return Err(Error::AbsentAction(t));
    }
    let labels = (0..data.action_count).map(|t| format!("zsb{t}")).collect();
    FeatureMatrix::new(psi, labels)
}

/// Kernel-PCA features joined with the balancing columns: the default hard
/// constraint set. Returns the set and the count of zero-eigenvalue KPCA
/// columns that were dropped.
pub fn default_hard_features(
    dec: &SpectralDecomposition,
    data: &LoggedDataset,
    prop: &PropensityEstimate,
) -> Result<(FeatureMatrix, usize)> {
    let (kpca, dropped) = kpca_features(dec);
    let zsb = build_zsb(data, prop)?;
    let features = if kpca.d() == 0 { zsb } else { kpca.concat(&zsb)? };
    Ok((features, dropped))
}

/// Soft credible-ball constraint from a truncated decomposition. Eigenvalues
/// below 1e-12 of the top one carry no information and are dropped before
/// the degrees of freedom are counted; the radius is the chi-squared
/// (1 - alpha) quantile at those degrees of freedom.
pub fn build_gp_soft(dec: &SpectralDecomposition, alpha: f64) -> Result<ConstraintSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0,1), got {alpha}")));
    }
    let top = dec.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    if top <= 0.0 {
        return Err(Error::InvalidArgument("gp constraint needs a nonzero spectrum".into()));
    }
    let keep: Vec<usize> = (0..dec.d()).filter(|&d| dec.eigenvalues[d] >= 1e-12 * top).collect();
    let dof = keep.len();
    let filtered = if dof == dec.d() {
        dec.clone()
    } else {
        let mut eigenvalues = Array1::<f64>::zeros(dof);
        let mut eigenvectors = Array2::<f64>::zeros((dec.n, dof));
        for (col, &d) in keep.iter().enumerate() {
            eigenvalues[col] = dec.eigenvalues[d];
            for i in 0..dec.n {
                eigenvectors[[i, col]] = dec.eigenvectors[[i, d]];
            }
        }
        SpectralDecomposition { eigenvalues, eigenvectors, n: dec.n, sigma2: dec.sigma2, tail_mass: dec.tail_mass }
    };
    let radius = crate::kernel::chi2_quantile(dof, 1.0 - alpha)?;
    let quad = gp_quadratic_lowrank(&filtered);
    Ok(ConstraintSet::GpSoft { quad, radius, alpha, dof })
}

/// The quantile-balancing feature: psi(i) = (pi(T_i|X_i) / phat_i) * Qhat_i,
/// where Qhat is a linear tau-quantile fit of `targets` on the covariates
/// with per-action intercepts. Targets are passed separately so the caller
/// can negate rewards for upper bounds.
pub fn qb_feature(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    policy: &Policy,
    targets: &Array1<f64>,
    tau: f64,
) -> Result<FeatureMatrix> {
    let n = data.n();
    if targets.len() != n || prop.probabilities.len() != n {
        return Err(Error::InvalidArgument("targets and propensities must match the sample".into()));
    }
    let design = qb_design(data);
    let fit = crate::estimator::quantile_regression(&design, targets, tau)?;
    let pi = data.policy_probabilities(policy);
    let mut psi = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        psi[[i, 0]] = pi[i] / prop.probabilities[i] * fit.fitted[i];
    }
    FeatureMatrix::new(psi, vec!["qb".into()])
}

/// Quantile-regression design: one intercept per action, then the covariates.
pub fn qb_design(data: &LoggedDataset) -> Array2<f64> {
    let n = data.n();
    let p = data.dim();
    let mut design = Array2::<f64>::zeros((n, data.action_count + p));
    for i in 0..n {
        design[[i, data.actions[i]]] = 1.0;
        for j in 0..p {
            design[[i, data.action_count + j]] = data.covariates[[i, j]];
        }
    }
    design
}
