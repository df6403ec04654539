//! Policies over discrete actions, mixtures on the simplex, and concave
//! worst-case policy learning.

use crate::constraint::{ConstraintSet, ConstraintSpec};
use crate::data::{fit_logistic_propensity, zsb_rescale, LoggedDataset, PropensityEstimate};
use crate::estimator::{estimate_bound, Direction};
use crate::sensitivity::{BoundBox, FKind, SensitivityModel};
use crate::solver::{
    dual_objective_fdiv, recover_primal_fdiv, solve_hard_box, solve_hard_fdiv, DualSolution,
};
use crate::{num, Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// A stochastic policy over the binary/discrete action set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Policy {
    /// Always plays one action.
    Constant { action: usize },
    /// Uniform over the action set.
    Uniform,
    /// Binary policy with pi(1|x) = sigmoid(c' x); no intercept term.
    Logistic { coefficients: Vec<f64> },
    /// Convex combination of component policies.
    Mixture(MixturePolicy),
}

/// Mixture with simplex weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixturePolicy {
    pub components: Vec<Policy>,
    pub beta: Vec<f64>,
}

impl Policy {
    /// The synthetic generator's nominal action probability, reused as the
    /// default evaluation target.
    pub fn synthetic_nominal() -> Policy {
        Policy::Logistic { coefficients: crate::data::BETA_E.to_vec() }
    }

    /// Probability of `action` given covariates, for `action_count` actions.
    pub fn prob(&self, action: usize, x: ArrayView1<'_, f64>, action_count: usize) -> f64 {
        debug_assert!(action < action_count);
        match self {
            Policy::Constant { action: a } => {
                if action == *a {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Uniform => 1.0 / action_count as f64,
            Policy::Logistic { coefficients } => {
                debug_assert_eq!(action_count, 2, "logistic policies are binary");
                let z: f64 = coefficients.iter().zip(x.iter()).map(|(c, v)| c * v).sum();
                let p1 = sigmoid(z);
                if action == 1 {
                    p1
                } else {
                    1.0 - p1
                }
            }
            Policy::Mixture(m) => m
                .components
                .iter()
                .zip(m.beta.iter())
                .map(|(c, &b)| b * c.prob(action, x, action_count))
                .sum(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Policy::Constant { action } => format!("always-{action}"),
            Policy::Uniform => "uniform".to_string(),
            Policy::Logistic { .. } => "logistic".to_string(),
            Policy::Mixture(m) => {
                let parts: Vec<String> = m
                    .components
                    .iter()
                    .zip(m.beta.iter())
                    .map(|(c, b)| format!("{:.4}*{}", b, c.describe()))
                    .collect();
                format!("mixture({})", parts.join(" + "))
            }
        }
    }

    /// Named presets for the CLI: `nominal`, `uniform`, `always-K`.
    pub fn parse(name: &str) -> Result<Policy> {
        if name == "nominal" {
            return Ok(Policy::synthetic_nominal());
        }
        if name == "uniform" {
            return Ok(Policy::Uniform);
        }
        if let Some(rest) = name.strip_prefix("always-") {
            let action: usize = rest
                .parse()
                .map_err(|e| Error::Parse(format!("policy preset '{name}': {e}")))?;
            return Ok(Policy::Constant { action });
        }
        Err(Error::Parse(format!("unknown policy preset '{name}'")))
    }
}

impl MixturePolicy {
    pub fn new(components: Vec<Policy>, beta: Vec<f64>) -> Result<Self> {
        if components.len() != beta.len() || components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs one weight per component".into()));
        }
        let sum: f64 = beta.iter().sum();
        if beta.iter().any(|&b| b < -1e-12) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights must lie on the simplex (sum {sum})")));
        }
        Ok(MixturePolicy { components, beta })
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ------------------------------------------------------------ learning

/// Per-component weighted rewards rho[i][k] = pi_k(T_i|X_i)/phat_i * Y_i;
/// the mixture's reward vector is rho * beta, affine in beta.
pub fn rho_matrix(data: &LoggedDataset, prop: &PropensityEstimate, components: &[Policy]) -> Array2<f64> {
    let n = data.n();
    let mut rho = Array2::<f64>::zeros((n, components.len()));
    for (k, c) in components.iter().enumerate() {
        let pi = data.policy_probabilities(c);
        for i in 0..n {
            rho[[i, k]] = pi[i] / prop.probabilities[i] * data.rewards[i];
        }
    }
    rho
}

/// Gradient of the worst-case value in the mixture weights, by the chain
/// rule through the affine reward map: dG/dbeta_k = E_n[wtilde_i rho_ik] at
/// the weights recovered from the current dual point.
pub fn policy_gradient(rho: &Array2<f64>, wtilde: &Array1<f64>) -> Array1<f64> {
    let n = rho.nrows() as f64;
    rho.t().dot(wtilde) / n
}

fn simplex_project(v: &Array1<f64>) -> Array1<f64> {
    Array1::from(num::simplex::project_simplex(v.as_slice().expect("contiguous")))
}

/// A learned mixture with the dual certificate of its training lower bound
/// and the per-iteration trace of certified lower bounds.
#[derive(Debug, Clone)]
pub struct LearnedMixture {
    pub policy: MixturePolicy,
    pub dual: DualSolution,
    /// Training lower bound after each iteration; nondecreasing.
    pub trace: Vec<f64>,
}

enum Adversary<'a> {
    Box(BoundBox),
    FDiv { kind: FKind, gamma: f64, psi: Option<&'a Array2<f64>> },
}

/// Maximizes the worst-case lower bound of a mixture policy over the
/// simplex. The objective is jointly concave in (beta, eta, eta_f) because
/// the reward vector is affine in beta; beta takes projected-gradient steps
/// with Armijo backtracking while the dual block runs two quasi-Newton steps
/// per iteration (box adversaries re-solve their piecewise-linear dual
/// exactly instead). Ascent starts from the best single component, so the
/// learned bound never falls below the best vertex.
pub fn learn_mixture(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    model: &SensitivityModel,
    constraints: &ConstraintSet,
    components: &[Policy],
) -> Result<LearnedMixture> {
    let k = components.len();
    if k < 2 {
        return Err(Error::InvalidArgument("mixture learning needs at least two components".into()));
    }
    let ConstraintSet::HardOrtho { features } = constraints else {
        return Err(Error::InvalidArgument(
            "mixture learning runs on hard orthogonality constraints only".into(),
        ));
    };
    let rho = rho_matrix(data, prop, components);
    let adversary = match model {
        SensitivityModel::Box(bm) => Adversary::Box(bm.bind(prop)?),
        SensitivityModel::FDivergence(fm) => {
            Adversary::FDiv { kind: fm.kind, gamma: fm.budget, psi: Some(&features.psi) }
        }
    };

    // Vertex initialization: exact solve per component, keep the best.
    let mut beta = Array1::<f64>::zeros(k);
    let mut best = f64::NEG_INFINITY;
    let mut warm: Option<DualSolution> = None;
    for j in 0..k {
        let r = rho.column(j).to_owned();
        let (sol, _) = solve_vertex(&r, features, &adversary)?;
        if sol.dual_value > best {
            best = sol.dual_value;
            beta.fill(0.0);
            beta[j] = 1.0;
            warm = Some(sol);
        }
    }
    let warm = warm.expect("at least two vertices were solved");

    let mut trace = Vec::new();
    let mut current = best;
    let mut converged = false;
    let mut stall = 0usize;
    // Dual state for budget adversaries: x = [eta, ln eta_f].
    let mut dual_x = {
        let mut x = Array1::<f64>::zeros(features.d() + 1);
        x.slice_mut(ndarray::s![..features.d()]).assign(&warm.eta);
        x[features.d()] = warm.eta_f.max(1e-12).ln();
        x
    };

    for _ in 0..200 {
        let started_at = current;
        let r = rho.dot(&beta);

        // Dual block.
        let wtilde = match &adversary {
            Adversary::Box(bounds) => {
                let (sol, wt) = solve_hard_box(&r, Some(features), bounds)?;
                current = sol.dual_value.max(current);
                wt
            }
            Adversary::FDiv { kind, gamma, psi } => {
                let res = num::bfgs::maximize(
                    dual_x.clone(),
                    |x| fdiv_point(&r, *psi, *kind, *gamma, x),
                    2,
                    1e-9,
                );
                if res.value.is_finite() && res.value >= current {
                    current = res.value;
                    dual_x = res.x;
                }
                let (eta, eta_f) = split_dual(&dual_x);
                recover_primal_fdiv(&r, *psi, *kind, &eta, eta_f)
            }
        };

        // Policy block: projected gradient with Armijo backtracking. The
        // candidate direction is inf-norm normalized so the iterate path is
        // invariant under positive reward scaling.
        let grad = policy_gradient(&rho, &wtilde);
        let gmax = grad.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if gmax > 0.0 {
            let unit = &grad / gmax;
            let mut step = 1.0;
            for _ in 0..30 {
                let cand = simplex_project(&(&beta + &(&unit * step)));
                let dir = &cand - &beta;
                let ascent = grad.dot(&dir);
                if ascent <= 1e-14 * (1.0 + current.abs()) * gmax.max(1.0) {
                    break;
                }
                let value = partial_value(&rho.dot(&cand), features, &adversary, &dual_x)?;
                if value >= current + 1e-4 * ascent {
                    beta = cand;
                    current = value;
                    break;
                }
                step *= 0.5;
            }
        }

        trace.push(current);
        if current - started_at <= 1e-10 * (1.0 + current.abs()) {
            stall += 1;
            if stall >= 3 {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
    }

    // Exact certificate at the final mixture; at least as tight as any
    // partial dual value seen on the way, so the trace stays monotone.
    let r = rho.dot(&beta);
    let (mut dual, _) = solve_vertex(&r, features, &adversary)?;
    dual.converged &= converged;
    trace.push(dual.dual_value.max(current));
    let policy = MixturePolicy::new(components.to_vec(), beta.to_vec())?;
    Ok(LearnedMixture { policy, dual, trace })
}

fn solve_vertex(
    r: &Array1<f64>,
    features: &crate::kernel::FeatureMatrix,
    adversary: &Adversary<'_>,
) -> Result<(DualSolution, Array1<f64>)> {
    match adversary {
        Adversary::Box(bounds) => solve_hard_box(r, Some(features), bounds),
        Adversary::FDiv { kind, gamma, .. } => solve_hard_fdiv(r, Some(features), *kind, *gamma),
    }
}

fn split_dual(x: &Array1<f64>) -> (Array1<f64>, f64) {
    let d = x.len() - 1;
    (x.slice(ndarray::s![..d]).to_owned(), x[d].exp())
}

fn fdiv_point(
    r: &Array1<f64>,
    psi: Option<&Array2<f64>>,
    kind: FKind,
    gamma: f64,
    x: &Array1<f64>,
) -> Option<(f64, Array1<f64>)> {
    let d = x.len() - 1;
    if x[d] > 300.0 {
        return None;
    }
    let (eta, eta_f) = split_dual(x);
    let (value, grad_eta, grad_f) = dual_objective_fdiv(r, psi, kind, gamma, &eta, eta_f)?;
    let mut grad = Array1::<f64>::zeros(d + 1);
    grad.slice_mut(ndarray::s![..d]).assign(&grad_eta);
    grad[d] = grad_f * eta_f;
    Some((value, grad))
}

/// Lower bound certified at a candidate mixture: exact for box adversaries,
/// the current dual point's value for budget adversaries.
fn partial_value(
    r: &Array1<f64>,
    features: &crate::kernel::FeatureMatrix,
    adversary: &Adversary<'_>,
    dual_x: &Array1<f64>,
) -> Result<f64> {
    match adversary {
        Adversary::Box(bounds) => Ok(solve_hard_box(r, Some(features), bounds)?.0.dual_value),
        Adversary::FDiv { kind, gamma, psi } => {
            let (eta, eta_f) = split_dual(dual_x);
            Ok(dual_objective_fdiv(r, *psi, *kind, *gamma, &eta, eta_f)
                .map_or(f64::NEG_INFINITY, |(v, _, _)| v))
        }
    }
}

/// Train and holdout lower bounds of a learned mixture, each computed with
/// propensities and features fit on its own split so nothing leaks across.
#[derive(Debug, Clone, Serialize)]
pub struct HoldoutReport {
    pub train_bound: f64,
    pub test_bound: f64,
}

pub fn evaluate_learned(
    policy: &MixturePolicy,
    train: &LoggedDataset,
    holdout: &LoggedDataset,
    model: &SensitivityModel,
    spec: &ConstraintSpec,
) -> Result<HoldoutReport> {
    let as_policy = Policy::Mixture(policy.clone());
    let fresh = |data: &LoggedDataset| -> Result<f64> {
        let prop = zsb_rescale(&fit_logistic_propensity(data)?, data)?;
        Ok(estimate_bound(data, &prop, &as_policy, model, spec, Direction::Lower)?.value)
    };
    Ok(HoldoutReport { train_bound: fresh(train)?, test_bound: fresh(holdout)? })
}

#[cfg(test)]
mod policy_type_tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn probabilities_sum_to_one() {
        let x = array![0.3, -1.0, 2.0, 0.0, 1.0];
        let policies = [
            Policy::Constant { action: 1 },
            Policy::Uniform,
            Policy::synthetic_nominal(),
            Policy::Mixture(
                MixturePolicy::new(
                    vec![Policy::Constant { action: 0 }, Policy::Uniform],
                    vec![0.25, 0.75],
                )
                .unwrap(),
            ),
        ];
        for p in &policies {
            let total: f64 = (0..2).map(|t| p.prob(t, x.view(), 2)).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            assert!((0..2).all(|t| p.prob(t, x.view(), 2) >= 0.0));
        }
    }

    #[test]
    fn presets_parse() {
        assert!(matches!(Policy::parse("always-1").unwrap(), Policy::Constant { action: 1 }));
        assert!(matches!(Policy::parse("uniform").unwrap(), Policy::Uniform));
        assert!(matches!(Policy::parse("nominal").unwrap(), Policy::Logistic { .. }));
        assert!(Policy::parse("sometimes").is_err());
    }

    #[test]
    fn mixture_rejects_off_simplex_weights() {
        let comps = vec![Policy::Uniform, Policy::Uniform];
        assert!(MixturePolicy::new(comps.clone(), vec![0.6, 0.6]).is_err());
        assert!(MixturePolicy::new(comps, vec![1.2, -0.2]).is_err());
    }
}
