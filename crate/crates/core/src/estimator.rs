//! User-facing bound estimators: plain inverse-propensity estimates, the
//! per-action balancing baseline, hard and soft-ball worst-case bounds,
//! quantile balancing, and the analytic sharp-bound reference for simulated
//! data. All bounds share one convention: the solver minimizes, and upper
//! bounds are the negated solve of the negated rewards, so both directions
//! run the identical code path.

use crate::constraint::{self, ConstraintSet, ConstraintSpec};
use crate::data::{LoggedDataset, PropensityEstimate};
use crate::kernel::{default_sigma2, gram_matrix, median_heuristic, truncated_eig, FeatureMatrix, KernelSpec};
use crate::policy::Policy;
use crate::sensitivity::{tan_bounds, BoundBox, BoxModel, SensitivityModel};
use crate::solver::{Problem, SolveReport};
use crate::{oracle, Error, Result};
use ndarray::{Array1, Array2};

/// Which side of the partial-identification interval to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Lower,
    Upper,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "lower" => Ok(Direction::Lower),
            "upper" => Ok(Direction::Upper),
            other => Err(Error::Parse(format!("direction must be lower or upper, got '{other}'"))),
        }
    }

    pub const BOTH: [Direction; 2] = [Direction::Lower, Direction::Upper];
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Lower => "lower",
            Direction::Upper => "upper",
        })
    }
}

/// One worst-case bound, with the weights that attain it and the certified
/// duality gap of the underlying solve.
#[derive(Debug, Clone)]
pub struct BoundEstimate {
    pub value: f64,
    pub direction: Direction,
    pub method: String,
    /// Worst-case inverse-propensity weights w_i = wtilde_i / phat_i.
    pub weights: Array1<f64>,
    pub gap: f64,
    pub model: String,
    pub spec: String,
}

/// pi(T_i|X_i)/phat_i * Y_i, the per-sample weighted rewards every bound
/// minimizes or maximizes over.
pub fn reward_vector(data: &LoggedDataset, prop: &PropensityEstimate, policy: &Policy) -> Array1<f64> {
    let pi = data.policy_probabilities(policy);
    Array1::from_shape_fn(data.n(), |i| pi[i] / prop.probabilities[i] * data.rewards[i])
}

/// The plain inverse-propensity point estimate E_n[(pi/phat) Y]. With
/// rescaled propensities this is the Hajek estimate.
pub fn ipw_estimate(data: &LoggedDataset, prop: &PropensityEstimate, policy: &Policy) -> f64 {
    reward_vector(data, prop, policy).mean().unwrap_or(0.0)
}

fn solve_constrained(
    r: &Array1<f64>,
    model: &SensitivityModel,
    prop: &PropensityEstimate,
    constraints: &ConstraintSet,
) -> Result<SolveReport> {
    match (model, constraints) {
        (SensitivityModel::Box(bm), ConstraintSet::HardOrtho { features }) => {
            let bounds = bm.bind(prop)?;
            Problem { r, features: Some(features), bounds: Some(&bounds), fdiv: None, quad: None }.solve()
        }
        (SensitivityModel::FDivergence(fm), ConstraintSet::HardOrtho { features }) => Problem {
            r,
            features: Some(features),
            bounds: None,
            fdiv: Some((fm.kind, fm.budget)),
            quad: None,
        }
        .solve(),
        (SensitivityModel::Box(bm), ConstraintSet::GpSoft { quad, radius, .. }) => {
            let bounds = bm.bind(prop)?;
            Problem { r, features: None, bounds: Some(&bounds), fdiv: None, quad: Some((quad, *radius)) }
                .solve()
        }
        (SensitivityModel::FDivergence(fm), ConstraintSet::GpSoft { quad, radius, .. }) => Problem {
            r,
            features: None,
            bounds: None,
            fdiv: Some((fm.kind, fm.budget)),
            quad: Some((quad, *radius)),
        }
        .solve(),
    }
}

fn bound_with_method(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    policy: &Policy,
    model: &SensitivityModel,
    constraints: &ConstraintSet,
    direction: Direction,
    method: &str,
) -> Result<BoundEstimate> {
    let mut r = reward_vector(data, prop, policy);
    if direction == Direction::Upper {
        r.mapv_inplace(|v| -v);
    }
    let report = solve_constrained(&r, model, prop, constraints)?;
    let value = match direction {
        Direction::Lower => report.dual.dual_value,
        Direction::Upper => -report.dual.dual_value,
    };
    let weights =
        Array1::from_shape_fn(data.n(), |i| report.wtilde[i] / prop.probabilities[i]);
    Ok(BoundEstimate {
        value,
        direction,
        method: method.to_string(),
        weights,
        gap: report.gap,
        model: model.describe(),
        spec: constraints.describe(),
    })
}

/// Worst-case bound under a prebuilt constraint set.
pub fn kcmc_bound(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    policy: &Policy,
    model: &SensitivityModel,
    constraints: &ConstraintSet,
    direction: Direction,
) -> Result<BoundEstimate> {
    let method = match constraints {
        ConstraintSet::HardOrtho { .. } => "kcmc-hard",
        ConstraintSet::GpSoft { .. } => "kcmc-gp",
    };
    bound_with_method(data, prop, policy, model, constraints, direction, method)
}

/// Per-action balancing baseline: hard orthogonality against the indicator
/// columns only. Expects propensities already rescaled so the unit weights
/// reproduce the Hajek estimate.
pub fn zsb_bound(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    policy: &Policy,
    model: &SensitivityModel,
    direction: Direction,
) -> Result<BoundEstimate> {
    let features = constraint::build_zsb(data, prop)?;
    let constraints = constraint::build_hard_ortho(features)?;
    bound_with_method(data, prop, policy, model, &constraints, direction, "zsb")
}

/// The balancing quantile level of a per-sample box: tau = (1-a)/(b-a),
/// constant across samples for odds-ratio boxes. Degenerate boxes get 0.5,
/// where any level gives the same pinned bound.
fn box_quantile_level(bounds: &BoundBox) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..bounds.len() {
        let width = bounds.b[i] - bounds.a[i];
        if width > 1e-12 {
            sum += (1.0 - bounds.a[i]) / width;
            count += 1;
        }
    }
    if count == 0 {
        0.5
    } else {
        sum / count as f64
    }
}

/// Quantile-balancing bound: a single balancing feature built from a fitted
/// conditional quantile at the box's balancing level, then the same hard
/// solve as every other bound. `augment_balancing` adds the per-action
/// indicator columns on top (off by default in the pipeline).
pub fn qb_bound(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    policy: &Policy,
    model: &SensitivityModel,
    direction: Direction,
    augment_balancing: bool,
) -> Result<BoundEstimate> {
    let SensitivityModel::Box(bm) = model else {
        return Err(Error::InvalidArgument(
            "quantile balancing needs a box model; the balancing level comes from the box".into(),
        ));
    };
    let bounds = bm.bind(prop)?;
    let tau = box_quantile_level(&bounds);
    let targets = match direction {
        Direction::Lower => data.rewards.clone(),
        Direction::Upper => data.rewards.mapv(|y| -y),
    };
    let mut features = constraint::qb_feature(data, prop, policy, &targets, tau)?;
    if augment_balancing {
        features = features.concat(&constraint::build_zsb(data, prop)?)?;
    }
    let constraints = constraint::build_hard_ortho(features)?;
    bound_with_method(data, prop, policy, model, &constraints, direction, "qb")
}

/// Builds the constraint set a parsed spec names, on concrete data. The
/// quantile-balancing spec depends on the direction because its feature is
/// fit to the (possibly negated) rewards.
pub fn build_constraints(
    spec: &ConstraintSpec,
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    model: &SensitivityModel,
    policy: &Policy,
    direction: Direction,
) -> Result<ConstraintSet> {
    match spec {
        ConstraintSpec::Zsb => constraint::build_hard_ortho(constraint::build_zsb(data, prop)?),
        ConstraintSpec::Qb => {
            let SensitivityModel::Box(bm) = model else {
                return Err(Error::InvalidArgument(
                    "quantile balancing needs a box model; the balancing level comes from the box".into(),
                ));
            };
            let bounds = bm.bind(prop)?;
            let tau = box_quantile_level(&bounds);
            let targets = match direction {
                Direction::Lower => data.rewards.clone(),
                Direction::Upper => data.rewards.mapv(|y| -y),
            };
            let features = constraint::qb_feature(data, prop, policy, &targets, tau)?;
            constraint::build_hard_ortho(features)
        }
        ConstraintSpec::KcmcHard { d } => {
            let dec = spectral_decomposition(data, prop, model, *d)?;
            let (features, _) = constraint::default_hard_features(&dec, data, prop)?;
            constraint::build_hard_ortho(features)
        }
        ConstraintSpec::KcmcGp { d, alpha } => {
            let dec = spectral_decomposition(data, prop, model, *d)?;
            constraint::build_gp_soft(&dec, *alpha)
        }
    }
}

/// Kernel spectral decomposition at the defaults: median-heuristic
/// lengthscale and the model's noise level.
pub fn spectral_decomposition(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    model: &SensitivityModel,
    d: usize,
) -> Result<crate::kernel::SpectralDecomposition> {
    let lengthscale = median_heuristic(data)?;
    let kspec = KernelSpec::rbf(lengthscale)?;
    let gram = gram_matrix(&kspec, data);
    let (sigma2, _defaulted) = default_sigma2(model, prop)?;
    truncated_eig(&gram, d.min(data.n()), sigma2)
}

/// One pipeline cell: build the constraint system the `ConstraintSpec`
/// describes and solve in the given direction. Method names follow the
/// constraint family.
pub fn estimate_bound(
    data: &LoggedDataset,
    prop: &PropensityEstimate,
    policy: &Policy,
    model: &SensitivityModel,
    spec: &ConstraintSpec,
    direction: Direction,
) -> Result<BoundEstimate> {
    let constraints = build_constraints(spec, data, prop, model, policy, direction)?;
    let method = match spec {
        ConstraintSpec::Zsb => "zsb",
        ConstraintSpec::Qb => "qb",
        ConstraintSpec::KcmcHard { .. } => "kcmc-hard",
        ConstraintSpec::KcmcGp { .. } => "kcmc-gp",
    };
    bound_with_method(data, prop, policy, model, &constraints, direction, method)
}

// ------------------------------------------------------ quantile regression

/// A fitted linear conditional-quantile model.
#[derive(Debug, Clone)]
pub struct QuantileModel {
    pub coefficients: Array1<f64>,
    /// design * coefficients, the fitted quantiles per row.
    pub fitted: Array1<f64>,
    pub tau: f64,
    /// Norm of the smallest pinball-loss subgradient found at the fit; small
    /// values certify optimality.
    pub subgradient_norm: f64,
}

/// Linear tau-quantile regression by pinball-loss minimization. The pinball
/// problem is the box dual with per-sample bounds [1-tau, 2-tau], so this
/// reuses the exact piecewise-linear machinery including its kink
/// refinement; ties resolve to the right endpoint, matching the usual
/// empirical-quantile convention.
pub fn quantile_regression(
    design: &Array2<f64>,
    targets: &Array1<f64>,
    tau: f64,
) -> Result<QuantileModel> {
    let n = targets.len();
    if design.nrows() != n || n == 0 {
        return Err(Error::InvalidArgument("design and targets must agree on a nonempty sample".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level must be in (0,1), got {tau}")));
    }
    constraint::check_full_rank(design)?;
    let labels = (0..design.ncols()).map(|j| format!("phi{j}")).collect();
    let features = FeatureMatrix::new(design.clone(), labels)?;
    let bounds = BoundBox {
        a: Array1::from_elem(n, 1.0 - tau),
        b: Array1::from_elem(n, 2.0 - tau),
    };
    let problem =
        Problem { r: targets, features: Some(&features), bounds: Some(&bounds), fdiv: None, quad: None };
    let report = problem.solve()?;
    let coefficients = report.dual.eta.clone();
    let fitted = design.dot(&coefficients);
    let resid = constraint::ortho_residuals(&features, &report.wtilde);
    let subgradient_norm = resid.dot(&resid).sqrt();
    Ok(QuantileModel { coefficients, fitted, tau, subgradient_norm })
}

// ------------------------------------------------------- analytic reference

/// Sharp-bound reference for simulated data: the conditional-quantile
/// closed form evaluated with the generator's true marginal propensities
/// and outcome law. Reads nothing from the estimation pipeline; only the
/// logged draws. Refuses datasets without ground truth, which marks data
/// that did not come from the simulator.
pub fn cmc_oracle_box(
    data: &LoggedDataset,
    policy: &Policy,
    model: &BoxModel,
    direction: Direction,
) -> Result<f64> {
    data.ground_truth()?;
    let n = data.n();
    let tau = 1.0 / (1.0 + model.gamma_odds);
    let mut total = 0.0;
    for i in 0..n {
        let x = data.covariate_row(i);
        let t = data.actions[i];
        let p1 = oracle::true_marginal_propensity(x);
        let p_obs = if t == 1 { p1 } else { 1.0 - p1 };
        let tb = tan_bounds(model.gamma_odds, p_obs)?;
        let pi = policy.prob(t, x, data.action_count);
        let (y, q) = match direction {
            Direction::Lower => (data.rewards[i], oracle::observational_quantile(t, x, tau)),
            Direction::Upper => (-data.rewards[i], -oracle::observational_quantile(t, x, 1.0 - tau)),
        };
        let w = if y <= q { tb.b_wtilde } else { tb.a_wtilde };
        total += w * pi / p_obs * y;
    }
    let value = total / n as f64;
    Ok(match direction {
        Direction::Lower => value,
        Direction::Upper => -value,
    })
}
