//! Uncertainty models for the unknown inverse propensity weights.
//!
//! # Background
//!
//! Logged actions may have depended on information the dataset never recorded.
//! All estimators in this crate therefore range over a set of candidate
//! weight functions w(y,t,x), odds-normalized as w~ = p_obs(t|x) * w so that
//! w~ = 1 recovers the unconfounded case. Two families describe how far w~
//! may stray from 1:
//!
//! * **Odds-ratio box.** If the odds ratio between the nominal propensity and
//!   the true (confounded) propensity is within [1/Gamma, Gamma], then the
//!   propensity itself lies in [a_pi, b_pi] with
//!
//!   ```text
//!   a_pi = 1 / (1 + Gamma   * (1/p - 1))
//!   b_pi = 1 / (1 + (1/Gamma) * (1/p - 1))
//!   ```
//!
//!   and the normalized weight is boxed per sample: w~ in [a, b] with
//!   a = p / b_pi and b = p / a_pi. Gamma = 1 collapses the box to {1}.
//!
//! * **f-divergence budget.** For a convex f with f(1) = 0, require the
//!   empirical mean of f(w~) to stay below a budget gamma. Seven standard
//!   kinds ship; each carries its Fenchel conjugate in closed form because
//!   the dual solver evaluates conjugates, never f itself.
//!
//! # Monotone conjugates
//!
//! The weights are nonnegative, so the object the dual actually needs is the
//! conjugate of f + (indicator of u >= 0), equivalently the monotone hull
//!
//! ```text
//! f*^(v) = inf over v <= v' of f*(v')
//! ```
//!
//! which flattens f* left of its minimizer and is nondecreasing. For five of
//! the seven kinds f* is already nondecreasing on its domain and f*^ = f*;
//! Pearson chi-squared flattens at level -1 left of v = -2, and total
//! variation flattens at level -1/2 left of v = -1/2. Subgradient selections
//! follow the right derivative at kinks (the choice only matters on
//! measure-zero ties and is what primal recovery expects).

use crate::data::PropensityEstimate;
use crate::{Error, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

/// The seven supported f-divergence kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FKind {
    Kl,
    ReverseKl,
    JensenShannon,
    SquaredHellinger,
    PearsonChi2,
    NeymanChi2,
    TotalVariation,
}

impl FKind {
    pub const ALL: [FKind; 7] = [
        FKind::Kl,
        FKind::ReverseKl,
        FKind::JensenShannon,
        FKind::SquaredHellinger,
        FKind::PearsonChi2,
        FKind::NeymanChi2,
        FKind::TotalVariation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FKind::Kl => "kl",
            FKind::ReverseKl => "reverse_kl",
            FKind::JensenShannon => "jensen_shannon",
            FKind::SquaredHellinger => "squared_hellinger",
            FKind::PearsonChi2 => "pearson_chi2",
            FKind::NeymanChi2 => "neyman_chi2",
            FKind::TotalVariation => "total_variation",
        }
    }

    pub fn parse(s: &str) -> Result<FKind> {
        FKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown f-divergence kind '{s}'")))
    }
}

impl std::fmt::Display for FKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// f(u) on u >= 0, extended-real (+inf outside the domain). 0 log 0 = 0.
pub fn f_value(kind: FKind, u: f64) -> f64 {
    if u < 0.0 {
        return f64::INFINITY;
    }
    match kind {
        FKind::Kl => {
            if u == 0.0 {
                0.0
            } else {
                u * u.ln()
            }
        }
        FKind::ReverseKl => {
            if u == 0.0 {
                f64::INFINITY
            } else {
                -u.ln()
            }
        }
        FKind::JensenShannon => {
            // Halved so that the conjugate below is its exact dual partner.
            let left = -0.5 * (u + 1.0) * ((u + 1.0) / 2.0).ln();
            let right = if u == 0.0 { 0.0 } else { 0.5 * u * u.ln() };
            left + right
        }
        FKind::SquaredHellinger => {
            let s = u.sqrt() - 1.0;
            s * s
        }
        FKind::PearsonChi2 => (u - 1.0) * (u - 1.0),
        FKind::NeymanChi2 => {
            if u == 0.0 {
                f64::INFINITY
            } else {
                1.0 / u - 1.0
            }
        }
        FKind::TotalVariation => 0.5 * (u - 1.0).abs(),
    }
}

/// Plain Fenchel conjugate f*(v), +inf outside dom(f*).
pub fn f_conjugate(kind: FKind, v: f64) -> f64 {
    match kind {
        FKind::Kl => (v - 1.0).exp(),
        FKind::ReverseKl => {
            if v < 0.0 {
                -1.0 - (-v).ln()
            } else {
                f64::INFINITY
            }
        }
        FKind::JensenShannon => {
            // Conjugate of the halved f: -(1/2) log(2 - e^{2v}) for v < (ln 2)/2.
            if v < 0.5 * std::f64::consts::LN_2 {
                -0.5 * (2.0 - (2.0 * v).exp()).ln()
            } else {
                f64::INFINITY
            }
        }
        FKind::SquaredHellinger => {
            if v < 1.0 {
                v / (1.0 - v)
            } else {
                f64::INFINITY
            }
        }
        FKind::PearsonChi2 => 0.25 * v * v + v,
        FKind::NeymanChi2 => {
            if v <= 0.0 {
                1.0 - 2.0 * (-v).sqrt()
            } else {
                f64::INFINITY
            }
        }
        FKind::TotalVariation => {
            if (-0.5..=0.5).contains(&v) {
                v
            } else {
                f64::INFINITY
            }
        }
    }
}

/// The monotone conjugate f*^ with a subgradient selection; stateless per kind.
#[derive(Debug, Clone, Copy)]
pub struct ConjugateEvaluator {
    pub kind: FKind,
}

/// f*^ for `kind`.
pub fn monotone_conjugate(kind: FKind) -> ConjugateEvaluator {
    ConjugateEvaluator { kind }
}

impl ConjugateEvaluator {
    /// f*^(v): f* clamped to its flat level left of the minimizer; +inf above
    /// the domain.
    pub fn value(&self, v: f64) -> f64 {
        match self.kind {
            FKind::PearsonChi2 => {
                if v <= -2.0 {
                    -1.0
                } else {
                    f_conjugate(self.kind, v)
                }
            }
            FKind::TotalVariation => {
                if v > 0.5 {
                    f64::INFINITY
                } else {
                    v.max(-0.5)
                }
            }
            _ => f_conjugate(self.kind, v),
        }
    }

    /// One element of the subdifferential of f*^ at v; right derivative at
    /// kinks. Finite wherever f*^ is finite except Neyman at v = 0, where the
    /// subdifferential is empty (vertical tangent) and +inf is returned.
    pub fn subgradient(&self, v: f64) -> f64 {
        match self.kind {
            FKind::Kl => (v - 1.0).exp(),
            FKind::ReverseKl => {
                if v < 0.0 {
                    -1.0 / v
                } else {
                    f64::INFINITY
                }
            }
            FKind::JensenShannon => {
                if v < 0.5 * std::f64::consts::LN_2 {
                    let e = (2.0 * v).exp();
                    e / (2.0 - e)
                } else {
                    f64::INFINITY
                }
            }
            FKind::SquaredHellinger => {
                if v < 1.0 {
                    1.0 / ((1.0 - v) * (1.0 - v))
                } else {
                    f64::INFINITY
                }
            }
            FKind::PearsonChi2 => {
                if v < -2.0 {
                    0.0
                } else {
                    0.5 * v + 1.0
                }
            }
            FKind::NeymanChi2 => {
                if v < 0.0 {
                    1.0 / (-v).sqrt()
                } else {
                    f64::INFINITY
                }
            }
            FKind::TotalVariation => {
                if v < -0.5 {
                    0.0
                } else if v <= 0.5 {
                    // At the upper endpoint the right side leaves the domain;
                    // return the least subgradient instead.
                    1.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Supremum of the domain of f*^.
    pub fn domain_sup(&self) -> f64 {
        match self.kind {
            FKind::Kl | FKind::PearsonChi2 => f64::INFINITY,
            FKind::ReverseKl => 0.0,
            FKind::JensenShannon => 0.5 * std::f64::consts::LN_2,
            FKind::SquaredHellinger => 1.0,
            FKind::NeymanChi2 => 0.0,
            FKind::TotalVariation => 0.5,
        }
    }

    /// Whether the domain supremum itself is excluded (open boundary). The
    /// Neyman boundary point is technically in the domain but carries an
    /// empty subdifferential, so ascent treats it as open too.
    pub fn domain_sup_open(&self) -> bool {
        match self.kind {
            FKind::Kl | FKind::PearsonChi2 | FKind::TotalVariation => false,
            FKind::ReverseKl | FKind::JensenShannon | FKind::SquaredHellinger | FKind::NeymanChi2 => true,
        }
    }

    /// Attained flat region, as (right edge v*, level), when one exists.
    pub fn flat(&self) -> Option<(f64, f64)> {
        match self.kind {
            FKind::PearsonChi2 => Some((-2.0, -1.0)),
            FKind::TotalVariation => Some((-0.5, -0.5)),
            _ => None,
        }
    }
}

/// Per-sample piecewise-linear conjugate of the box indicator with slopes
/// a below zero and b above; the closed form the box dual runs on.
#[inline]
pub fn box_conjugate(u: f64, a: f64, b: f64) -> f64 {
    if u < 0.0 {
        a * u
    } else {
        b * u
    }
}

/// Subgradient selection for the box conjugate; right derivative (b) at the
/// kink, matching the primal-recovery convention.
#[inline]
pub fn box_subgradient(u: f64, a: f64, b: f64) -> f64 {
    if u < 0.0 {
        a
    } else {
        b
    }
}

/// Propensity and normalized-weight ranges implied by an odds-ratio bound.
#[derive(Debug, Clone, Copy)]
pub struct TanBounds {
    pub a_pi: f64,
    pub b_pi: f64,
    pub a_wtilde: f64,
    pub b_wtilde: f64,
}

/// Box endpoints for odds ratio `gamma` at nominal propensity `p`.
pub fn tan_bounds(gamma: f64, p: f64) -> Result<TanBounds> {
    if !(gamma >= 1.0) {
        return Err(Error::InvalidArgument(format!("odds-ratio bound must be >= 1, got {gamma}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("propensity must lie in (0,1), got {p}")));
    }
    let odds_inv = 1.0 / p - 1.0;
    let a_pi = 1.0 / (1.0 + gamma * odds_inv);
    let b_pi = 1.0 / (1.0 + odds_inv / gamma);
    Ok(TanBounds { a_pi, b_pi, a_wtilde: p / b_pi, b_wtilde: p / a_pi })
}

/// Odds-ratio box model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoxModel {
    pub gamma_odds: f64,
}

impl BoxModel {
    pub fn new(gamma_odds: f64) -> Result<Self> {
        if !(gamma_odds >= 1.0) {
            return Err(Error::InvalidArgument(format!("odds-ratio bound must be >= 1, got {gamma_odds}")));
        }
        Ok(BoxModel { gamma_odds })
    }

    /// Per-sample normalized-weight bounds at the estimated propensities.
    /// Calibration rescaling can push a propensity slightly past 1; the box
    /// geometry clamps into [1e-6, 1-1e-6], and rounding never expels the
    /// unit weight from the box.
    pub fn bind(&self, prop: &PropensityEstimate) -> Result<BoundBox> {
        let n = prop.probabilities.len();
        let mut a = Array1::<f64>::zeros(n);
        let mut b = Array1::<f64>::zeros(n);
        for i in 0..n {
            let p = prop.probabilities[i].clamp(1e-6, 1.0 - 1e-6);
            let t = tan_bounds(self.gamma_odds, p)?;
            a[i] = t.a_wtilde.min(1.0);
            b[i] = t.b_wtilde.max(1.0);
        }
        Ok(BoundBox { a, b })
    }
}

/// Per-sample box [a_i, b_i] for the normalized weights; a <= 1 <= b holds
/// pointwise by construction.
#[derive(Debug, Clone)]
pub struct BoundBox {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
}

impl BoundBox {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn max_half_width(&self) -> f64 {
        self.a
            .iter()
            .zip(self.b.iter())
            .map(|(&a, &b)| (b - a) / 2.0)
            .fold(0.0, f64::max)
    }
}

/// f-divergence budget model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FDivergenceModel {
    pub kind: FKind,
    pub budget: f64,
}

impl FDivergenceModel {
    pub fn new(kind: FKind, budget: f64) -> Result<Self> {
        if !(budget >= 0.0) {
            return Err(Error::InvalidArgument(format!("budget must be >= 0, got {budget}")));
        }
        Ok(FDivergenceModel { kind, budget })
    }

    /// Empirical budget value (1/n) sum f(w~_i); +inf propagates.
    pub fn budget_value(&self, wtilde: &[f64]) -> f64 {
        let n = wtilde.len() as f64;
        wtilde.iter().map(|&w| f_value(self.kind, w)).sum::<f64>() / n
    }
}

/// Either uncertainty family, as selected by configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum SensitivityModel {
    Box(BoxModel),
    FDivergence(FDivergenceModel),
}

impl SensitivityModel {
    /// Parse the model grammar: `box:GAMMA=1.5` or
    /// `f:KIND=kl,GAMMA_BUDGET=0.01`.
    pub fn parse(s: &str) -> Result<Self> {
        let (head, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("model spec '{s}' needs the form family:KEY=VALUE,...")))?;
        let mut pairs = std::collections::BTreeMap::new();
        for item in rest.split(',') {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("model spec item '{item}' is not KEY=VALUE")))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |pairs: &mut std::collections::BTreeMap<String, String>, key: &str| -> Result<String> {
            pairs
                .remove(key)
                .ok_or_else(|| Error::Parse(format!("model spec '{s}' is missing {key}")))
        };
        let model = match head {
            "box" => {
                let gamma: f64 = take(&mut pairs, "GAMMA")?
                    .parse()
                    .map_err(|e| Error::Parse(format!("GAMMA: {e}")))?;
                SensitivityModel::Box(BoxModel::new(gamma)?)
            }
            "f" => {
                let kind = FKind::parse(&take(&mut pairs, "KIND")?)?;
                let budget: f64 = take(&mut pairs, "GAMMA_BUDGET")?
                    .parse()
                    .map_err(|e| Error::Parse(format!("GAMMA_BUDGET: {e}")))?;
                SensitivityModel::FDivergence(FDivergenceModel::new(kind, budget)?)
            }
            other => return Err(Error::Parse(format!("unknown model family '{other}' (expected box or f)"))),
        };
        if let Some(extra) = pairs.keys().next() {
            return Err(Error::Parse(format!("model spec '{s}' has unknown key {extra}")));
        }
        Ok(model)
    }

    pub fn describe(&self) -> String {
        match self {
            SensitivityModel::Box(b) => format!("box:GAMMA={}", b.gamma_odds),
            SensitivityModel::FDivergence(f) => format!("f:KIND={},GAMMA_BUDGET={}", f.kind, f.budget),
        }
    }

    /// The sweep parameter this model varies (odds ratio or budget).
    pub fn sensitivity_param(&self) -> f64 {
        match self {
            SensitivityModel::Box(b) => b.gamma_odds,
            SensitivityModel::FDivergence(f) => f.budget,
        }
    }
}


#[cfg(test)]
mod proptest_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn young_fenchel_holds_everywhere(
            kind_idx in 0usize..7,
            u in 0.0f64..40.0,
            v in -30.0f64..5.0,
        ) {
            let kind = FKind::ALL[kind_idx];
            let conj = monotone_conjugate(kind);
            let fu = f_value(kind, u);
            let fv = conj.value(v);
            if fu.is_finite() && fv.is_finite() {
                prop_assert!(fu + fv >= u * v - 1e-9);
            }
        }

        #[test]
        fn monotone_conjugate_is_nondecreasing(
            kind_idx in 0usize..7,
            v1 in -30.0f64..5.0,
            dv in 0.0f64..5.0,
        ) {
            let kind = FKind::ALL[kind_idx];
            let conj = monotone_conjugate(kind);
            let lo = conj.value(v1);
            let hi = conj.value(v1 + dv);
            if lo.is_finite() {
                prop_assert!(hi >= lo - 1e-12);
            }
        }

        #[test]
        fn tan_box_brackets_one(gamma in 1.0f64..20.0, p in 0.01f64..0.99) {
            let t = tan_bounds(gamma, p).unwrap();
            prop_assert!(t.a_wtilde <= 1.0 + 1e-12);
            prop_assert!(t.b_wtilde >= 1.0 - 1e-12);
            prop_assert!(t.a_pi <= p + 1e-12 && p <= t.b_pi + 1e-12);
        }
    }
}
