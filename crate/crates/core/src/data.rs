//! Logged bandit datasets: the synthetic generator with ground truth, CSV
//! ingestion for external data, logistic propensity estimation, per-action
//! weight rescaling, and Monte Carlo evaluation of policies on the simulator.
//!
//! The synthetic generator draws a binary latent trait, Gaussian covariates,
//! two potential outcomes, and a confounder equal to the comparison of the
//! potential outcomes, so the logging policy favors whichever arm is worse in
//! a way no covariate records. Every variable has its own counter-based
//! random stream: adding draws to one variable never perturbs another.

use crate::policy::{sigmoid, Policy};
use crate::rng::CounterRng;
use crate::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Covariate dimension of the synthetic generator.
pub const SYNTHETIC_DIM: usize = 5;

/// Mean vector of the synthetic covariates.
pub const MU_X: [f64; 5] = [-1.0, 0.5, -1.0, 0.0, -1.0];
/// Outcome-0 covariate weights.
pub const BETA_X0: [f64; 5] = [0.0, 0.5, -0.5, 0.0, 0.0];
/// Outcome-1 covariate weights.
pub const BETA_X1: [f64; 5] = [-1.5, 1.5, -2.0, 1.0, 0.5];
/// Latent-trait weight in outcome 0.
pub const BETA_XI0: f64 = 1.0;
/// Latent-trait weight in outcome 1.
pub const BETA_XI1: f64 = -1.0;
/// Intercept of outcome 0.
pub const BETA_CONST0: f64 = 2.5;
/// Intercept of outcome 1.
pub const BETA_CONST1: f64 = -0.5;
/// Nominal propensity weights: e(x) = sigmoid(BETA_E . x).
pub const BETA_E: [f64; 5] = [0.0, 0.75, -0.5, 0.0, -1.0];

// Stream ids for the per-variable generators.
const STREAM_XI: u64 = 1;
const STREAM_X: u64 = 2;
const STREAM_NOISE0: u64 = 3;
const STREAM_NOISE1: u64 = 4;
const STREAM_T: u64 = 5;
const STREAM_MC_T: u64 = 6;

/// Ground-truth fields carried by simulated datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub u: Vec<u8>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// e(X_i, U_i): the confounded propensity that actually drew T.
    pub propensity_confounded: Vec<f64>,
    /// e(X_i): the nominal propensity.
    pub propensity_nominal: Vec<f64>,
}

/// A logged contextual-bandit dataset.
#[derive(Debug, Clone)]
pub struct LoggedDataset {
    pub rewards: Array1<f64>,
    pub actions: Vec<usize>,
    pub covariates: Array2<f64>,
    pub action_count: usize,
    truth: Option<Truth>,
}

impl LoggedDataset {
    pub fn new(
        rewards: Array1<f64>,
        actions: Vec<usize>,
        covariates: Array2<f64>,
        action_count: usize,
        truth: Option<Truth>,
    ) -> Result<Self> {
        let n = rewards.len();
        if n == 0 {
            return Err(Error::Data("dataset must have at least one row".into()));
        }
        if actions.len() != n || covariates.nrows() != n {
            return Err(Error::Data("rewards, actions, covariates must have equal row counts".into()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= action_count) {
            return Err(Error::Data(format!("action {bad} outside declared range 0..{action_count}")));
        }
        if let Some(t) = &truth {
            if t.u.len() != n || t.y0.len() != n || t.y1.len() != n {
                return Err(Error::Data("truth fields must match the sample size".into()));
            }
            for i in 0..n {
                let want = if actions[i] == 1 { t.y1[i] } else { t.y0[i] };
                if (rewards[i] - want).abs() > 1e-12 {
                    return Err(Error::Data(format!("row {i}: reward does not match the stated potential outcome")));
                }
            }
        }
        Ok(LoggedDataset { rewards, actions, covariates, action_count, truth })
    }

    pub fn n(&self) -> usize {
        self.rewards.len()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    /// Simulator ground truth. Estimators never call this; oracles and tests do.
    pub fn ground_truth(&self) -> Result<&Truth> {
        self.truth.as_ref().ok_or(Error::TruthMissing)
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }

    /// Per-sample probabilities of the logged actions under `policy`.
    pub fn policy_probabilities(&self, policy: &Policy) -> Array1<f64> {
        Array1::from_iter(
            (0..self.n()).map(|i| policy.prob(self.actions[i], self.covariate_row(i), self.action_count)),
        )
    }

    /// Deterministic row split for holdout evaluation: even indices train,
    /// odd indices test.
    pub fn split_even_odd(&self) -> (LoggedDataset, LoggedDataset) {
        let pick = |keep_even: bool| -> LoggedDataset {
            let idx: Vec<usize> = (0..self.n()).filter(|i| (i % 2 == 0) == keep_even).collect();
            let rewards = Array1::from_iter(idx.iter().map(|&i| self.rewards[i]));
            let actions = idx.iter().map(|&i| self.actions[i]).collect();
            let mut cov = Array2::zeros((idx.len(), self.dim()));
            for (r, &i) in idx.iter().enumerate() {
                cov.row_mut(r).assign(&self.covariates.row(i));
            }
            let truth = self.truth.as_ref().map(|t| Truth {
                u: idx.iter().map(|&i| t.u[i]).collect(),
                y0: idx.iter().map(|&i| t.y0[i]).collect(),
                y1: idx.iter().map(|&i| t.y1[i]).collect(),
                propensity_confounded: idx.iter().map(|&i| t.propensity_confounded[i]).collect(),
                propensity_nominal: idx.iter().map(|&i| t.propensity_nominal[i]).collect(),
            });
            LoggedDataset {
                rewards,
                actions,
                covariates: cov,
                action_count: self.action_count,
                truth,
            }
        };
        (pick(true), pick(false))
    }
}

/// Nominal propensity of the synthetic generator.
pub fn nominal_propensity(x: ArrayView1<'_, f64>) -> f64 {
    let z: f64 = BETA_E.iter().zip(x.iter()).map(|(b, v)| b * v).sum();
    sigmoid(z)
}

/// Confounded propensity e(x, u) = 6 e(x) / (4 + 5u + e(x)(2 - 5u)).
pub fn confounded_propensity(e_x: f64, u: u8) -> f64 {
    let u = u as f64;
    6.0 * e_x / (4.0 + 5.0 * u + e_x * (2.0 - 5.0 * u))
}

/// Conditional outcome means of the generator given covariates and the
/// latent trait.
pub fn outcome_means(x: ArrayView1<'_, f64>, xi: u8) -> (f64, f64) {
    let xi = xi as f64;
    let m0: f64 = BETA_X0.iter().zip(x.iter()).map(|(b, v)| b * v).sum::<f64>() + BETA_XI0 * xi + BETA_CONST0;
    let m1: f64 = BETA_X1.iter().zip(x.iter()).map(|(b, v)| b * v).sum::<f64>() + BETA_XI1 * xi + BETA_CONST1;
    (m0, m1)
}

/// Simulate `n` rows with ground truth attached.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<LoggedDataset> {
    generate_synthetic_with_noise(n, seed, 1.0)
}

/// Noise-scale override used by tests that need the degenerate noiseless
/// generator; production callers use [`generate_synthetic`].
pub fn generate_synthetic_with_noise(n: usize, seed: u64, noise_sd: f64) -> Result<LoggedDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut rng_xi = CounterRng::new(seed, STREAM_XI);
    let mut rng_x = CounterRng::new(seed, STREAM_X);
    let mut rng_n0 = CounterRng::new(seed, STREAM_NOISE0);
    let mut rng_n1 = CounterRng::new(seed, STREAM_NOISE1);
    let mut rng_t = CounterRng::new(seed, STREAM_T);

    let mut rewards = Array1::<f64>::zeros(n);
    let mut actions = vec![0usize; n];
    let mut covariates = Array2::<f64>::zeros((n, SYNTHETIC_DIM));
    let mut truth = Truth {
        u: vec![0; n],
        y0: vec![0.0; n],
        y1: vec![0.0; n],
        propensity_confounded: vec![0.0; n],
        propensity_nominal: vec![0.0; n],
    };

    for i in 0..n {
        let xi: u8 = rng_xi.bernoulli(0.5) as u8;
        for j in 0..SYNTHETIC_DIM {
            covariates[[i, j]] = MU_X[j] + rng_x.normal();
        }
        let x = covariates.row(i);
        let (m0, m1) = outcome_means(x, xi);
        let y0 = m0 + noise_sd * rng_n0.normal();
        let y1 = m1 + noise_sd * rng_n1.normal();
        let u: u8 = (y0 > y1) as u8;
        let e_x = nominal_propensity(x);
        let e_xu = confounded_propensity(e_x, u);
        let t = rng_t.bernoulli(e_xu) as usize;

        actions[i] = t;
        rewards[i] = if t == 1 { y1 } else { y0 };
        truth.u[i] = u;
        truth.y0[i] = y0;
        truth.y1[i] = y1;
        truth.propensity_confounded[i] = e_xu;
        truth.propensity_nominal[i] = e_x;
    }

    LoggedDataset::new(rewards, actions, covariates, 2, Some(truth))
}

/// Unconfounded Monte Carlo estimate of a policy's value on the generator,
/// with its standard error.
pub fn true_policy_value(policy: &Policy, n_mc: usize, seed: u64) -> (f64, f64) {
    true_policy_value_with_noise(policy, n_mc, seed, 1.0)
}

pub fn true_policy_value_with_noise(policy: &Policy, n_mc: usize, seed: u64, noise_sd: f64) -> (f64, f64) {
    assert!(n_mc >= 2);
    let mut rng_xi = CounterRng::new(seed, STREAM_XI);
    let mut rng_x = CounterRng::new(seed, STREAM_X);
    let mut rng_n0 = CounterRng::new(seed, STREAM_NOISE0);
    let mut rng_n1 = CounterRng::new(seed, STREAM_NOISE1);
    let mut rng_t = CounterRng::new(seed, STREAM_MC_T);

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut x = Array1::<f64>::zeros(SYNTHETIC_DIM);
    for _ in 0..n_mc {
        let xi: u8 = rng_xi.bernoulli(0.5) as u8;
        for j in 0..SYNTHETIC_DIM {
            x[j] = MU_X[j] + rng_x.normal();
        }
        let (m0, m1) = outcome_means(x.view(), xi);
        let y0 = m0 + noise_sd * rng_n0.normal();
        let y1 = m1 + noise_sd * rng_n1.normal();
        let p1 = policy.prob(1, x.view(), 2);
        let y = if rng_t.bernoulli(p1) { y1 } else { y0 };
        sum += y;
        sum_sq += y * y;
    }
    let nf = n_mc as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    (mean, (var / nf).sqrt())
}

/// Estimated logging propensities, with the fitted logistic coefficients and
/// any per-action rescaling applied so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityEstimate {
    /// p(T_i | X_i) for the logged action of each row.
    pub probabilities: Vec<f64>,
    /// n x action_count matrix of p(t | X_i).
    pub per_action: Array2<f64>,
    /// Logistic coefficients (intercept first); empty when probabilities came
    /// from an external source.
    pub coefficients: Vec<f64>,
    /// Cumulative per-action rescale factors (all 1 before rescaling).
    pub rescale_factors: Vec<f64>,
}

impl PropensityEstimate {
    /// Wrap externally supplied per-action probabilities.
    pub fn from_per_action(per_action: Array2<f64>, actions: &[usize]) -> Result<Self> {
        let n = per_action.nrows();
        if actions.len() != n {
            return Err(Error::Data("probability matrix and actions disagree on n".into()));
        }
        let mut probabilities = Vec::with_capacity(n);
        for (i, &t) in actions.iter().enumerate() {
            let p = per_action[[i, t]];
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Data(format!("row {i}: propensity {p} outside (0,1)")));
            }
            probabilities.push(p);
        }
        let k = per_action.ncols();
        Ok(PropensityEstimate { probabilities, per_action, coefficients: Vec::new(), rescale_factors: vec![1.0; k] })
    }

    pub fn action_count(&self) -> usize {
        self.per_action.ncols()
    }
}

const SEPARATION_LIMIT: f64 = 30.0;
const PROB_CLIP: f64 = 1e-6;

/// Fit binary logistic propensities (intercept plus main effects) by damped
/// Newton iterations.
pub fn fit_logistic_propensity(data: &LoggedDataset) -> Result<PropensityEstimate> {
    if data.action_count != 2 {
        return Err(Error::InvalidArgument("logistic propensity fit needs binary actions".into()));
    }
    let n = data.n();
    let p = data.dim();
    let mut beta = Array1::<f64>::zeros(p + 1);

    // Mean negative log-likelihood and its derivatives.
    let design = |i: usize, j: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            data.covariates[[i, j - 1]]
        }
    };
    let nll_grad = |beta: &Array1<f64>| -> (f64, Array1<f64>) {
        let mut nll = 0.0;
        let mut grad = Array1::<f64>::zeros(p + 1);
        for i in 0..n {
            let mut z = beta[0];
            for j in 1..=p {
                z += beta[j] * design(i, j);
            }
            let y = (data.actions[i] == 1) as u8 as f64;
            // log(1 + e^z) - y z, computed stably on both tails.
            nll += if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() } - y * z;
            let resid = sigmoid(z) - y;
            for j in 0..=p {
                grad[j] += resid * design(i, j);
            }
        }
        (nll / n as f64, grad / n as f64)
    };

    let (mut nll, mut grad) = nll_grad(&beta);
    for _ in 0..100 {
        if grad.dot(&grad).sqrt() <= 1e-8 {
            break;
        }
        // Newton direction from the mean Hessian.
        let mut hess = Array2::<f64>::zeros((p + 1, p + 1));
        for i in 0..n {
            let mut z = beta[0];
            for j in 1..=p {
                z += beta[j] * design(i, j);
            }
            let s = sigmoid(z);
            let w = (s * (1.0 - s)).max(1e-12);
            for a in 0..=p {
                let da = design(i, a) * w;
                for b in a..=p {
                    hess[[a, b]] += da * design(i, b);
                }
            }
        }
        for a in 0..=p {
            for b in 0..a {
                hess[[a, b]] = hess[[b, a]];
            }
        }
        hess /= n as f64;
        let step = crate::num::chol::solve_spd(&hess, &grad, "logistic Newton system")?;

        // Damping: halve until the objective decreases.
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let trial = &beta - &(&step * t);
            let (trial_nll, trial_grad) = nll_grad(&trial);
            if trial_nll <= nll {
                beta = trial;
                nll = trial_nll;
                grad = trial_grad;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        if beta.iter().any(|b| b.abs() > SEPARATION_LIMIT) {
            return Err(Error::Separation { limit: SEPARATION_LIMIT });
        }
    }
    if grad.dot(&grad).sqrt() > 1e-6 {
        return Err(Error::NoConvergence(format!(
            "logistic fit stalled at gradient norm {:.3e}",
            grad.dot(&grad).sqrt()
        )));
    }

    let mut per_action = Array2::<f64>::zeros((n, 2));
    let mut probabilities = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = beta[0];
        for j in 1..=p {
            z += beta[j] * design(i, j);
        }
        let p1 = sigmoid(z).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        per_action[[i, 0]] = 1.0 - p1;
        per_action[[i, 1]] = p1;
        probabilities.push(per_action[[i, data.actions[i]]]);
    }
    Ok(PropensityEstimate {
        probabilities,
        per_action,
        coefficients: beta.to_vec(),
        rescale_factors: vec![1.0; 2],
    })
}

/// Rescale each action's propensities so the empirical mean of the inverse
/// propensity over that action's rows is exactly one. Idempotent.
pub fn zsb_rescale(prop: &PropensityEstimate, data: &LoggedDataset) -> Result<PropensityEstimate> {
    let n = data.n();
    let k = prop.action_count();
    let mut factors = vec![0.0f64; k];
    let mut seen = vec![false; k];
    for i in 0..n {
        let t = data.actions[i];
        factors[t] += 1.0 / prop.probabilities[i];
        seen[t] = true;
    }
    for (t, present) in seen.iter().enumerate() {
        if !present {
            return Err(Error::AbsentAction(t));
        }
        factors[t] /= n as f64;
    }
    let mut per_action = prop.per_action.clone();
    for t in 0..k {
        for i in 0..n {
            per_action[[i, t]] *= factors[t];
        }
    }
    let probabilities: Vec<f64> = (0..n).map(|i| per_action[[i, data.actions[i]]]).collect();
    let rescale_factors = prop
        .rescale_factors
        .iter()
        .zip(factors.iter())
        .map(|(old, new)| old * new)
        .collect();
    Ok(PropensityEstimate {
        probabilities,
        per_action,
        coefficients: prop.coefficients.clone(),
        rescale_factors,
    })
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub reward: String,
    pub action: String,
    pub covariates: Vec<String>,
    /// Declared number of actions; inferred from the data when absent.
    pub action_count: Option<usize>,
}

/// Load observables from a CSV file (UTF-8, header row, comma delimiter).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoggedDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("column '{name}' not found in CSV header")))
    };
    let reward_col = col(&schema.reward)?;
    let action_col = col(&schema.action)?;
    let cov_cols: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;

    let mut rewards = Vec::new();
    let mut actions = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse_cell = |idx: usize| -> Result<f64> {
            record
                .get(idx)
                .ok_or_else(|| Error::Parse(format!("row {row_idx}: missing column {idx}")))?
                .trim()
                .parse::<f64>()
                .map_err(|_| {
                    Error::Parse(format!(
                        "row {row_idx}, column '{}': non-numeric cell '{}'",
                        headers.get(idx).unwrap_or("?"),
                        record.get(idx).unwrap_or("?")
                    ))
                })
        };
        rewards.push(parse_cell(reward_col)?);
        let action_raw = parse_cell(action_col)?;
        if action_raw.fract() != 0.0 || action_raw < 0.0 {
            return Err(Error::Parse(format!("row {row_idx}: action '{action_raw}' is not a nonnegative integer")));
        }
        actions.push(action_raw as usize);
        cov_rows.push(cov_cols.iter().map(|&c| parse_cell(c)).collect::<Result<_>>()?);
    }
    if rewards.is_empty() {
        return Err(Error::Data("CSV file has no data rows".into()));
    }
    let action_count = match schema.action_count {
        Some(k) => k,
        None => actions.iter().max().unwrap() + 1,
    };
    let n = rewards.len();
    let p = cov_cols.len();
    let mut covariates = Array2::<f64>::zeros((n, p));
    for (i, row) in cov_rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            covariates[[i, j]] = *v;
        }
    }
    LoggedDataset::new(Array1::from(rewards), actions, covariates, action_count, None)
}

/// Write observables as CSV (y, t, x1..xp) with full float precision.
pub fn write_csv(data: &LoggedDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string(), "t".to_string()];
    for j in 1..=data.dim() {
        header.push(format!("x{j}"));
    }
    writer.write_record(&header)?;
    for i in 0..data.n() {
        let mut row = vec![format!("{:.16e}", data.rewards[i]), data.actions[i].to_string()];
        for j in 0..data.dim() {
            row.push(format!("{:.16e}", data.covariates[[i, j]]));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DatasetJson<'a> {
    rewards: Vec<f64>,
    actions: &'a [usize],
    covariates: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<&'a Truth>,
}

/// JSON export for harness interchange.
pub fn dataset_to_json(data: &LoggedDataset) -> Result<String> {
    let body = DatasetJson {
        rewards: data.rewards.to_vec(),
        actions: &data.actions,
        covariates: (0..data.n()).map(|i| data.covariates.row(i).to_vec()).collect(),
        truth: data.truth.as_ref(),
    };
    Ok(serde_json::to_string_pretty(&body)?)
}
