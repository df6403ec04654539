//! Dual solvers for the worst-case weighting problems. Every solver
//! minimizes the weighted value E_n[wtilde_i r_i] over an adversary class;
//! upper bounds come from negating r at the call site.
//!
//! Routes:
//! - hard box: per-sample bounds a <= wtilde <= b plus hard orthogonality.
//!   The dual is concave piecewise linear; solved by a softplus homotopy
//!   with a Polyak polish and a kink-refinement step, or an exact scan when
//!   there is a single feature.
//! - hard f-divergence: budget E_n[f(wtilde)] <= gamma plus hard
//!   orthogonality. Smooth concave dual over (eta, eta_f > 0), maximized by
//!   BFGS with eta_f = exp(s).
//! - soft ball: (wtilde-1)^T M (wtilde-1) <= radius with a box or budget
//!   adversary. Nested: FISTA on the inner weighted problem, projected
//!   supergradient ascent on the outer multipliers, stopping on a certified
//!   primal-dual gap.
//!
//! Weak duality makes every reported dual value a valid one-sided bound
//! even when iteration limits bite; `converged` and the certified gap say
//! how tight it is.

use crate::kernel::{FeatureMatrix, QuadraticForm};
use crate::num::bfgs;
use crate::num::chol::factor_spd;
use crate::sensitivity::{
    box_conjugate, box_subgradient, f_value, monotone_conjugate, BoundBox, FKind,
};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use std::f64::consts::LN_2;

/// One worst-case weighting problem: minimize E_n[wtilde r] over the
/// adversary. Exactly one of `bounds` (box model) and `fdiv` (budget model)
/// must be set; `quad` switches from hard orthogonality to the soft ball,
/// and the two constraint styles do not mix.
pub struct Problem<'a> {
    pub r: &'a Array1<f64>,
    pub features: Option<&'a FeatureMatrix>,
    pub bounds: Option<&'a BoundBox>,
    pub fdiv: Option<(FKind, f64)>,
    pub quad: Option<(&'a QuadraticForm, f64)>,
}

/// Adversary model for the soft-ball route.
pub enum GpModel<'a> {
    Box(&'a BoundBox),
    FDiv { kind: FKind, gamma: f64 },
}

/// Multipliers and diagnostics at the end of a dual maximization.
#[derive(Debug, Clone)]
pub struct DualSolution {
    /// Multipliers on the orthogonality features (empty when there are none).
    pub eta: Array1<f64>,
    /// Budget multiplier; 0 for box adversaries.
    pub eta_f: f64,
    /// Ball multiplier; 0 for hard routes.
    pub lambda_quad: f64,
    /// The certified bound: a valid lower bound on the primal minimum.
    pub dual_value: f64,
    /// Norm of the first-order certificate at the solution. For kinked
    /// objectives this is one selected supergradient and can be nonzero at
    /// an exact optimum; the certified gap is the reliable quality measure.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Constraint violations of the raw recovered weights.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityResiduals {
    /// max_d |E_n[psi_d (wtilde - 1)]|.
    pub ortho: f64,
    /// max(0, E_n[f(wtilde)] - gamma).
    pub budget: f64,
    /// max(0, (wtilde-1)^T M (wtilde-1) - radius).
    pub quad: f64,
}

/// A solved problem: the dual bound, the raw recovered weights, and the
/// gap to a feasibility-restored primal point.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub dual: DualSolution,
    /// Objective at the feasibility-restored weights.
    pub primal_value: f64,
    /// primal_value - dual_value; small when the solve is tight.
    pub gap: f64,
    /// Raw recovered weights, before restoration.
    pub wtilde: Array1<f64>,
    pub residuals: FeasibilityResiduals,
}

impl Problem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.r.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty objective".into()));
        }
        match (self.bounds.is_some(), self.fdiv.is_some()) {
            (true, true) => {
                return Err(Error::InvalidArgument(
                    "box bounds and an f-divergence budget cannot be combined".into(),
                ))
            }
            (false, false) => {
                return Err(Error::InvalidArgument(
                    "an adversary model (box bounds or f-divergence budget) is required".into(),
                ))
            }
            _ => {}
        }
        if let Some(b) = self.bounds {
            validate_bounds(b, n)?;
        }
        if let Some((_, gamma)) = self.fdiv {
            if gamma < 0.0 {
                return Err(Error::InvalidArgument(format!("budget must be nonnegative, got {gamma}")));
            }
        }
        if let Some(f) = self.features {
            if f.psi.nrows() != n {
                return Err(Error::InvalidArgument("feature matrix does not match the sample".into()));
            }
            if self.quad.is_some() && f.d() > 0 {
                return Err(Error::InvalidArgument(
                    "the soft-ball route does not take orthogonality features".into(),
                ));
            }
        }
        if let Some((_, radius)) = self.quad {
            if !(radius > 0.0) {
                return Err(Error::InvalidArgument(format!("ball radius must be positive, got {radius}")));
            }
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<SolveReport> {
        self.validate()?;
        let (dual, raw) = match (self.bounds, self.fdiv, self.quad) {
            (Some(b), None, None) => solve_hard_box(self.r, self.features, b)?,
            (None, Some((kind, gamma)), None) => solve_hard_fdiv(self.r, self.features, kind, gamma)?,
            (Some(b), None, Some((q, radius))) => solve_gp_soft(self.r, q, radius, GpModel::Box(b))?,
            (None, Some((kind, gamma)), Some((q, radius))) => {
                solve_gp_soft(self.r, q, radius, GpModel::FDiv { kind, gamma })?
            }
            _ => unreachable!("validate checked the model"),
        };
        certify(self, &dual, &raw)
    }
}

fn validate_bounds(b: &BoundBox, n: usize) -> Result<()> {
    if b.a.len() != n || b.b.len() != n {
        return Err(Error::InvalidArgument("bound arrays do not match the sample".into()));
    }
    for i in 0..n {
        if !(0.0 <= b.a[i] && b.a[i] <= 1.0 && 1.0 <= b.b[i] && b.b[i].is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bounds must satisfy 0 <= a <= 1 <= b, got ({}, {}) at row {i}",
                b.a[i], b.b[i]
            )));
        }
    }
    Ok(())
}

fn infnorm(x: &Array1<f64>) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn feature_psi(features: Option<&FeatureMatrix>) -> Option<&Array2<f64>> {
    features.and_then(|f| if f.d() == 0 { None } else { Some(&f.psi) })
}

// ---------------------------------------------------------------- hard box

/// Box dual objective and one supergradient at `eta`:
/// G(eta) = E_n[eta'psi - box_conj(eta'psi - r)].
pub fn dual_objective_box(
    r: &Array1<f64>,
    psi: Option<&Array2<f64>>,
    bounds: &BoundBox,
    eta: &Array1<f64>,
) -> (f64, Array1<f64>) {
    let n = r.len();
    let nf = n as f64;
    let d = psi.map_or(0, |p| p.ncols());
    let lin = match psi {
        Some(p) => p.dot(eta),
        None => Array1::zeros(n),
    };
    let mut value = 0.0;
    let mut grad = Array1::<f64>::zeros(d);
    for i in 0..n {
        let u = lin[i] - r[i];
        value += lin[i] - box_conjugate(u, bounds.a[i], bounds.b[i]);
        if let Some(p) = psi {
            let s = box_subgradient(u, bounds.a[i], bounds.b[i]);
            for k in 0..d {
                grad[k] += p[[i, k]] * (1.0 - s);
            }
        }
    }
    (value / nf, grad / nf)
}

/// Softplus-smoothed box dual at temperature `temp`; smooth and concave,
/// converging to the true dual from below as temp -> 0.
fn dual_objective_box_smooth(
    r: &Array1<f64>,
    psi: &Array2<f64>,
    bounds: &BoundBox,
    eta: &Array1<f64>,
    temp: f64,
) -> (f64, Array1<f64>) {
    let n = r.len();
    let nf = n as f64;
    let d = psi.ncols();
    let lin = psi.dot(eta);
    let mut value = 0.0;
    let mut grad = Array1::<f64>::zeros(d);
    for i in 0..n {
        let u = lin[i] - r[i];
        let width = bounds.b[i] - bounds.a[i];
        let z = u / temp;
        let (softplus, sigmoid) = if z > 35.0 {
            (u + temp * (-z).exp().ln_1p(), 1.0)
        } else if z < -35.0 {
            (temp * z.exp().ln_1p(), z.exp())
        } else {
            (temp * z.exp().ln_1p(), 1.0 / (1.0 + (-z).exp()))
        };
        value += lin[i] - bounds.a[i] * u - width * softplus;
        let s = bounds.a[i] + width * sigmoid;
        for k in 0..d {
            grad[k] += psi[[i, k]] * (1.0 - s);
        }
    }
    (value / nf, grad / nf)
}

/// Exact maximizer of the one-feature box dual: concave piecewise linear in
/// the scalar eta with breakpoints at r_i/psi_i, slopes nonincreasing, and
/// the end slopes signed so a maximizing breakpoint always exists. Returns
/// the largest breakpoint whose left-interval slope is nonnegative, which
/// reproduces the usual empirical-quantile convention when psi is constant.
fn exact_scan_box(r: &Array1<f64>, psi_col: &Array1<f64>, bounds: &BoundBox) -> f64 {
    let n = r.len();
    let nf = n as f64;
    let mut slope = 0.0;
    let mut breaks: Vec<(f64, f64)> = Vec::new();
    for i in 0..n {
        let p = psi_col[i];
        if p == 0.0 {
            continue;
        }
        let s_far = if p > 0.0 { bounds.a[i] } else { bounds.b[i] };
        slope += p * (1.0 - s_far) / nf;
        breaks.push((r[i] / p, p.abs() * (bounds.b[i] - bounds.a[i]) / nf));
    }
    if breaks.is_empty() {
        return 0.0;
    }
    breaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let tol = 1e-12 * (1.0 + slope.abs());
    let mut best = breaks[0].0;
    let mut k = 0;
    while k < breaks.len() {
        let eta = breaks[k].0;
        if slope >= -tol {
            best = eta;
        } else {
            break;
        }
        // Drop every tied breakpoint's slope decrement at once.
        while k < breaks.len() && breaks[k].0 == eta {
            slope -= breaks[k].1;
            k += 1;
        }
    }
    best
}

fn gauss_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Option<Array1<f64>> {
    let d = b.len();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..d {
        let mut piv = col;
        for row in (col + 1)..d {
            if a[[row, col]].abs() > a[[piv, col]].abs() {
                piv = row;
            }
        }
        if a[[piv, col]].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..d {
                a.swap([col, k], [piv, k]);
            }
            b.swap(col, piv);
        }
        for row in (col + 1)..d {
            let f = a[[row, col]] / a[[col, col]];
            for k in col..d {
                a[[row, k]] -= f * a[[col, k]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = Array1::<f64>::zeros(d);
    for col in (0..d).rev() {
        let mut acc = b[col];
        for k in (col + 1)..d {
            acc -= a[[col, k]] * x[k];
        }
        x[col] = acc / a[[col, col]];
    }
    Some(x)
}

/// Hard box route. Returns the dual solution and the raw recovered weights.
pub fn solve_hard_box(
    r: &Array1<f64>,
    features: Option<&FeatureMatrix>,
    bounds: &BoundBox,
) -> Result<(DualSolution, Array1<f64>)> {
    let n = r.len();
    validate_bounds(bounds, n)?;
    let psi = feature_psi(features);
    let d = psi.map_or(0, |p| p.ncols());

    let (eta, iterations) = if d == 0 {
        (Array1::zeros(0), 0)
    } else if d == 1 {
        let col = psi.unwrap().column(0).to_owned();
        (Array1::from_elem(1, exact_scan_box(r, &col, bounds)), 0)
    } else {
        let p = psi.unwrap();
        let scale = 1.0f64.max(infnorm(r));
        let temps: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5].iter().map(|t| t * scale).collect();
        let mut eta = Array1::<f64>::zeros(d);
        let mut iterations = 0usize;
        let (mut best_val, _) = dual_objective_box(r, psi, bounds, &eta);
        let mut best_eta = eta.clone();
        for &temp in &temps {
            let res = bfgs::maximize(
                eta.clone(),
                |e| Some(dual_objective_box_smooth(r, p, bounds, e, temp)),
                200,
                1e-9,
            );
            iterations += res.iterations;
            if res.value.is_finite() {
                eta = res.x;
                let (v, _) = dual_objective_box(r, psi, bounds, &eta);
                if v > best_val {
                    best_val = v;
                    best_eta = eta.clone();
                }
            }
        }
        // Polyak polish on the true piecewise-linear dual, targeting the
        // smoothing error bound above the best value seen.
        let max_width = (0..n).map(|i| bounds.b[i] - bounds.a[i]).fold(0.0f64, f64::max);
        let delta = (2.0 * LN_2 * temps[temps.len() - 1] * max_width).max(1e-12 * scale);
        let mut cur = best_eta.clone();
        for _ in 0..200 {
            let (v, g) = dual_objective_box(r, psi, bounds, &cur);
            if v > best_val {
                best_val = v;
                best_eta = cur.clone();
            }
            let gn2 = g.dot(&g);
            if gn2 <= (1e-13 * scale).powi(2) {
                break;
            }
            let step = (best_val + delta - v) / gn2;
            if step <= 0.0 {
                break;
            }
            cur = &cur + &(&g * step);
            iterations += 1;
        }
        // Kink refinement: at an optimum of the piecewise-linear dual, d of
        // the terms eta'psi_i - r_i sit at their kinks. Solve those linear
        // systems exactly for every d-subset of the d+1 nearest kinks and
        // keep whichever improves the dual.
        if d <= n {
            let lin = p.dot(&best_eta);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| {
                let ui = (lin[i] - r[i]).abs();
                let uj = (lin[j] - r[j]).abs();
                ui.partial_cmp(&uj).unwrap()
            });
            let pool = idx[..(d + 1).min(n)].to_vec();
            let subsets: Vec<Vec<usize>> = if pool.len() > d {
                (0..pool.len())
                    .map(|skip| pool.iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, &i)| i).collect())
                    .collect()
            } else {
                vec![pool.clone()]
            };
            for subset in subsets {
                let mut a = Array2::<f64>::zeros((d, d));
                let mut rhs = Array1::<f64>::zeros(d);
                for (row, &i) in subset.iter().enumerate() {
                    for k in 0..d {
                        a[[row, k]] = p[[i, k]];
                    }
                    rhs[row] = r[i];
                }
                if let Some(cand) = gauss_solve(a, rhs) {
                    let (v, _) = dual_objective_box(r, psi, bounds, &cand);
                    if v > best_val {
                        best_val = v;
                        best_eta = cand;
                    }
                }
            }
        }
        (best_eta, iterations)
    };

    let (dual_value, grad) = dual_objective_box(r, psi, bounds, &eta);
    let raw = recover_primal_box(r, psi, bounds, &eta);
    let grad_norm = grad.dot(&grad).sqrt();
    let sol = DualSolution {
        eta,
        eta_f: 0.0,
        lambda_quad: 0.0,
        dual_value,
        grad_norm,
        iterations,
        converged: true,
    };
    Ok((sol, raw))
}

/// Primal weights from box dual multipliers: the bound selected by the sign
/// of eta'psi - r, with samples at a kink adjusted by a tiny box-constrained
/// least-squares step that zeroes the orthogonality residuals.
pub fn recover_primal_box(
    r: &Array1<f64>,
    psi: Option<&Array2<f64>>,
    bounds: &BoundBox,
    eta: &Array1<f64>,
) -> Array1<f64> {
    let n = r.len();
    let nf = n as f64;
    let lin = match psi {
        Some(p) => p.dot(eta),
        None => Array1::zeros(n),
    };
    let tol = 1e-8 * (1.0 + infnorm(r));
    let mut s = Array1::<f64>::zeros(n);
    let mut tied: Vec<usize> = Vec::new();
    for i in 0..n {
        let u = lin[i] - r[i];
        s[i] = box_subgradient(u, bounds.a[i], bounds.b[i]);
        if u.abs() <= tol {
            tied.push(i);
        }
    }
    let Some(p) = psi else { return s };
    if tied.is_empty() {
        return s;
    }
    // Residual as a function of the tied coordinates: resid = c + B^T s_J.
    let d = p.ncols();
    let mut c = Array1::<f64>::zeros(d);
    for i in 0..n {
        let w = if tied.contains(&i) { 0.0 } else { s[i] };
        for k in 0..d {
            c[k] += p[[i, k]] * (w - 1.0) / nf;
        }
    }
    let m = tied.len();
    let mut b = Array2::<f64>::zeros((m, d));
    for (j, &i) in tied.iter().enumerate() {
        for k in 0..d {
            b[[j, k]] = p[[i, k]] / nf;
        }
    }
    let lip = 2.0 * b.iter().map(|v| v * v).sum::<f64>();
    if lip <= 0.0 {
        return s;
    }
    let step = 1.0 / lip;
    let mut sj = Array1::<f64>::from_iter(tied.iter().map(|&i| s[i]));
    for _ in 0..500 {
        let resid = &c + &b.t().dot(&sj);
        let grad = b.dot(&resid) * 2.0;
        let mut moved = 0.0f64;
        for (j, &i) in tied.iter().enumerate() {
            let next = (sj[j] - step * grad[j]).clamp(bounds.a[i], bounds.b[i]);
            moved = moved.max((next - sj[j]).abs());
            sj[j] = next;
        }
        if moved <= 1e-13 {
            break;
        }
    }
    for (j, &i) in tied.iter().enumerate() {
        s[i] = sj[j];
    }
    s
}

// ------------------------------------------------------- hard f-divergence

/// Budget dual objective and gradient at (eta, eta_f > 0):
/// G = -eta_f gamma + E_n[eta'psi] - eta_f E_n[fconj((eta'psi - r)/eta_f)].
/// None outside the conjugate's domain (an extended-value -infinity).
/// Newton polish in the direct (eta, eta_f) coordinates. The log
/// parametrization that keeps the budget multiplier positive during the
/// global search is badly scaled when it converges large, and quasi-Newton
/// steps can stall there with the value converged but the multipliers, and
/// so the recovered weights, still off. Near the optimum the objective is
/// smooth and strictly concave, so a few damped Newton steps with a
/// finite-difference Hessian of the analytic gradient close the residual.
fn newton_polish_fdiv(
    r: &Array1<f64>,
    psi: Option<&Array2<f64>>,
    kind: FKind,
    gamma: f64,
    eta: &mut Array1<f64>,
    eta_f: &mut f64,
) {
    let d = eta.len();
    let m = d + 1;
    let eval = |x: &Array1<f64>| -> Option<(f64, Array1<f64>)> {
        if !(x[d] > 0.0) {
            return None;
        }
        let e = x.slice(ndarray::s![..d]).to_owned();
        dual_objective_fdiv(r, psi, kind, gamma, &e, x[d]).map(|(v, ge, gf)| {
            let mut g = Array1::<f64>::zeros(m);
            for k in 0..d {
                g[k] = ge[k];
            }
            g[d] = gf;
            (v, g)
        })
    };
    let mut x = Array1::<f64>::zeros(m);
    for k in 0..d {
        x[k] = eta[k];
    }
    x[d] = *eta_f;
    let Some((mut value, mut grad)) = eval(&x) else { return };
    let scale = 1.0f64.max(infnorm(r));
    let mut mu = 1e-8;
    for _ in 0..60 {
        let gnorm = infnorm(&grad);
        if gnorm <= 1e-12 * scale {
            break;
        }
        let mut hess = Array2::<f64>::zeros((m, m));
        let mut probes_ok = true;
        for j in 0..m {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut lo = x.clone();
            let mut hi = x.clone();
            lo[j] -= h;
            hi[j] += h;
            match (eval(&lo), eval(&hi)) {
                (Some((_, glo)), Some((_, ghi))) => {
                    for i in 0..m {
                        hess[[i, j]] = (ghi[i] - glo[i]) / (2.0 * h);
                    }
                }
                _ => {
                    probes_ok = false;
                    break;
                }
            }
        }
        if !probes_ok {
            break;
        }
        // Negate to a positive-semidefinite system and symmetrize the
        // finite-difference noise away. Levenberg damping handles the flat
        // directions a bare Newton step would shoot along.
        let mut neg = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                neg[[i, j]] = -0.5 * (hess[[i, j]] + hess[[j, i]]);
            }
        }
        let diag_scale = (0..m).map(|i| neg[[i, i]].abs()).fold(0.0f64, f64::max).max(1e-12);
        let mut advanced = false;
        for _ in 0..40 {
            let mut damped = neg.clone();
            for i in 0..m {
                damped[[i, i]] += mu * diag_scale;
            }
            let Some(chol) = crate::num::chol::Cholesky::new(&damped) else {
                mu = (mu * 10.0).min(1e12);
                continue;
            };
            let delta = chol.solve(&grad);
            let cand = &x + &delta;
            if let Some((cv, cg)) = eval(&cand) {
                let ascent = cv > value + 1e-16 * value.abs();
                let flat = cv >= value - 1e-13 * (1.0 + value.abs());
                if ascent || (flat && infnorm(&cg) < 0.99 * gnorm) {
                    x = cand;
                    value = cv;
                    grad = cg;
                    mu = (mu * 0.1).max(1e-14);
                    advanced = true;
                    break;
                }
            }
            mu = (mu * 10.0).min(1e12);
        }
        if !advanced {
            break;
        }
    }
    for k in 0..d {
        eta[k] = x[k];
    }
    *eta_f = x[d];
}

pub fn dual_objective_fdiv(
    r: &Array1<f64>,
    psi: Option<&Array2<f64>>,
    kind: FKind,
    gamma: f64,
    eta: &Array1<f64>,
    eta_f: f64,
) -> Option<(f64, Array1<f64>, f64)> {
    if !(eta_f > 0.0) || !eta_f.is_finite() {
        return None;
    }
    let n = r.len();
    let nf = n as f64;
    let d = psi.map_or(0, |p| p.ncols());
    let conj = monotone_conjugate(kind);
    let sup = conj.domain_sup();
    let open = conj.domain_sup_open();
    let lin = match psi {
        Some(p) => p.dot(eta),
        None => Array1::zeros(n),
    };
    let mut mean_lin = 0.0;
    let mut mean_conj = 0.0;
    let mut mean_vs = 0.0;
    let mut grad_eta = Array1::<f64>::zeros(d);
    for i in 0..n {
        let v = (lin[i] - r[i]) / eta_f;
        if v > sup || (open && v >= sup) {
            return None;
        }
        let fc = conj.value(v);
        if !fc.is_finite() {
            return None;
        }
        let s = conj.subgradient(v);
        if !s.is_finite() {
            return None;
        }
        mean_lin += lin[i] / nf;
        mean_conj += fc / nf;
        mean_vs += v * s / nf;
        if let Some(p) = psi {
            for k in 0..d {
                grad_eta[k] += p[[i, k]] * (1.0 - s) / nf;
            }
        }
    }
    let value = -eta_f * gamma + mean_lin - eta_f * mean_conj;
    if !value.is_finite() {
        return None;
    }
    let grad_f = -gamma - mean_conj + mean_vs;
    Some((value, grad_eta, grad_f))
}

/// Multipliers eta with max_i(eta'psi_i - r_i) strictly negative, needed to
/// start the reverse-KL and Neyman duals when some r_i <= 0. Subgradient
/// descent on the max; fails when no such point exists within reach, in
/// which case the primal is typically unbounded below for these kinds.
fn phase1_strict_interior(r: &Array1<f64>, psi: &Array2<f64>) -> Result<Array1<f64>> {
    let n = r.len();
    let d = psi.ncols();
    let scale = 1.0 + infnorm(r);
    let target = -1e-2 * scale;
    let floor_ok = -1e-8 * scale;
    let mut eta = Array1::<f64>::zeros(d);
    let mut best_h = f64::INFINITY;
    let mut best_eta = eta.clone();
    for _ in 0..2000 {
        let lin = psi.dot(&eta);
        let mut h = f64::NEG_INFINITY;
        let mut arg = 0;
        for i in 0..n {
            let v = lin[i] - r[i];
            if v > h {
                h = v;
                arg = i;
            }
        }
        if h < best_h {
            best_h = h;
            best_eta = eta.clone();
        }
        if h <= target {
            return Ok(eta);
        }
        let g = psi.row(arg).to_owned();
        let gn2 = g.dot(&g);
        if gn2 <= 0.0 {
            break;
        }
        let step = (h - target) / gn2;
        eta = &eta - &(&g * step);
    }
    if best_h <= floor_ok {
        Ok(best_eta)
    } else {
        Err(Error::NoConvergence(format!(
            "no multipliers keep eta'psi - r negative (best slack {best_h:.3e}); for this divergence \
             the worst case is unbounded below unless the features can dominate the nonpositive rewards"
        )))
    }
}

/// Hard f-divergence route.
pub fn solve_hard_fdiv(
    r: &Array1<f64>,
    features: Option<&FeatureMatrix>,
    kind: FKind,
    gamma: f64,
) -> Result<(DualSolution, Array1<f64>)> {
    let n = r.len();
    if gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("budget must be nonnegative, got {gamma}")));
    }
    let psi = feature_psi(features);
    let d = psi.map_or(0, |p| p.ncols());
    let conj = monotone_conjugate(kind);
    let sup = conj.domain_sup();
    let scale = 1.0f64.max(infnorm(r));

    let (eta0, eta_f0) = if sup > 0.0 {
        let ef = if sup.is_finite() { 2.0 * scale / sup } else { 1.0 };
        (Array1::zeros(d), ef)
    } else if r.iter().all(|&ri| ri > 0.0) {
        (Array1::zeros(d), 1.0)
    } else {
        let Some(p) = psi else {
            return Err(Error::NoConvergence(format!(
                "the {kind} worst case is unbounded below when some rewards are nonpositive and \
                 no orthogonality features are present"
            )));
        };
        let eta = phase1_strict_interior(r, p)?;
        let lin = p.dot(&eta);
        let umax = (0..n).map(|i| (lin[i] - r[i]).abs()).fold(0.0f64, f64::max);
        (eta, 1.0f64.max(umax))
    };

    let mut x0 = Array1::<f64>::zeros(d + 1);
    for k in 0..d {
        x0[k] = eta0[k];
    }
    x0[d] = eta_f0.ln();
    let res = bfgs::maximize(
        x0,
        |x| {
            if x[d] > 300.0 {
                return None;
            }
            let eta = x.slice(ndarray::s![..d]).to_owned();
            let eta_f = x[d].exp();
            dual_objective_fdiv(r, psi, kind, gamma, &eta, eta_f).map(|(v, ge, gf)| {
                let mut g = Array1::<f64>::zeros(d + 1);
                for k in 0..d {
                    g[k] = ge[k];
                }
                g[d] = gf * eta_f;
                (v, g)
            })
        },
        500,
        1e-7,
    );
    if !res.value.is_finite() {
        return Err(Error::NoConvergence("budget dual never found a finite value".into()));
    }
    let mut eta = res.x.slice(ndarray::s![..d]).to_owned();
    let mut eta_f = res.x[d].exp();
    newton_polish_fdiv(r, psi, kind, gamma, &mut eta, &mut eta_f);
    let Some((dual_value, ge, gf)) = dual_objective_fdiv(r, psi, kind, gamma, &eta, eta_f) else {
        return Err(Error::NoConvergence("budget dual left the conjugate domain".into()));
    };
    let grad_norm = (ge.dot(&ge) + gf * gf).sqrt();
    let raw = recover_primal_fdiv(r, psi, kind, &eta, eta_f);
    let sol = DualSolution {
        eta,
        eta_f,
        lambda_quad: 0.0,
        dual_value,
        grad_norm,
        iterations: res.iterations,
        converged: res.converged,
    };
    Ok((sol, raw))
}

/// Primal weights from budget dual multipliers: wtilde_i is the conjugate
/// subgradient at (eta'psi_i - r_i)/eta_f.
pub fn recover_primal_fdiv(
    r: &Array1<f64>,
    psi: Option<&Array2<f64>>,
    kind: FKind,
    eta: &Array1<f64>,
    eta_f: f64,
) -> Array1<f64> {
    let n = r.len();
    let conj = monotone_conjugate(kind);
    let lin = match psi {
        Some(p) => p.dot(eta),
        None => Array1::zeros(n),
    };
    Array1::from_shape_fn(n, |i| {
        let s = conj.subgradient((lin[i] - r[i]) / eta_f);
        if s.is_finite() {
            s.max(0.0)
        } else {
            0.0
        }
    })
}

// ------------------------------------------------------------- soft ball

enum InnerH<'a> {
    Box(&'a BoundBox),
    FDiv { kind: FKind, eta_f: f64 },
}

fn prox_newton(
    z: f64,
    dphi: impl Fn(f64) -> f64,
    ddphi: impl Fn(f64) -> f64,
    hi0: f64,
) -> f64 {
    let mut hi = hi0.max(1e-8);
    for _ in 0..200 {
        if dphi(hi) > 0.0 {
            break;
        }
        hi *= 2.0;
    }
    let mut lo = hi.min(1.0);
    // These penalties all have derivative -> -infinity at 0+, so a
    // negative-derivative endpoint is always found.
    for _ in 0..2000 {
        if dphi(lo) < 0.0 {
            break;
        }
        lo *= 0.5;
    }
    if !(dphi(lo) < 0.0) {
        return lo;
    }
    let mut u = z.clamp(lo, hi);
    if !u.is_finite() {
        u = 0.5 * (lo + hi);
    }
    for _ in 0..100 {
        let diff = dphi(u);
        if diff > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let curv = ddphi(u);
        let mut next = if curv > 0.0 { u - diff / curv } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - u).abs() <= 1e-14 * (1.0 + u.abs());
        u = next;
        if done {
            break;
        }
    }
    u
}

/// prox of c f(.) + nonnegativity at z: argmin_u>=0 (u-z)^2/2 + c f(u).
fn prox_fdiv(kind: FKind, z: f64, c: f64) -> f64 {
    if c <= 0.0 {
        return z.max(0.0);
    }
    match kind {
        FKind::PearsonChi2 => ((z + 2.0 * c) / (1.0 + 2.0 * c)).max(0.0),
        FKind::ReverseKl => 0.5 * (z + (z * z + 4.0 * c).sqrt()),
        FKind::TotalVariation => {
            let dev = z - 1.0;
            let shrunk = 1.0 + dev.signum() * (dev.abs() - 0.5 * c).max(0.0);
            shrunk.max(0.0)
        }
        FKind::Kl => prox_newton(z, |u| u - z + c * (u.ln() + 1.0), |u| 1.0 + c / u, z.max(1.0) + 1.0),
        FKind::JensenShannon => prox_newton(
            z,
            |u| u - z + 0.5 * c * (2.0 * u / (u + 1.0)).ln(),
            |u| 1.0 + 0.5 * c * (1.0 / u - 1.0 / (u + 1.0)),
            z.max(1.0) + 1.0,
        ),
        FKind::SquaredHellinger => prox_newton(
            z,
            |u| u - z + c * (1.0 - 1.0 / u.sqrt()),
            |u| 1.0 + 0.5 * c / (u * u.sqrt()),
            z.max(1.0) + 1.0,
        ),
        FKind::NeymanChi2 => prox_newton(
            z,
            |u| u - z - c / (u * u),
            |u| 1.0 + 2.0 * c / (u * u * u),
            z.max(1.0) + 1.0 + c.sqrt(),
        ),
    }
}

/// Separable minimum of E_n[r w] + penalty when the ball multiplier is zero.
fn separable_min(r: &Array1<f64>, h: &InnerH<'_>) -> (f64, Array1<f64>) {
    let n = r.len();
    let nf = n as f64;
    match h {
        InnerH::Box(bb) => {
            let mut w = Array1::<f64>::zeros(n);
            let mut value = 0.0;
            for i in 0..n {
                w[i] = box_subgradient(-r[i], bb.a[i], bb.b[i]);
                value += w[i] * r[i] / nf;
            }
            (value, w)
        }
        InnerH::FDiv { kind, eta_f } => {
            if !(*eta_f > 0.0) {
                if r.iter().all(|&ri| ri >= 0.0) {
                    return (0.0, Array1::zeros(n));
                }
                return (f64::NEG_INFINITY, Array1::ones(n));
            }
            let conj = monotone_conjugate(*kind);
            let sup = conj.domain_sup();
            let open = conj.domain_sup_open();
            let mut w = Array1::<f64>::zeros(n);
            let mut value = 0.0;
            for i in 0..n {
                let v = -r[i] / eta_f;
                if v > sup || (open && v >= sup) {
                    return (f64::NEG_INFINITY, Array1::ones(n));
                }
                let fc = conj.value(v);
                let s = conj.subgradient(v);
                if !fc.is_finite() || !s.is_finite() {
                    return (f64::NEG_INFINITY, Array1::ones(n));
                }
                w[i] = s.max(0.0);
                value += -eta_f * fc / nf;
            }
            (value, w)
        }
    }
}

/// Inner minimization of E_n[r w] + lambda (w-1)'M(w-1) + penalty by FISTA
/// with gradient restarts. Returns -infinity when the iterates diverge
/// (the inner problem is unbounded at these multipliers).
fn inner_solve_gp(
    r: &Array1<f64>,
    quad: &QuadraticForm,
    lambda: f64,
    h: &InnerH<'_>,
    warm: &Array1<f64>,
) -> (f64, Array1<f64>) {
    let n = r.len();
    let nf = n as f64;
    if lambda <= 0.0 {
        return separable_min(r, h);
    }
    let lip = 2.0 * lambda * quad.opnorm();
    if lip <= 0.0 {
        return separable_min(r, h);
    }
    let t = 1.0 / lip;
    let prox = |z: f64, i: usize| -> f64 {
        match h {
            InnerH::Box(bb) => z.clamp(bb.a[i], bb.b[i]),
            InnerH::FDiv { kind, eta_f } => prox_fdiv(*kind, z, t * eta_f / nf),
        }
    };
    let mut x = warm.mapv(|v| v.max(0.0));
    if let InnerH::Box(bb) = h {
        for i in 0..n {
            x[i] = x[i].clamp(bb.a[i], bb.b[i]);
        }
    }
    let mut y = x.clone();
    let mut tk = 1.0f64;
    let guard = 1e9 * (1.0 + infnorm(warm) + infnorm(r));
    for _ in 0..4000 {
        let e = &y - 1.0;
        let smooth_grad = &quad.grad(&e) * lambda + &(r / nf);
        let mut x_new = Array1::<f64>::zeros(n);
        for i in 0..n {
            x_new[i] = prox(y[i] - t * smooth_grad[i], i);
        }
        if infnorm(&x_new) > guard {
            return (f64::NEG_INFINITY, x_new);
        }
        let diff = &x_new - &x;
        let moved = infnorm(&diff);
        // Gradient restart: kill momentum when it points against progress.
        let restart = (&y - &x_new).dot(&diff) > 0.0;
        let t_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) };
        let mix = if restart { 0.0 } else { (tk - 1.0) / t_next };
        y = &x_new + &(&diff * mix);
        tk = t_next;
        let done = moved <= 1e-10 * (1.0 + infnorm(&x_new));
        x = x_new;
        if done {
            break;
        }
    }
    let e = &x - 1.0;
    let mut value = r.dot(&x) / nf + lambda * quad.value(&e);
    if let InnerH::FDiv { kind, eta_f } = h {
        let mut pen = 0.0;
        for i in 0..n {
            pen += f_value(*kind, x[i]);
        }
        if !pen.is_finite() {
            return (f64::NEG_INFINITY, x);
        }
        value += eta_f * pen / nf;
    }
    (value, x)
}

/// Soft-ball route: maximize g(lambda, eta_f) = inner minimum - lambda radius
/// - eta_f gamma by projected supergradient ascent, stopping when a
/// feasibility-restored primal point certifies the gap.
pub fn solve_gp_soft(
    r: &Array1<f64>,
    quad: &QuadraticForm,
    radius: f64,
    model: GpModel<'_>,
) -> Result<(DualSolution, Array1<f64>)> {
    let n = r.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty objective".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("ball radius must be positive, got {radius}")));
    }
    let nf = n as f64;
    let scale = 1.0f64.max(infnorm(r));
    let gamma = match &model {
        GpModel::Box(b) => {
            validate_bounds(b, n)?;
            0.0
        }
        GpModel::FDiv { gamma, .. } => {
            if *gamma < 0.0 {
                return Err(Error::InvalidArgument(format!("budget must be nonnegative, got {gamma}")));
            }
            *gamma
        }
    };
    let floor_ef = match &model {
        GpModel::Box(_) => 0.0,
        GpModel::FDiv { .. } => 1e-12 * scale,
    };
    let (mut lambda, mut eta_f) = match &model {
        GpModel::Box(_) => (0.0, 0.0),
        GpModel::FDiv { kind, .. } => {
            let sup = monotone_conjugate(*kind).domain_sup();
            if sup > 0.0 {
                (0.0, if sup.is_finite() { 2.0 * scale / sup } else { 1.0 })
            } else if r.iter().all(|&ri| ri > 0.0) {
                (0.0, 1.0)
            } else {
                (1.0 / quad.opnorm().max(1e-12), 1.0)
            }
        }
    };

    let run_inner = |lam: f64, ef: f64, warm: &Array1<f64>| -> (f64, Array1<f64>) {
        let h = match &model {
            GpModel::Box(b) => InnerH::Box(b),
            GpModel::FDiv { kind, .. } => InnerH::FDiv { kind: *kind, eta_f: ef },
        };
        inner_solve_gp(r, quad, lam, &h, warm)
    };
    let budget_of = |w: &Array1<f64>| -> f64 {
        match &model {
            GpModel::Box(_) => 0.0,
            GpModel::FDiv { kind, .. } => w.iter().map(|&wi| f_value(*kind, wi)).sum::<f64>() / nf,
        }
    };

    let (mut inner_val, mut w) = run_inner(lambda, eta_f, &Array1::ones(n));
    if !inner_val.is_finite() {
        return Err(Error::NoConvergence(
            "soft-ball inner problem is unbounded at the starting multipliers".into(),
        ));
    }
    let mut g_cur = inner_val - lambda * radius - eta_f * gamma;
    let mut step = 1.0;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0usize;
    let is_fdiv = matches!(model, GpModel::FDiv { .. });

    for k in 0..400 {
        iterations = k + 1;
        let e = &w - 1.0;
        let qv = quad.value(&e);
        let bud = budget_of(&w);
        let dlam = qv - radius;
        let def = if is_fdiv { bud - gamma } else { 0.0 };
        let plam = if lambda <= 0.0 && dlam < 0.0 { 0.0 } else { dlam };
        let pef = if !is_fdiv || (eta_f <= floor_ef && def < 0.0) { 0.0 } else { def };
        grad_norm = (plam * plam + pef * pef).sqrt();

        // Certified gap via a feasible point shrunk toward the unit weights.
        let mut shrink = 1.0f64;
        if qv > radius {
            shrink = shrink.min((radius / qv).sqrt());
        }
        if is_fdiv && bud > gamma {
            shrink = shrink.min(if bud > 0.0 { gamma / bud } else { 1.0 });
        }
        let primal = (0..n).map(|i| (1.0 + shrink * (w[i] - 1.0)) * r[i]).sum::<f64>() / nf;
        let gap = primal - g_cur;
        if gap <= 1e-5 * (1.0 + primal.abs()) {
            converged = true;
            break;
        }

        let mut accepted = false;
        while step >= 1e-18 * scale {
            let lam_t = (lambda + step * dlam).max(0.0);
            let ef_t = if is_fdiv { (eta_f + step * def).max(floor_ef) } else { 0.0 };
            if lam_t == lambda && ef_t == eta_f {
                step *= 0.5;
                continue;
            }
            let (iv, wt) = run_inner(lam_t, ef_t, &w);
            let gt = iv - lam_t * radius - ef_t * gamma;
            if iv.is_finite() && gt > g_cur {
                lambda = lam_t;
                eta_f = ef_t;
                inner_val = iv;
                w = wt;
                g_cur = gt;
                step *= 1.3;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let _ = inner_val;
    let sol = DualSolution {
        eta: Array1::zeros(0),
        eta_f: if is_fdiv { eta_f } else { 0.0 },
        lambda_quad: lambda,
        dual_value: g_cur,
        grad_norm,
        iterations,
        converged,
    };
    Ok((sol, w))
}

// ------------------------------------------------------------ certification

/// Restoration candidate from the active set the dual selected: pin every
/// raw weight sitting on its clamp boundary, then solve the orthogonality
/// equalities exactly over the free coordinates by least squares. When a
/// budget is slack at the optimum the dual degenerates to a kinked program
/// whose multipliers stop a little short of the exact kink; the support is
/// still right, and restoring on it reaches the optimal face that
/// alternating projections approach only from a distance.
fn support_restore(problem: &Problem<'_>, p: &Array2<f64>, raw: &Array1<f64>) -> Option<Array1<f64>> {
    let n = raw.len();
    let nf = n as f64;
    let d = p.ncols();
    let tol = 1e-8;
    let mut pinned: Vec<Option<f64>> = vec![None; n];
    match problem.bounds {
        Some(b) => {
            for i in 0..n {
                if raw[i] <= b.a[i] + tol * (1.0 + b.a[i].abs()) {
                    pinned[i] = Some(b.a[i]);
                } else if raw[i] >= b.b[i] - tol * (1.0 + b.b[i].abs()) {
                    pinned[i] = Some(b.b[i]);
                }
            }
        }
        None => {
            for i in 0..n {
                if raw[i] <= tol {
                    pinned[i] = Some(0.0);
                }
            }
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();
    if free.is_empty() || free.len() == n {
        return None;
    }
    let mut rhs = Array1::<f64>::zeros(d);
    for dd in 0..d {
        let mut s = 0.0;
        for i in 0..n {
            s += p[[i, dd]];
            if let Some(v) = pinned[i] {
                s -= p[[i, dd]] * v;
            }
        }
        rhs[dd] = s;
    }
    let pf = Array2::from_shape_fn((free.len(), d), |(k, dd)| p[[free[k], dd]]);
    let raw_f = Array1::from_shape_fn(free.len(), |k| raw[free[k]]);
    let gram = pf.t().dot(&pf);
    let chol = factor_spd(&gram, "support restoration").ok()?;
    let defect = &rhs - &pf.t().dot(&raw_f);
    let wf = &raw_f + &pf.dot(&chol.solve(&defect));

    let slack = 1e-10;
    let mut w = Array1::<f64>::zeros(n);
    for i in 0..n {
        if let Some(v) = pinned[i] {
            w[i] = v;
        }
    }
    for (k, &i) in free.iter().enumerate() {
        let (lo, hi) = match problem.bounds {
            Some(b) => (b.a[i], b.b[i]),
            None => (0.0, f64::INFINITY),
        };
        if wf[k] < lo - slack * (1.0 + lo.abs()) || wf[k] > hi + slack * (1.0 + hi.abs()) {
            return None;
        }
        w[i] = wf[k].clamp(lo, hi);
    }
    let e = &w - 1.0;
    if infnorm(&(p.t().dot(&e) / nf)) > 1e-9 {
        return None;
    }
    Some(w)
}

/// Builds the report for a dual solution: residuals of the raw weights,
/// then a feasibility restoration (least-squares back onto the
/// orthogonality span, clamp into the box or onto the nonnegative orthant,
/// shrink toward the unit weights until budget and ball hold) whose
/// objective value certifies the duality gap.
pub fn certify(problem: &Problem<'_>, dual: &DualSolution, raw: &Array1<f64>) -> Result<SolveReport> {
    let r = problem.r;
    let n = r.len();
    let nf = n as f64;
    let psi = feature_psi(problem.features);

    let ortho = match psi {
        Some(p) => {
            let e = raw - 1.0;
            infnorm(&(p.t().dot(&e) / nf))
        }
        None => 0.0,
    };
    let budget = match problem.fdiv {
        Some((kind, gamma)) => {
            let mean_f = raw.iter().map(|&wi| f_value(kind, wi)).sum::<f64>() / nf;
            (mean_f - gamma).max(0.0)
        }
        None => 0.0,
    };
    let quad_resid = match problem.quad {
        Some((q, radius)) => {
            let e = raw - 1.0;
            (q.value(&e) - radius).max(0.0)
        }
        None => 0.0,
    };

    let clamp = |w: &mut Array1<f64>| match problem.bounds {
        Some(b) => {
            for i in 0..n {
                w[i] = w[i].clamp(b.a[i], b.b[i]);
            }
        }
        None => {
            for wi in w.iter_mut() {
                *wi = wi.max(0.0);
            }
        }
    };
    let mut candidates: Vec<Array1<f64>> = Vec::new();
    let mut w = raw.clone();
    match psi {
        None => clamp(&mut w),
        Some(p) => {
            // Alternate projections onto the orthogonality span and the
            // clamp set until both hold. A single project-then-clamp pass
            // leaves whatever damage the clamp did to the equalities, and
            // an infeasible point can push the certified gap negative.
            let gram = p.t().dot(p);
            let chol = factor_spd(&gram, "orthogonality restoration")?;
            let mut residual = f64::INFINITY;
            for _ in 0..20_000 {
                let e = &w - 1.0;
                let coef = chol.solve(&p.t().dot(&e));
                w = &w - &p.dot(&coef);
                clamp(&mut w);
                let e = &w - 1.0;
                let next = infnorm(&(p.t().dot(&e) / nf));
                if next <= 1e-11 || next >= residual * 0.999_999 {
                    break;
                }
                residual = next;
            }
            if let Some(sup) = support_restore(problem, p, raw) {
                candidates.push(sup);
            }
        }
    }
    candidates.push(w);
    let mut best: Option<(f64, Array1<f64>)> = None;
    for mut cand in candidates {
        if let Some((kind, gamma)) = problem.fdiv {
            let mean_f = cand.iter().map(|&wi| f_value(kind, wi)).sum::<f64>() / nf;
            if mean_f > gamma {
                let t = if mean_f.is_finite() { gamma / mean_f } else { 0.0 };
                cand = cand.mapv(|wi| 1.0 + t * (wi - 1.0));
            }
        }
        if let Some((q, radius)) = problem.quad {
            let e = &cand - 1.0;
            let qv = q.value(&e);
            if qv > radius {
                let t = (radius / qv).sqrt();
                cand = cand.mapv(|wi| 1.0 + t * (wi - 1.0));
            }
        }
        let value = r.dot(&cand) / nf;
        if best.as_ref().is_none_or(|(bv, _)| value < *bv) {
            best = Some((value, cand));
        }
    }
    let (primal_value, w) = best.expect("at least one restoration candidate");
    let gap = primal_value - dual.dual_value;
    Ok(SolveReport {
        dual: dual.clone(),
        primal_value,
        gap,
        wtilde: raw.clone(),
        residuals: FeasibilityResiduals { ortho, budget, quad: quad_resid },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{gp_quadratic_full, gp_quadratic_lowrank, truncated_eig};
    use crate::oracle::{central_grad, golden_section_max, lp_vertex_box, penalty_descent, test_rng, PrimalInstance};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn const_bounds(n: usize, a: f64, b: f64) -> BoundBox {
        BoundBox { a: Array1::from_elem(n, a), b: Array1::from_elem(n, b) }
    }

    fn ones_feature(n: usize) -> FeatureMatrix {
        FeatureMatrix::new(Array2::from_elem((n, 1), 1.0), vec!["one".into()]).unwrap()
    }

    #[test]
    fn frozen_box_dual_at_zero() {
        let r = array![1.0, -1.0];
        let bounds = const_bounds(2, 0.75, 1.5);
        let psi = Array2::from_elem((2, 1), 1.0);
        let (v, g) = dual_objective_box(&r, Some(&psi), &bounds, &array![0.0]);
        assert_abs_diff_eq!(v, -0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0], -0.125, epsilon = 1e-15);
    }

    #[test]
    fn box_dual_concavity_spot_check() {
        let mut rng = test_rng(60);
        let n = 8;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let psi = Array2::from_shape_fn((n, 2), |_| rng.normal());
        let bounds = const_bounds(n, 0.5, 2.0);
        for _ in 0..20 {
            let e1 = Array1::from_shape_fn(2, |_| rng.normal());
            let e2 = Array1::from_shape_fn(2, |_| rng.normal());
            let mid = (&e1 + &e2) / 2.0;
            let (v1, _) = dual_objective_box(&r, Some(&psi), &bounds, &e1);
            let (v2, _) = dual_objective_box(&r, Some(&psi), &bounds, &e2);
            let (vm, _) = dual_objective_box(&r, Some(&psi), &bounds, &mid);
            assert!(vm >= 0.5 * (v1 + v2) - 1e-12);
        }
    }

    #[test]
    fn pinball_example_quantile_and_weights() {
        // tau = 0.25 quantile of (1,2,3,4) through the box dual.
        let r = array![1.0, 2.0, 3.0, 4.0];
        let bounds = const_bounds(4, 0.75, 1.75);
        let features = ones_feature(4);
        let problem =
            Problem { r: &r, features: Some(&features), bounds: Some(&bounds), fdiv: None, quad: None };
        let report = problem.solve().unwrap();
        assert_abs_diff_eq!(report.dual.eta[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.dual.dual_value, 2.125, epsilon = 1e-9);
        let want = [1.75, 0.75, 0.75, 0.75];
        for i in 0..4 {
            assert_abs_diff_eq!(report.wtilde[i], want[i], epsilon = 1e-8);
        }
        assert!(report.residuals.ortho <= 1e-10);
        assert!(report.gap.abs() <= 1e-9);
    }

    #[test]
    fn scalar_scan_matches_sorting_quantile() {
        let mut rng = test_rng(61);
        let n = 15;
        for &tau in &[0.25, 0.3, 0.5, 0.8] {
            let r = Array1::from_shape_fn(n, |_| 3.0 * rng.normal());
            let bounds = const_bounds(n, 1.0 - tau, 2.0 - tau);
            let features = ones_feature(n);
            let (sol, _) = solve_hard_box(&r, Some(&features), &bounds).unwrap();
            let mut sorted: Vec<f64> = r.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = (1..=n).filter(|&k| ((k - 1) as f64) <= n as f64 * tau).max().unwrap();
            assert_abs_diff_eq!(sol.eta[0], sorted[k - 1], epsilon = 1e-12);
        }
    }

    #[test]
    fn unconfounded_box_collapses_to_the_mean() {
        let mut rng = test_rng(62);
        let n = 9;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let bounds = const_bounds(n, 1.0, 1.0);
        let psi = Array2::from_shape_fn((n, 2), |_| rng.normal());
        let features = FeatureMatrix::new(psi, vec!["f1".into(), "f2".into()]).unwrap();
        let problem =
            Problem { r: &r, features: Some(&features), bounds: Some(&bounds), fdiv: None, quad: None };
        let report = problem.solve().unwrap();
        let mean = r.sum() / n as f64;
        assert_abs_diff_eq!(report.dual.dual_value, mean, epsilon = 1e-12);
        for i in 0..n {
            assert_abs_diff_eq!(report.wtilde[i], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn box_dual_matches_vertex_enumeration() {
        let mut rng = test_rng(63);
        for trial in 0..5 {
            let n = 6;
            let r = Array1::from_shape_fn(n, |_| rng.normal());
            let mut psi = Array2::from_elem((n, 2), 1.0);
            for i in 0..n {
                psi[[i, 1]] = rng.normal();
            }
            let a = Array1::from_elem(n, 0.6);
            let b = Array1::from_elem(n, 1.9);
            let (lp, _) = lp_vertex_box(&r, Some(&psi), &a, &b, true).unwrap();
            let bounds = BoundBox { a, b };
            let features = FeatureMatrix::new(psi, vec!["one".into(), "x".into()]).unwrap();
            let problem =
                Problem { r: &r, features: Some(&features), bounds: Some(&bounds), fdiv: None, quad: None };
            let report = problem.solve().unwrap();
            assert!(
                (report.dual.dual_value - lp).abs() <= 1e-7 * (1.0 + lp.abs()),
                "trial {trial}: dual {} vs vertex {lp}",
                report.dual.dual_value
            );
            assert!(report.gap.abs() <= 1e-6 * (1.0 + lp.abs()), "trial {trial}: gap {}", report.gap);
        }
    }

    #[test]
    fn weak_duality_against_sampled_feasible_weights() {
        let mut rng = test_rng(64);
        let n = 6;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let bounds = const_bounds(n, 0.2, 2.5);
        let features = ones_feature(n);
        let (sol, _) = solve_hard_box(&r, Some(&features), &bounds).unwrap();
        let mut checked = 0;
        for _ in 0..100 {
            let mut w = Array1::from_shape_fn(n, |i| {
                bounds.a[i] + rng.uniform() * (bounds.b[i] - bounds.a[i])
            });
            let shift = (w.sum() - n as f64) / n as f64;
            w.mapv_inplace(|v| v - shift);
            if (0..n).all(|i| w[i] >= bounds.a[i] && w[i] <= bounds.b[i]) {
                checked += 1;
                let value = w.dot(&r) / n as f64;
                assert!(value >= sol.dual_value - 1e-9, "{value} < {}", sol.dual_value);
            }
        }
        assert!(checked >= 20, "only {checked} feasible draws");
    }

    #[test]
    fn box_dual_scales_with_the_objective() {
        let mut rng = test_rng(65);
        let n = 7;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let scaled = &r * 3.7;
        let bounds = const_bounds(n, 0.5, 1.8);
        let mut psi = Array2::from_elem((n, 2), 1.0);
        for i in 0..n {
            psi[[i, 1]] = i as f64 - 3.0;
        }
        let features = FeatureMatrix::new(psi, vec!["one".into(), "x".into()]).unwrap();
        let (sol1, _) = solve_hard_box(&r, Some(&features), &bounds).unwrap();
        let (sol2, _) = solve_hard_box(&scaled, Some(&features), &bounds).unwrap();
        assert!(
            (sol2.dual_value - 3.7 * sol1.dual_value).abs() <= 1e-6 * (1.0 + sol2.dual_value.abs())
        );
    }

    #[test]
    fn fdiv_gradients_match_finite_differences() {
        let mut rng = test_rng(66);
        let n = 7;
        for &kind in &[FKind::Kl, FKind::PearsonChi2, FKind::SquaredHellinger] {
            let r = Array1::from_shape_fn(n, |_| rng.normal());
            let psi = Array2::from_shape_fn((n, 2), |_| rng.normal());
            let gamma = 0.07;
            let eta = Array1::from_shape_fn(2, |_| 0.05 * rng.normal());
            let eta_f = 1.5 + rng.uniform();
            let Some((_, ge, gf)) = dual_objective_fdiv(&r, Some(&psi), kind, gamma, &eta, eta_f)
            else {
                panic!("start outside domain for {kind}")
            };
            let x = array![eta[0], eta[1], eta_f];
            let fd = central_grad(
                |x| {
                    let e = array![x[0], x[1]];
                    dual_objective_fdiv(&r, Some(&psi), kind, gamma, &e, x[2]).expect("domain").0
                },
                &x,
                1e-5,
            );
            for (got, want) in [ge[0], ge[1], gf].iter().zip(fd.iter()) {
                assert!(
                    (got - want).abs() <= 1e-5 * (1.0 + want.abs()),
                    "{kind}: grad {got} vs fd {want}"
                );
            }
        }
    }

    #[test]
    fn fdiv_dual_concavity_spot_check() {
        let mut rng = test_rng(67);
        let n = 6;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let psi = Array2::from_shape_fn((n, 1), |_| rng.normal());
        for _ in 0..20 {
            let p1 = array![0.1 * rng.normal(), 1.0 + rng.uniform()];
            let p2 = array![0.1 * rng.normal(), 1.0 + rng.uniform()];
            let mid = (&p1 + &p2) / 2.0;
            let v = |p: &Array1<f64>| {
                dual_objective_fdiv(&r, Some(&psi), FKind::Kl, 0.05, &array![p[0]], p[1])
                    .expect("domain")
                    .0
            };
            assert!(v(&mid) >= 0.5 * (v(&p1) + v(&p2)) - 1e-12);
        }
    }

    #[test]
    fn kl_with_huge_budget_reaches_the_minimum_reward() {
        let mut rng = test_rng(68);
        let n = 5;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let features = ones_feature(n);
        let (sol, _) = solve_hard_fdiv(&r, Some(&features), FKind::Kl, 1e6).unwrap();
        let rmin = r.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            (sol.dual_value - rmin).abs() <= 1e-3 * (1.0 + rmin.abs()),
            "dual {} vs min {rmin}",
            sol.dual_value
        );
    }

    #[test]
    fn featureless_kl_dual_matches_golden_section_and_penalty() {
        let mut rng = test_rng(69);
        let n = 6;
        let r = Array1::from_shape_fn(n, |_| 1.0 + 0.5 * rng.normal());
        let gamma = 0.08;
        let (sol, _) = solve_hard_fdiv(&r, None, FKind::Kl, gamma).unwrap();
        let (_, golden) = golden_section_max(
            |ef| match dual_objective_fdiv(&r, None, FKind::Kl, gamma, &Array1::zeros(0), ef) {
                Some((v, _, _)) => v,
                None => f64::NEG_INFINITY,
            },
            1e-4,
            60.0,
            1e-10,
        );
        assert!((sol.dual_value - golden).abs() <= 1e-6 * (1.0 + golden.abs()));
        let inst = PrimalInstance {
            r: &r,
            psi: None,
            budget: Some((FKind::Kl, gamma)),
            quad: None,
            lower: Array1::zeros(n),
            upper: None,
        };
        let (pval, _) = penalty_descent(&inst, &Array1::ones(n));
        assert!(
            (sol.dual_value - pval).abs() <= 1e-3 * (1.0 + pval.abs()),
            "dual {} vs penalty {pval}",
            sol.dual_value
        );
    }

    #[test]
    fn kl_dual_matches_penalty_descent_with_features() {
        let mut rng = test_rng(70);
        let n = 6;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let psi = Array2::from_elem((n, 1), 1.0);
        let features = ones_feature(n);
        let gamma = 0.05;
        let problem =
            Problem { r: &r, features: Some(&features), bounds: None, fdiv: Some((FKind::Kl, gamma)), quad: None };
        let report = problem.solve().unwrap();
        let inst = PrimalInstance {
            r: &r,
            psi: Some(&psi),
            budget: Some((FKind::Kl, gamma)),
            quad: None,
            lower: Array1::zeros(n),
            upper: None,
        };
        let (pval, _) = penalty_descent(&inst, &Array1::ones(n));
        assert!(
            (report.dual.dual_value - pval).abs() <= 1e-4 * (1.0 + pval.abs()),
            "dual {} vs penalty {pval}",
            report.dual.dual_value
        );
        assert!(report.residuals.budget <= 1e-4);
        assert!(report.gap.abs() <= 1e-5 * (1.0 + pval.abs()));
    }

    #[test]
    fn pearson_zero_budget_pins_the_weights() {
        let mut rng = test_rng(71);
        let n = 6;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let (sol, _) = solve_hard_fdiv(&r, None, FKind::PearsonChi2, 0.0).unwrap();
        let mean = r.sum() / n as f64;
        assert!(
            (sol.dual_value - mean).abs() <= 1e-5 * (1.0 + mean.abs()),
            "dual {} vs mean {mean}",
            sol.dual_value
        );
    }

    #[test]
    fn reverse_kl_unbounded_cases_error_out() {
        let r = array![1.0, -0.5, 2.0];
        assert!(solve_hard_fdiv(&r, None, FKind::ReverseKl, 0.1).is_err());
        // With a strictly positive feature column the phase-1 search finds
        // a strictly interior start and the solve goes through.
        let features = ones_feature(3);
        let (sol, _) = solve_hard_fdiv(&r, Some(&features), FKind::ReverseKl, 0.1).unwrap();
        assert!(sol.dual_value.is_finite());
        let inst = PrimalInstance {
            r: &r,
            psi: Some(&Array2::from_elem((3, 1), 1.0)),
            budget: Some((FKind::ReverseKl, 0.1)),
            quad: None,
            lower: Array1::zeros(3),
            upper: None,
        };
        let (pval, _) = penalty_descent(&inst, &Array1::ones(3));
        assert!(
            (sol.dual_value - pval).abs() <= 1e-3 * (1.0 + pval.abs()),
            "dual {} vs penalty {pval}",
            sol.dual_value
        );
    }

    #[test]
    fn kl_recovery_respects_the_budget() {
        let mut rng = test_rng(72);
        let n = 10;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let features = ones_feature(n);
        let gamma = 0.03;
        let problem =
            Problem { r: &r, features: Some(&features), bounds: None, fdiv: Some((FKind::Kl, gamma)), quad: None };
        let report = problem.solve().unwrap();
        let mean_f = report.wtilde.iter().map(|&w| f_value(FKind::Kl, w)).sum::<f64>() / n as f64;
        assert!(mean_f <= gamma + 1e-4, "raw budget {mean_f}");
        assert!(report.residuals.ortho <= 1e-5);
    }

    #[test]
    fn gp_box_with_huge_radius_is_the_separable_minimum() {
        let mut rng = test_rng(73);
        let n = 5;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let k = Array2::<f64>::eye(n);
        let quad = gp_quadratic_full(&k, 1.0).unwrap();
        let bounds = const_bounds(n, 0.4, 1.9);
        let (sol, _) = solve_gp_soft(&r, &quad, 1e9, GpModel::Box(&bounds)).unwrap();
        let want = (0..n)
            .map(|i| if r[i] > 0.0 { 0.4 * r[i] } else { 1.9 * r[i] })
            .sum::<f64>()
            / n as f64;
        assert_abs_diff_eq!(sol.dual_value, want, epsilon = 1e-8);
        assert!(sol.converged);
    }

    #[test]
    fn gp_box_with_tiny_radius_pins_the_mean() {
        let mut rng = test_rng(74);
        let n = 4;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let b = Array2::from_shape_fn((n, n), |_| rng.normal());
        let k = b.t().dot(&b) + Array2::<f64>::eye(n) * 0.5;
        let quad = gp_quadratic_full(&k, 1.0).unwrap();
        let bounds = const_bounds(n, 0.3, 2.2);
        let (sol, _) = solve_gp_soft(&r, &quad, 1e-10, GpModel::Box(&bounds)).unwrap();
        let mean = r.sum() / n as f64;
        assert!(sol.dual_value <= mean + 1e-9);
        assert!((sol.dual_value - mean).abs() <= 1e-3 * (1.0 + mean.abs()));
    }

    #[test]
    fn gp_box_monotone_in_the_radius() {
        let mut rng = test_rng(75);
        let n = 5;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let b = Array2::from_shape_fn((n, n), |_| rng.normal());
        let k = b.t().dot(&b) + Array2::<f64>::eye(n) * 0.2;
        let quad = gp_quadratic_full(&k, 1.0).unwrap();
        let bounds = const_bounds(n, 0.5, 1.7);
        let mut last = f64::INFINITY;
        for &radius in &[0.01, 0.1, 1.0, 10.0] {
            let (sol, _) = solve_gp_soft(&r, &quad, radius, GpModel::Box(&bounds)).unwrap();
            assert!(sol.dual_value <= last + 1e-7, "radius {radius}: {} > {last}", sol.dual_value);
            last = sol.dual_value;
        }
    }

    #[test]
    fn gp_box_identity_kernel_matches_penalty_descent() {
        let mut rng = test_rng(76);
        let n = 4;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let k = Array2::<f64>::eye(n);
        let quad = gp_quadratic_full(&k, 1.0).unwrap();
        let bounds = const_bounds(n, 0.5, 1.8);
        let radius = 0.8;
        let (sol, _) = solve_gp_soft(&r, &quad, radius, GpModel::Box(&bounds)).unwrap();
        let m = Array2::<f64>::eye(n) * 0.5;
        let inst = PrimalInstance {
            r: &r,
            psi: None,
            budget: None,
            quad: Some((&m, radius)),
            lower: bounds.a.clone(),
            upper: Some(bounds.b.clone()),
        };
        let (pval, _) = penalty_descent(&inst, &Array1::ones(n));
        assert!(
            (sol.dual_value - pval).abs() <= 1e-4 * (1.0 + pval.abs()),
            "dual {} vs penalty {pval}",
            sol.dual_value
        );
    }

    #[test]
    fn gp_kl_matches_penalty_descent() {
        let mut rng = test_rng(77);
        let n = 5;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let b = Array2::from_shape_fn((n, n), |_| rng.normal());
        let k = b.t().dot(&b) + Array2::<f64>::eye(n) * 0.3;
        let quad = gp_quadratic_full(&k, 1.0).unwrap();
        let radius = 0.5;
        let gamma = 0.1;
        let (sol, _) =
            solve_gp_soft(&r, &quad, radius, GpModel::FDiv { kind: FKind::Kl, gamma }).unwrap();
        // Dense ball matrix for the oracle, from first principles.
        let mut noisy = k.clone();
        for i in 0..n {
            noisy[[i, i]] += 1.0;
        }
        let quad_dense = {
            let mut m = Array2::<f64>::zeros((n, n));
            for j in 0..n {
                let mut e = Array1::<f64>::zeros(n);
                e[j] = 1.0;
                let col = quad.grad(&e) / 2.0;
                for i in 0..n {
                    m[[i, j]] = col[i];
                }
            }
            m
        };
        let _ = noisy;
        let inst = PrimalInstance {
            r: &r,
            psi: None,
            budget: Some((FKind::Kl, gamma)),
            quad: Some((&quad_dense, radius)),
            lower: Array1::zeros(n),
            upper: None,
        };
        let (pval, _) = penalty_descent(&inst, &Array1::ones(n));
        assert!(
            (sol.dual_value - pval).abs() <= 2e-4 * (1.0 + pval.abs()),
            "dual {} vs penalty {pval}",
            sol.dual_value
        );
    }

    #[test]
    fn gp_lowrank_full_agreement_through_the_solver() {
        let mut rng = test_rng(78);
        let n = 5;
        let r = Array1::from_shape_fn(n, |_| rng.normal());
        let b = Array2::from_shape_fn((n, n), |_| rng.normal());
        let k = b.t().dot(&b) + Array2::<f64>::eye(n) * 0.1;
        let sigma2 = 0.8;
        let full = gp_quadratic_full(&k, sigma2).unwrap();
        let dec = truncated_eig(&k, n, sigma2).unwrap();
        let low = gp_quadratic_lowrank(&dec);
        let bounds = const_bounds(n, 0.5, 1.8);
        let radius = 0.6;
        let (sf, _) = solve_gp_soft(&r, &full, radius, GpModel::Box(&bounds)).unwrap();
        let (sl, _) = solve_gp_soft(&r, &low, radius, GpModel::Box(&bounds)).unwrap();
        assert!(
            (sf.dual_value - sl.dual_value).abs() <= 3e-5 * (1.0 + sf.dual_value.abs()),
            "full {} vs lowrank {}",
            sf.dual_value,
            sl.dual_value
        );
    }

    #[test]
    fn problem_validation_rejects_bad_combinations() {
        let r = array![1.0, 2.0];
        let bounds = const_bounds(2, 0.5, 1.5);
        let none = Problem { r: &r, features: None, bounds: None, fdiv: None, quad: None };
        assert!(none.solve().is_err());
        let both = Problem {
            r: &r,
            features: None,
            bounds: Some(&bounds),
            fdiv: Some((FKind::Kl, 0.1)),
            quad: None,
        };
        assert!(both.solve().is_err());
        let k = Array2::<f64>::eye(2);
        let quad = gp_quadratic_full(&k, 1.0).unwrap();
        let features = ones_feature(2);
        let gp_with_features = Problem {
            r: &r,
            features: Some(&features),
            bounds: Some(&bounds),
            fdiv: None,
            quad: Some((&quad, 1.0)),
        };
        assert!(gp_with_features.solve().is_err());
    }

    #[test]
    fn prox_operators_minimize_their_objectives() {
        let mut rng = test_rng(79);
        for &kind in FKind::ALL.iter() {
            for _ in 0..20 {
                let z = 2.0 * rng.normal();
                let c = 0.05 + rng.uniform();
                let u = prox_fdiv(kind, z, c);
                assert!(u >= 0.0, "{kind}: prox {u} negative");
                let obj = |x: f64| 0.5 * (x - z) * (x - z) + c * f_value(kind, x);
                let base = obj(u);
                assert!(base.is_finite(), "{kind}: objective at prox not finite");
                for &probe in &[u * 0.9 + 1e-6, u * 1.1 + 1e-6, 0.5, 1.0, 2.0, z.max(1e-6)] {
                    assert!(
                        base <= obj(probe) + 1e-8 * (1.0 + base.abs()),
                        "{kind}: prox({z}, {c}) = {u} beaten at {probe}"
                    );
                }
            }
        }
    }
}
