//! Slow, independent reference implementations used to cross-check the fast
//! paths: cyclic Jacobi eigenvalues, Simpson-rule chi-squared CDF, brute-force
//! Fenchel conjugates, LP vertex enumeration, long-run penalized primal
//! descent, finite differences, and exact quadrature for the synthetic
//! generator's observational distribution. The `selfcheck` CLI command and
//! the test suite call these; production estimators never do. The one
//! estimator-adjacent consumer is the truth-based benchmark bound, which is
//! only defined on simulated data in the first place.

use crate::rng::CounterRng;
use crate::sensitivity::FKind;
use ndarray::{Array1, Array2, ArrayView1};

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi rotation method,
/// returned descending. Quadratically convergent and independent of the
/// tridiagonalization path used by the production eigensolver.
pub fn jacobi_eig(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Chi-squared CDF by composite Simpson integration of the density with the
/// given step. Slow by design; the production quantile inverts the
/// regularized incomplete gamma instead.
pub fn chi2_cdf_simpson(dof: usize, x: f64, step: f64) -> f64 {
    assert!(dof >= 1 && x >= 0.0 && step > 0.0);
    if x == 0.0 {
        return 0.0;
    }
    let k = dof as f64;
    let log_norm = -(k / 2.0) * (2.0f64).ln() - crate::num::special::ln_gamma(k / 2.0);
    if dof == 1 {
        // Substitute t = s^2 to remove the inverse-square-root singularity:
        // the integrand 2 s rho(s^2) = 2 exp(log_norm - s^2/2) is smooth and
        // nonzero at 0.
        let g = |s: f64| 2.0 * (log_norm - s * s / 2.0).exp();
        return simpson(g, 0.0, x.sqrt(), step);
    }
    let density = |t: f64| -> f64 {
        if t <= 0.0 {
            // The t^(k/2-1) factor is 1 at dof 2 and vanishes above.
            return if dof == 2 { log_norm.exp() } else { 0.0 };
        }
        (log_norm + (k / 2.0 - 1.0) * t.ln() - t / 2.0).exp()
    };
    simpson(density, 0.0, x, step)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, step: f64) -> f64 {
    let mut panels = ((b - a) / step).ceil() as usize;
    if panels % 2 == 1 {
        panels += 1;
    }
    let panels = panels.max(2);
    let h = (b - a) / panels as f64;
    let mut sum = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + h * i as f64);
    }
    sum * h / 3.0
}

/// Brute-force Fenchel conjugate restricted to u >= 0: max over the grid
/// {0, step, 2*step, ..., u_max} of u*v - f(u), then a golden-section polish
/// of the bracket around the best grid point. The objective is concave in u,
/// so the bracket contains the true sup and the polish removes the grid bias.
pub fn conjugate_sup_grid(kind: FKind, v: f64, u_max: f64, step: f64) -> f64 {
    let score = |u: f64| -> f64 {
        let fu = crate::sensitivity::f_value(kind, u);
        if fu.is_finite() {
            u * v - fu
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut best = f64::NEG_INFINITY;
    let mut best_u = 0.0;
    let n = (u_max / step).round() as usize;
    for i in 0..=n {
        let u = i as f64 * step;
        let s = score(u);
        if s > best {
            best = s;
            best_u = u;
        }
    }
    let (_, refined) = golden_section_max(score, (best_u - step).max(0.0), (best_u + step).min(u_max), 1e-12);
    best.max(refined)
}

/// Central finite difference of a scalar function.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central finite-difference gradient of a multivariate function.
pub fn central_grad(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>, h: f64) -> Array1<f64> {
    let mut g = Array1::<f64>::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Deterministic helper for random test instances.
pub fn test_rng(tag: u64) -> CounterRng {
    CounterRng::new(0x7e57_0000 ^ tag, 0)
}

/// Maximize a unimodal scalar function on [lo, hi] by golden-section search.
pub fn golden_section_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

// 16-point Gauss-Legendre rule on [-1, 1]: positive abscissas and weights.
const GL16_X: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_W: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// Composite 16-point Gauss-Legendre integral with panels at most
/// `max_panel` wide. Near machine precision for analytic integrands.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, max_panel: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let panels = ((b - a) / max_panel).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + h * (p as f64 + 0.5);
        let half = h / 2.0;
        let mut sum = 0.0;
        for k in 0..8 {
            sum += GL16_W[k] * (f(mid + half * GL16_X[k]) + f(mid - half * GL16_X[k]));
        }
        total += sum * half;
    }
    total
}

/// P(U = 1 | X = x) for the synthetic generator: the potential-outcome gap
/// Y0 - Y1 is Gaussian with variance 2 given (x, xi).
pub fn true_u1_probability(x: ArrayView1<'_, f64>) -> f64 {
    let mut p = 0.0;
    for xi in 0..2u8 {
        let (m0, m1) = crate::data::outcome_means(x, xi);
        p += 0.5 * crate::num::special::normal_cdf((m0 - m1) / 2.0f64.sqrt());
    }
    p
}

/// P(T = 1 | X = x) for the synthetic generator, marginalized over the
/// confounder analytically.
pub fn true_marginal_propensity(x: ArrayView1<'_, f64>) -> f64 {
    let e_x = crate::data::nominal_propensity(x);
    let p1 = true_u1_probability(x);
    crate::data::confounded_propensity(e_x, 1) * p1 + crate::data::confounded_propensity(e_x, 0) * (1.0 - p1)
}

/// Unnormalized observational density of (Y = s, T = t) given X = x: the
/// arm-t outcome density weighted by the probability of logging arm t, with
/// the confounder integrated out given the outcome value.
fn observational_density(t: usize, x: ArrayView1<'_, f64>, s: f64) -> f64 {
    let e_x = crate::data::nominal_propensity(x);
    let e1 = crate::data::confounded_propensity(e_x, 1);
    let e0 = crate::data::confounded_propensity(e_x, 0);
    let mut g = 0.0;
    for xi in 0..2u8 {
        let (m0, m1) = crate::data::outcome_means(x, xi);
        let term = if t == 1 {
            // Given Y1 = s, the confounder is 1 exactly when Y0 > s.
            let p_u1 = 1.0 - crate::num::special::normal_cdf(s - m0);
            crate::num::special::normal_pdf(s - m1) * (e1 * p_u1 + e0 * (1.0 - p_u1))
        } else {
            // Given Y0 = s, the confounder is 1 exactly when Y1 < s.
            let p_u1 = crate::num::special::normal_cdf(s - m1);
            crate::num::special::normal_pdf(s - m0) * ((1.0 - e1) * p_u1 + (1.0 - e0) * (1.0 - p_u1))
        };
        g += 0.5 * term;
    }
    g
}

fn observational_support(t: usize, x: ArrayView1<'_, f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for xi in 0..2u8 {
        let (m0, m1) = crate::data::outcome_means(x, xi);
        let m = if t == 1 { m1 } else { m0 };
        lo = lo.min(m);
        hi = hi.max(m);
    }
    (lo - 13.0, hi + 13.0)
}

/// Conditional CDF P(Y <= y | T = t, X = x) of the synthetic generator's
/// observational distribution, by quadrature.
pub fn observational_cdf(t: usize, x: ArrayView1<'_, f64>, y: f64) -> f64 {
    let (lo, hi) = observational_support(t, x);
    if y <= lo {
        return 0.0;
    }
    let norm = gauss_legendre(|s| observational_density(t, x, s), lo, hi, 0.5);
    let num = gauss_legendre(|s| observational_density(t, x, s), lo, y.min(hi), 0.5);
    (num / norm).clamp(0.0, 1.0)
}

/// tau-quantile of Y | T = t, X = x under the generator's observational
/// distribution. Bisection to an interval of width 1e-10, re-integrating
/// only the increment at each step.
pub fn observational_quantile(t: usize, x: ArrayView1<'_, f64>, tau: f64) -> f64 {
    assert!(tau > 0.0 && tau < 1.0);
    let (lo, hi) = observational_support(t, x);
    let g = |s: f64| observational_density(t, x, s);
    let norm = gauss_legendre(g, lo, hi, 0.5);
    let target = tau * norm;
    let (mut ylo, mut yhi) = (lo, hi);
    // Mass accumulated on [lo, ylo]; each step integrates only [ylo, mid].
    let mut acc = 0.0;
    while yhi - ylo > 1e-10 {
        let mid = 0.5 * (ylo + yhi);
        let inc = gauss_legendre(g, ylo, mid, 0.5);
        if acc + inc < target {
            acc += inc;
            ylo = mid;
        } else {
            yhi = mid;
        }
    }
    0.5 * (ylo + yhi)
}

/// A small primal instance for the penalty-descent reference solver:
/// minimize (1/n) sum w_i r_i over bounds, subject to any of hard
/// orthogonality, an f-divergence budget, and a quadratic ball constraint
/// on w - 1.
pub struct PrimalInstance<'a> {
    pub r: &'a Array1<f64>,
    /// n x D: (1/n) Psi^T (w - 1) = 0.
    pub psi: Option<&'a Array2<f64>>,
    /// (kind, gamma): (1/n) sum f(w_i) <= gamma.
    pub budget: Option<(FKind, f64)>,
    /// (M, rho): (w-1)^T M (w-1) <= rho.
    pub quad: Option<(&'a Array2<f64>, f64)>,
    pub lower: Array1<f64>,
    pub upper: Option<Array1<f64>>,
}

/// Long-run quadratic-penalty projected gradient descent. Escalates the
/// penalty weight through 1e2..1e8, warm-starting each stage. Returns the
/// objective at the final near-feasible point and the point itself.
/// Deliberately brute force; the dual solver must match it.
pub fn penalty_descent(inst: &PrimalInstance<'_>, start: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = inst.r.len();
    let nf = n as f64;
    let project = |w: &mut Array1<f64>| {
        for i in 0..n {
            let hi = inst.upper.as_ref().map_or(f64::INFINITY, |u| u[i]);
            w[i] = w[i].clamp(inst.lower[i], hi);
        }
    };
    // Derivative of f by a guarded central difference, to stay independent
    // of the production subgradient code.
    let f_prime = |kind: FKind, u: f64| -> f64 {
        let h = (1e-7 * (1.0 + u.abs())).min(if u > 0.0 { u / 2.0 } else { 1e-7 });
        if h < 1e-300 {
            return 0.0;
        }
        let fp = crate::sensitivity::f_value(kind, u + h);
        let fm = crate::sensitivity::f_value(kind, u - h);
        if fp.is_finite() && fm.is_finite() {
            ((fp - fm) / (2.0 * h)).clamp(-1e8, 1e8)
        } else {
            let f0 = crate::sensitivity::f_value(kind, u);
            (((fp.min(1e300)) - f0) / h).clamp(-1e8, 1e8)
        }
    };
    let penalized = |w: &Array1<f64>, p: f64| -> f64 {
        let mut val = w.dot(inst.r) / nf;
        if let Some(psi) = inst.psi {
            for d in 0..psi.ncols() {
                let mut c = 0.0;
                for i in 0..n {
                    c += psi[[i, d]] * (w[i] - 1.0);
                }
                c /= nf;
                val += p * c * c;
            }
        }
        if let Some((kind, gamma)) = inst.budget {
            let b: f64 = w.iter().map(|&u| crate::sensitivity::f_value(kind, u)).sum::<f64>() / nf;
            let excess = (b - gamma).max(0.0);
            val += p * excess * excess;
        }
        if let Some((m, rho)) = inst.quad {
            let e = w - &Array1::<f64>::ones(n);
            let q = e.dot(&m.dot(&e));
            let excess = (q - rho).max(0.0);
            val += p * excess * excess;
        }
        val
    };
    let gradient = |w: &Array1<f64>, p: f64| -> Array1<f64> {
        let mut g = inst.r / nf;
        if let Some(psi) = inst.psi {
            for d in 0..psi.ncols() {
                let mut c = 0.0;
                for i in 0..n {
                    c += psi[[i, d]] * (w[i] - 1.0);
                }
                c /= nf;
                for i in 0..n {
                    g[i] += 2.0 * p * c * psi[[i, d]] / nf;
                }
            }
        }
        if let Some((kind, gamma)) = inst.budget {
            let b: f64 = w.iter().map(|&u| crate::sensitivity::f_value(kind, u)).sum::<f64>() / nf;
            let excess = (b - gamma).max(0.0);
            if excess > 0.0 {
                for i in 0..n {
                    g[i] += 2.0 * p * excess * f_prime(kind, w[i]) / nf;
                }
            }
        }
        if let Some((m, rho)) = inst.quad {
            let e = w - &Array1::<f64>::ones(n);
            let me = m.dot(&e);
            let q = e.dot(&me);
            let excess = (q - rho).max(0.0);
            if excess > 0.0 {
                for i in 0..n {
                    g[i] += 2.0 * p * excess * 2.0 * me[i];
                }
            }
        }
        g
    };

    // Spectral projected gradient per stage: the late stages are
    // conditioned like the penalty weight itself, and fixed-step descent
    // cannot cross such valleys in any reasonable iteration budget.
    // Barzilai-Borwein steps with a nonmonotone watermark handle them, and
    // every trial point is projected first, so the generator is never
    // evaluated outside its domain.
    let mut w = start.clone();
    project(&mut w);
    for &p in &[1e2, 1e4, 1e6, 1e8] {
        let mut fw = penalized(&w, p);
        let mut g = gradient(&w, p);
        let mut alpha = 1.0 / p;
        let mut history = vec![fw; 10];
        let mut best = fw;
        let mut best_w = w.clone();
        let mut since_best = 0usize;
        for iter in 0..60_000 {
            let mut cand = &w - &(&g * alpha);
            project(&mut cand);
            let d = &cand - &w;
            let dnorm = d.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            if dnorm <= 1e-14 {
                break;
            }
            let slope = g.dot(&d);
            let watermark = history.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial = &w + &(&d * lambda);
                let ft = penalized(&trial, p);
                if ft <= watermark + 1e-4 * lambda * slope {
                    accepted = Some((trial, ft));
                    break;
                }
                lambda *= 0.5;
            }
            let Some((new_w, new_f)) = accepted else { break };
            let new_g = gradient(&new_w, p);
            let s = &new_w - &w;
            let y = &new_g - &g;
            let sy = s.dot(&y);
            alpha = if sy > 1e-300 { (s.dot(&s) / sy).clamp(1e-20, 1e20) } else { alpha * 10.0 };
            w = new_w;
            fw = new_f;
            g = new_g;
            let slot = iter % history.len();
            history[slot] = fw;
            if fw < best - 1e-16 * (1.0 + best.abs()) {
                best = fw;
                best_w = w.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > 3_000 {
                    break;
                }
            }
        }
        w = best_w;
    }
    (w.dot(inst.r) / nf, w)
}

/// Exhaustive LP solve for the box-constrained primal by vertex
/// enumeration: choose D basic coordinates, fix the rest at their bounds,
/// solve the D x D equality system, keep feasible vertices. Exponential on
/// purpose; only for n <= ~10, D <= 2.
pub fn lp_vertex_box(
    r: &Array1<f64>,
    psi: Option<&Array2<f64>>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    minimize: bool,
) -> Option<(f64, Array1<f64>)> {
    let n = r.len();
    let d = psi.map_or(0, |p| p.ncols());
    let nf = n as f64;
    let sign = if minimize { 1.0 } else { -1.0 };
    let mut best: Option<(f64, Array1<f64>)> = None;
    let mut consider = |w: &Array1<f64>| {
        for i in 0..n {
            if w[i] < a[i] - 1e-9 || w[i] > b[i] + 1e-9 {
                return;
            }
        }
        let val = w.dot(r) / nf;
        if best.as_ref().map_or(true, |(v, _)| sign * val < sign * *v) {
            best = Some((val, w.clone()));
        }
    };

    if d == 0 {
        let mut w = Array1::<f64>::zeros(n);
        for i in 0..n {
            w[i] = if sign * r[i] >= 0.0 { a[i] } else { b[i] };
        }
        consider(&w);
        return best;
    }
    let psi = psi.unwrap();
    // Equality targets: sum_i psi_id w_i = sum_i psi_id.
    let target: Vec<f64> = (0..d).map(|k| psi.column(k).sum()).collect();

    let mut basis = vec![0usize; d];
    enumerate_subsets(n, d, 0, 0, &mut basis, &mut |basis: &[usize]| {
        let free: Vec<usize> = (0..n).filter(|i| !basis.contains(i)).collect();
        for mask in 0..(1u32 << free.len()) {
            let mut w = Array1::<f64>::zeros(n);
            let mut rhs: Vec<f64> = target.clone();
            for (j, &i) in free.iter().enumerate() {
                w[i] = if mask & (1 << j) != 0 { b[i] } else { a[i] };
                for (k, rh) in rhs.iter_mut().enumerate() {
                    *rh -= psi[[i, k]] * w[i];
                }
            }
            // Solve the small system over the basic coordinates.
            let mut m = Array2::<f64>::zeros((d, d));
            for (col, &i) in basis.iter().enumerate() {
                for k in 0..d {
                    m[[k, col]] = psi[[i, k]];
                }
            }
            if let Some(sol) = solve_small(&m, &rhs) {
                for (col, &i) in basis.iter().enumerate() {
                    w[i] = sol[col];
                }
                consider(&w);
            }
        }
    });
    best
}

fn enumerate_subsets(n: usize, d: usize, start: usize, depth: usize, buf: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if depth == d {
        visit(buf);
        return;
    }
    for i in start..n {
        buf[depth] = i;
        enumerate_subsets(n, d, i + 1, depth + 1, buf, visit);
    }
}

/// Gaussian elimination with partial pivoting on a tiny square system;
/// None when the basis matrix is numerically singular.
fn solve_small(m: &Array2<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    let d = m.nrows();
    let mut a = m.clone();
    let mut x: Vec<f64> = rhs.to_vec();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for col in 0..d {
        let mut piv = col;
        for row in (col + 1)..d {
            if a[[row, col]].abs() > a[[piv, col]].abs() {
                piv = row;
            }
        }
        if a[[piv, col]].abs() < 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..d {
                let tmp = a[[col, k]];
                a[[col, k]] = a[[piv, k]];
                a[[piv, k]] = tmp;
            }
            x.swap(col, piv);
        }
        for row in (col + 1)..d {
            let factor = a[[row, col]] / a[[col, col]];
            for k in col..d {
                a[[row, k]] -= factor * a[[col, k]];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..d).rev() {
        for k in (col + 1)..d {
            x[col] -= a[[col, k]] * x[k];
        }
        x[col] /= a[[col, col]];
    }
    Some(x)
}
