//! Dense BFGS ascent for smooth concave objectives with extended-value
//! domains. The objective callback returns `None` outside its domain; the
//! Armijo backtracking line search treats that as a rejected step, so the
//! iterates never leave the feasible region they started in.

use ndarray::{Array1, Array2};

pub struct MaxResult {
    pub x: Array1<f64>,
    pub value: f64,
    pub grad: Array1<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C: f64 = 1e-4;
const ARMIJO_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

/// Maximize `f` from `x0`. Stops when the gradient norm drops below
/// `rel_tol * max(1, |value|)` or after `max_iter` iterations. `x0` must be
/// feasible (`f(x0)` finite); otherwise the result carries `value = -inf`.
pub fn maximize<F>(x0: Array1<f64>, mut f: F, max_iter: usize, rel_tol: f64) -> MaxResult
where
    F: FnMut(&Array1<f64>) -> Option<(f64, Array1<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let Some((mut value, mut grad)) = f(&x) else {
        let grad = Array1::zeros(n);
        return MaxResult { x, value: f64::NEG_INFINITY, grad_norm: f64::INFINITY, grad, iterations: 0, converged: false };
    };
    let mut h = Array2::<f64>::eye(n); // inverse-Hessian approximation (of -f)
    let mut scaled_once = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        let grad_norm = norm(&grad);
        if grad_norm <= rel_tol * value.abs().max(1.0) {
            return MaxResult { x, value, grad_norm, grad, iterations, converged: true };
        }
        iterations += 1;

        let mut dir = h.dot(&grad);
        let mut slope = dir.dot(&grad);
        if !slope.is_finite() || slope <= 0.0 {
            // The quasi-Newton model lost positive definiteness; restart.
            h = Array2::eye(n);
            dir = grad.clone();
            slope = grad.dot(&grad);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &(&dir * step);
            if let Some((tv, tg)) = f(&trial) {
                if tv >= value + ARMIJO_C * step * slope {
                    accepted = Some((trial, tv, tg));
                    break;
                }
            }
            step *= ARMIJO_SHRINK;
        }
        let Some((new_x, new_value, new_grad)) = accepted else {
            // No ascent step exists along this direction at machine scale.
            return MaxResult { x, value, grad_norm, grad, iterations, converged: grad_norm <= 1e3 * rel_tol * value.abs().max(1.0) };
        };

        let s = &new_x - &x;
        let y = &grad - &new_grad; // gradient change of -f
        let sy = s.dot(&y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if !scaled_once {
                let yy = y.dot(&y);
                if yy > 0.0 {
                    h *= sy / yy;
                }
                scaled_once = true;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        x = new_x;
        value = new_value;
        grad = new_grad;
    }
    let grad_norm = norm(&grad);
    let converged = grad_norm <= rel_tol * value.abs().max(1.0);
    MaxResult { x, value, grad_norm, grad, iterations, converged }
}

fn bfgs_update(h: &mut Array2<f64>, s: &Array1<f64>, y: &Array1<f64>, sy: f64) {
    let n = s.len();
    let hy = h.dot(y);
    let yhy = y.dot(&hy);
    let c1 = (sy + yhy) / (sy * sy);
    let c2 = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[[i, j]] += c1 * s[i] * s[j] - c2 * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}
