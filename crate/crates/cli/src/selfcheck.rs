//! Desk-scale verification of the numerical core against independent
//! reference computations: brute-force conjugates, quadrature, vertex
//! enumeration, finite differences, and order statistics. Finishes in well
//! under a minute and exits nonzero if any tolerance is breached.

use std::time::Instant;

use ndarray::{Array1, Array2};

use confound::estimator::quantile_regression;
use confound::kernel::{chi2_quantile, FeatureMatrix};
use confound::oracle::{central_grad, chi2_cdf_simpson, conjugate_sup_grid, lp_vertex_box, test_rng};
use confound::rng::CounterRng;
use confound::sensitivity::{f_value, monotone_conjugate, BoundBox, FKind};
use confound::solver::{dual_objective_fdiv, solve_hard_box};
use confound::Result;

struct Check {
    name: &'static str,
    max_error: f64,
    tolerance: f64,
}

/// Highest v worth probing for a kind: just inside an open domain end,
/// the end itself when closed, 2 when unbounded. Keeps the brute-force
/// argmax comfortably inside the search interval.
fn probe_ceiling(kind: FKind) -> f64 {
    let eval = monotone_conjugate(kind);
    let sup = eval.domain_sup();
    if sup.is_infinite() {
        2.0
    } else if eval.domain_sup_open() {
        sup - 0.2 * (1.0 + sup.abs())
    } else {
        sup
    }
}

fn conjugate_grid() -> Check {
    let mut worst = 0.0f64;
    for kind in FKind::ALL {
        let eval = monotone_conjugate(kind);
        let vhi = probe_ceiling(kind);
        let vlo = -4.0;
        for j in 0..25 {
            let v = vlo + (vhi - vlo) * j as f64 / 24.0;
            let brute = conjugate_sup_grid(kind, v, 100.0, 2e-3);
            worst = worst.max((eval.value(v) - brute).abs());
        }
    }
    Check { name: "conjugate-grid", max_error: worst, tolerance: 1e-3 }
}

fn conjugate_flats() -> Check {
    let mut worst = 0.0f64;
    for kind in FKind::ALL {
        let eval = monotone_conjugate(kind);
        let Some((threshold, level)) = eval.flat() else { continue };
        for dv in [0.0, 0.5, 1.5] {
            let v = threshold - dv;
            let brute = conjugate_sup_grid(kind, v, 100.0, 2e-3);
            worst = worst.max((eval.value(v) - level).abs());
            worst = worst.max((brute - level).abs());
        }
    }
    Check { name: "conjugate-flats", max_error: worst, tolerance: 1e-6 }
}

fn generator_at_one() -> Check {
    let worst = FKind::ALL.iter().map(|&k| f_value(k, 1.0).abs()).fold(0.0, f64::max);
    Check { name: "generator-at-one", max_error: worst, tolerance: 1e-12 }
}

fn chi2_roundtrip() -> Check {
    let mut worst = 0.0f64;
    for dof in [1usize, 2, 5, 10] {
        for level in [0.5, 0.9, 0.95, 0.99] {
            let q = chi2_quantile(dof, level).expect("quantile");
            let cdf = chi2_cdf_simpson(dof, q, 1e-4);
            worst = worst.max((cdf - level).abs());
        }
    }
    Check { name: "chi2-roundtrip", max_error: worst, tolerance: 1e-6 }
}

fn random_box_instance(
    rng: &mut CounterRng,
    n: usize,
    d: usize,
) -> (Array1<f64>, Option<Array2<f64>>, BoundBox) {
    let r = Array1::from_shape_fn(n, |_| rng.normal());
    let a = Array1::from_shape_fn(n, |_| 0.2 + 0.6 * rng.uniform());
    let b = Array1::from_shape_fn(n, |_| 1.05 + rng.uniform());
    let psi = if d == 0 { None } else { Some(Array2::from_shape_fn((n, d), |_| rng.normal())) };
    (r, psi, BoundBox { a, b })
}

fn box_lp() -> Check {
    let mut rng = test_rng(0xc11_b0);
    let mut worst = 0.0f64;
    for case in 0..12 {
        let n = 3 + case % 6;
        let d = case % 3;
        let (r, psi, bounds) = random_box_instance(&mut rng, n, d);
        let features = psi.as_ref().map(|p| {
            let labels = (0..d).map(|j| format!("psi{j}")).collect();
            FeatureMatrix::new(p.clone(), labels).expect("features")
        });
        let (dual, _) = solve_hard_box(&r, features.as_ref(), &bounds).expect("box dual");
        let (lp, _) = lp_vertex_box(&r, psi.as_ref(), &bounds.a, &bounds.b, true).expect("lp vertex");
        worst = worst.max((dual.dual_value - lp).abs() / (1.0 + lp.abs()));
    }
    Check { name: "box-lp-vertex", max_error: worst, tolerance: 1e-5 }
}

fn dual_gradients() -> Check {
    let kinds = [FKind::Kl, FKind::PearsonChi2, FKind::SquaredHellinger];
    let mut rng = test_rng(0x9cad);
    let mut worst = 0.0f64;
    let n = 12;
    let d = 2;
    for kind in kinds {
        // Squared Hellinger has a finite domain end, so it needs a larger
        // normalizer multiplier to keep the probe and its finite-difference
        // neighbors feasible.
        let etaf_lo = if kind == FKind::SquaredHellinger { 2.5 } else { 0.5 };
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < 5 && attempts < 100 {
            attempts += 1;
            let r = Array1::from_shape_fn(n, |_| 0.5 * rng.normal());
            let psi = Array2::from_shape_fn((n, d), |_| rng.normal());
            let mut x = Array1::zeros(d + 1);
            for j in 0..d {
                x[j] = 0.2 * (rng.uniform() - 0.5);
            }
            x[d] = etaf_lo + rng.uniform();
            let objective = |x: &Array1<f64>| -> Option<f64> {
                let eta = x.slice(ndarray::s![..d]).to_owned();
                dual_objective_fdiv(&r, Some(&psi), kind, 0.05, &eta, x[d]).map(|(g, _, _)| g)
            };
            let h = 1e-5;
            let probe_ok = (0..=d).all(|j| {
                let mut lo = x.clone();
                let mut hi = x.clone();
                lo[j] -= h;
                hi[j] += h;
                objective(&lo).is_some() && objective(&hi).is_some()
            });
            let eta = x.slice(ndarray::s![..d]).to_owned();
            let Some((_, grad_eta, grad_f)) = dual_objective_fdiv(&r, Some(&psi), kind, 0.05, &eta, x[d])
            else {
                continue;
            };
            if !probe_ok {
                continue;
            }
            accepted += 1;
            let fd = central_grad(|x| objective(x).unwrap_or(f64::NAN), &x, h);
            let mut scale = 1.0f64;
            for j in 0..d {
                scale = scale.max(grad_eta[j].abs());
            }
            scale = scale.max(grad_f.abs());
            for j in 0..d {
                worst = worst.max((fd[j] - grad_eta[j]).abs() / scale.max(1.0));
            }
            worst = worst.max((fd[d] - grad_f).abs() / scale.max(1.0));
        }
        assert!(accepted == 5, "could not find 5 feasible probes for {kind}");
    }
    Check { name: "dual-gradient-fd", max_error: worst, tolerance: 1e-4 }
}

fn pinball() -> Check {
    let mut rng = test_rng(0x9b);
    let mut worst = 0.0f64;
    let n = 60;
    let ys = Array1::from_shape_fn(n, |_| rng.normal() * 3.0);
    let design = Array2::from_elem((n, 1), 1.0);
    let pinball_loss = |c: f64, tau: f64| -> f64 {
        ys.iter().map(|&y| if y >= c { tau * (y - c) } else { (1.0 - tau) * (c - y) }).sum::<f64>() / n as f64
    };
    for tau in [0.25, 0.5, 0.9] {
        let fit = quantile_regression(&design, &ys, tau).expect("fit");
        let c = fit.coefficients[0];
        // An optimal fit cannot beat any data point; ties break right.
        let best = ys.iter().map(|&y| pinball_loss(y, tau)).fold(f64::INFINITY, f64::min);
        worst = worst.max(pinball_loss(c, tau) - best);
        let mut sorted: Vec<f64> = ys.to_vec();
        sorted.sort_by(f64::total_cmp);
        let idx = ((n as f64 * tau).floor() as usize).min(n - 1);
        worst = worst.max((c - sorted[idx]).abs());
    }
    Check { name: "pinball-quantile", max_error: worst, tolerance: 1e-9 }
}

pub fn run() -> Result<i32> {
    let started = Instant::now();
    let checks = vec![
        conjugate_grid(),
        conjugate_flats(),
        generator_at_one(),
        chi2_roundtrip(),
        box_lp(),
        dual_gradients(),
        pinball(),
    ];
    println!("{:<20} {:>12} {:>11} {:>7}", "check", "max_error", "tolerance", "result");
    let mut passed = 0;
    for c in &checks {
        let ok = c.max_error <= c.tolerance;
        passed += ok as usize;
        println!(
            "{:<20} {:>12.3e} {:>11.0e} {:>7}",
            c.name,
            c.max_error,
            c.tolerance,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!("selfcheck: {passed}/{} passed in {:.1}s", checks.len(), started.elapsed().as_secs_f64());
    Ok(if passed == checks.len() { 0 } else { 1 })
}
