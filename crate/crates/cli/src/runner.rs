//! Command execution: the sweep runner, the mixture learner, and the
//! dataset simulator. Every cell of a sweep is a pure function of its
//! coordinates, so worker count changes scheduling but never results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use confound::data::{self, fit_logistic_propensity, generate_synthetic, zsb_rescale};
use confound::estimator::{build_constraints, estimate_bound, Direction};
use confound::policy::{evaluate_learned, learn_mixture, Policy};
use confound::{Error, Result};
use rayon::prelude::*;

use crate::config::{model_at, DataSource, RunConfig, Timing};

/// Seed for the Monte Carlo ground-truth value in learn reports; fixed so
/// reruns agree.
const MC_SEED: u64 = 4242;

/// 17 significant digits: distinct doubles never collide in the output.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `results.csv` -> `results.<suffix>` alongside the original.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let mut p = path.to_path_buf();
    p.set_file_name(format!("{stem}.{suffix}"));
    p
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    seed: u64,
    grid_value: f64,
    spec_idx: usize,
    direction: Direction,
}

#[derive(Debug, Clone)]
struct CellResult {
    cell: Cell,
    method: String,
    value: f64,
    gap: f64,
    runtime_ms: u128,
    error: Option<String>,
}

fn spec_label(spec: &confound::constraint::ConstraintSpec) -> &'static str {
    use confound::constraint::ConstraintSpec::*;
    match spec {
        Zsb => "zsb",
        Qb => "qb",
        KcmcHard { .. } => "kcmc-hard",
        KcmcGp { .. } => "kcmc-gp",
    }
}

pub fn run_simulate(cfg: &RunConfig) -> Result<i32> {
    let DataSource::Synthetic { n } = cfg.source else {
        return Err(Error::InvalidArgument(
            "simulate writes synthetic data; drop the csv key".into(),
        ));
    };
    let seed = cfg.seeds[0];
    let data = generate_synthetic(n, seed)?;
    data::write_csv(&data, &cfg.out)?;
    println!("wrote {} rows (seed {seed}) to {}", data.n(), cfg.out.display());
    Ok(0)
}

pub fn run_bounds(cfg: &RunConfig) -> Result<i32> {
    let csv_data = match &cfg.source {
        DataSource::Csv { path, schema } => Some(data::load_csv(path, schema)?),
        DataSource::Synthetic { .. } => None,
    };
    let row_n = match (&cfg.source, &csv_data) {
        (DataSource::Synthetic { n }, _) => *n,
        (_, Some(d)) => d.n(),
        _ => unreachable!(),
    };

    // Row order is fixed: seeds, then grid, then specs, then directions.
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &grid_value in &cfg.grid {
            for spec_idx in 0..cfg.specs.len() {
                for &direction in &cfg.directions {
                    cells.push(Cell { seed, grid_value, spec_idx, direction });
                }
            }
        }
    }

    let solve = |cell: &Cell| -> CellResult {
        let start = Instant::now();
        // A panic in one cell must not take down the sweep; it becomes a
        // recorded failure like any Err.
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let data = match &csv_data {
                Some(d) => d.clone(),
                None => {
                    let DataSource::Synthetic { n } = cfg.source else { unreachable!() };
                    generate_synthetic(n, cell.seed)?
                }
            };
            let prop = zsb_rescale(&fit_logistic_propensity(&data)?, &data)?;
            let model = model_at(&cfg.model, cell.grid_value)?;
            estimate_bound(&data, &prop, &cfg.policy, &model, &cfg.specs[cell.spec_idx], cell.direction)
        }))
        .unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Err(Error::NoConvergence(format!("panicked: {msg}")))
        });
        let runtime_ms = match cfg.timing {
            Timing::Wall => start.elapsed().as_millis(),
            Timing::Off => 0,
        };
        match outcome {
            Ok(est) => CellResult {
                cell: *cell,
                method: est.method,
                value: est.value,
                gap: est.gap,
                runtime_ms,
                error: None,
            },
            Err(e) => CellResult {
                cell: *cell,
                method: spec_label(&cfg.specs[cell.spec_idx]).to_string(),
                value: f64::NAN,
                gap: f64::NAN,
                runtime_ms,
                error: Some(e.to_string()),
            },
        }
    };

    let results: Vec<CellResult> = if cfg.workers == 1 {
        cells.iter().map(solve).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| cells.par_iter().map(solve).collect())
    };

    let mut out = String::from("method,direction,sensitivity_param,seed,n,value,gap,runtime_ms\n");
    for r in &results {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.cell.direction,
            fmt_f64(r.cell.grid_value),
            r.cell.seed,
            row_n,
            fmt_f64(r.value),
            fmt_f64(r.gap),
            r.runtime_ms
        )
        .expect("write to string");
    }
    std::fs::write(&cfg.out, out)?;

    // Per-cell mean and sample standard deviation across seeds; a failed
    // seed poisons its cell with NaN rather than being dropped.
    let summary_path = sibling(&cfg.out, "summary.csv");
    let mut summary = String::from("method,direction,sensitivity_param,n,seeds,mean,sd\n");
    for (gi, &grid_value) in cfg.grid.iter().enumerate() {
        for spec_idx in 0..cfg.specs.len() {
            for &direction in &cfg.directions {
                let vals: Vec<f64> = results
                    .iter()
                    .filter(|r| {
                        r.cell.spec_idx == spec_idx
                            && r.cell.direction == direction
                            && cfg.grid[gi] == r.cell.grid_value
                    })
                    .map(|r| r.value)
                    .collect();
                let method = results
                    .iter()
                    .find(|r| r.cell.spec_idx == spec_idx)
                    .map(|r| r.method.clone())
                    .unwrap_or_else(|| spec_label(&cfg.specs[spec_idx]).to_string());
                let k = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / k;
                let sd = if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
                } else {
                    0.0
                };
                writeln!(
                    summary,
                    "{},{},{},{},{},{},{}",
                    method,
                    direction,
                    fmt_f64(grid_value),
                    row_n,
                    vals.len(),
                    fmt_f64(mean),
                    fmt_f64(sd)
                )
                .expect("write to string");
            }
        }
    }
    std::fs::write(&summary_path, summary)?;

    let failures: Vec<&CellResult> = results.iter().filter(|r| r.error.is_some()).collect();
    for r in &failures {
        eprintln!(
            "cell failed: method={} direction={} param={} seed={}: {}",
            r.method,
            r.cell.direction,
            r.cell.grid_value,
            r.cell.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    println!(
        "wrote {} rows to {} ({} failed), summary to {}",
        results.len(),
        cfg.out.display(),
        failures.len(),
        summary_path.display()
    );
    Ok(if failures.is_empty() { 0 } else { 1 })
}

pub fn run_learn(cfg: &RunConfig) -> Result<i32> {
    let full = match &cfg.source {
        DataSource::Csv { path, schema } => data::load_csv(path, schema)?,
        DataSource::Synthetic { n } => generate_synthetic(*n, cfg.seeds[0])?,
    };
    let (train, test) = full.split_even_odd();
    let prop = zsb_rescale(&fit_logistic_propensity(&train)?, &train)?;
    let spec = &cfg.specs[0];
    let constraints = build_constraints(spec, &train, &prop, &cfg.model, &cfg.policy, Direction::Lower)?;
    let learned = learn_mixture(&train, &prop, &cfg.model, &constraints, &cfg.components)?;
    let report = evaluate_learned(&learned.policy, &train, &test, &cfg.model, spec)?;

    let trace_path = sibling(&cfg.out, "trace.csv");
    let mut trace = String::from("iteration,train_bound\n");
    for (i, v) in learned.trace.iter().enumerate() {
        writeln!(trace, "{},{}", i, fmt_f64(*v)).expect("write to string");
    }
    std::fs::write(&trace_path, trace)?;

    // The generator's ground truth is only meaningful for synthetic data.
    let truth = if full.has_truth() {
        Some(data::true_policy_value(&Policy::Mixture(learned.policy.clone()), cfg.mc_draws, MC_SEED))
    } else {
        None
    };

    let doc = serde_json::json!({
        "model": cfg.model.describe(),
        "components": cfg.components.iter().map(|p| p.describe()).collect::<Vec<_>>(),
        "beta": learned.policy.beta,
        "train_bound": report.train_bound,
        "test_bound": report.test_bound,
        "true_value": truth.map(|t| t.0),
        "true_value_se": truth.map(|t| t.1),
        "iterations": learned.trace.len(),
        "converged": learned.dual.converged,
        "trace": learned.trace,
    });
    std::fs::write(&cfg.out, serde_json::to_string_pretty(&doc)? + "\n")?;

    match truth {
        Some((value, se)) => println!(
            "train {:.6}, holdout {:.6}, true value {:.6} (se {:.1e}); report {}, trace {}",
            report.train_bound,
            report.test_bound,
            value,
            se,
            cfg.out.display(),
            trace_path.display()
        ),
        None => println!(
            "train {:.6}, holdout {:.6}; report {}, trace {}",
            report.train_bound,
            report.test_bound,
            cfg.out.display(),
            trace_path.display()
        ),
    }
    Ok(0)
}
