//! The five CLI verbs. Each computes first and writes its artifacts from the
//! calling thread afterwards.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use retc_core::ocp::solve_ocp;
use retc_core::sim::{baseline_gain, etc_sigma_search, infinite_cost_estimate, median_solve_times, run_closed_loop};
use retc_core::terminal::{synthesize, verify_cost_decrease};
use retc_core::{ControllerKind, Error, OcpParams, SimConfig, SimTrace, TerminalIngredients, Variant};

use crate::config::{variant_name, ControllerChoice, ExperimentConfig};
use crate::error::CliError;
use crate::output::{ensure_dir, fmt_f64, fmt_opt, write_ingredients, Table};

/// Largest eigenvalue accepted by `verify-ingredients`.
pub const DECREASE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub quiet: bool,
}

impl RunContext {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn sim_config(cfg: &ExperimentConfig, controller: ControllerKind) -> SimConfig {
    SimConfig {
        plant: cfg.plant.clone(),
        spec: cfg.spec,
        controller,
        x0: cfg.x0.clone(),
        u0: cfg.u0.clone(),
        beta0: cfg.beta0,
        horizon_steps: cfg.steps,
        convergence_tol: cfg.convergence_tol,
    }
}

fn rollout(ing: &TerminalIngredients, n_bar: usize, cfg: &ExperimentConfig) -> Result<ControllerKind, CliError> {
    Ok(ControllerKind::Rollout(OcpParams::new(
        ing.clone(),
        n_bar,
        cfg.sigma_bucket,
    )?))
}

fn controller(cfg: &ExperimentConfig, ing: &TerminalIngredients) -> Result<ControllerKind, CliError> {
    Ok(match cfg.controller {
        ControllerChoice::Rollout => rollout(ing, cfg.n_bar, cfg)?,
        ControllerChoice::Ttc => ControllerKind::Ttc {
            gain: baseline_gain(&cfg.plant, &cfg.spec)?,
            period: cfg.ttc_period,
        },
        ControllerChoice::Etc => ControllerKind::Etc {
            gain: baseline_gain(&cfg.plant, &cfg.spec)?,
            sigma_trigger: cfg.sigma_trigger.expect("validated"),
        },
    })
}

fn trace_table(trace: &SimTrace, n: usize, m: usize) -> Table {
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.extend(["bucket_level", "transmit"].map(String::from));
    header.extend((1..=m).map(|i| format!("v_{i}")));
    header.extend(
        [
            "stage_cost",
            "cost_up_to_k",
            "ocp_value",
            "prediction_horizon",
            "schedules_examined",
        ]
        .map(String::from),
    );
    let mut table = Table::new(header);
    for r in &trace.records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.state.x.iter().map(|&v| fmt_f64(v)));
        row.extend(r.state.u.iter().map(|&v| fmt_f64(v)));
        row.push(r.state.beta.to_string());
        row.push(u8::from(r.input.gamma()).to_string());
        row.extend(r.input.v().iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(r.stage_cost));
        row.push(fmt_f64(r.cumulative_cost));
        row.push(fmt_opt(r.ocp_value));
        row.push(r.horizon.map(|h| h.to_string()).unwrap_or_default());
        row.push(r.schedules_examined.to_string());
        table.push(row);
    }
    table
}

fn summary_table(cfg: &ExperimentConfig, trace: &SimTrace) -> Table {
    let mut table = Table::new([
        "plant",
        "controller",
        "variant",
        "n_bar",
        "steps",
        "total_cost",
        "infinite_horizon_cost",
        "transmissions",
        "bandwidth",
        "sustainable_rate",
        "min_bucket",
        "bucket_feasible",
        "bandwidth_feasible",
        "converged",
        "final_residual",
    ]);
    let rollout = cfg.controller == ControllerChoice::Rollout;
    let infinite = infinite_cost_estimate(trace, cfg.convergence_tol).ok();
    let rate = cfg.spec.sustainable_rate();
    table.push(vec![
        cfg.plant_name.clone(),
        cfg.controller.label().to_string(),
        if rollout {
            variant_name(cfg.variant).to_string()
        } else {
            String::new()
        },
        if rollout { cfg.n_bar.to_string() } else { String::new() },
        trace.steps().to_string(),
        fmt_f64(trace.total_cost()),
        fmt_opt(infinite),
        trace.transmissions.to_string(),
        fmt_f64(trace.bandwidth()),
        fmt_f64(rate),
        trace.min_bucket().to_string(),
        (trace.min_bucket() >= 0).to_string(),
        (trace.bandwidth() <= rate + 1e-12).to_string(),
        infinite.is_some().to_string(),
        fmt_f64(trace.final_residual()),
    ]);
    table
}

fn prepare(ctx: &RunContext) -> Result<(), CliError> {
    ensure_dir(&ctx.out_dir)
}

/// `run`: one closed-loop simulation. Writes `trace.csv`, `summary.csv` and
/// `ingredients.json`.
pub fn run(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    prepare(ctx)?;
    let ing = synthesize(&cfg.plant, &cfg.spec, cfg.variant)?;
    let ing_path = ctx.path("ingredients.json");
    write_ingredients(&ing_path, &ing)?;
    ctx.progress(format!(
        "simulating {} on {} for {} steps",
        cfg.controller.label(),
        cfg.plant_name,
        cfg.steps
    ));
    let trace = run_closed_loop(&sim_config(cfg, controller(cfg, &ing)?))?;
    let trace_path = ctx.path("trace.csv");
    let summary_path = ctx.path("summary.csv");
    trace_table(&trace, cfg.plant.n(), cfg.plant.m()).write(&trace_path)?;
    summary_table(cfg, &trace).write(&summary_path)?;
    ctx.progress(format!(
        "cost {:.4}, {} transmissions, bandwidth {:.4}",
        trace.total_cost(),
        trace.transmissions,
        trace.bandwidth()
    ));
    Ok(vec![trace_path, summary_path, ing_path])
}

/// Infeasibility of a single sweep point is a result, not an error.
fn feasible_or(result: retc_core::Result<SimTrace>) -> Result<Option<SimTrace>, CliError> {
    match result {
        Ok(t) => Ok(Some(t)),
        Err(Error::OcpInfeasible { .. } | Error::InfeasibleTransmission { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// `sweep-horizon`: rollout cost per (variant, N). Writes `sweep.csv`.
pub fn sweep_horizon(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    prepare(ctx)?;
    let period = cfg.period();
    let mut jobs = Vec::new();
    for &variant in &cfg.sweep_variants {
        let ing = synthesize(&cfg.plant, &cfg.spec, variant)?;
        for &n in &cfg.sweep_n_bar {
            if variant == Variant::CyclicHorizon && n < period {
                continue;
            }
            jobs.push((variant, n, rollout(&ing, n, cfg)?));
        }
    }
    ctx.progress(format!("running {} horizon configurations", jobs.len()));
    let results: Vec<Result<Option<SimTrace>, CliError>> = jobs
        .par_iter()
        .map(|(_, _, kind)| feasible_or(run_closed_loop(&sim_config(cfg, kind.clone()))))
        .collect();
    let mut table = Table::new([
        "n_bar",
        "variant",
        "cost",
        "infinite_horizon_cost",
        "transmissions",
        "bandwidth",
        "min_bucket",
        "feasible",
    ]);
    for ((variant, n, _), result) in jobs.iter().zip(results) {
        let row = match result? {
            Some(t) => vec![
                n.to_string(),
                variant_name(*variant).to_string(),
                fmt_f64(t.total_cost()),
                fmt_opt(infinite_cost_estimate(&t, cfg.convergence_tol).ok()),
                t.transmissions.to_string(),
                fmt_f64(t.bandwidth()),
                t.min_bucket().to_string(),
                "true".into(),
            ],
            None => {
                let mut row = vec![n.to_string(), variant_name(*variant).to_string()];
                row.extend(std::iter::repeat(String::new()).take(5));
                row.push("false".into());
                row
            }
        };
        table.push(row);
    }
    let path = ctx.path("sweep.csv");
    table.write(&path)?;
    Ok(vec![path])
}

/// `etc-search`: classical ETC over a uniform trigger grid. Writes
/// `etc_search.csv` and `etc_summary.csv`.
pub fn etc_search(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    prepare(ctx)?;
    let template = sim_config(
        cfg,
        ControllerKind::Ttc {
            gain: baseline_gain(&cfg.plant, &cfg.spec)?,
            period: cfg.ttc_period,
        },
    );
    ctx.progress(format!("searching {} trigger parameters", cfg.etc_grid_points));
    let search = etc_sigma_search(&template, cfg.etc_grid_points)?;
    let rate = cfg.spec.sustainable_rate();
    let mut grid = Table::new([
        "sigma",
        "cost",
        "transmissions",
        "bandwidth",
        "min_bucket",
        "bandwidth_feasible",
    ]);
    for p in &search.points {
        grid.push(vec![
            fmt_f64(p.sigma),
            fmt_f64(p.cost),
            p.transmissions.to_string(),
            fmt_f64(p.bandwidth),
            p.min_bucket.to_string(),
            (p.bandwidth <= rate + 1e-12).to_string(),
        ]);
    }
    let mut summary = Table::new(["selection", "sigma", "cost", "transmissions", "bandwidth", "min_bucket"]);
    for (label, idx) in [
        ("lowest_cost", Some(search.best)),
        ("lowest_cost_within_rate", search.best_feasible),
    ] {
        if let Some(i) = idx {
            let p = &search.points[i];
            summary.push(vec![
                label.to_string(),
                fmt_f64(p.sigma),
                fmt_f64(p.cost),
                p.transmissions.to_string(),
                fmt_f64(p.bandwidth),
                p.min_bucket.to_string(),
            ]);
        }
    }
    let grid_path = ctx.path("etc_search.csv");
    let summary_path = ctx.path("etc_summary.csv");
    grid.write(&grid_path)?;
    summary.write(&summary_path)?;
    Ok(vec![grid_path, summary_path])
}

/// `timing`: median wall time of the first OCP per horizon, solved
/// sequentially and timed round-robin across horizons. Writes `timing.csv`; the only nondeterministic artifact.
pub fn timing(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    prepare(ctx)?;
    let ing = synthesize(&cfg.plant, &cfg.spec, cfg.variant)?;
    let xi = retc_core::OverallState::new(cfg.x0.clone(), cfg.u0.clone(), cfg.beta0);
    let mut table = Table::new([
        "n_bar",
        "variant",
        "computation_time_s",
        "schedules_examined",
        "feasible",
    ]);
    let params = cfg
        .timing_n_bar
        .iter()
        .map(|&n| Ok(OcpParams::new(ing.clone(), n, cfg.sigma_bucket)?.sequential()))
        .collect::<Result<Vec<_>, CliError>>()?;
    let times = median_solve_times(&xi, &params, &cfg.plant, &cfg.spec, cfg.timing_repetitions)?;
    for (prm, t) in params.iter().zip(times) {
        let sol = solve_ocp(&xi, 0, prm, &cfg.plant, &cfg.spec)?;
        ctx.progress(format!("N = {}: {:.3} ms", prm.n_bar, t * 1e3));
        table.push(vec![
            prm.n_bar.to_string(),
            variant_name(cfg.variant).to_string(),
            fmt_f64(t),
            sol.n_schedules_examined.to_string(),
            sol.feasible.to_string(),
        ]);
    }
    let path = ctx.path("timing.csv");
    table.write(&path)?;
    Ok(vec![path])
}

/// `verify-ingredients`: synthesizes both variants and checks the cost
/// decrease. Writes `ingredients_<variant>.json` and `cost_decrease.csv`;
/// fails with a numerical error if any check fails.
pub fn verify_ingredients(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    prepare(ctx)?;
    let mut files = Vec::new();
    let mut table = Table::new([
        "variant",
        "phase",
        "max_eigenvalue",
        "tolerance",
        "bucket_floor",
        "alpha",
        "pass",
    ]);
    let mut failed = Vec::new();
    for variant in [Variant::CyclicHorizon, Variant::PeriodicTerminal] {
        let ing = synthesize(&cfg.plant, &cfg.spec, variant)?;
        let path = ctx.path(&format!("ingredients_{}.json", variant_name(variant)));
        write_ingredients(&path, &ing)?;
        files.push(path);
        let report = verify_cost_decrease(&ing, &cfg.plant, DECREASE_TOLERANCE);
        for (phase, &eig) in report.max_eigenvalues.iter().enumerate() {
            let pass = eig <= DECREASE_TOLERANCE;
            if !pass {
                failed.push(format!("{} phase {phase}: {eig:e}", variant_name(variant)));
            }
            table.push(vec![
                variant_name(variant).to_string(),
                phase.to_string(),
                fmt_f64(eig),
                fmt_f64(DECREASE_TOLERANCE),
                ing.floor(phase).to_string(),
                fmt_opt(ing.radius(phase)),
                pass.to_string(),
            ]);
        }
        ctx.progress(format!(
            "{}: largest eigenvalue {:e}",
            variant_name(variant),
            report.max_eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        ));
    }
    let path = ctx.path("cost_decrease.csv");
    table.write(&path)?;
    files.push(path);
    if !failed.is_empty() {
        return Err(CliError::Verification(failed.join(", ")));
    }
    Ok(files)
}

/// Output directory: command line, then config, then `out`.
pub fn resolve_out_dir(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
