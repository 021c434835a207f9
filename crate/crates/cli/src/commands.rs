use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sioms_core::baseline::bench;
use sioms_core::cache::TableCache;
use sioms_core::model::{QuadraticCost, SwitchedLinearSystem};
use sioms_core::montecarlo::monte_carlo;
use sioms_core::plant::Plant;
use sioms_core::receding::{open_loop_run, run_closed_loop, RecedingController};
use sioms_core::report::{self, ReportFormat, FORMAT_VERSION};
use sioms_core::scenario::Scenario;
use sioms_core::sioms::{solve, Problem, SiomsParams};
use sioms_core::transition::{TableParams, TransitionTables};

use crate::args::CommonArgs;
use crate::error::CliError;

const DEFAULT_OUT: &str = "sioms-out";

/// Spacing of the resampled plant trajectory in closed-loop reports (s).
const PLANT_ROW_DT: f64 = 0.01;

struct Output {
    dir: PathBuf,
    format: ReportFormat,
    timings: bool,
}

impl Output {
    fn resolve(args: &CommonArgs, s: &Scenario) -> Result<Self, CliError> {
        let dir = args.out.clone().or_else(|| s.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Output {
            dir,
            format: args.format.map(ReportFormat::from).or(s.output.format).unwrap_or_default(),
            timings: args.timings || s.output.timings,
        })
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

fn cache_dir(args: &CommonArgs, s: &Scenario) -> Option<PathBuf> {
    args.cache.clone().or_else(|| s.output.cache.as_ref().map(PathBuf::from))
}

fn reject(flag: &str, given: bool, command: &str) -> Result<(), CliError> {
    if given {
        return Err(CliError::Config(format!("--{flag} does not apply to `{command}`")));
    }
    Ok(())
}

fn positive(flag: &str, v: Option<f64>) -> Result<Option<f64>, CliError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(CliError::Config(format!("--{flag} must be positive, got {x}"))),
        other => Ok(other),
    }
}

fn build_tables(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    params: TableParams,
    cache: Option<&Path>,
) -> Result<TransitionTables, CliError> {
    match cache {
        Some(dir) => Ok(TableCache::new(dir).load_or_build(sys, cost, params)?.0),
        None => Ok(TransitionTables::build(sys, cost, params)?),
    }
}

fn n(v: f64) -> String {
    format!("{v}")
}

pub fn solve_cmd(args: &CommonArgs) -> Result<(), CliError> {
    let mut s = Scenario::resolve(&args.scenario)?;
    for (flag, given) in [("seed", args.seed.is_some()), ("delta", args.delta.is_some()), ("horizon", args.horizon.is_some()), ("runs", args.runs.is_some())] {
        reject(flag, given, "solve")?;
    }
    if let Some(k) = args.iters {
        s.solver.max_iter = k;
    }
    if let Some(list) = &args.samples {
        match list.as_slice() {
            [k] if *k >= 2 => s.table_samples = Some(*k),
            _ => return Err(CliError::Config("--samples takes one value of at least 2 for `solve`".into())),
        }
    }
    let out = Output::resolve(args, &s)?;

    let started = Instant::now();
    let tables = build_tables(&s.system, &s.cost, s.open_loop_table_params(), cache_dir(args, &s).as_deref())?;
    let build_millis = started.elapsed().as_secs_f64() * 1e3;
    let problem = Problem { tables: &tables, sys: &s.system, cost: &s.cost, x0: s.system.x0() };
    let r = solve(&problem, &s.initial, &s.solver)?;

    let doc = report::SolveDoc::new(&s.name, &r);
    out.write("trajectory.csv", &report::trajectory_csv(&r.trajectory))?;
    match out.format {
        ReportFormat::Structured => {
            out.write("report.json", &report::to_json(&doc))?;
        }
        ReportFormat::Csv => {
            let summary = [
                ("format_version", FORMAT_VERSION.to_string()),
                ("kind", doc.kind.to_string()),
                ("scenario", s.name.clone()),
                ("initial_cost", n(r.initial_cost)),
                ("final_cost", n(r.final_cost)),
                ("accepted_steps", r.accepted_steps.to_string()),
                ("termination", report::to_json(&r.termination).trim().trim_matches('"').to_string()),
                ("theta_tol", n(r.theta_tol)),
                ("integrator_steps", r.integrator_steps.to_string()),
            ];
            out.write("summary.csv", &report::summary_csv(&summary))?;
            out.write("iterations.csv", &report::iterations_csv(&r))?;
            out.write("schedule.csv", &report::schedule_csv(&r.schedule))?;
        }
    }
    if out.timings {
        out.write("timings.json", &report::to_json(&report::SolveTimingsDoc::new(&r, build_millis)))?;
    }
    println!("scenario {}: J0 = {}", s.name, r.initial_cost);
    println!(
        "J = {} after {} accepted steps ({:?}), {} integration steps while solving",
        r.final_cost, r.accepted_steps, r.termination, r.integrator_steps
    );
    println!("reports in {}", out.dir.display());
    Ok(())
}

pub fn bench_cmd(args: &CommonArgs) -> Result<(), CliError> {
    let s = Scenario::resolve(&args.scenario)?;
    for (flag, given) in [("seed", args.seed.is_some()), ("delta", args.delta.is_some()), ("horizon", args.horizon.is_some()), ("runs", args.runs.is_some()), ("cache", args.cache.is_some())] {
        reject(flag, given, "bench")?;
    }
    let mut config = s.bench_config();
    if let Some(k) = args.iters {
        config.iterations = k;
    }
    if let Some(list) = &args.samples {
        if list.iter().any(|&k| k < 2) {
            return Err(CliError::Config("--samples values must be at least 2".into()));
        }
        config.samples = list.clone();
    }
    let out = Output::resolve(args, &s)?;
    let rows = bench(&s.system, &s.cost, &s.initial, &config)?;
    match out.format {
        ReportFormat::Structured => {
            out.write("bench.json", &report::to_json(&report::BenchDoc::new(&s.name, &rows)))?;
        }
        ReportFormat::Csv => {
            let summary = [
                ("format_version", FORMAT_VERSION.to_string()),
                ("kind", "bench".to_string()),
                ("scenario", s.name.clone()),
                ("iterations", config.iterations.to_string()),
                ("repetitions", config.repetitions.to_string()),
            ];
            out.write("summary.csv", &report::summary_csv(&summary))?;
            out.write("bench.csv", &report::bench_csv(&rows))?;
        }
    }
    // the benchmark exists to measure time, so its timings are always written
    out.write("bench_timings.csv", &report::bench_timings_csv(&rows))?;
    println!("{:<9} {:>6} {:>12} {:>12} {:>10}", "method", "N", "rms_error", "exact_cost", "seconds");
    for r in &rows {
        println!("{:<9} {:>6} {:>12.3e} {:>12.5} {:>10.4}", r.method.name(), r.samples, r.rms_error, r.exact_cost, r.seconds);
    }
    println!("reports in {}", out.dir.display());
    Ok(())
}

pub fn montecarlo_cmd(args: &CommonArgs) -> Result<(), CliError> {
    let mut s = Scenario::resolve(&args.scenario)?;
    for (flag, given) in [("samples", args.samples.is_some()), ("cache", args.cache.is_some())] {
        reject(flag, given, "montecarlo")?;
    }
    let Some(m) = s.montecarlo.as_mut() else {
        return Err(CliError::Config(format!("scenario {} has no [montecarlo] section", s.name)));
    };
    if let Some(k) = args.iters {
        m.open_loop_iterations = k;
    }
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    if let Some(runs) = args.runs {
        if runs == 0 {
            return Err(CliError::Config("--runs must be at least 1".into()));
        }
        m.runs = runs;
    }
    if let Some(d) = positive("delta", args.delta)? {
        m.delta = d;
    }
    if let Some(h) = positive("horizon", args.horizon)? {
        m.horizon = h;
    }
    let config = s.montecarlo_config().expect("section present");
    let out = Output::resolve(args, &s)?;
    let started = Instant::now();
    let r = monte_carlo(&s.system, &s.cost, &s.initial, &config)?;
    let seconds = started.elapsed().as_secs_f64();
    match out.format {
        ReportFormat::Structured => {
            out.write("montecarlo.json", &report::to_json(&report::MonteCarloDoc::new(&s.name, &r)))?;
        }
        ReportFormat::Csv => {
            let summary = [
                ("format_version", FORMAT_VERSION.to_string()),
                ("kind", "monte_carlo".to_string()),
                ("scenario", s.name.clone()),
                ("runs", r.runs.to_string()),
                ("seed", r.seed.to_string()),
            ];
            out.write("summary.csv", &report::summary_csv(&summary))?;
            out.write("montecarlo_summary.csv", &report::montecarlo_summary_csv(&r))?;
            out.write("montecarlo_runs.csv", &report::montecarlo_runs_csv(&r))?;
            out.write("montecarlo_histogram.csv", &report::montecarlo_histogram_csv(&r))?;
        }
    }
    if out.timings {
        out.write("montecarlo_timings.csv", &report::summary_csv(&[("seconds", n(seconds))]))?;
    }
    println!("{} runs, seed {}", r.runs, r.seed);
    for (name, v) in [("open loop", &r.open_loop), ("closed loop", &r.closed_loop)] {
        println!("{name:<12} mean {:.6e}  std {:.6e}  diverged {}", v.mean, v.std, v.diverged);
    }
    println!("reports in {}", out.dir.display());
    Ok(())
}

pub fn rh_cmd(args: &CommonArgs) -> Result<(), CliError> {
    let mut s = Scenario::resolve(&args.scenario)?;
    for (flag, given) in [("samples", args.samples.is_some()), ("seed", args.seed.is_some()), ("runs", args.runs.is_some())] {
        reject(flag, given, "rh")?;
    }
    let Some(section) = s.rh.as_mut() else {
        return Err(CliError::Config(format!("scenario {} has no [rh] section", s.name)));
    };
    if let Some(k) = args.iters {
        section.inner_iterations = k;
    }
    if let Some(d) = positive("delta", args.delta)? {
        section.delta = d;
    }
    if let Some(h) = positive("horizon", args.horizon)? {
        section.horizon = h;
    }
    let section = *section;
    let config = s.rh_config().expect("section present");
    config.validate()?;
    let out = Output::resolve(args, &s)?;

    let t0 = s.cost.t0();
    let window = s.cost.with_horizon(t0, t0 + config.horizon).map_err(|e| CliError::Config(e.to_string()))?;
    let tables = build_tables(&s.system, &window, config.table_params(), cache_dir(args, &s).as_deref())?;
    let controller = RecedingController::with_tables(s.system.clone(), &s.cost, config, &s.initial, tables)?;
    let plant = Plant::new(s.system.clone(), s.plant)?;
    let log = run_closed_loop(controller, &plant, s.system.x0(), &s.disturbances)?;
    let run_cost = s.cost.with_horizon(t0, log.applied.t_m()).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut doc = report::RhDoc::new(&s.name, config.horizon, config.delta, config.duration, &log, log.trajectory.cost(&run_cost));

    if let Some(iters) = section.open_loop_iterations {
        let params = SiomsParams { max_iter: iters, ..s.solver };
        let open = open_loop_run(
            &s.system,
            &s.cost,
            &s.initial,
            &params,
            s.table,
            section.open_loop_dt,
            t0,
            config.duration,
            &plant,
            &s.disturbances,
        )?;
        let open_cost = open.trajectory.cost(&s.cost.with_horizon(t0, t0 + config.duration).map_err(|e| CliError::Numerical(e.to_string()))?);
        doc.open_loop = Some(report::OpenLoopDoc::new(&open, open_cost));
        if let Some((index, band)) = section.settle {
            doc.settle = log
                .disturbances
                .iter()
                .map(|d| report::SettleDoc {
                    disturbance_time: d.time,
                    state: index + 1,
                    band,
                    closed_loop: log.trajectory.settle_time(d.time, index, band),
                    open_loop: open.trajectory.settle_time(d.time, index, band),
                })
                .collect();
        }
    } else if let Some((index, band)) = section.settle {
        doc.settle = log
            .disturbances
            .iter()
            .map(|d| report::SettleDoc {
                disturbance_time: d.time,
                state: index + 1,
                band,
                closed_loop: log.trajectory.settle_time(d.time, index, band),
                open_loop: None,
            })
            .collect();
    }

    let rows = report::plant_trajectory_rows(&log.trajectory, &log.applied, PLANT_ROW_DT);
    out.write("trajectory.csv", &report::trajectory_csv(&rows))?;
    match out.format {
        ReportFormat::Structured => {
            out.write("report.json", &report::to_json(&doc))?;
        }
        ReportFormat::Csv => {
            let mut summary = vec![
                ("format_version", FORMAT_VERSION.to_string()),
                ("kind", doc.kind.to_string()),
                ("scenario", s.name.clone()),
                ("horizon", n(config.horizon)),
                ("delta", n(config.delta)),
                ("duration", n(config.duration)),
                ("cost", n(doc.cost)),
                ("aborted", doc.aborted.clone().unwrap_or_default()),
            ];
            if let Some(o) = &doc.open_loop {
                summary.push(("open_loop_cost", n(o.cost)));
            }
            out.write("summary.csv", &report::summary_csv(&summary))?;
            out.write("rh_steps.csv", &report::rh_steps_csv(&log))?;
            out.write("schedule.csv", &report::schedule_csv(&log.applied))?;
            out.write("settle.csv", &report::settle_csv(&doc.settle))?;
        }
    }
    if out.timings {
        out.write("rh_timings.csv", &report::rh_timings_csv(&log))?;
    }
    println!("closed-loop cost {} over {} steps", doc.cost, log.steps.len());
    for st in &doc.settle {
        let show = |v: Option<f64>| v.map_or_else(|| "never".to_string(), |x| format!("{x:.3} s"));
        println!(
            "disturbance at {} s: closed loop settles in {}, open loop in {}",
            st.disturbance_time,
            show(st.closed_loop),
            if doc.open_loop.is_some() { show(st.open_loop) } else { "n/a".to_string() }
        );
    }
    println!("reports in {}", out.dir.display());
    if let Some(reason) = &log.aborted {
        return Err(CliError::Numerical(format!("closed loop aborted: {reason}")));
    }
    Ok(())
}
