//! Report documents for solver runs, closed-loop runs, Monte-Carlo studies
//! and benchmarks.
//!
//! Every document is a pure function of its inputs: floats are written in
//! shortest round-trip form and wall-clock measurements live in separate
//! timing documents, so identical runs give identical bytes. Mode numbers
//! are one-based in all output.

use serde::{Deserialize, Serialize};

use crate::baseline::BenchRow;
use crate::model::ModeSchedule;
use crate::montecarlo::MonteCarloReport;
use crate::plant::PlantTrajectory;
use crate::receding::{Disturbance, OpenLoopRun, RhLog};
use crate::sioms::{RunReport, Termination, TrajectoryRow};

pub const FORMAT_VERSION: u32 = 1;

/// How a command writes its main report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// CSV tables, one file per table.
    #[default]
    Csv,
    /// A single JSON document.
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleDoc {
    /// One-based modes.
    pub sigma: Vec<usize>,
    pub tau: Vec<f64>,
    pub t0: f64,
    pub t_m: f64,
}

impl From<&ModeSchedule> for ScheduleDoc {
    fn from(s: &ModeSchedule) -> Self {
        ScheduleDoc { sigma: s.sigma().iter().map(|m| m + 1).collect(), tau: s.tau().to_vec(), t0: s.t0(), t_m: s.t_m() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDoc {
    pub k: usize,
    pub cost: f64,
    pub theta: f64,
    pub gamma: Option<f64>,
    pub mults: u64,
    pub lambda_eval: usize,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDoc {
    pub format_version: u32,
    pub kind: &'static str,
    pub scenario: String,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_steps: usize,
    pub termination: Termination,
    pub theta_tol: f64,
    pub integrator_steps: u64,
    pub iterations: Vec<IterationDoc>,
    pub schedule: ScheduleDoc,
}

impl SolveDoc {
    pub fn new(scenario: &str, r: &RunReport) -> Self {
        SolveDoc {
            format_version: FORMAT_VERSION,
            kind: "solve",
            scenario: scenario.to_string(),
            initial_cost: r.initial_cost,
            final_cost: r.final_cost,
            accepted_steps: r.accepted_steps,
            termination: r.termination,
            theta_tol: r.theta_tol,
            integrator_steps: r.integrator_steps,
            iterations: r
                .iterations
                .iter()
                .map(|i| IterationDoc {
                    k: i.k,
                    cost: i.cost,
                    theta: i.theta,
                    gamma: i.gamma,
                    mults: i.mults,
                    lambda_eval: i.lambda_eval,
                    segments: i.segments,
                })
                .collect(),
            schedule: ScheduleDoc::from(&r.schedule),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveTimingsDoc {
    pub format_version: u32,
    pub kind: &'static str,
    pub table_build_millis: f64,
    pub online_millis: f64,
    pub iteration_millis: Vec<f64>,
}

impl SolveTimingsDoc {
    pub fn new(r: &RunReport, table_build_millis: f64) -> Self {
        SolveTimingsDoc {
            format_version: FORMAT_VERSION,
            kind: "solve_timings",
            table_build_millis,
            online_millis: r.online_millis,
            iteration_millis: r.iterations.iter().map(|i| i.millis).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhStepDoc {
    pub step: usize,
    pub t: f64,
    pub state: Vec<f64>,
    pub warm_cost: f64,
    pub window_cost: f64,
    pub iterations: usize,
    pub theta: f64,
    pub advance_steps: u64,
    pub solve_steps: u64,
    pub slice: ScheduleDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisturbanceDoc {
    pub time: f64,
    /// One-based state index.
    pub state: usize,
    pub magnitude: f64,
}

impl From<&Disturbance> for DisturbanceDoc {
    fn from(d: &Disturbance) -> Self {
        DisturbanceDoc { time: d.time, state: d.index + 1, magnitude: d.magnitude }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhDoc {
    pub format_version: u32,
    pub kind: &'static str,
    pub scenario: String,
    pub horizon: f64,
    pub delta: f64,
    pub duration: f64,
    pub cost: f64,
    pub aborted: Option<String>,
    pub disturbances: Vec<DisturbanceDoc>,
    /// Settling after each disturbance; empty unless a band is configured.
    pub settle: Vec<SettleDoc>,
    pub open_loop: Option<OpenLoopDoc>,
    pub steps: Vec<RhStepDoc>,
    pub applied: ScheduleDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettleDoc {
    pub disturbance_time: f64,
    /// One-based state index the band applies to.
    pub state: usize,
    pub band: f64,
    /// Seconds until the state stays inside the band; `None` if it never does.
    pub closed_loop: Option<f64>,
    pub open_loop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopDoc {
    pub initial_cost: f64,
    /// Optimiser's window cost of the final schedule.
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost of the disturbed plant trajectory.
    pub cost: f64,
    pub schedule: ScheduleDoc,
}

impl OpenLoopDoc {
    pub fn new(run: &OpenLoopRun, cost: f64) -> Self {
        OpenLoopDoc {
            initial_cost: run.report.initial_cost,
            final_cost: run.report.final_cost,
            iterations: run.report.accepted_steps,
            cost,
            schedule: ScheduleDoc::from(&run.report.schedule),
        }
    }
}

impl RhDoc {
    /// `cost` is the caller's evaluation of the plant trajectory.
    pub fn new(scenario: &str, horizon: f64, delta: f64, duration: f64, log: &RhLog, cost: f64) -> Self {
        RhDoc {
            format_version: FORMAT_VERSION,
            kind: "receding_horizon",
            scenario: scenario.to_string(),
            horizon,
            delta,
            duration,
            cost,
            aborted: log.aborted.clone(),
            disturbances: log.disturbances.iter().map(DisturbanceDoc::from).collect(),
            settle: Vec::new(),
            open_loop: None,
            steps: log
                .steps
                .iter()
                .map(|r| RhStepDoc {
                    step: r.step,
                    t: r.t,
                    state: r.state.clone(),
                    warm_cost: r.warm_cost,
                    window_cost: r.window_cost,
                    iterations: r.iterations,
                    theta: r.theta,
                    advance_steps: r.advance_steps,
                    solve_steps: r.solve_steps,
                    slice: ScheduleDoc {
                        sigma: r.slice_sigma.iter().map(|m| m + 1).collect(),
                        tau: r.slice_tau.clone(),
                        t0: r.t,
                        t_m: r.t + delta,
                    },
                })
                .collect(),
            applied: ScheduleDoc::from(&log.applied),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloDoc<'a> {
    pub format_version: u32,
    pub kind: &'static str,
    pub scenario: String,
    #[serde(flatten)]
    pub report: &'a MonteCarloReport,
}

impl<'a> MonteCarloDoc<'a> {
    pub fn new(scenario: &str, report: &'a MonteCarloReport) -> Self {
        MonteCarloDoc { format_version: FORMAT_VERSION, kind: "monte_carlo", scenario: scenario.to_string(), report }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchDocRow {
    pub method: &'static str,
    pub samples: usize,
    pub rms_error: f64,
    pub final_cost: f64,
    pub exact_cost: f64,
    pub iterations: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchDoc {
    pub format_version: u32,
    pub kind: &'static str,
    pub scenario: String,
    pub rows: Vec<BenchDocRow>,
}

impl BenchDoc {
    pub fn new(scenario: &str, rows: &[BenchRow]) -> Self {
        BenchDoc {
            format_version: FORMAT_VERSION,
            kind: "bench",
            scenario: scenario.to_string(),
            rows: rows
                .iter()
                .map(|r| BenchDocRow {
                    method: r.method.name(),
                    samples: r.samples,
                    rms_error: r.rms_error,
                    final_cost: r.final_cost,
                    exact_cost: r.exact_cost,
                    iterations: r.iterations,
                    diverged: r.diverged,
                })
                .collect(),
        }
    }
}

pub fn to_json<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("report documents serialize");
    s.push('\n');
    s
}

fn csv_string(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    h.push("mode".into());
    h
}

/// `t,x1,...,xn,mode` from solver trajectory rows.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let n = rows.first().map_or(0, |r| r.x.len());
    csv_string(
        &trajectory_header(n),
        rows.iter().map(|r| {
            let mut v = vec![num(r.t)];
            v.extend(r.x.iter().copied().map(num));
            v.push((r.mode + 1).to_string());
            v
        }),
    )
}

/// Plant trajectory resampled on a uniform grid with spacing close to `dt`.
pub fn plant_trajectory_rows(tr: &PlantTrajectory, schedule: &ModeSchedule, dt: f64) -> Vec<TrajectoryRow> {
    let (Some(&a), Some(&b)) = (tr.t.first(), tr.t.last()) else {
        return Vec::new();
    };
    let count = ((b - a) / dt).round().max(1.0) as usize;
    (0..=count)
        .map(|k| {
            let t = if k == count { b } else { a + (b - a) * k as f64 / count as f64 };
            let mode = if t < schedule.t_m() { schedule.mode_at(t) } else { *schedule.sigma().last().expect("non-empty") };
            TrajectoryRow { t, x: tr.state_at(t).iter().copied().collect(), mode }
        })
        .collect()
}

pub fn iterations_csv(r: &RunReport) -> String {
    let header = ["k", "cost", "theta", "gamma", "mults", "lambda_eval", "segments"].map(String::from);
    csv_string(
        &header,
        r.iterations.iter().map(|i| {
            vec![
                i.k.to_string(),
                num(i.cost),
                num(i.theta),
                opt(i.gamma),
                i.mults.to_string(),
                i.lambda_eval.to_string(),
                i.segments.to_string(),
            ]
        }),
    )
}

/// One row per segment: `mode,start,end`.
pub fn schedule_csv(s: &ModeSchedule) -> String {
    let header = ["mode", "start", "end"].map(String::from);
    csv_string(
        &header,
        (0..s.len()).map(|i| {
            let end = if i + 1 < s.len() { s.boundary(i + 1) } else { s.t_m() };
            vec![(s.sigma()[i] + 1).to_string(), num(s.boundary(i)), num(end)]
        }),
    )
}

pub fn rh_steps_csv(log: &RhLog) -> String {
    let header = ["step", "t", "warm_cost", "window_cost", "iterations", "theta", "advance_steps", "solve_steps", "slice_modes"]
        .map(String::from);
    csv_string(
        &header,
        log.steps.iter().map(|r| {
            let modes: Vec<String> = r.slice_sigma.iter().map(|m| (m + 1).to_string()).collect();
            vec![
                r.step.to_string(),
                num(r.t),
                num(r.warm_cost),
                num(r.window_cost),
                r.iterations.to_string(),
                num(r.theta),
                r.advance_steps.to_string(),
                r.solve_steps.to_string(),
                modes.join(" "),
            ]
        }),
    )
}

pub fn settle_csv(rows: &[SettleDoc]) -> String {
    let header = ["disturbance_time", "state", "band", "closed_loop_settle", "open_loop_settle"].map(String::from);
    csv_string(
        &header,
        rows.iter().map(|r| {
            vec![num(r.disturbance_time), r.state.to_string(), num(r.band), opt(r.closed_loop), opt(r.open_loop)]
        }),
    )
}

/// `key,value` rows for the scalar fields of a document.
pub fn summary_csv(pairs: &[(&str, String)]) -> String {
    csv_string(&["key".to_string(), "value".to_string()], pairs.iter().map(|(k, v)| vec![k.to_string(), v.clone()]))
}

pub fn rh_timings_csv(log: &RhLog) -> String {
    let header = ["step", "t", "optimize_millis"].map(String::from);
    csv_string(&header, log.steps.iter().map(|r| vec![r.step.to_string(), num(r.t), num(r.optimize_millis)]))
}

pub fn montecarlo_runs_csv(r: &MonteCarloReport) -> String {
    let header = ["run", "omega", "open_loop_cost", "closed_loop_cost"].map(String::from);
    csv_string(
        &header,
        (0..r.runs).map(|k| vec![(k + 1).to_string(), num(r.omegas[k]), opt(r.open_loop.costs[k]), opt(r.closed_loop.costs[k])]),
    )
}

pub fn montecarlo_summary_csv(r: &MonteCarloReport) -> String {
    let header = ["variant", "mean", "std", "diverged"].map(String::from);
    let row = |name: &str, s: &crate::montecarlo::VariantStats| vec![name.to_string(), num(s.mean), num(s.std), s.diverged.to_string()];
    csv_string(&header, [row("open_loop", &r.open_loop), row("closed_loop", &r.closed_loop)])
}

pub fn montecarlo_histogram_csv(r: &MonteCarloReport) -> String {
    let header = ["lo", "hi", "open_loop", "closed_loop"].map(String::from);
    let e = &r.open_loop.histogram.edges;
    csv_string(
        &header,
        (0..r.open_loop.histogram.counts.len()).map(|k| {
            vec![
                num(e[k]),
                num(e[k + 1]),
                r.open_loop.histogram.counts[k].to_string(),
                r.closed_loop.histogram.counts[k].to_string(),
            ]
        }),
    )
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let header = ["method", "N", "rms_error", "final_cost", "exact_cost", "iterations", "diverged"].map(String::from);
    csv_string(
        &header,
        rows.iter().map(|r| {
            vec![
                r.method.name().to_string(),
                r.samples.to_string(),
                num(r.rms_error),
                num(r.final_cost),
                num(r.exact_cost),
                r.iterations.to_string(),
                r.diverged.to_string(),
            ]
        }),
    )
}

pub fn bench_timings_csv(rows: &[BenchRow]) -> String {
    let header = ["method", "N", "seconds", "build_seconds"].map(String::from);
    csv_string(
        &header,
        rows.iter()
            .map(|r| vec![r.method.name().to_string(), r.samples.to_string(), num(r.seconds), num(r.build_seconds)]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_header_and_one_based_modes() {
        let rows = vec![
            TrajectoryRow { t: 0.0, x: vec![1.0, 0.0], mode: 1 },
            TrajectoryRow { t: 0.5, x: vec![0.25, -1.5], mode: 0 },
        ];
        let text = trajectory_csv(&rows);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x1,x2,mode"));
        assert_eq!(lines.next(), Some("0,1,0,2"));
        assert_eq!(lines.next(), Some("0.5,0.25,-1.5,1"));
    }

    #[test]
    fn schedule_rows_cover_horizon() {
        let s = ModeSchedule::new(vec![1, 0], vec![0.75], 0.0, 2.0).unwrap();
        assert_eq!(schedule_csv(&s), "mode,start,end\n2,0,0.75\n1,0.75,2\n");
        let doc = ScheduleDoc::from(&s);
        assert_eq!(doc.sigma, vec![2, 1]);
    }
}
