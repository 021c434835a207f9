//! Receding-horizon scheduling: optimise over a sliding window of length
//! `T`, apply the first `delta` seconds, then slide the tables forward with
//! the window-shift splice instead of rebuilding them.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::count_steps;
use crate::model::{ModeSchedule, ModelError, QuadraticCost, SwitchedLinearSystem, Vector};
use crate::plant::{Plant, PlantError, PlantTrajectory};
use crate::sioms::{solve, Problem, RunReport, SiomsError, SiomsParams};
use crate::transition::{TableError, TableParams, TransitionTables};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RhError {
    #[error(transparent)]
    Solve(#[from] SiomsError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("invalid receding-horizon configuration: {0}")]
    Config(String),
    #[error("shared table sequence has {available} windows, step {step} requested")]
    TablesExhausted { step: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhConfig {
    /// Window length `T` (s).
    pub horizon: f64,
    /// Control application interval `delta` (s).
    pub delta: f64,
    /// Closed-loop run length (s).
    pub duration: f64,
    pub inner: SiomsParams,
    /// Table spacing (s); `delta` must be a multiple of it.
    pub table_dt: f64,
    pub table: TableParams,
}

impl RhConfig {
    pub fn new(horizon: f64, delta: f64, duration: f64) -> Self {
        RhConfig {
            horizon,
            delta,
            duration,
            inner: SiomsParams { max_iter: 5, ..SiomsParams::default() },
            table_dt: 1e-3,
            table: TableParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RhError> {
        if !(self.delta > 0.0 && self.delta <= self.horizon) {
            return Err(RhError::Config(format!("need 0 < delta <= T, got delta = {}, T = {}", self.delta, self.horizon)));
        }
        if !(self.duration >= self.delta) {
            return Err(RhError::Config("duration must be at least delta".into()));
        }
        let ratio = self.delta / self.table_dt;
        if (ratio - ratio.round()).abs() > 1e-6 {
            return Err(RhError::Config("delta must be a multiple of the table spacing".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.delta - 1e-9).ceil() as usize
    }

    pub fn table_params(&self) -> TableParams {
        TableParams { samples: (self.horizon / self.table_dt).round().max(1.0) as usize, ..self.table }
    }
}

/// Instantaneous jump `x[index] += magnitude` at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub time: f64,
    /// Zero-based state index.
    pub index: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhStepRecord {
    pub step: usize,
    pub t: f64,
    pub state: Vec<f64>,
    /// Window cost of the warm start and of the optimised schedule.
    pub warm_cost: f64,
    pub window_cost: f64,
    pub iterations: usize,
    pub theta: f64,
    pub optimize_millis: f64,
    /// Integration steps spent advancing the tables after this step.
    pub advance_steps: u64,
    /// Integration steps taken while optimising (always zero).
    pub solve_steps: u64,
    pub slice_sigma: Vec<usize>,
    pub slice_tau: Vec<f64>,
}

enum TableSource {
    Live(TransitionTables),
    Shared { seq: Arc<Vec<TransitionTables>>, index: usize },
}

/// Owns the sliding tables and the previous schedule.
pub struct RecedingController {
    sys: SwitchedLinearSystem,
    cost: QuadraticCost,
    config: RhConfig,
    tables: TableSource,
    previous: ModeSchedule,
    t: f64,
    step: usize,
}

/// One receding-horizon step.
pub struct RhStep {
    pub slice: ModeSchedule,
    pub record: RhStepRecord,
}

impl RecedingController {
    /// Builds the first window's tables over `[t_start, t_start + T]`.
    pub fn new(
        sys: SwitchedLinearSystem,
        cost: &QuadraticCost,
        config: RhConfig,
        u0: &ModeSchedule,
        t_start: f64,
    ) -> Result<Self, RhError> {
        config.validate()?;
        let window = cost.with_horizon(t_start, t_start + config.horizon)?;
        let tables = TransitionTables::build(&sys, &window, config.table_params())?;
        Ok(Self::assemble(sys, window, config, TableSource::Live(tables), u0, t_start))
    }

    /// Starts from tables already built for `[t_start, t_start + T]`, for
    /// example loaded from a cache.
    pub fn with_tables(
        sys: SwitchedLinearSystem,
        cost: &QuadraticCost,
        config: RhConfig,
        u0: &ModeSchedule,
        tables: TransitionTables,
    ) -> Result<Self, RhError> {
        config.validate()?;
        let t_start = tables.t0();
        if (tables.t_m() - t_start - config.horizon).abs() > 1e-9 * config.horizon.max(1.0) {
            return Err(RhError::Config(format!(
                "tables span {} s but the horizon is {} s",
                tables.t_m() - t_start,
                config.horizon
            )));
        }
        let window = cost.with_horizon(t_start, t_start + config.horizon)?;
        Ok(Self::assemble(sys, window, config, TableSource::Live(tables), u0, t_start))
    }

    /// Uses a precomputed table sequence (one entry per step), e.g. shared
    /// by many runs against the same nominal model.
    pub fn with_shared_tables(
        sys: SwitchedLinearSystem,
        cost: &QuadraticCost,
        config: RhConfig,
        u0: &ModeSchedule,
        seq: Arc<Vec<TransitionTables>>,
    ) -> Result<Self, RhError> {
        config.validate()?;
        let first = seq.first().ok_or(RhError::TablesExhausted { step: 0, available: 0 })?;
        let t_start = first.t0();
        let window = cost.with_horizon(t_start, t_start + config.horizon)?;
        Ok(Self::assemble(sys, window, config, TableSource::Shared { seq, index: 0 }, u0, t_start))
    }

    fn assemble(
        sys: SwitchedLinearSystem,
        window: QuadraticCost,
        config: RhConfig,
        tables: TableSource,
        u0: &ModeSchedule,
        t: f64,
    ) -> Self {
        let previous = u0.shifted(t, t + config.horizon);
        RecedingController { sys, cost: window, config, tables, previous, t, step: 0 }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn config(&self) -> &RhConfig {
        &self.config
    }

    pub fn tables(&self) -> Result<&TransitionTables, RhError> {
        match &self.tables {
            TableSource::Live(t) => Ok(t),
            TableSource::Shared { seq, index } => {
                seq.get(*index).ok_or(RhError::TablesExhausted { step: *index, available: seq.len() })
            }
        }
    }

    /// Optimises from the measured state, returns the first `delta` seconds
    /// of the schedule, and slides the window.
    pub fn step(&mut self, measured: &Vector) -> Result<RhStep, RhError> {
        let (t, delta, horizon) = (self.t, self.config.delta, self.config.horizon);
        let started = Instant::now();
        let tables = self.tables()?;
        let problem = Problem { tables, sys: &self.sys, cost: &self.cost, x0: measured };
        let (report, solve_steps) = count_steps(|| solve(&problem, &self.previous, &self.config.inner));
        let report = report?;
        let optimize_millis = started.elapsed().as_secs_f64() * 1e3;
        let slice = report.schedule.restricted(t, t + delta);

        let next_cost = self.cost.with_horizon(t + delta, t + delta + horizon)?;
        let advance_steps = match &mut self.tables {
            TableSource::Live(tables) => {
                let (next, steps) = count_steps(|| tables.advance(&self.sys, &self.cost, delta));
                *tables = next?;
                steps
            }
            TableSource::Shared { index, .. } => {
                *index += 1;
                0
            }
        };
        let record = RhStepRecord {
            step: self.step,
            t,
            state: measured.iter().copied().collect(),
            warm_cost: report.initial_cost,
            window_cost: report.final_cost,
            iterations: report.accepted_steps,
            theta: report.iterations.last().map_or(0.0, |r| r.theta),
            optimize_millis,
            advance_steps,
            solve_steps,
            slice_sigma: slice.sigma().to_vec(),
            slice_tau: slice.tau().to_vec(),
        };
        self.previous = report.schedule.shifted(t + delta, t + delta + horizon);
        self.cost = next_cost;
        self.t += delta;
        self.step += 1;
        Ok(RhStep { slice, record })
    }
}

/// Tables for each of `steps` consecutive windows starting at `t_start`.
pub fn table_sequence(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    config: &RhConfig,
    t_start: f64,
    steps: usize,
) -> Result<Vec<TransitionTables>, RhError> {
    config.validate()?;
    let mut window = cost.with_horizon(t_start, t_start + config.horizon)?;
    let mut seq = vec![TransitionTables::build(sys, &window, config.table_params())?];
    for _ in 1..steps {
        let next = seq.last().expect("non-empty").advance(sys, &window, config.delta)?;
        window = window.with_horizon(next.t0(), next.t_m())?;
        seq.push(next);
    }
    Ok(seq)
}

/// A schedule optimised once over a whole run and applied without feedback.
#[derive(Debug, Clone)]
pub struct OpenLoopRun {
    pub report: RunReport,
    pub trajectory: PlantTrajectory,
    pub disturbances: Vec<Disturbance>,
}

/// Optimises over `[t_start, t_start + duration]` with tables and control
/// grid spaced `dt`, then drives `plant` with the result.
#[allow(clippy::too_many_arguments)]
pub fn open_loop_run(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    u0: &ModeSchedule,
    params: &SiomsParams,
    table: TableParams,
    dt: f64,
    t_start: f64,
    duration: f64,
    plant: &Plant,
    disturbances: &[Disturbance],
) -> Result<OpenLoopRun, RhError> {
    let t_end = t_start + duration;
    let window = cost.with_horizon(t_start, t_end)?;
    let tables = TransitionTables::build(sys, &window, TableParams { samples: (duration / dt).round().max(1.0) as usize, ..table })?;
    let params = SiomsParams { control_dt: dt, ..*params };
    let report = solve(&Problem { tables: &tables, sys, cost: &window, x0: sys.x0() }, &u0.shifted(t_start, t_end), &params)?;
    let mut applied = Vec::new();
    let trajectory = propagate_with_disturbances(plant, sys.x0(), &report.schedule, t_start, t_end, disturbances, &mut applied)?;
    Ok(OpenLoopRun { report, trajectory, disturbances: applied })
}

/// Closed-loop run: measured states, applied schedule and plant trajectory.
#[derive(Debug, Clone)]
pub struct RhLog {
    pub steps: Vec<RhStepRecord>,
    pub applied: ModeSchedule,
    pub trajectory: PlantTrajectory,
    /// Disturbances actually applied, with their exact times.
    pub disturbances: Vec<Disturbance>,
    /// Set when the plant diverged; the log is partial.
    pub aborted: Option<String>,
}

/// Propagates the plant over `[from, to]` under `schedule`, applying
/// disturbances that fall in `[from, to)` at their exact times.
pub fn propagate_with_disturbances(
    plant: &Plant,
    x: &Vector,
    schedule: &ModeSchedule,
    from: f64,
    to: f64,
    disturbances: &[Disturbance],
    applied: &mut Vec<Disturbance>,
) -> Result<PlantTrajectory, PlantError> {
    let mut out = PlantTrajectory::default();
    let mut state = x.clone();
    let mut t = from;
    let mut pending: Vec<&Disturbance> = disturbances.iter().filter(|d| d.time >= from && d.time < to).collect();
    pending.sort_by(|a, b| a.time.total_cmp(&b.time));
    for d in pending {
        if d.time > t {
            let piece = plant.propagate(&state, schedule, t, d.time)?;
            state = piece.final_state().clone();
            out.append(piece);
            t = d.time;
        }
        if d.index < state.len() {
            state[d.index] += d.magnitude;
            applied.push(*d);
        }
    }
    let piece = plant.propagate(&state, schedule, t, to)?;
    out.append(piece);
    Ok(out)
}

fn join_slices(slices: &[ModeSchedule], t0: f64, t_m: f64) -> Result<ModeSchedule, ModelError> {
    let mut sigma = Vec::new();
    let mut tau = Vec::new();
    for (k, s) in slices.iter().enumerate() {
        if k > 0 {
            tau.push(s.t0());
        }
        for (i, &m) in s.sigma().iter().enumerate() {
            if i > 0 {
                tau.push(s.tau()[i - 1]);
            }
            sigma.push(m);
        }
    }
    ModeSchedule::new(sigma, tau, t0, t_m)
}

/// Alternates optimisation steps with plant propagation for the configured
/// duration. The controller uses the nominal model; `plant` may differ.
pub fn run_closed_loop(
    mut controller: RecedingController,
    plant: &Plant,
    x0: &Vector,
    disturbances: &[Disturbance],
) -> Result<RhLog, RhError> {
    let config = *controller.config();
    let t_start = controller.time();
    let t_end = t_start + config.duration;
    let mut x = x0.clone();
    let mut records = Vec::new();
    let mut slices = Vec::new();
    let mut trajectory = PlantTrajectory::default();
    let mut applied = Vec::new();
    let mut aborted = None;
    for _ in 0..config.steps() {
        let t = controller.time();
        let step = controller.step(&x)?;
        let to = (t + config.delta).min(t_end);
        records.push(step.record);
        match propagate_with_disturbances(plant, &x, &step.slice, t, to, disturbances, &mut applied) {
            Ok(piece) => {
                x = piece.final_state().clone();
                trajectory.append(piece);
                slices.push(step.slice.restricted(t, to));
            }
            Err(e @ PlantError::Diverged { .. }) => {
                aborted = Some(e.to_string());
                slices.push(step.slice.restricted(t, to));
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let end = slices.last().map_or(t_end, |s| s.t_m());
    let applied_schedule = join_slices(&slices, t_start, end)?;
    Ok(RhLog { steps: records, applied: applied_schedule, trajectory, disturbances: applied, aborted })
}
