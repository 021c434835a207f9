//! Open-loop mode scheduling from precomputed transition tables.
//!
//! Every quantity the descent needs is algebraic in the table samples:
//! states come from `x(t) = Phi(t) Phi(T_i)^{-1} x(T_i)`, the co-state factor
//! from the adjoint-transition splice, and the insertion gradient from
//! `d_i(t) = x' P (A_i - A_sigma) x`. No differential equation is solved
//! while iterating.

use std::cell::Cell;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::steps_on_this_thread;
use crate::model::{
    control_from_schedule, grid_with_step, schedule_from_control, Mat, ModeSchedule, ModelError, QuadraticCost,
    RealControl, SwitchedLinearSystem, SwitchingControl, Vector,
};
use crate::transition::{TableError, TransitionTables};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SiomsError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("tables cover [{tables_t0}, {tables_t_m}] but the cost horizon is [{t0}, {t_m}]")]
    Horizon { tables_t0: f64, tables_t_m: f64, t0: f64, t_m: f64 },
    #[error("initial state has {got} entries, system has {n}")]
    StateLength { got: usize, n: usize },
    #[error("invalid parameter: {0}")]
    Params(String),
}

/// Counts matrix-matrix and matrix-vector products.
#[derive(Debug, Default)]
pub struct MultCounter(Cell<u64>);

impl MultCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.set(self.0.get() + n);
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    pub fn take(&self) -> u64 {
        self.0.replace(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// Sufficient decrease measured against the first-order prediction of
    /// the projected step: `J(u') <= J(u) + c * sum_k d_{u'_k}(t_k) dt_k`,
    /// and `J(u') < J(u)`.
    Arc,
    /// `J(u') <= J(u) + c * gamma * theta`.
    Slope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiomsParams {
    pub max_iter: usize,
    /// Stop when `|theta| <= theta_tol`; `None` means `1e-3 |theta_0|`.
    pub theta_tol: Option<f64>,
    /// Fixed initial step; `None` means `gamma_scale / |theta_k|`.
    pub gamma0: Option<f64>,
    pub gamma_scale: f64,
    pub beta: f64,
    pub c_armijo: f64,
    pub m_max: usize,
    pub line_search: LineSearch,
    /// Control grid spacing (s); new switching times land on this grid.
    pub control_dt: f64,
    /// Golden-section evaluations spent refining the minimiser of `d`.
    pub refine_evals: usize,
    /// Approximate number of cost quadrature nodes over the horizon.
    pub quadrature_points: usize,
}

impl Default for SiomsParams {
    fn default() -> Self {
        SiomsParams {
            max_iter: 30,
            theta_tol: None,
            gamma0: None,
            gamma_scale: 3.0,
            beta: 0.5,
            c_armijo: 1e-2,
            m_max: 20,
            line_search: LineSearch::Arc,
            control_dt: 1e-3,
            refine_evals: 12,
            quadrature_points: 1001,
        }
    }
}

impl SiomsParams {
    pub fn validate(&self) -> Result<(), SiomsError> {
        let bad = |m: &str| Err(SiomsError::Params(m.to_string()));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.gamma_scale > 0.0) || self.gamma0.is_some_and(|g| !(g > 0.0)) {
            return bad("gamma0 must be positive");
        }
        if !(self.c_armijo >= 0.0) {
            return bad("c_armijo must be non-negative");
        }
        if !(self.control_dt > 0.0) {
            return bad("control_dt must be positive");
        }
        if self.quadrature_points < 3 {
            return bad("quadrature_points must be at least 3");
        }
        Ok(())
    }
}

/// States at segment starts and co-state factors at segment ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchPoints {
    /// `x(T_i)` for `i = 0..M`, the start of each segment.
    pub states: Vec<Vector>,
    /// `P(T_{i+1})` for `i = 0..M`, the end of each segment; the last
    /// entry is `P1`.
    pub p: Vec<Mat>,
}

fn check_window(tables: &TransitionTables, schedule: &ModeSchedule) -> Result<(), SiomsError> {
    let tol = 1e-9 * (tables.t_m() - tables.t0()).max(1.0);
    if (tables.t0() - schedule.t0()).abs() > tol || (tables.t_m() - schedule.t_m()).abs() > tol {
        return Err(SiomsError::Horizon {
            tables_t0: tables.t0(),
            tables_t_m: tables.t_m(),
            t0: schedule.t0(),
            t_m: schedule.t_m(),
        });
    }
    Ok(())
}

/// `Phi_j(b, a)` for `a <= b` inside one mode, counting the products.
fn transition(tables: &TransitionTables, j: usize, b: f64, a: f64, mults: &MultCounter) -> Result<Mat, TableError> {
    let end = tables.phi(j, b)?;
    let start = tables.phi_inv(j, a)?;
    Ok(match tables.anchor_chain(j, end.anchor, start.anchor) {
        Some(c) => {
            mults.add(2);
            end.matrix * c * start.matrix
        }
        None => {
            mults.add(1);
            end.matrix * start.matrix
        }
    })
}

/// Forward state recursion and backward co-state recursion over the
/// switching times; `4(M - 1)` products.
pub fn precompute_switch_points(
    tables: &TransitionTables,
    schedule: &ModeSchedule,
    x0: &Vector,
    p1: &Mat,
    mults: &MultCounter,
) -> Result<SwitchPoints, SiomsError> {
    check_window(tables, schedule)?;
    let m = schedule.len();
    let sigma = schedule.sigma();
    let mut states = Vec::with_capacity(m);
    let mut steps = Vec::with_capacity(m.saturating_sub(1));
    states.push(x0.clone());
    for i in 0..m - 1 {
        let s = transition(tables, sigma[i], schedule.boundary(i + 1), schedule.boundary(i), mults)?;
        mults.add(1);
        states.push(&s * &states[i]);
        steps.push(s);
    }

    let mut p = vec![Mat::zeros(p1.nrows(), p1.ncols()); m];
    p[m - 1] = p1.clone();
    for i in (0..m - 1).rev() {
        let j = sigma[i + 1];
        let t = schedule.boundary(i + 1);
        let psi = tables.psi(j, t)?;
        p[i] = if i + 1 == m - 1 {
            // The last segment runs into TM, where the bracket reduces to
            // the off-line term Phi(TM)' P1 Phi(TM).
            let term = tables.terminal_term(j);
            let g = tables.phi_inv(j, t)?;
            let k = match tables.anchor_chain(j, term.anchor, g.anchor) {
                Some(c) => {
                    mults.add(2);
                    c.transpose() * term.matrix * c
                }
                None => term.matrix,
            };
            mults.add(2);
            psi + g.matrix.transpose() * k * g.matrix
        } else {
            let s = &steps[i + 1];
            let bracket = &p[i + 1] - tables.psi(j, schedule.boundary(i + 2))?;
            mults.add(2);
            psi + s.transpose() * bracket * s
        };
    }
    Ok(SwitchPoints { states, p })
}

/// `x(t)` inside segment `i`; two products.
fn state_in_segment(
    tables: &TransitionTables,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    i: usize,
    t: f64,
    mults: &MultCounter,
) -> Result<Vector, SiomsError> {
    let j = schedule.sigma()[i];
    let start = tables.phi_inv(j, schedule.boundary(i))?;
    let at = tables.phi(j, t)?;
    let mut v = start.matrix * &sp.states[i];
    if let Some(c) = tables.anchor_chain(j, at.anchor, start.anchor) {
        mults.add(1);
        v = c * v;
    }
    mults.add(2);
    Ok(at.matrix * v)
}

/// `P(t)` inside segment `i`; four products.
fn p_in_segment(
    tables: &TransitionTables,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    i: usize,
    t: f64,
    mults: &MultCounter,
) -> Result<Mat, SiomsError> {
    let j = schedule.sigma()[i];
    let end_t = schedule.boundary(i + 1);
    let end = tables.phi(j, end_t)?;
    let g = tables.phi_inv(j, t)?;
    let bracket = &sp.p[i] - tables.psi(j, end_t)?;
    let mut k = end.matrix.transpose() * bracket * &end.matrix;
    if let Some(c) = tables.anchor_chain(j, end.anchor, g.anchor) {
        mults.add(2);
        k = c.transpose() * k * c;
    }
    mults.add(4);
    let p = tables.psi(j, t)? + g.matrix.transpose() * k * g.matrix;
    if t == schedule.t_m() {
        return Ok(sp.p[i].clone());
    }
    Ok(p)
}

fn segment_for(schedule: &ModeSchedule, t: f64) -> Result<usize, SiomsError> {
    let slack = 1e-12 * (schedule.t_m() - schedule.t0()).max(1.0);
    if !(t >= schedule.t0() - slack && t <= schedule.t_m() + slack) {
        return Err(TableError::OutOfRange { t, t0: schedule.t0(), t_m: schedule.t_m() }.into());
    }
    Ok(schedule.segment_at(t))
}

/// State at `t` from the switch-point data.
pub fn eval_state(
    tables: &TransitionTables,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    t: f64,
    mults: &MultCounter,
) -> Result<Vector, SiomsError> {
    let i = segment_for(schedule, t)?;
    state_in_segment(tables, schedule, sp, i, t, mults)
}

/// Co-state factor `P(t)`; the co-state is `P(t) x(t)`.
pub fn eval_p(
    tables: &TransitionTables,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    t: f64,
    mults: &MultCounter,
) -> Result<Mat, SiomsError> {
    let i = segment_for(schedule, t)?;
    p_in_segment(tables, schedule, sp, i, t, mults)
}

/// `d_i = (P x)' (A_i - A_active) x` for every mode; three products.
fn gradient_from(sys: &SwitchedLinearSystem, active: usize, t: f64, x: &Vector, p: &Mat, mults: &MultCounter) -> Vec<f64> {
    let n = sys.n_states();
    let modes = sys.n_modes();
    let mut stacked = Mat::zeros(modes * n, n);
    for i in 0..modes {
        stacked.view_mut((i * n, 0), (n, n)).copy_from(&sys.a(i, t));
    }
    let px = p * x;
    let ax = stacked * x;
    mults.add(3);
    let own = px.dot(&ax.rows(active * n, n));
    (0..modes)
        .map(|i| if i == active { 0.0 } else { px.dot(&ax.rows(i * n, n)) - own })
        .collect()
}

fn gradient_in_segment(
    tables: &TransitionTables,
    sys: &SwitchedLinearSystem,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    i: usize,
    t: f64,
    mults: &MultCounter,
) -> Result<Vec<f64>, SiomsError> {
    let x = state_in_segment(tables, schedule, sp, i, t, mults)?;
    let p = p_in_segment(tables, schedule, sp, i, t, mults)?;
    Ok(gradient_from(sys, schedule.sigma()[i], t, &x, &p, mults))
}

/// Mode insertion gradient `d(t)`, one entry per mode; nine products.
pub fn insertion_gradient(
    tables: &TransitionTables,
    sys: &SwitchedLinearSystem,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    t: f64,
    mults: &MultCounter,
) -> Result<Vec<f64>, SiomsError> {
    let i = segment_for(schedule, t)?;
    gradient_in_segment(tables, sys, schedule, sp, i, t, mults)
}

/// Max-projection onto feasible switching controls; ties go to the lowest
/// mode index.
pub fn project(mu: &RealControl) -> SwitchingControl {
    let active = (0..mu.grid().len())
        .map(|k| {
            let v = mu.sample(k);
            let mut best = 0;
            for (i, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    SwitchingControl::from_active(mu.grid().to_vec(), active, mu.n_modes()).expect("indices in range")
}

/// Quadrature nodes and weights for the running cost: composite Simpson on
/// each segment separately, so the kinks at switching times are nodes.
fn quadrature(schedule: &ModeSchedule, points: usize) -> Vec<(usize, f64, f64)> {
    let span = schedule.t_m() - schedule.t0();
    let mut nodes = Vec::new();
    for i in 0..schedule.len() {
        let (a, b) = (schedule.boundary(i), schedule.boundary(i + 1));
        let mut m = ((points - 1) as f64 * (b - a) / span).round() as usize;
        m = m.max(2);
        m += m % 2;
        let h = (b - a) / m as f64;
        for k in 0..=m {
            let w = if k == 0 || k == m {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let t = if k == m { b } else { a + k as f64 * h };
            nodes.push((i, t, w * h / 3.0));
        }
    }
    nodes
}

/// States along a schedule, re-using `Phi(T_i)^{-1} x(T_i)` per segment.
struct Trajectory<'a> {
    tables: &'a TransitionTables,
    schedule: &'a ModeSchedule,
    starts: Vec<(Vector, usize)>,
}

impl<'a> Trajectory<'a> {
    fn new(tables: &'a TransitionTables, schedule: &'a ModeSchedule, sp: &SwitchPoints) -> Result<Self, SiomsError> {
        let starts = (0..schedule.len())
            .map(|i| {
                let j = schedule.sigma()[i];
                let inv = tables.phi_inv(j, schedule.boundary(i))?;
                Ok((inv.matrix * &sp.states[i], inv.anchor))
            })
            .collect::<Result<Vec<_>, SiomsError>>()?;
        Ok(Trajectory { tables, schedule, starts })
    }

    fn state(&self, i: usize, t: f64) -> Result<Vector, SiomsError> {
        let j = self.schedule.sigma()[i];
        let at = self.tables.phi(j, t)?;
        let (v, anchor) = &self.starts[i];
        Ok(match self.tables.anchor_chain(j, at.anchor, *anchor) {
            Some(c) => at.matrix * (c * v),
            None => at.matrix * v,
        })
    }
}

/// `J = int 1/2 x'Qx dt + 1/2 x(TM)' P1 x(TM)` with states from the tables.
pub fn total_cost(
    tables: &TransitionTables,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    cost: &QuadraticCost,
    points: usize,
) -> Result<f64, SiomsError> {
    let traj = Trajectory::new(tables, schedule, sp)?;
    let mut j = 0.0;
    for (i, t, w) in quadrature(schedule, points) {
        let x = traj.state(i, t)?;
        j += w * 0.5 * x.dot(&(cost.q(t) * &x));
    }
    let xf = traj.state(schedule.len() - 1, schedule.t_m())?;
    Ok(j + 0.5 * xf.dot(&(cost.p1() * &xf)))
}

/// Cost from the co-state factor alone: `J = 1/2 x0' P(T0) x0`.
pub fn closed_form_cost(
    tables: &TransitionTables,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
) -> Result<f64, SiomsError> {
    let p0 = p_in_segment(tables, schedule, sp, 0, schedule.t0(), &MultCounter::new())?;
    let x0 = &sp.states[0];
    Ok(0.5 * x0.dot(&(p0 * x0)))
}

/// Insertion gradient sampled on the control grid.
#[derive(Debug, Clone)]
pub struct GradientSamples {
    pub grid: Vec<f64>,
    /// Row-major, `n_modes` values per grid time.
    pub values: Vec<f64>,
    pub n_modes: usize,
}

impl GradientSamples {
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_modes..(k + 1) * self.n_modes]
    }
}

/// Result of the optimality-function search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    pub theta: f64,
    pub mode: usize,
    pub time: f64,
    /// Evaluations of `d` spent on refinement.
    pub refine_evals: usize,
}

/// `theta = min_{i,t} d_i(t)` over the samples, then a golden-section
/// search on `d_{i*}` around the best sample, kept inside its segment.
pub fn optimality_theta(
    tables: &TransitionTables,
    sys: &SwitchedLinearSystem,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    d: &GradientSamples,
    refine_evals: usize,
    mults: &MultCounter,
) -> Result<Theta, SiomsError> {
    let mut best = Theta { theta: 0.0, mode: schedule.sigma()[0], time: d.grid[0], refine_evals: 0 };
    let mut best_k = 0;
    for k in 0..d.grid.len() {
        for (i, &v) in d.at(k).iter().enumerate() {
            if v < best.theta {
                best = Theta { theta: v, mode: i, time: d.grid[k], refine_evals: 0 };
                best_k = k;
            }
        }
    }
    if refine_evals == 0 {
        return Ok(best);
    }
    let seg = schedule.segment_at(d.grid[best_k]);
    let lo = d.grid[best_k.saturating_sub(1)].max(schedule.boundary(seg));
    let hi = d.grid[(best_k + 1).min(d.grid.len() - 1)].min(schedule.boundary(seg + 1));
    let mode = best.mode;
    let f = |t: f64| -> Result<f64, SiomsError> {
        Ok(gradient_in_segment(tables, sys, schedule, sp, seg, t, mults)?[mode])
    };
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut e = a + r * (b - a);
    let mut fc = f(c)?;
    let mut fe = if refine_evals >= 2 { f(e)? } else { f64::INFINITY };
    let mut used = refine_evals.min(2);
    let consider = |t: f64, v: f64, best: &mut Theta| {
        if v < best.theta {
            best.theta = v;
            best.time = t;
        }
    };
    consider(c, fc, &mut best);
    consider(e, fe, &mut best);
    while used < refine_evals {
        if fc < fe {
            b = e;
            e = c;
            fe = fc;
            c = b - r * (b - a);
            fc = f(c)?;
            consider(c, fc, &mut best);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + r * (b - a);
            fe = f(e)?;
            consider(e, fe, &mut best);
        }
        used += 1;
    }
    best.refine_evals = refine_evals;
    Ok(best)
}

/// Outcome of a line search.
#[derive(Debug, Clone)]
pub struct Step {
    pub gamma: f64,
    pub trials: usize,
    pub control: SwitchingControl,
    pub schedule: ModeSchedule,
    pub cost: f64,
}

/// Projected control `Q(u - gamma d)`. The final sample carries no
/// measure and follows its predecessor so the control and its schedule
/// stay interchangeable.
pub fn projected_step(u: &SwitchingControl, d: &GradientSamples, gamma: f64) -> SwitchingControl {
    let n = u.n_modes();
    let mut values = Vec::with_capacity(d.values.len());
    for k in 0..u.grid().len() {
        for i in 0..n {
            let ui = if u.active()[k] == i { 1.0 } else { 0.0 };
            values.push(ui - gamma * d.at(k)[i]);
        }
    }
    let mu = RealControl::new(u.grid().to_vec(), values, n);
    let mut active = project(&mu).active().to_vec();
    let last = active.len() - 1;
    active[last] = active[last - 1];
    SwitchingControl::from_active(u.grid().to_vec(), active, n).expect("indices in range")
}

/// First-order predicted change of `J` when moving to `next`.
fn predicted_change(next: &SwitchingControl, d: &GradientSamples) -> f64 {
    let g = &d.grid;
    (0..g.len() - 1).map(|k| d.at(k)[next.active()[k]] * (g[k + 1] - g[k])).sum()
}

/// Context shared by one optimisation run.
pub struct Problem<'a> {
    pub tables: &'a TransitionTables,
    pub sys: &'a SwitchedLinearSystem,
    pub cost: &'a QuadraticCost,
    pub x0: &'a Vector,
}

impl Problem<'_> {
    /// Cost of `schedule` from the tables alone.
    pub fn evaluate(&self, schedule: &ModeSchedule, points: usize) -> Result<f64, SiomsError> {
        let sp = precompute_switch_points(self.tables, schedule, self.x0, self.cost.p1(), &MultCounter::new())?;
        total_cost(self.tables, schedule, &sp, self.cost, points)
    }
}

/// Backtracking over `gamma = gamma0 * beta^m`; `None` when no trial is
/// accepted within `m_max` shrinks.
pub fn backtrack(
    problem: &Problem<'_>,
    u: &SwitchingControl,
    cost: f64,
    d: &GradientSamples,
    theta: f64,
    gamma0: f64,
    params: &SiomsParams,
) -> Result<Option<Step>, SiomsError> {
    let sampled_min = d.values.iter().copied().fold(0.0, f64::min);
    if params.line_search == LineSearch::Arc && gamma0 * -sampled_min <= 1.0 {
        // no sample can change mode for any gamma <= gamma0
        return Ok(None);
    }
    // Along the arc only gamma * |min d| > 1 changes the control, so the arc
    // variant shrinks the excess over 1; the switched set then contracts
    // onto the most negative sample.
    let excess0 = gamma0 * -sampled_min - 1.0;
    let mut gamma = gamma0;
    for m in 0..=params.m_max {
        if params.line_search == LineSearch::Arc {
            gamma = (1.0 + excess0 * params.beta.powi(m as i32)) / -sampled_min;
        }
        let next = projected_step(u, d, gamma);
        if next.active() != u.active() {
            let schedule = schedule_from_control(&next);
            let j = problem.evaluate(&schedule, params.quadrature_points)?;
            let accept = match params.line_search {
                LineSearch::Arc => j < cost && j <= cost + params.c_armijo * predicted_change(&next, d),
                LineSearch::Slope => j <= cost + params.c_armijo * gamma * theta,
            };
            if accept {
                return Ok(Some(Step { gamma, trials: m + 1, control: next, schedule, cost: j }));
            }
        } else if params.line_search == LineSearch::Slope && cost <= cost + params.c_armijo * gamma * theta {
            let schedule = schedule_from_control(&next);
            return Ok(Some(Step { gamma, trials: m + 1, control: next, schedule, cost }));
        }
        if params.line_search == LineSearch::Slope {
            gamma *= params.beta;
        }
    }
    Ok(None)
}

/// Snapshot of one iterate.
#[derive(Debug, Clone)]
pub struct IterState {
    pub k: usize,
    pub u: SwitchingControl,
    pub schedule: ModeSchedule,
    pub switch_states: Vec<Vector>,
    pub switch_p: Vec<Mat>,
    pub cost: f64,
    pub theta: f64,
    pub gamma: Option<f64>,
    pub mult_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub k: usize,
    pub cost: f64,
    pub theta: f64,
    /// Step accepted to reach iterate `k + 1`.
    pub gamma: Option<f64>,
    /// Products spent on switch points and gradient samples.
    pub mults: u64,
    /// Times at which `d` was evaluated.
    pub lambda_eval: usize,
    pub segments: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `|theta| <= theta_tol`.
    Converged,
    MaxIterations,
    /// No step passed the line search; the last iterate is returned.
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub mode: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub iterations: Vec<IterRecord>,
    pub accepted_steps: usize,
    pub termination: Termination,
    pub theta_tol: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub control: SwitchingControl,
    pub schedule: ModeSchedule,
    pub trajectory: Vec<TrajectoryRow>,
    /// Integration steps taken on this thread during the iterations.
    pub integrator_steps: u64,
    pub online_millis: f64,
}

fn gradient_samples(
    problem: &Problem<'_>,
    schedule: &ModeSchedule,
    sp: &SwitchPoints,
    grid: &[f64],
    mults: &MultCounter,
) -> Result<GradientSamples, SiomsError> {
    let n_modes = problem.sys.n_modes();
    let mut values = Vec::with_capacity(grid.len() * n_modes);
    let mut seg = 0;
    for &t in grid {
        while seg + 1 < schedule.len() && schedule.boundary(seg + 1) <= t {
            seg += 1;
        }
        values.extend(gradient_in_segment(problem.tables, problem.sys, schedule, sp, seg, t, mults)?);
    }
    Ok(GradientSamples { grid: grid.to_vec(), values, n_modes })
}

/// Gradient, optimality function and counts for one iterate.
pub struct Linearization {
    pub switch_points: SwitchPoints,
    pub d: GradientSamples,
    pub theta: Theta,
    pub mults: u64,
    pub lambda_eval: usize,
}

pub fn linearize(
    problem: &Problem<'_>,
    schedule: &ModeSchedule,
    grid: &[f64],
    refine_evals: usize,
) -> Result<Linearization, SiomsError> {
    let mults = MultCounter::new();
    let sp = precompute_switch_points(problem.tables, schedule, problem.x0, problem.cost.p1(), &mults)?;
    let d = gradient_samples(problem, schedule, &sp, grid, &mults)?;
    let theta = optimality_theta(problem.tables, problem.sys, schedule, &sp, &d, refine_evals, &mults)?;
    Ok(Linearization {
        lambda_eval: grid.len() + theta.refine_evals,
        switch_points: sp,
        d,
        theta,
        mults: mults.get(),
    })
}

/// Runs the descent from `u0` (any schedule on the tables' horizon).
pub fn solve(problem: &Problem<'_>, u0: &ModeSchedule, params: &SiomsParams) -> Result<RunReport, SiomsError> {
    params.validate()?;
    let (tables, sys, cost) = (problem.tables, problem.sys, problem.cost);
    if problem.x0.len() != sys.n_states() {
        return Err(SiomsError::StateLength { got: problem.x0.len(), n: sys.n_states() });
    }
    let window = ModeSchedule::constant(0, cost.t0(), cost.t_m());
    check_window(tables, &window)?;
    u0.validate_modes(sys.n_modes())?;

    let started = Instant::now();
    let steps_before = steps_on_this_thread();
    let grid = grid_with_step(cost.t0(), cost.t_m(), params.control_dt);
    let mut u = control_from_schedule(&u0.shifted(cost.t0(), cost.t_m()), &grid, sys.n_modes());
    let mut schedule = schedule_from_control(&u);
    let mut j = problem.evaluate(&schedule, params.quadrature_points)?;
    let initial_cost = j;
    let mut records = Vec::new();
    let mut accepted = 0;
    let mut theta_tol = params.theta_tol.unwrap_or(0.0);
    let termination;
    let mut k = 0;
    loop {
        let it_start = Instant::now();
        let lin = linearize(problem, &schedule, &grid, params.refine_evals)?;
        let theta = lin.theta.theta;
        if k == 0 && params.theta_tol.is_none() {
            theta_tol = 1e-3 * theta.abs();
        }
        let mut record = IterRecord {
            k,
            cost: j,
            theta,
            gamma: None,
            mults: lin.mults,
            lambda_eval: lin.lambda_eval,
            segments: schedule.len(),
            millis: 0.0,
        };
        if theta.abs() <= theta_tol || theta >= 0.0 {
            record.millis = it_start.elapsed().as_secs_f64() * 1e3;
            records.push(record);
            termination = Termination::Converged;
            break;
        }
        if k >= params.max_iter {
            record.millis = it_start.elapsed().as_secs_f64() * 1e3;
            records.push(record);
            termination = Termination::MaxIterations;
            break;
        }
        let gamma0 = params.gamma0.unwrap_or(params.gamma_scale / theta.abs());
        let step = backtrack(problem, &u, j, &lin.d, theta, gamma0, params)?;
        record.millis = it_start.elapsed().as_secs_f64() * 1e3;
        match step {
            Some(step) => {
                record.gamma = Some(step.gamma);
                records.push(record);
                u = step.control;
                schedule = step.schedule;
                j = step.cost;
                accepted += 1;
                k += 1;
            }
            None => {
                records.push(record);
                termination = Termination::LineSearchFailed;
                break;
            }
        }
    }
    let integrator_steps = steps_on_this_thread() - steps_before;
    let online_millis = started.elapsed().as_secs_f64() * 1e3;

    let sp = precompute_switch_points(tables, &schedule, problem.x0, cost.p1(), &MultCounter::new())?;
    let traj = Trajectory::new(tables, &schedule, &sp)?;
    let trajectory = grid
        .iter()
        .map(|&t| {
            let i = schedule.segment_at(t);
            Ok(TrajectoryRow { t, x: traj.state(i, t)?.iter().copied().collect(), mode: schedule.sigma()[i] })
        })
        .collect::<Result<Vec<_>, SiomsError>>()?;

    Ok(RunReport {
        iterations: records,
        accepted_steps: accepted,
        termination,
        theta_tol,
        initial_cost,
        final_cost: j,
        control: u,
        schedule,
        trajectory,
        integrator_steps,
        online_millis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExprMatrix;
    use crate::transition::TableParams;

    fn spring_mass() -> (SwitchedLinearSystem, QuadraticCost, TransitionTables) {
        let m1 = ExprMatrix::parse_rows(&[vec!["0", "1"], vec!["-30", "-2"]]).unwrap();
        let m2 = ExprMatrix::parse_rows(&[vec!["0", "1"], vec!["-70", "-2"]]).unwrap();
        let sys = SwitchedLinearSystem::new(vec![m1, m2], Vector::from_vec(vec![1.0, 0.0]), vec![]).unwrap();
        let q = ExprMatrix::parse_rows(&[vec!["1", "0"], vec!["0", "0.1"]]).unwrap();
        let cost = QuadraticCost::new(q, Mat::zeros(2, 2), 0.0, 2.0).unwrap();
        let tables = TransitionTables::build(&sys, &cost, TableParams::with_spacing(2.0, 1e-3)).unwrap();
        (sys, cost, tables)
    }

    #[test]
    fn projection_tie_goes_to_lowest_index() {
        let mu = RealControl::new(vec![0.0, 1.0], vec![0.5, 0.5, 0.2, 0.7], 2);
        assert_eq!(project(&mu).active(), &[0, 1]);
    }

    #[test]
    fn single_segment_needs_no_products() {
        let (sys, cost, tables) = spring_mass();
        let s = ModeSchedule::constant(1, 0.0, 2.0);
        let m = MultCounter::new();
        let sp = precompute_switch_points(&tables, &s, sys.x0(), cost.p1(), &m).unwrap();
        assert_eq!(m.get(), 0);
        assert_eq!(sp.states.len(), 1);
        assert_eq!(sp.p[0], *cost.p1());
    }

    #[test]
    fn initial_cost_and_closed_form_agree() {
        let (sys, cost, tables) = spring_mass();
        let s = ModeSchedule::new(vec![1, 0, 1], vec![0.4, 1.3], 0.0, 2.0).unwrap();
        let sp = precompute_switch_points(&tables, &s, sys.x0(), cost.p1(), &MultCounter::new()).unwrap();
        let quad = total_cost(&tables, &s, &sp, &cost, 1001).unwrap();
        let closed = closed_form_cost(&tables, &s, &sp).unwrap();
        assert!((quad - closed).abs() < 1e-8 * closed, "{quad} vs {closed}");
    }

    #[test]
    fn active_mode_has_zero_gradient() {
        let (sys, cost, tables) = spring_mass();
        let s = ModeSchedule::new(vec![1, 0], vec![0.7], 0.0, 2.0).unwrap();
        let m = MultCounter::new();
        let sp = precompute_switch_points(&tables, &s, sys.x0(), cost.p1(), &m).unwrap();
        for &t in &[0.0, 0.5, 0.7, 1.9, 2.0] {
            let d = insertion_gradient(&tables, &sys, &s, &sp, t, &m).unwrap();
            assert_eq!(d[s.mode_at(t)], 0.0);
        }
    }

    #[test]
    fn terminal_p_is_exact() {
        let (sys, cost, tables) = spring_mass();
        let s = ModeSchedule::new(vec![1, 0], vec![0.7], 0.0, 2.0).unwrap();
        let m = MultCounter::new();
        let sp = precompute_switch_points(&tables, &s, sys.x0(), cost.p1(), &m).unwrap();
        assert_eq!(eval_p(&tables, &s, &sp, 2.0, &m).unwrap(), *cost.p1());
    }
}
