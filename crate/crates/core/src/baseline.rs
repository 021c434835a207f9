//! Comparison optimisers that re-simulate the state and co-state on a
//! uniform grid every iteration (forward and improved Euler), and the
//! time/error benchmark against the table-based optimiser.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    schedule_from_control, uniform_grid, control_from_schedule, Mat, ModeSchedule, ModelError, QuadraticCost,
    SwitchedLinearSystem, SwitchingControl, Vector,
};
use crate::sioms::{
    precompute_switch_points, projected_step, solve, GradientSamples, MultCounter, Problem, SiomsError, SiomsParams,
    Termination,
};
use crate::transition::{TableError, TableParams, TransitionTables};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("need at least 2 samples, got {0}")]
    Samples(usize),
    #[error("Euler recursion overflowed at t = {t}")]
    Diverged { t: f64 },
    #[error("the analytic reference needs time-invariant modes")]
    TimeVarying,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SiomsError),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SIOMS")]
    Sioms,
    FwdEuler,
    ImpEuler,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sioms => "SIOMS",
            Method::FwdEuler => "FwdEuler",
            Method::ImpEuler => "ImpEuler",
        }
    }
}

/// Sampled state and co-state from one Euler sweep.
#[derive(Debug, Clone)]
pub struct EulerPass {
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    pub rho: Vec<Vector>,
}

/// Matrices at both ends of each interval, both in the mode that governs
/// the interval (switches fall on grid points, so each interval has one).
struct IntervalMatrices {
    start: Vec<Mat>,
    end: Vec<Mat>,
}

fn interval_matrices(sys: &SwitchedLinearSystem, schedule: &ModeSchedule, t: &[f64]) -> IntervalMatrices {
    let mut start = Vec::with_capacity(t.len() - 1);
    let mut end = Vec::with_capacity(t.len() - 1);
    for w in t.windows(2) {
        let j = schedule.mode_at(0.5 * (w[0] + w[1]));
        start.push(sys.a(j, w[0]));
        end.push(sys.a(j, w[1]));
    }
    IntervalMatrices { start, end }
}

fn check(v: &Vector, t: f64) -> Result<(), BaselineError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(BaselineError::Diverged { t })
    }
}

// In the recursions below A_h and A_{h+1} are the interval's mode matrix at
// t_h and t_{h+1}.
fn forward(method: Method, a: &IntervalMatrices, t: &[f64], x0: &Vector) -> Result<Vec<Vector>, BaselineError> {
    let mut x = Vec::with_capacity(t.len());
    x.push(x0.clone());
    for h in 0..t.len() - 1 {
        let dt = t[h + 1] - t[h];
        let xh = &x[h];
        let ax = &a.start[h] * xh;
        let next = match method {
            Method::FwdEuler => xh + ax * dt,
            // [I + dt/2 A_h + dt/2 A_{h+1}(I + dt A_h)] x_h
            _ => {
                let pred = xh + &ax * dt;
                xh + (ax + &a.end[h] * pred) * (0.5 * dt)
            }
        };
        check(&next, t[h + 1])?;
        x.push(next);
    }
    Ok(x)
}

fn backward(method: Method, a: &IntervalMatrices, t: &[f64], x: &[Vector], cost: &QuadraticCost) -> Result<Vec<Vector>, BaselineError> {
    let n = t.len();
    let mut rho = vec![Vector::zeros(x[0].len()); n];
    rho[n - 1] = cost.p1() * &x[n - 1];
    for h in (0..n - 1).rev() {
        let dt = t[h + 1] - t[h];
        let r = &rho[h + 1];
        let qx = cost.q(t[h + 1]) * &x[h + 1];
        let at1 = a.end[h].transpose();
        rho[h] = match method {
            // (I + dt A_{h+1})' rho_{h+1} + dt Q x_{h+1}
            Method::FwdEuler => r + &at1 * r * dt + qx * dt,
            // [I + dt/2 A_{h+1}' + dt/2 A_h'(I + dt A_{h+1}')] rho_{h+1}
            //   + dt (I + dt/2 A_h') Q x_{h+1}
            _ => {
                let at = a.start[h].transpose();
                let a1r = &at1 * r;
                let pred = r + &a1r * dt;
                let lin = r + (a1r + &at * pred) * (0.5 * dt);
                lin + (&qx + &at * &qx * (0.5 * dt)) * dt
            }
        };
        check(&rho[h], t[h])?;
    }
    Ok(rho)
}

/// One state/co-state sweep over `samples` uniform intervals.
pub fn euler_pass(
    method: Method,
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    schedule: &ModeSchedule,
    x0: &Vector,
    samples: usize,
) -> Result<EulerPass, BaselineError> {
    if samples < 2 {
        return Err(BaselineError::Samples(samples));
    }
    let t = uniform_grid(cost.t0(), cost.t_m(), samples + 1);
    let a = interval_matrices(sys, schedule, &t);
    let x = forward(method, &a, &t, x0)?;
    let rho = backward(method, &a, &t, &x, cost)?;
    Ok(EulerPass { t, x, rho })
}

/// Trapezoidal running cost plus terminal cost on sampled states.
pub fn sampled_cost(t: &[f64], x: &[Vector], cost: &QuadraticCost) -> f64 {
    let f = |k: usize| 0.5 * x[k].dot(&(cost.q(t[k]) * &x[k]));
    let mut j = 0.0;
    for k in 0..t.len() - 1 {
        j += 0.5 * (f(k) + f(k + 1)) * (t[k + 1] - t[k]);
    }
    let xf = x.last().expect("samples");
    j + 0.5 * xf.dot(&(cost.p1() * xf))
}

#[derive(Debug, Clone)]
pub struct EulerReport {
    pub method: Method,
    pub costs: Vec<f64>,
    pub thetas: Vec<f64>,
    pub termination: Termination,
    pub schedule: ModeSchedule,
    pub control: SwitchingControl,
    pub final_cost: f64,
    pub states: Vec<Vector>,
    pub t: Vec<f64>,
    pub millis: f64,
}

/// The same descent as the table-based optimiser, with states and
/// co-states re-simulated by `method` on the `samples` grid.
pub fn euler_solve(
    method: Method,
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    x0: &Vector,
    u0: &ModeSchedule,
    samples: usize,
    params: &SiomsParams,
) -> Result<EulerReport, BaselineError> {
    params.validate()?;
    let started = Instant::now();
    let grid = uniform_grid(cost.t0(), cost.t_m(), samples + 1);
    let n_modes = sys.n_modes();
    let mut u = control_from_schedule(u0, &grid, n_modes);
    let mut schedule = schedule_from_control(&u);
    let mut pass = euler_pass(method, sys, cost, &schedule, x0, samples)?;
    let mut j = sampled_cost(&pass.t, &pass.x, cost);
    let (mut costs, mut thetas) = (vec![j], Vec::new());
    let mut theta_tol = params.theta_tol.unwrap_or(0.0);
    let termination = loop {
        let mut values = Vec::with_capacity(grid.len() * n_modes);
        for (h, &t) in grid.iter().enumerate() {
            let active = u.active()[h];
            let a_act = sys.a(active, t);
            for i in 0..n_modes {
                values.push(if i == active {
                    0.0
                } else {
                    pass.rho[h].dot(&((sys.a(i, t) - &a_act) * &pass.x[h]))
                });
            }
        }
        let d = GradientSamples { grid: grid.clone(), values, n_modes };
        let theta = d.values.iter().copied().fold(0.0, f64::min);
        thetas.push(theta);
        if thetas.len() == 1 && params.theta_tol.is_none() {
            theta_tol = 1e-3 * theta.abs();
        }
        if theta.abs() <= theta_tol || theta >= 0.0 {
            break Termination::Converged;
        }
        if costs.len() > params.max_iter {
            break Termination::MaxIterations;
        }
        // the arc rule of the table-based optimiser: shrink the excess of
        // gamma * |theta| over 1
        let gamma0 = params.gamma0.unwrap_or(params.gamma_scale / theta.abs());
        let excess0 = gamma0 * -theta - 1.0;
        let mut accepted = None;
        for m in 0..=params.m_max {
            if excess0 <= 0.0 {
                break;
            }
            let gamma = (1.0 + excess0 * params.beta.powi(m as i32)) / -theta;
            let next = projected_step(&u, &d, gamma);
            if next.active() != u.active() {
                let s = schedule_from_control(&next);
                let a = interval_matrices(sys, &s, &grid);
                let x = forward(method, &a, &grid, x0)?;
                let jn = sampled_cost(&grid, &x, cost);
                let pred: f64 = (0..grid.len() - 1).map(|k| d.at(k)[next.active()[k]] * (grid[k + 1] - grid[k])).sum();
                if jn < j && jn <= j + params.c_armijo * pred {
                    accepted = Some((next, s, jn));
                    break;
                }
            }
        }
        match accepted {
            Some((next, s, jn)) => {
                u = next;
                schedule = s;
                j = jn;
                costs.push(j);
                pass = euler_pass(method, sys, cost, &schedule, x0, samples)?;
            }
            None => break Termination::LineSearchFailed,
        }
    };
    Ok(EulerReport {
        method,
        costs,
        thetas,
        termination,
        schedule,
        control: u,
        final_cost: j,
        states: pass.x,
        t: pass.t,
        millis: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Exact switched trajectory from per-segment matrix exponentials.
pub fn analytic_states(
    sys: &SwitchedLinearSystem,
    schedule: &ModeSchedule,
    x0: &Vector,
    times: &[f64],
) -> Result<Vec<Vector>, BaselineError> {
    if !sys.is_time_invariant() {
        return Err(BaselineError::TimeVarying);
    }
    let mut starts = vec![x0.clone()];
    for i in 0..schedule.len() - 1 {
        let a = sys.a(schedule.sigma()[i], 0.0);
        let span = schedule.boundary(i + 1) - schedule.boundary(i);
        let next = (a * span).exp() * &starts[i];
        starts.push(next);
    }
    Ok(times
        .iter()
        .map(|&t| {
            let i = schedule.segment_at(t);
            let a = sys.a(schedule.sigma()[i], 0.0);
            (a * (t - schedule.boundary(i))).exp() * &starts[i]
        })
        .collect())
}

/// 2-norm over states of the per-state RMS difference.
pub fn rms_error(x: &[Vector], reference: &[Vector]) -> f64 {
    let n = x[0].len();
    let m = x.len() as f64;
    (0..n)
        .map(|s| x.iter().zip(reference).map(|(a, b)| (a[s] - b[s]).powi(2)).sum::<f64>() / m)
        .sum::<f64>()
        .sqrt()
}

/// Cost of a schedule from the exact trajectory, composite Simpson with
/// `per_segment` (even) intervals on every segment.
pub fn analytic_cost(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    schedule: &ModeSchedule,
    x0: &Vector,
    per_segment: usize,
) -> Result<f64, BaselineError> {
    let m = per_segment + per_segment % 2;
    let mut j = 0.0;
    let mut last = x0.clone();
    for i in 0..schedule.len() {
        let (a, b) = (schedule.boundary(i), schedule.boundary(i + 1));
        let h = (b - a) / m as f64;
        let times: Vec<f64> = (0..=m).map(|k| if k == m { b } else { a + h * k as f64 }).collect();
        let xs = analytic_states(sys, &ModeSchedule::constant(schedule.sigma()[i], a, b), &last, &times)?;
        for (k, (t, x)) in times.iter().zip(&xs).enumerate() {
            let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            j += w * h / 3.0 * 0.5 * x.dot(&(cost.q(*t) * x));
        }
        last = xs[m].clone();
    }
    Ok(j + 0.5 * last.dot(&(cost.p1() * &last)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub samples: Vec<usize>,
    pub iterations: usize,
    pub repetitions: usize,
    pub sioms: SiomsParams,
    pub table_max_step: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            samples: vec![100, 400, 1600, 6400, 20001],
            iterations: 10,
            repetitions: 5,
            sioms: SiomsParams::default(),
            table_max_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub samples: usize,
    /// Median wall time of the iterative phase (s).
    pub seconds: f64,
    /// Off-line table build time (s); zero for the Euler methods.
    pub build_seconds: f64,
    pub rms_error: f64,
    /// The method's own cost estimate for its final schedule.
    pub final_cost: f64,
    /// Cost of the final schedule on the exact trajectory.
    pub exact_cost: f64,
    pub iterations: usize,
    pub diverged: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sioms_cell(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    u0: &ModeSchedule,
    samples: usize,
    config: &BenchConfig,
    params: &SiomsParams,
) -> Result<BenchRow, BaselineError> {
    let table_params = TableParams { samples, max_step: config.table_max_step, ..TableParams::default() };
    let started = Instant::now();
    let tables = TransitionTables::build(sys, cost, table_params)?;
    let build_seconds = started.elapsed().as_secs_f64();
    let problem = Problem { tables: &tables, sys, cost, x0: sys.x0() };
    let mut times = Vec::new();
    let mut report = None;
    for _ in 0..config.repetitions.max(1) {
        let r = solve(&problem, u0, params)?;
        times.push(r.online_millis / 1e3);
        report = Some(r);
    }
    let report = report.expect("at least one repetition");
    let grid = uniform_grid(cost.t0(), cost.t_m(), samples + 1);
    let sp = precompute_switch_points(&tables, &report.schedule, sys.x0(), cost.p1(), &MultCounter::new())?;
    let xs = grid
        .iter()
        .map(|&t| crate::sioms::eval_state(&tables, &report.schedule, &sp, t, &MultCounter::new()))
        .collect::<Result<Vec<_>, _>>()?;
    let exact = analytic_states(sys, &report.schedule, sys.x0(), &grid)?;
    Ok(BenchRow {
        method: Method::Sioms,
        samples,
        seconds: median(times),
        build_seconds,
        rms_error: rms_error(&xs, &exact),
        final_cost: report.final_cost,
        exact_cost: analytic_cost(sys, cost, &report.schedule, sys.x0(), 2000)?,
        iterations: report.accepted_steps,
        diverged: false,
    })
}

fn euler_cell(
    method: Method,
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    u0: &ModeSchedule,
    samples: usize,
    config: &BenchConfig,
    params: &SiomsParams,
) -> Result<BenchRow, BaselineError> {
    let mut times = Vec::new();
    let mut report = None;
    for _ in 0..config.repetitions.max(1) {
        match euler_solve(method, sys, cost, sys.x0(), u0, samples, params) {
            Ok(r) => {
                times.push(r.millis / 1e3);
                report = Some(r);
            }
            Err(BaselineError::Diverged { .. }) => {
                return Ok(BenchRow {
                    method,
                    samples,
                    seconds: f64::NAN,
                    build_seconds: 0.0,
                    rms_error: f64::INFINITY,
                    final_cost: f64::NAN,
                    exact_cost: f64::NAN,
                    iterations: 0,
                    diverged: true,
                })
            }
            Err(e) => return Err(e),
        }
    }
    let r = report.expect("at least one repetition");
    let exact = analytic_states(sys, &r.schedule, sys.x0(), &r.t)?;
    Ok(BenchRow {
        method,
        samples,
        seconds: median(times),
        build_seconds: 0.0,
        rms_error: rms_error(&r.states, &exact),
        final_cost: r.final_cost,
        exact_cost: analytic_cost(sys, cost, &r.schedule, sys.x0(), 2000)?,
        iterations: r.costs.len() - 1,
        diverged: false,
    })
}

/// Runs every method at every sample count, sequentially.
pub fn bench(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    u0: &ModeSchedule,
    config: &BenchConfig,
) -> Result<Vec<BenchRow>, BaselineError> {
    let params = SiomsParams { max_iter: config.iterations, ..config.sioms };
    let mut rows = Vec::new();
    for &samples in &config.samples {
        rows.push(sioms_cell(sys, cost, u0, samples, config, &params)?);
        for method in [Method::FwdEuler, Method::ImpEuler] {
            rows.push(euler_cell(method, sys, cost, u0, samples, config, &params)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExprMatrix;

    fn single_mode() -> (SwitchedLinearSystem, QuadraticCost) {
        let m = ExprMatrix::parse_rows(&[vec!["0", "1"], vec!["-70", "-2"]]).unwrap();
        let sys = SwitchedLinearSystem::new(vec![m], Vector::from_vec(vec![1.0, 0.0]), vec![]).unwrap();
        let q = ExprMatrix::parse_rows(&[vec!["1", "0"], vec!["0", "0.1"]]).unwrap();
        (sys, QuadraticCost::new(q, Mat::zeros(2, 2), 0.0, 2.0).unwrap())
    }

    #[test]
    fn forward_step_is_identity_plus_dt_a() {
        let (sys, cost) = single_mode();
        let s = ModeSchedule::constant(0, 0.0, 2.0);
        let pass = euler_pass(Method::FwdEuler, &sys, &cost, &s, sys.x0(), 100).unwrap();
        let dt = 0.02;
        let want = (Mat::identity(2, 2) + sys.a(0, 0.0) * dt) * sys.x0();
        assert!((&pass.x[1] - want).amax() < 1e-15);
    }

    #[test]
    fn improved_euler_is_second_order() {
        let (sys, cost) = single_mode();
        let s = ModeSchedule::constant(0, 0.0, 2.0);
        let err = |n: usize| {
            let p = euler_pass(Method::ImpEuler, &sys, &cost, &s, sys.x0(), n).unwrap();
            rms_error(&p.x, &analytic_states(&sys, &s, sys.x0(), &p.t).unwrap())
        };
        let ratio = err(800) / err(1600);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }
}
