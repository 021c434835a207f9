//! Reference computations written independently of the library: a plain
//! fixed-step RK4, a Taylor matrix exponential with scaling and squaring,
//! and composite Simpson quadrature.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sioms_core::model::{ModeSchedule, QuadraticCost, SwitchedLinearSystem, Vector};
use sioms_core::scenario::Scenario;
use sioms_core::sioms::{closed_form_cost, insertion_gradient, precompute_switch_points, MultCounter};
use sioms_core::transition::TransitionTables;

pub type M = DMatrix<f64>;
pub type V = DVector<f64>;

pub fn spring_mass() -> Scenario {
    Scenario::builtin("spring_mass").expect("builtin")
}

pub fn cart() -> Scenario {
    Scenario::builtin("cart_mass").expect("builtin")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Classical RK4 for `y' = f(t, y)` on matrices, `steps` equal steps from
/// `t0` to `t1` (either direction).
pub fn rk4<F: Fn(f64, &M) -> M>(f: F, y0: &M, t0: f64, t1: f64, steps: usize) -> M {
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.clone();
    for k in 0..steps {
        let t = t0 + h * k as f64;
        let k1 = f(t, &y);
        let k2 = f(t + h / 2.0, &(&y + &k1 * (h / 2.0)));
        let k3 = f(t + h / 2.0, &(&y + &k2 * (h / 2.0)));
        let k4 = f(t + h, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    y
}

fn steps_for(span: f64, h: f64) -> usize {
    ((span.abs() / h).ceil() as usize).max(1)
}

/// `Phi_j(t, s)` by direct integration of `dPhi/dt = A_j(t) Phi` from `s`.
pub fn stm(sys: &SwitchedLinearSystem, j: usize, t: f64, s: f64, h: f64) -> M {
    let n = sys.n_states();
    rk4(|tau, y| sys.a(j, tau) * y, &M::identity(n, n), s, t, steps_for(t - s, h))
}

/// `Psi_j(t, s) = int_t^s Phi_j(tau, t)' Q Phi_j(tau, t) dtau`, from the
/// backward Lyapunov equation with zero data at `s`.
pub fn atm(sys: &SwitchedLinearSystem, cost: &QuadraticCost, j: usize, t: f64, s: f64, h: f64) -> M {
    let n = sys.n_states();
    let f = |tau: f64, p: &M| {
        let a = sys.a(j, tau);
        -(a.transpose() * p + p * a + cost.q(tau))
    };
    rk4(f, &M::zeros(n, n), s, t, steps_for(s - t, h))
}

/// Switched state at `t` by integrating segment by segment.
pub fn simulate(sys: &SwitchedLinearSystem, schedule: &ModeSchedule, x0: &V, t: f64, h: f64) -> V {
    let mut x = M::from_column_slice(x0.len(), 1, x0.as_slice());
    for i in 0..schedule.len() {
        let (a, b) = (schedule.boundary(i), schedule.boundary(i + 1).min(t));
        if b <= a {
            break;
        }
        let j = schedule.sigma()[i];
        x = rk4(|tau, y| sys.a(j, tau) * y, &x, a, b, steps_for(b - a, h));
    }
    V::from_column_slice(x.as_slice())
}

/// `P(t)` from the backward Lyapunov equation `P' = -A'P - PA - Q`,
/// `P(TM) = P1`, following the schedule's modes.
pub fn costate_factor(sys: &SwitchedLinearSystem, cost: &QuadraticCost, schedule: &ModeSchedule, t: f64, h: f64) -> M {
    let mut p = cost.p1().clone();
    for i in (0..schedule.len()).rev() {
        let (a, b) = (schedule.boundary(i).max(t), schedule.boundary(i + 1));
        if b <= t {
            break;
        }
        let j = schedule.sigma()[i];
        let f = |tau: f64, p: &M| {
            let m = sys.a(j, tau);
            -(m.transpose() * p + p * m + cost.q(tau))
        };
        p = rk4(f, &p, b, a, steps_for(b - a, h));
    }
    p
}

/// Composite Simpson of `f` over `[a, b]` with `m` (made even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, m: usize) -> f64 {
    let m = m + m % 2;
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        s += f(a + h * k as f64) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Cost of a schedule from dense simulation, Simpson on every segment.
pub fn cost_of(sys: &SwitchedLinearSystem, cost: &QuadraticCost, schedule: &ModeSchedule, x0: &V, h: f64) -> f64 {
    let mut j = 0.0;
    let mut x = x0.clone();
    for i in 0..schedule.len() {
        let (a, b) = (schedule.boundary(i), schedule.boundary(i + 1));
        let mode = schedule.sigma()[i];
        let m = 2 * steps_for(b - a, h).div_ceil(2);
        let dt = (b - a) / m as f64;
        let mut xs = vec![x.clone()];
        for k in 0..m {
            let t = a + dt * k as f64;
            let col = M::from_column_slice(x.len(), 1, xs[k].as_slice());
            let next = rk4(|tau, y| sys.a(mode, tau) * y, &col, t, t + dt, 1);
            xs.push(V::from_column_slice(next.as_slice()));
        }
        for (k, xk) in xs.iter().enumerate() {
            let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            j += w * dt / 3.0 * 0.5 * xk.dot(&(cost.q(a + dt * k as f64) * xk));
        }
        x = xs[m].clone();
    }
    j + 0.5 * x.dot(&(cost.p1() * &x))
}

/// `exp(A)` by a degree-18 Taylor series after scaling by `2^-s`.
pub fn expm(a: &M) -> M {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let mut term = M::identity(n, n);
    let mut sum = M::identity(n, n);
    for k in 1..=18 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

pub fn max_abs(m: &M) -> f64 {
    m.amax()
}

/// A random normalized schedule with `segments` pieces on `[t0, tm]` and
/// switching times at least `gap` apart.
pub fn random_schedule(rng: &mut ChaCha8Rng, n_modes: usize, segments: usize, t0: f64, tm: f64, gap: f64) -> ModeSchedule {
    let mut sigma: Vec<usize> = Vec::with_capacity(segments);
    while sigma.len() < segments {
        let m = rng.random_range(0..n_modes);
        if sigma.last() != Some(&m) {
            sigma.push(m);
        }
    }
    let mut tau: Vec<f64>;
    loop {
        tau = (1..segments).map(|_| rng.random_range(t0 + gap..tm - gap)).collect();
        tau.sort_by(f64::total_cmp);
        if tau.windows(2).all(|w| w[1] - w[0] >= gap) {
            break;
        }
    }
    ModeSchedule::new(sigma, tau, t0, tm).expect("valid schedule")
}

/// `schedule` with mode `i` inserted on `[t, t + lambda)`.
pub fn insert(schedule: &ModeSchedule, i: usize, t: f64, lambda: f64) -> ModeSchedule {
    let mut sigma = Vec::new();
    let mut tau = Vec::new();
    for k in 0..schedule.len() {
        let (a, b) = (schedule.boundary(k), schedule.boundary(k + 1));
        let m = schedule.sigma()[k];
        if k > 0 {
            tau.push(a);
        }
        if a <= t && t < b {
            sigma.extend([m, i, m]);
            tau.extend([t, t + lambda]);
        } else {
            sigma.push(m);
        }
    }
    ModeSchedule::new(sigma, tau, schedule.t0(), schedule.t_m()).unwrap()
}

pub fn exact_cost(tables: &TransitionTables, cost: &QuadraticCost, sched: &ModeSchedule, x0: &Vector) -> f64 {
    let sp = precompute_switch_points(tables, sched, x0, cost.p1(), &MultCounter::new()).unwrap();
    closed_form_cost(tables, sched, &sp).unwrap()
}

pub struct FdSample {
    pub d: f64,
    /// `|d - dJ/lambda|` for each requested lambda.
    pub errors: Vec<f64>,
}

/// Finite-difference checks of the insertion gradient on 50 random
/// (schedule, mode, time) triples. Triples whose `|d|` is below 1% of the
/// largest `|d|` on that schedule are redrawn, since the O(lambda) term
/// dominates a relative error there.
pub fn fd_check(sys: &SwitchedLinearSystem, cost: &QuadraticCost, tables: &TransitionTables, seed: u64, lambdas: &[f64]) -> Vec<FdSample> {
    let (t0, tm) = (cost.t0(), cost.t_m());
    let mut r = rng(seed);
    let mut out = Vec::new();
    while out.len() < 50 {
        let segments = r.random_range(1..4);
        let sched = random_schedule(&mut r, sys.n_modes(), segments, t0, tm, 0.1);
        let t = r.random_range(t0..tm - 0.01);
        let seg = sched.segment_at(t);
        if sched.boundary(seg + 1) - t < 0.01 {
            continue;
        }
        let active = sched.sigma()[seg];
        let i = loop {
            let i = r.random_range(0..sys.n_modes());
            if i != active {
                break i;
            }
        };
        let sp = precompute_switch_points(tables, &sched, sys.x0(), cost.p1(), &MultCounter::new()).unwrap();
        let d = insertion_gradient(tables, sys, &sched, &sp, t, &MultCounter::new()).unwrap()[i];
        let scale = (0..=200)
            .flat_map(|k| {
                let tk = t0 + (tm - t0) * k as f64 / 200.0;
                insertion_gradient(tables, sys, &sched, &sp, tk, &MultCounter::new()).unwrap()
            })
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if d.abs() < 1e-2 * scale {
            continue;
        }
        let j = exact_cost(tables, cost, &sched, sys.x0());
        let errs = lambdas
            .iter()
            .map(|&l| {
                let fd = (exact_cost(tables, cost, &insert(&sched, i, t, l), sys.x0()) - j) / l;
                (fd - d).abs()
            })
            .collect();
        out.push(FdSample { d, errors: errs });
    }
    out
}
