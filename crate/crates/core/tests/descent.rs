mod common;

use common::*;
use rand::Rng;
use sioms_core::integrate::count_steps;
use sioms_core::model::{grid_with_step, ModeSchedule, Vector};
use sioms_core::scenario::Scenario;
use sioms_core::sioms::{
    insertion_gradient, linearize, precompute_switch_points, solve, LineSearch, MultCounter, Problem,
    SiomsParams, Termination,
};
use sioms_core::transition::TransitionTables;
use std::sync::OnceLock;

fn spring_tables() -> &'static TransitionTables {
    static T: OnceLock<TransitionTables> = OnceLock::new();
    T.get_or_init(|| {
        let s = spring_mass();
        TransitionTables::build(&s.system, &s.cost, s.table_params(2.0, 1e-3)).unwrap()
    })
}

fn spring_problem<'a>(s: &'a Scenario) -> Problem<'a> {
    Problem { tables: spring_tables(), sys: &s.system, cost: &s.cost, x0: s.system.x0() }
}

#[test]
fn gradient_matches_finite_differences_on_both_systems() {
    let s = spring_mass();
    let c = cart();
    let cart_cost = c.cost.with_horizon(0.0, 3.0).unwrap();
    let cart_tables = TransitionTables::build(&c.system, &cart_cost, c.table_params(3.0, 1e-3)).unwrap();
    let runs = [
        fd_check(&s.system, &s.cost, spring_tables(), 1, &[1e-3, 1e-4]),
        fd_check(&c.system, &cart_cost, &cart_tables, 2, &[1e-3, 1e-4]),
    ];
    for samples in runs {
        assert_eq!(samples.len(), 50);
        for f in samples {
            assert!(f.errors[1] / f.d.abs() <= 0.02, "d = {}, error = {}", f.d, f.errors[1]);
            // first order: ten times smaller lambda, about ten times smaller error
            assert!(f.errors[1] <= 0.2 * f.errors[0] + 1e-9, "{:?}", f.errors);
        }
    }
}

#[test]
fn gradient_at_initial_schedule_predicts_insertion() {
    let s = spring_mass();
    let sched = ModeSchedule::constant(1, 0.0, 2.0);
    let t = spring_tables();
    let sp = precompute_switch_points(t, &sched, s.system.x0(), s.cost.p1(), &MultCounter::new()).unwrap();
    let d = insertion_gradient(t, &s.system, &sched, &sp, 0.3, &MultCounter::new()).unwrap();
    assert_eq!(d[1], 0.0);
    let lambda = 1e-4;
    let j0 = exact_cost(t, &s.cost, &sched, s.system.x0());
    let fd = (exact_cost(t, &s.cost, &insert(&sched, 0, 0.3, lambda), s.system.x0()) - j0) / lambda;
    assert!(((fd - d[0]) / d[0]).abs() <= 0.02);

    // a descent direction exists somewhere on a dense grid
    let min = grid_with_step(0.0, 2.0, 1e-3)
        .iter()
        .map(|&tp| insertion_gradient(t, &s.system, &sched, &sp, tp, &MultCounter::new()).unwrap()[0])
        .fold(f64::INFINITY, f64::min);
    assert!(min < 0.0);
}

#[test]
fn active_mode_gradient_is_zero_on_random_draws() {
    let c = cart();
    let cost = c.cost.with_horizon(0.0, 3.0).unwrap();
    let t = TransitionTables::build(&c.system, &cost, c.table_params(3.0, 1e-2)).unwrap();
    let mut r = rng(9);
    for _ in 0..1000 {
        let segments = r.random_range(1..6);
        let sched = random_schedule(&mut r, 3, segments, 0.0, 3.0, 0.02);
        let tp = r.random_range(0.0..3.0);
        let sp = precompute_switch_points(&t, &sched, c.system.x0(), cost.p1(), &MultCounter::new()).unwrap();
        let d = insertion_gradient(&t, &c.system, &sched, &sp, tp, &MultCounter::new()).unwrap();
        assert_eq!(d[sched.mode_at(tp)], 0.0);
    }
}

#[test]
fn products_per_iteration_follow_the_count_formula() {
    let s = spring_mass();
    let problem = spring_problem(&s);
    let grid = grid_with_step(0.0, 2.0, 1e-3);
    let mut r = rng(21);
    for m in [1, 2, 3, 5] {
        let sched = random_schedule(&mut r, 2, m, 0.0, 2.0, 0.05);
        let lin = linearize(&problem, &sched, &grid, 12).unwrap();
        assert_eq!(lin.lambda_eval, grid.len() + 12);
        assert_eq!(lin.mults, 4 * (m as u64 - 1) + 9 * lin.lambda_eval as u64, "M = {m}");
    }
}

#[test]
fn spring_mass_descent_reaches_published_costs() {
    let s = spring_mass();
    let problem = spring_problem(&s);
    let u0 = ModeSchedule::constant(1, 0.0, 2.0);
    let ten = solve(&problem, &u0, &SiomsParams { max_iter: 10, ..s.solver }).unwrap();
    assert!((ten.initial_cost - 0.98).abs() <= 0.02);
    assert!(ten.final_cost <= 0.5, "J10 = {}", ten.final_cost);
    let thirty = solve(&problem, &u0, &SiomsParams { max_iter: 30, ..s.solver }).unwrap();
    assert!((0.33..=0.45).contains(&thirty.final_cost), "J30 = {}", thirty.final_cost);
    assert!(thirty.iterations[0].theta < 0.0);
    let costs: Vec<f64> = thirty.iterations.iter().map(|r| r.cost).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    // the first accepted step decreases the oracle cost too
    let j1 = cost_of(&s.system, &s.cost, &solve(&problem, &u0, &SiomsParams { max_iter: 1, ..s.solver }).unwrap().schedule, s.system.x0(), 1e-4);
    assert!(j1 < cost_of(&s.system, &s.cost, &u0, s.system.x0(), 1e-4));
}

#[test]
fn no_integration_happens_while_solving() {
    let s = spring_mass();
    let problem = spring_problem(&s);
    let (report, steps) = count_steps(|| solve(&problem, &ModeSchedule::constant(1, 0.0, 2.0), &s.solver).unwrap());
    assert_eq!(steps, 0);
    assert_eq!(report.integrator_steps, 0);
}

#[test]
fn zero_state_returns_initial_schedule() {
    let s = spring_mass();
    let x0 = Vector::zeros(2);
    let problem = Problem { tables: spring_tables(), sys: &s.system, cost: &s.cost, x0: &x0 };
    let u0 = ModeSchedule::new(vec![1, 0], vec![0.7], 0.0, 2.0).unwrap();
    let report = solve(&problem, &u0, &s.solver).unwrap();
    assert_eq!(report.schedule, u0);
    assert_eq!(report.iterations[0].theta, 0.0);
    assert_eq!(report.accepted_steps, 0);
    assert_eq!(report.termination, Termination::Converged);
}

#[test]
fn slope_rule_without_sufficient_decrease_still_descends() {
    let s = spring_mass();
    let problem = spring_problem(&s);
    let params = SiomsParams { max_iter: 5, c_armijo: 0.0, line_search: LineSearch::Slope, ..s.solver };
    let report = solve(&problem, &ModeSchedule::constant(1, 0.0, 2.0), &params).unwrap();
    let costs: Vec<f64> = report.iterations.iter().map(|r| r.cost).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    assert!(report.final_cost < report.initial_cost);
    // each accepted gamma is gamma0 * beta^m for some m
    for r in &report.iterations {
        if let Some(g) = r.gamma {
            let m = (g / (s.solver.gamma_scale / r.theta.abs())).log(0.5);
            assert!((m - m.round()).abs() < 1e-9 && m.round() >= 0.0);
        }
    }
}

#[test]
fn converged_theta_respects_the_tolerance() {
    let s = spring_mass();
    let problem = spring_problem(&s);
    let params = SiomsParams { max_iter: 200, theta_tol: Some(0.05), ..s.solver };
    let report = solve(&problem, &ModeSchedule::constant(1, 0.0, 2.0), &params).unwrap();
    assert_eq!(report.termination, Termination::Converged);
    assert!(report.iterations.last().unwrap().theta >= -0.05);
}
