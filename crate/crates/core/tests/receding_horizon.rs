mod common;

use common::*;
use sioms_core::model::{ModeSchedule, Vector};
use sioms_core::plant::{Plant, PlantConfig};
use sioms_core::receding::{propagate_with_disturbances, run_closed_loop, Disturbance, RecedingController, RhConfig};
use sioms_core::sioms::{solve, Problem};
use sioms_core::transition::TransitionTables;

fn cart_config(horizon: f64, duration: f64) -> RhConfig {
    let mut c = cart().rh_config().expect("cart has an rh section");
    c.horizon = horizon;
    c.duration = duration;
    c
}

#[test]
fn zero_state_keeps_the_warm_start() {
    let s = cart();
    let u0 = ModeSchedule::new(vec![1, 2], vec![1.0], 0.0, 3.0).unwrap();
    let mut ctl = RecedingController::new(s.system.clone(), &s.cost, cart_config(3.0, 2.0), &u0, 0.0).unwrap();
    let step = ctl.step(&Vector::zeros(5)).unwrap();
    assert_eq!(step.record.theta, 0.0);
    assert_eq!(step.slice, u0.restricted(0.0, 0.5));
}

#[test]
fn slice_matches_open_loop_solve_on_the_same_window() {
    let s = cart();
    let config = cart_config(3.0, 2.0);
    let u0 = ModeSchedule::constant(0, 0.0, 3.0);
    let mut ctl = RecedingController::new(s.system.clone(), &s.cost, config, &u0, 0.0).unwrap();
    let x = Vector::from_vec(vec![0.3, 0.1, -0.08, 0.2, 1.0]);
    let step = ctl.step(&x).unwrap();

    let window = s.cost.with_horizon(0.0, 3.0).unwrap();
    let tables = TransitionTables::build(&s.system, &window, config.table_params()).unwrap();
    let problem = Problem { tables: &tables, sys: &s.system, cost: &window, x0: &x };
    let open = solve(&problem, &u0, &config.inner).unwrap();
    let want = open.schedule.restricted(0.0, 0.5);
    assert_eq!(step.slice.sigma(), want.sigma());
    for (a, b) in step.slice.tau().iter().zip(want.tau()) {
        assert!((a - b).abs() <= config.inner.control_dt + 1e-12);
    }
}

#[test]
fn steps_never_integrate_while_optimising_and_warm_start_only_helps() {
    let s = cart();
    let mut ctl = RecedingController::new(s.system.clone(), &s.cost, cart_config(3.0, 6.0), &s.initial, 0.0).unwrap();
    let plant = Plant::new(s.system.clone(), s.plant).unwrap();
    let log = run_closed_loop_from(&mut ctl, &plant, s.system.x0(), 12);
    for r in &log {
        assert_eq!(r.solve_steps, 0);
        assert!(r.window_cost <= r.warm_cost, "step {}: {} > {}", r.step, r.window_cost, r.warm_cost);
    }
}

fn run_closed_loop_from(
    ctl: &mut RecedingController,
    plant: &Plant,
    x0: &Vector,
    steps: usize,
) -> Vec<sioms_core::receding::RhStepRecord> {
    let mut x = x0.clone();
    let mut out = Vec::new();
    for _ in 0..steps {
        let t = ctl.time();
        let step = ctl.step(&x).unwrap();
        x = plant.propagate(&x, &step.slice, t, t + ctl.config().delta).unwrap().final_state().clone();
        out.push(step.record);
    }
    out
}

#[test]
fn table_advance_cost_does_not_depend_on_the_horizon() {
    let s = cart();
    let mut counts = Vec::new();
    for horizon in [2.0, 3.0, 5.0] {
        let mut ctl = RecedingController::new(s.system.clone(), &s.cost, cart_config(horizon, 2.0), &s.initial, 0.0).unwrap();
        let plant = Plant::new(s.system.clone(), s.plant).unwrap();
        let records = run_closed_loop_from(&mut ctl, &plant, s.system.x0(), 2);
        counts.push(records.iter().map(|r| r.advance_steps).collect::<Vec<_>>());
    }
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    // one STM and one ATM extension per mode over delta = 0.5 at 1e-4
    assert_eq!(counts[0][0], 2 * 3 * 5000);
}

#[test]
fn disturbances_are_applied_at_their_exact_time() {
    let s = cart();
    let plant = Plant::new(s.system.clone(), PlantConfig::default()).unwrap();
    let sched = ModeSchedule::constant(0, 0.0, 1.0);
    let kick = Disturbance { time: 0.4321, index: 3, magnitude: 0.3 };
    let mut applied = Vec::new();
    let tr = propagate_with_disturbances(&plant, s.system.x0(), &sched, 0.0, 1.0, &[kick], &mut applied).unwrap();
    assert_eq!(applied, vec![kick]);

    let before = simulate(&s.system, &sched, s.system.x0(), 0.4321, 1e-4);
    let mut after = before.clone();
    after[3] += 0.3;
    let rest = ModeSchedule::constant(0, 0.4321, 1.0);
    let want = simulate(&s.system, &rest, &after, 1.0, 1e-4);
    assert!((tr.final_state() - want).amax() <= 1e-9);

    // outside [from, to) nothing happens
    let mut none = Vec::new();
    propagate_with_disturbances(&plant, s.system.x0(), &sched, 0.0, 0.4321, &[kick], &mut none).unwrap();
    assert!(none.is_empty());
}

#[test]
fn closed_loop_log_covers_the_run() {
    let s = cart();
    let config = cart_config(3.0, 3.0);
    let ctl = RecedingController::new(s.system.clone(), &s.cost, config, &s.initial, 0.0).unwrap();
    let plant = Plant::new(s.system.clone(), s.plant).unwrap();
    let log = run_closed_loop(ctl, &plant, s.system.x0(), &[]).unwrap();
    assert_eq!(log.steps.len(), 6);
    assert!(log.aborted.is_none());
    assert_eq!(log.applied.t0(), 0.0);
    assert!((log.applied.t_m() - 3.0).abs() < 1e-12);
    assert!((log.trajectory.t.last().unwrap() - 3.0).abs() < 1e-12);
    // the applied schedule reproduces the logged plant trajectory
    let replay = simulate(&s.system, &log.applied, s.system.x0(), 3.0, 1e-4);
    assert!((log.trajectory.final_state() - replay).amax() <= 1e-8);
}
