mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sioms_core::integrate::count_steps;
use sioms_core::model::{ExprMatrix, Mat, QuadraticCost};
use sioms_core::transition::{TableParams, TransitionTables};
use std::sync::OnceLock;

fn spring_tables() -> &'static TransitionTables {
    static T: OnceLock<TransitionTables> = OnceLock::new();
    T.get_or_init(|| {
        let s = spring_mass();
        TransitionTables::build(&s.system, &s.cost, s.table_params(2.0, 1e-3)).unwrap()
    })
}

fn cart_tables() -> &'static TransitionTables {
    static T: OnceLock<TransitionTables> = OnceLock::new();
    T.get_or_init(|| {
        let s = cart();
        let cost = s.cost.with_horizon(0.0, 3.0).unwrap();
        TransitionTables::build(&s.system, &cost, s.table_params(3.0, 1e-3)).unwrap()
    })
}

#[test]
fn constant_mode_matches_matrix_exponential() {
    let s = spring_mass();
    let t = spring_tables();
    let a = s.system.a(0, 0.0);
    let want = expm(&(a * 0.5));
    let got = t.stm_between(0, 0.5, 0.0).unwrap();
    assert!(max_abs(&(got - want)) <= 1e-8);
}

#[test]
fn boundary_samples_are_exact() {
    for t in [spring_tables(), cart_tables()] {
        for j in 0..t.n_modes() {
            let (phi0, _, _) = t.sample(j, 0);
            assert_eq!(phi0, &Mat::identity(t.n_states(), t.n_states()));
            let (_, _, psi_end) = t.sample(j, t.samples());
            assert_eq!(psi_end, &Mat::zeros(t.n_states(), t.n_states()));
        }
        assert!(t.max_inverse_residual() <= 1e-8);
    }
}

#[test]
fn stm_matches_reintegration() {
    let s = spring_mass();
    let got = spring_tables().stm_between(1, 1.1, 0.3).unwrap();
    let want = stm(&s.system, 1, 1.1, 0.3, 1e-4);
    assert!(max_abs(&(got - want)) <= 1e-7);
}

#[test]
fn time_varying_stm_and_atm_match_reintegration() {
    let s = cart();
    let cost = s.cost.with_horizon(0.0, 3.0).unwrap();
    let t = cart_tables();
    for j in 0..3 {
        let got = t.stm_between(j, 2.3, 0.7).unwrap();
        let want = stm(&s.system, j, 2.3, 0.7, 1e-4);
        assert!(max_abs(&(got - want)) <= 1e-7, "mode {j}");
        let got = t.psi(j, 1.2345).unwrap();
        let want = atm(&s.system, &cost, j, 1.2345, 3.0, 1e-4);
        assert!(max_abs(&(got - want)) <= 1e-7, "mode {j}");
    }
}

#[test]
fn zero_running_weight_gives_zero_atm() {
    let s = spring_mass();
    let q = ExprMatrix::from_constant(&Mat::zeros(2, 2));
    let cost = QuadraticCost::new(q, Mat::identity(2, 2), 0.0, 2.0).unwrap();
    let t = TransitionTables::build(&s.system, &cost, s.table_params(2.0, 1e-2)).unwrap();
    for j in 0..2 {
        for k in 0..=20 {
            assert_eq!(t.psi(j, 0.1 * k as f64).unwrap().amax(), 0.0);
        }
    }
}

#[test]
fn every_psi_sample_is_symmetric() {
    for t in [spring_tables(), cart_tables()] {
        for j in 0..t.n_modes() {
            for h in 0..=t.samples() {
                let (_, _, psi) = t.sample(j, h);
                assert!(max_abs(&(psi - psi.transpose())) <= 1e-9);
            }
        }
    }
}

#[test]
fn state_transfer_reproduces_direct_integration() {
    // x(t) = Phi(t, tau) x(tau) for an arbitrary x(tau)
    let s = cart();
    let t = cart_tables();
    let x_tau = Mat::from_column_slice(5, 1, &[0.3, -0.2, 0.15, 0.4, 1.0]);
    let want = rk4(|tau, y| s.system.a(2, tau) * y, &x_tau, 0.4, 2.6, 22000);
    let got = t.stm_between(2, 2.6, 0.4).unwrap() * &x_tau;
    assert!(max_abs(&(got - want)) <= 1e-7);
}

#[test]
fn costate_factor_property_matches_lyapunov_integration() {
    // P(t) = Psi(t, tau) + Phi(tau, t)' P(tau) Phi(tau, t)
    let s = spring_mass();
    let t = spring_tables();
    let p_tau = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
    let (a, b) = (0.4, 1.7);
    let phi = t.stm_between(0, b, a).unwrap();
    let got = t.atm_between(0, a, b).unwrap() + phi.transpose() * &p_tau * phi;
    let f = |tau: f64, p: &M| {
        let m = s.system.a(0, tau);
        -(m.transpose() * p + p * m + s.cost.q(tau))
    };
    let want = rk4(f, &p_tau, b, a, 13000);
    assert!(max_abs(&(got - want)) <= 1e-7);
}

#[test]
fn accuracy_does_not_depend_on_sample_count() {
    let s = spring_mass();
    let probe = [0.1234, 0.777, 1.5001];
    let reference: Vec<M> = probe.iter().map(|&t| stm(&s.system, 0, t, 0.0, 1e-4)).collect();
    for samples in [100, 1600, 20000] {
        let params = TableParams { samples, ..s.table_params(2.0, 1e-3) };
        let t = TransitionTables::build(&s.system, &s.cost, params).unwrap();
        // cubic interpolation error only, fourth order in the spacing
        let bound = 300.0 * t.dt().powi(4) + 1e-12;
        for (tp, want) in probe.iter().zip(&reference) {
            let got = t.stm_between(0, *tp, 0.0).unwrap();
            assert!(max_abs(&(got - want)) <= bound, "samples {samples}");
        }
        // on-sample values carry no interpolation error at all
        let on = t.stm_between(0, 1.0, 0.0).unwrap();
        assert!(max_abs(&(on - stm(&s.system, 0, 1.0, 0.0, 1e-4))) <= 1e-9, "samples {samples}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stm_identity_inverse_and_semigroup(j in 0usize..2, a in 0.0f64..2.0, b in 0.0f64..2.0, c in 0.0f64..2.0) {
        let t = spring_tables();
        let id = Mat::identity(2, 2);
        prop_assert!(max_abs(&(t.stm_between(j, a, a).unwrap() - &id)) <= 1e-9);
        let fwd = t.stm_between(j, a, b).unwrap();
        let back = t.stm_between(j, b, a).unwrap();
        prop_assert!(max_abs(&(&fwd * &back - &id)) <= 1e-7);
        let composed = t.stm_between(j, a, b).unwrap() * t.stm_between(j, b, c).unwrap();
        prop_assert!(max_abs(&(composed - t.stm_between(j, a, c).unwrap())) <= 1e-8);
    }

    #[test]
    fn cart_semigroup_and_atm_composition(j in 0usize..3, mut v in proptest::array::uniform3(0.0f64..3.0)) {
        let t = cart_tables();
        v.sort_by(f64::total_cmp);
        let [a, b, c] = v;
        let composed = t.stm_between(j, c, b).unwrap() * t.stm_between(j, b, a).unwrap();
        prop_assert!(max_abs(&(composed - t.stm_between(j, c, a).unwrap())) <= 1e-8);
        let phi = t.stm_between(j, b, a).unwrap();
        let rhs = t.atm_between(j, a, b).unwrap() + phi.transpose() * t.atm_between(j, b, c).unwrap() * &phi;
        prop_assert!(max_abs(&(t.atm_between(j, a, c).unwrap() - rhs)) <= 1e-8);
    }
}

#[test]
fn semigroup_on_fifty_random_pairs() {
    let t = spring_tables();
    let mut r = rng(11);
    for _ in 0..50 {
        let (t1, t2) = (r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        for j in 0..2 {
            let lhs = t.stm_between(j, t1, 0.0).unwrap();
            let rhs = t.stm_between(j, t1, t2).unwrap() * t.stm_between(j, t2, 0.0).unwrap();
            assert!(max_abs(&(lhs - rhs)) <= 1e-8);
        }
    }
}

#[test]
fn zero_shift_leaves_tables_unchanged() {
    let s = cart();
    let cost = s.cost.with_horizon(0.0, 3.0).unwrap();
    let t = cart_tables();
    assert_eq!(t.advance(&s.system, &cost, 0.0).unwrap().max_difference(t), 0.0);
}

#[test]
fn window_shift_matches_fresh_build_and_integrates_only_the_new_span() {
    let s = cart();
    let (horizon, delta) = (3.0, 0.5);
    let params = s.table_params(horizon, 1e-3);
    let mut cost = s.cost.with_horizon(0.0, horizon).unwrap();
    let (mut tables, build_steps) = count_steps(|| TransitionTables::build(&s.system, &cost, params).unwrap());
    for k in 1..=10 {
        let (next, steps) = count_steps(|| tables.advance(&s.system, &cost, delta).unwrap());
        cost = cost.with_horizon(next.t0(), next.t_m()).unwrap();
        let fresh = TransitionTables::build(&s.system, &cost, params).unwrap();
        assert!(next.max_difference(&fresh) <= 1e-6, "advance {k}");
        // one STM and one ATM extension per mode over [TM, TM + delta]
        let per_span = (delta / params.max_step).round() as u64;
        assert_eq!(steps, 2 * 3 * per_span, "advance {k}");
        assert_eq!(build_steps, 2 * 3 * (horizon / params.max_step).round() as u64);
        tables = next;
    }
}

#[test]
fn two_shifts_equal_one_double_shift() {
    let s = cart();
    let cost = s.cost.with_horizon(0.0, 3.0).unwrap();
    let t = cart_tables();
    let once = t.advance(&s.system, &cost, 0.5).unwrap();
    let shifted = cost.with_horizon(0.5, 3.5).unwrap();
    let twice = once.advance(&s.system, &shifted, 0.5).unwrap();
    let double = t.advance(&s.system, &cost, 1.0).unwrap();
    assert!(twice.max_difference(&double) <= 1e-6);
}
