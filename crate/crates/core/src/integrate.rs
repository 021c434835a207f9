//! Fixed-step classical fourth-order Runge-Kutta stepping.
//!
//! Every step taken on a thread bumps a thread-local counter, which lets
//! callers prove that a code path performs no integration at all.

use std::cell::Cell;

use nalgebra::allocator::Allocator;
use nalgebra::{DefaultAllocator, Dim, OMatrix};

thread_local! {
    static STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Integration steps taken so far on the current thread.
pub fn steps_on_this_thread() -> u64 {
    STEPS.with(Cell::get)
}

/// Runs `f` and returns its result with the number of integration steps it
/// took on this thread.
pub fn count_steps<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = steps_on_this_thread();
    let out = f();
    (out, steps_on_this_thread() - before)
}

/// Where inside the step a derivative is requested. The two middle stages
/// share `t + h/2`, so callers evaluate time-varying coefficients three
/// times per step instead of four.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Start,
    Mid,
    End,
}

/// One RK4 step of size `h` (negative for backward integration).
pub fn rk4_step<R, C>(
    y: &OMatrix<f64, R, C>,
    h: f64,
    mut f: impl FnMut(Stage, &OMatrix<f64, R, C>) -> OMatrix<f64, R, C>,
) -> OMatrix<f64, R, C>
where
    R: Dim,
    C: Dim,
    DefaultAllocator: Allocator<R, C>,
{
    STEPS.with(|s| s.set(s.get() + 1));
    let k1 = f(Stage::Start, y);
    let k2 = f(Stage::Mid, &(y + &k1 * (0.5 * h)));
    let k3 = f(Stage::Mid, &(y + &k2 * (0.5 * h)));
    let k4 = f(Stage::End, &(y + &k3 * h));
    y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Number of equal sub-steps of at most `max_step` covering `span`.
pub fn substeps(span: f64, max_step: f64) -> usize {
    let k = (span.abs() / max_step * (1.0 - 1e-12)).ceil();
    (k as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn exponential_decay_is_fourth_order() {
        let err = |h: f64| {
            let steps = (1.0 / h).round() as usize;
            let mut y = DMatrix::from_element(1, 1, 1.0);
            for _ in 0..steps {
                y = rk4_step(&y, h, |_, v| -v);
            }
            (y[(0, 0)] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn counter_tracks_steps() {
        let ((), n) = count_steps(|| {
            let mut y = DMatrix::from_element(1, 1, 1.0);
            for _ in 0..7 {
                y = rk4_step(&y, 0.1, |_, v| v.clone());
            }
        });
        assert_eq!(n, 7);
    }

    #[test]
    fn substep_counts() {
        assert_eq!(substeps(0.02, 1e-4), 200);
        assert_eq!(substeps(2.0 / 20001.0, 1e-4), 1);
        assert_eq!(substeps(3.125e-4, 1e-4), 4);
    }
}
