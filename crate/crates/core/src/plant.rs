//! Reference propagation of the switched plant with fixed-step RK4.
//!
//! Steps are split at every switching time so each RK4 step sees a single
//! smooth vector field. Costs of the resulting trajectories use composite
//! Simpson on each inter-switch piece.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::TimeExpr;
use crate::integrate::{rk4_step, substeps, Stage};
use crate::model::{Mat, ModeSchedule, QuadraticCost, SwitchedLinearSystem, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("plant state became non-finite at t = {t}")]
    Diverged { t: f64 },
    #[error("fine step {0} must lie in (0, 1e-3]")]
    Step(f64),
    #[error("empty propagation interval [{from}, {to}]")]
    Interval { from: f64, to: f64 },
    #[error("state has {got} entries, plant has {n}")]
    StateLength { got: usize, n: usize },
}

/// Replaces one entry of a mode matrix (or of every mode) with another
/// expression, e.g. a perturbed damping term.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryOverride {
    pub mode: Option<usize>,
    pub row: usize,
    pub col: usize,
    pub expr: TimeExpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    /// Largest RK4 step (s).
    pub max_step: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig { max_step: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct Plant {
    sys: SwitchedLinearSystem,
    config: PlantConfig,
}

/// Dense samples of a propagated trajectory. Consecutive pieces share
/// their boundary sample index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlantTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    pub mode: Vec<usize>,
    /// `(first, last)` sample indices of each single-mode piece; each piece
    /// has an even number of steps.
    pub pieces: Vec<(usize, usize)>,
}

impl PlantTrajectory {
    pub fn final_state(&self) -> &Vector {
        self.x.last().expect("trajectory has samples")
    }

    /// Appends `other`, which must start where `self` ends.
    pub fn append(&mut self, other: PlantTrajectory) {
        if self.t.is_empty() {
            *self = other;
            return;
        }
        let offset = self.t.len() - 1;
        // the shared boundary sample is kept from `other` (it may carry a jump)
        self.t.pop();
        self.x.pop();
        self.mode.pop();
        self.t.extend(other.t);
        self.x.extend(other.x);
        self.mode.extend(other.mode);
        self.pieces.extend(other.pieces.into_iter().map(|(a, b)| (a + offset, b + offset)));
    }

    /// Linear interpolation of the state at `t`.
    pub fn state_at(&self, t: f64) -> Vector {
        let k = self.t.partition_point(|&s| s <= t);
        if k == 0 {
            return self.x[0].clone();
        }
        if k >= self.t.len() {
            return self.final_state().clone();
        }
        let (a, b) = (self.t[k - 1], self.t[k]);
        let w = if b > a { (t - a) / (b - a) } else { 1.0 };
        &self.x[k - 1] * (1.0 - w) + &self.x[k] * w
    }

    /// Time after `from` until `|x[index]|` enters `[-band, band]` for good,
    /// measured to the first sample of the final in-band stretch. `None` if
    /// the trajectory ends outside the band.
    pub fn settle_time(&self, from: f64, index: usize, band: f64) -> Option<f64> {
        let start = self.t.partition_point(|&t| t < from);
        if start >= self.t.len() {
            return None;
        }
        let last_out = (start..self.t.len()).rev().find(|&k| self.x[k][index].abs() > band);
        match last_out {
            None => Some(0.0),
            Some(k) if k + 1 == self.t.len() => None,
            Some(k) => Some(self.t[k + 1] - from),
        }
    }

    /// Running cost over the pieces plus the terminal term on the last
    /// sample.
    pub fn cost(&self, cost: &QuadraticCost) -> f64 {
        let mut j = 0.0;
        for &(a, b) in &self.pieces {
            let steps = b - a;
            if steps == 0 {
                continue;
            }
            let h = (self.t[b] - self.t[a]) / steps as f64;
            let f = |k: usize| 0.5 * self.x[k].dot(&(cost.q(self.t[k]) * &self.x[k]));
            let mut s = f(a) + f(b);
            for k in a + 1..b {
                s += if (k - a) % 2 == 1 { 4.0 } else { 2.0 } * f(k);
            }
            j += s * h / 3.0;
        }
        let xf = self.final_state();
        j + 0.5 * xf.dot(&(cost.p1() * xf))
    }
}

impl Plant {
    pub fn new(sys: SwitchedLinearSystem, config: PlantConfig) -> Result<Self, PlantError> {
        if !(config.max_step > 0.0 && config.max_step <= 1e-3) {
            return Err(PlantError::Step(config.max_step));
        }
        Ok(Plant { sys, config })
    }

    /// Plant whose matrices differ from `sys` by the given entry overrides.
    pub fn perturbed(sys: &SwitchedLinearSystem, overrides: &[EntryOverride], config: PlantConfig) -> Result<Self, PlantError> {
        let mut sys = sys.clone();
        for o in overrides {
            sys = sys.with_entry_override(o.mode, o.row, o.col, &o.expr);
        }
        Plant::new(sys, config)
    }

    pub fn system(&self) -> &SwitchedLinearSystem {
        &self.sys
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    /// Integrates from `x` at `from` to `to` under `schedule`, splitting at
    /// every switching time inside the interval.
    pub fn propagate(&self, x: &Vector, schedule: &ModeSchedule, from: f64, to: f64) -> Result<PlantTrajectory, PlantError> {
        if !(to > from) {
            return Err(PlantError::Interval { from, to });
        }
        let n = self.sys.n_states();
        if x.len() != n {
            return Err(PlantError::StateLength { got: x.len(), n });
        }
        let mut cuts = vec![from];
        cuts.extend(schedule.tau().iter().copied().filter(|&s| s > from && s < to));
        cuts.push(to);

        let mut out = PlantTrajectory::default();
        let mut state = x.clone();
        out.t.push(from);
        out.x.push(state.clone());
        out.mode.push(schedule.mode_at(from));
        let mut a_start = Mat::zeros(n, n);
        let mut a_mid = Mat::zeros(n, n);
        let mut a_end = Mat::zeros(n, n);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let j = schedule.mode_at(a);
            let mut k = substeps(b - a, self.config.max_step);
            k += k % 2;
            let h = (b - a) / k as f64;
            let first = out.t.len() - 1;
            // the shared sample takes the mode of the piece it starts
            *out.mode.last_mut().expect("non-empty") = j;
            self.sys.a_into(j, a, &mut a_start);
            for s in 0..k {
                let ts = a + (b - a) * s as f64 / k as f64;
                let te = if s + 1 == k { b } else { a + (b - a) * (s + 1) as f64 / k as f64 };
                self.sys.a_into(j, ts + 0.5 * h, &mut a_mid);
                self.sys.a_into(j, te, &mut a_end);
                state = rk4_step(&state, h, |stage, v| match stage {
                    Stage::Start => &a_start * v,
                    Stage::Mid => &a_mid * v,
                    Stage::End => &a_end * v,
                });
                if state.iter().any(|v| !v.is_finite()) {
                    return Err(PlantError::Diverged { t: te });
                }
                std::mem::swap(&mut a_start, &mut a_end);
                out.t.push(te);
                out.x.push(state.clone());
                out.mode.push(j);
            }
            out.pieces.push((first, out.t.len() - 1));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExprMatrix;

    fn oscillator() -> SwitchedLinearSystem {
        let m = ExprMatrix::parse_rows(&[vec!["0", "1"], vec!["-30", "-2"]]).unwrap();
        SwitchedLinearSystem::new(vec![m], Vector::from_vec(vec![1.0, 0.0]), vec![]).unwrap()
    }

    #[test]
    fn settle_time_uses_the_last_excursion() {
        let tr = PlantTrajectory {
            t: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            x: [0.0, 0.5, 0.01, 0.3, 0.0].iter().map(|&v| Vector::from_vec(vec![v])).collect(),
            mode: vec![0; 5],
            pieces: vec![(0, 4)],
        };
        assert_eq!(tr.settle_time(0.5, 0, 0.1), Some(3.5));
        assert_eq!(tr.settle_time(3.5, 0, 0.1), Some(0.0));
        assert_eq!(tr.settle_time(0.0, 0, 0.6), Some(0.0));
        let mut open = tr.clone();
        open.x[4][0] = 1.0;
        assert_eq!(open.settle_time(0.0, 0, 0.1), None);
    }

    #[test]
    fn zero_state_stays_zero() {
        let plant = Plant::new(oscillator(), PlantConfig::default()).unwrap();
        let s = ModeSchedule::constant(0, 0.0, 1.0);
        let tr = plant.propagate(&Vector::zeros(2), &s, 0.0, 1.0).unwrap();
        assert!(tr.x.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn damped_oscillator_closed_form() {
        let plant = Plant::new(oscillator(), PlantConfig::default()).unwrap();
        let s = ModeSchedule::constant(0, 0.0, 2.0);
        let tr = plant.propagate(&Vector::from_vec(vec![1.0, 0.0]), &s, 0.0, 2.0).unwrap();
        // x'' + 2x' + 30x = 0, x(0) = 1, x'(0) = 0
        let w = 29f64.sqrt();
        let exact = |t: f64| (-t).exp() * ((w * t).cos() + (w * t).sin() / w);
        for (t, x) in tr.t.iter().zip(&tr.x).step_by(997) {
            assert!((x[0] - exact(*t)).abs() < 1e-8);
        }
    }

    #[test]
    fn pieces_split_at_switches() {
        let m2 = ExprMatrix::parse_rows(&[vec!["0", "1"], vec!["-70", "-2"]]).unwrap();
        let sys = SwitchedLinearSystem::new(
            vec![oscillator().mode(0).clone(), m2],
            Vector::from_vec(vec![1.0, 0.0]),
            vec![],
        )
        .unwrap();
        let plant = Plant::new(sys, PlantConfig::default()).unwrap();
        let s = ModeSchedule::new(vec![1, 0], vec![0.7005], 0.0, 2.0).unwrap();
        let tr = plant.propagate(&Vector::from_vec(vec![1.0, 0.0]), &s, 0.0, 2.0).unwrap();
        assert_eq!(tr.pieces.len(), 2);
        assert_eq!(tr.t[tr.pieces[0].1], 0.7005);
        assert_eq!(tr.mode[tr.pieces[1].0], 0);
        assert!(tr.pieces.iter().all(|(a, b)| (b - a) % 2 == 0));
    }
}
