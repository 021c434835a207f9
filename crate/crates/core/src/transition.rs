//! Off-line operator tables: per-mode state-transition matrices
//! `Phi_j(t, T0)`, their inverses, and adjoint-transition matrices
//! `Psi_j(t, TM)`, sampled on a uniform grid.
//!
//! `Phi` solves `Phi' = A_j Phi` from the identity; `Psi` solves
//! `Psi' = -A_j' Psi - Psi A_j - Q` backward from zero. Both are integrated
//! with fixed-step RK4 at a fine internal step and stored only at table
//! samples; queries between samples interpolate entrywise.
//!
//! When `|Phi|` grows past `anchor_limit` the table restarts from the
//! identity at that sample ("anchor"), so samples hold `Phi(t, a_k)` for the
//! anchor `a_k` preceding `t`. Queries compose across anchors with the
//! stored anchor-to-anchor transitions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{rk4_step, substeps, Stage};
use crate::model::{Mat, ModelError, QuadraticCost, SwitchedLinearSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableError {
    #[error("time {t} outside table range [{t0}, {t_m}]")]
    OutOfRange { t: f64, t0: f64, t_m: f64 },
    #[error("state-transition matrix of mode {} is singular at t = {t}", mode + 1)]
    Singular { mode: usize, t: f64 },
    #[error("integration produced non-finite values for mode {} near t = {t}", mode + 1)]
    NonFinite { mode: usize, t: f64 },
    #[error("window shift {delta} is not a multiple of the table spacing {dt}")]
    Misaligned { delta: f64, dt: f64 },
    #[error("window shift {delta} is negative or longer than the horizon")]
    Shift { delta: f64 },
    #[error("step size {step} must be positive and below the table spacing")]
    Step { step: f64 },
    #[error("table needs at least one interval")]
    Samples,
    #[error("cost has {got} states, system has {n}")]
    Dimension { got: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableParams {
    /// Number of table intervals; samples are `t0 + h*dt`, `h = 0..=samples`.
    pub samples: usize,
    /// Largest internal integration step (s).
    pub max_step: f64,
    pub interpolation: Interpolation,
    /// Re-anchor when `max|Phi|` exceeds this.
    pub anchor_limit: f64,
}

impl Default for TableParams {
    fn default() -> Self {
        TableParams { samples: 1000, max_step: 1e-4, interpolation: Interpolation::Cubic, anchor_limit: 1e8 }
    }
}

impl TableParams {
    /// Parameters whose table spacing is as close to `dt` as the horizon
    /// allows.
    pub fn with_spacing(span: f64, dt: f64) -> Self {
        let samples = (span / dt).round().max(1.0) as usize;
        TableParams { samples, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
struct Anchor {
    /// Sample index at which this anchor starts.
    start: usize,
    /// `Phi(a_k, a_{k-1})`, identity for the first anchor.
    to_prev: Mat,
    to_prev_inv: Mat,
}

#[derive(Debug, Clone)]
struct ModeTable {
    phi: Vec<Mat>,
    phi_inv: Vec<Mat>,
    psi: Vec<Mat>,
    anchors: Vec<Anchor>,
    /// `Phi(TM, a_K)' P1 Phi(TM, a_K)` for the last anchor `a_K`.
    terminal: Mat,
}

/// Sampled operator tables for every mode over `[t0, t_m]`.
#[derive(Debug, Clone)]
pub struct TransitionTables {
    t0: f64,
    t_m: f64,
    samples: usize,
    dt: f64,
    n: usize,
    steps_per_sample: usize,
    params: TableParams,
    modes: Vec<ModeTable>,
}

/// Matrix expressed relative to an anchor.
#[derive(Debug, Clone)]
pub struct Anchored {
    pub matrix: Mat,
    pub anchor: usize,
}

fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

fn invert(m: &Mat, mode: usize, t: f64) -> Result<Mat, TableError> {
    m.clone().try_inverse().ok_or(TableError::Singular { mode, t })
}

/// Integrates `Phi' = A Phi` from `y` over `[t, t + span]` in `k` steps.
fn stm_segment(sys: &SwitchedLinearSystem, j: usize, y: Mat, t: f64, span: f64, k: usize, a_start: &mut Mat) -> Mat {
    let h = span / k as f64;
    let n = y.nrows();
    let mut y = y;
    let mut a_mid = Mat::zeros(n, n);
    let mut a_end = Mat::zeros(n, n);
    for s in 0..k {
        let ts = t + span * s as f64 / k as f64;
        sys.a_into(j, ts + 0.5 * h, &mut a_mid);
        sys.a_into(j, ts + h, &mut a_end);
        y = rk4_step(&y, h, |stage, v| match stage {
            Stage::Start => &*a_start * v,
            Stage::Mid => &a_mid * v,
            Stage::End => &a_end * v,
        });
        std::mem::swap(a_start, &mut a_end);
    }
    y
}

/// Integrates `Psi' = -A'Psi - Psi A - Q` backward from `y` at `t` over
/// `[t - span, t]` in `k` steps.
fn atm_segment(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    j: usize,
    y: Mat,
    t: f64,
    span: f64,
    k: usize,
    start: &mut (Mat, Mat),
) -> Mat {
    let h = span / k as f64;
    let n = y.nrows();
    let mut y = y;
    let mut a_mid = Mat::zeros(n, n);
    let mut a_end = Mat::zeros(n, n);
    let rhs = |a: &Mat, q: &Mat, v: &Mat| -(a.transpose() * v) - v * a - q;
    for s in 0..k {
        let ts = t - span * s as f64 / k as f64;
        sys.a_into(j, ts - 0.5 * h, &mut a_mid);
        sys.a_into(j, ts - h, &mut a_end);
        let q_mid = cost.q(ts - 0.5 * h);
        let q_end = cost.q(ts - h);
        let (a_start, q_start) = (&start.0, &start.1);
        y = rk4_step(&y, -h, |stage, v| match stage {
            Stage::Start => rhs(a_start, q_start, v),
            Stage::Mid => rhs(&a_mid, &q_mid, v),
            Stage::End => rhs(&a_end, &q_end, v),
        });
        *start = (a_end.clone(), q_end);
    }
    y
}

impl TransitionTables {
    /// Integrates every mode's STM and ATM over the cost horizon.
    pub fn build(sys: &SwitchedLinearSystem, cost: &QuadraticCost, params: TableParams) -> Result<Self, TableError> {
        let n = sys.n_states();
        if cost.n_states() != n {
            return Err(TableError::Dimension { got: cost.n_states(), n });
        }
        if params.samples == 0 {
            return Err(TableError::Samples);
        }
        let (t0, t_m) = (cost.t0(), cost.t_m());
        let dt = (t_m - t0) / params.samples as f64;
        if !(params.max_step > 0.0) {
            return Err(TableError::Step { step: params.max_step });
        }
        sys.check_finite(t0, t_m, 64)?;
        let k = substeps(dt, params.max_step);
        let mut tables = TransitionTables {
            t0,
            t_m,
            samples: params.samples,
            dt,
            n,
            steps_per_sample: k,
            params,
            modes: Vec::with_capacity(sys.n_modes()),
        };
        for j in 0..sys.n_modes() {
            let (phi, anchors) = tables.integrate_stm(sys, j, 0, Mat::identity(n, n), params.samples)?;
            let phi_inv = phi
                .iter()
                .enumerate()
                .map(|(h, m)| invert(m, j, tables.time(h)))
                .collect::<Result<Vec<_>, _>>()?;
            let psi = tables.integrate_atm(sys, cost, j, params.samples, params.samples)?;
            let mut mode = ModeTable { phi, phi_inv, psi, anchors, terminal: Mat::zeros(n, n) };
            mode.terminal = terminal_term(&mode, cost.p1());
            tables.modes.push(mode);
        }
        Ok(tables)
    }

    /// Forward STM samples for table indices `first..=first+count`, starting
    /// from `init` at `first` (which need not be the identity).
    fn integrate_stm(
        &self,
        sys: &SwitchedLinearSystem,
        j: usize,
        first: usize,
        init: Mat,
        count: usize,
    ) -> Result<(Vec<Mat>, Vec<Anchor>), TableError> {
        let n = self.n;
        let mut out = Vec::with_capacity(count + 1);
        let mut anchors = vec![Anchor { start: 0, to_prev: Mat::identity(n, n), to_prev_inv: Mat::identity(n, n) }];
        // Integrate Y = Phi(t, t_first) from the identity and scale by the
        // initial value, restarting at each new anchor.
        let mut base = init;
        let mut y = Mat::identity(n, n);
        out.push(base.clone());
        let mut a_start = sys.a(j, self.time(first));
        for h in 0..count {
            let t = self.time(first + h);
            y = stm_segment(sys, j, y, t, self.dt, self.steps_per_sample, &mut a_start);
            let mut sample = &y * &base;
            if sample.iter().any(|v| !v.is_finite()) {
                return Err(TableError::NonFinite { mode: j, t });
            }
            if sample.amax() > self.params.anchor_limit {
                let to_prev_inv = invert(&sample, j, t)?;
                anchors.push(Anchor { start: h + 1, to_prev: sample, to_prev_inv });
                sample = Mat::identity(n, n);
                y = Mat::identity(n, n);
                base = Mat::identity(n, n);
            }
            out.push(sample);
        }
        Ok((out, anchors))
    }

    /// Backward ATM samples for indices `last-count..=last`, zero at `last`.
    fn integrate_atm(
        &self,
        sys: &SwitchedLinearSystem,
        cost: &QuadraticCost,
        j: usize,
        last: usize,
        count: usize,
    ) -> Result<Vec<Mat>, TableError> {
        let n = self.n;
        let mut out = vec![Mat::zeros(n, n); count + 1];
        let mut y = Mat::zeros(n, n);
        let t_last = self.time(last);
        let mut start = (sys.a(j, t_last), cost.q(t_last));
        for h in (0..count).rev() {
            let t = self.time(last - count + h + 1);
            y = atm_segment(sys, cost, j, y, t, self.dt, self.steps_per_sample, &mut start);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(TableError::NonFinite { mode: j, t });
            }
            y = symmetrize(&y);
            out[h] = y.clone();
        }
        Ok(out)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_m(&self) -> f64 {
        self.t_m
    }

    /// Number of table intervals `𝒩`.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn params(&self) -> &TableParams {
        &self.params
    }

    pub fn integration_step(&self) -> f64 {
        self.dt / self.steps_per_sample as f64
    }

    /// Time of table sample `h` relative to the current window.
    pub fn time(&self, h: usize) -> f64 {
        if h == self.samples {
            self.t_m
        } else {
            self.t0 + h as f64 * self.dt
        }
    }

    pub fn anchor_count(&self, j: usize) -> usize {
        self.modes[j].anchors.len()
    }

    /// Raw samples: `Phi(t_h, a)`, its inverse, and `Psi(t_h, TM)`.
    pub fn sample(&self, j: usize, h: usize) -> (&Mat, &Mat, &Mat) {
        let m = &self.modes[j];
        (&m.phi[h], &m.phi_inv[h], &m.psi[h])
    }

    fn check_range(&self, t: f64) -> Result<f64, TableError> {
        let slack = 1e-9 * (self.t_m - self.t0).max(1.0);
        if !(t >= self.t0 - slack && t <= self.t_m + slack) {
            return Err(TableError::OutOfRange { t, t0: self.t0, t_m: self.t_m });
        }
        Ok(t.clamp(self.t0, self.t_m))
    }

    /// Interval index and local coordinate in `[0, 1]`.
    fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t - self.t0) / self.dt;
        let h = (x.floor().max(0.0) as usize).min(self.samples - 1);
        (h, (x - h as f64).clamp(0.0, 1.0))
    }

    fn anchor_of(&self, j: usize, h: usize) -> usize {
        let anchors = &self.modes[j].anchors;
        anchors.partition_point(|a| a.start <= h) - 1
    }

    /// Interpolation stencil inside `[lo, hi]` for a query at interval `h`,
    /// local coordinate `s`.
    fn stencil(&self, h: usize, s: f64, lo: usize, hi: usize) -> ([usize; 4], [f64; 4], usize) {
        const EDGE: f64 = 1e-9;
        if s <= EDGE {
            return ([h, 0, 0, 0], [1.0, 0.0, 0.0, 0.0], 1);
        }
        if s >= 1.0 - EDGE {
            return ([h + 1, 0, 0, 0], [1.0, 0.0, 0.0, 0.0], 1);
        }
        if self.params.interpolation == Interpolation::Cubic && hi - lo >= 3 {
            let i0 = h.saturating_sub(1).clamp(lo, hi - 3);
            let x = (h - i0) as f64 + s;
            let w = [
                -(x - 1.0) * (x - 2.0) * (x - 3.0) / 6.0,
                x * (x - 2.0) * (x - 3.0) / 2.0,
                -x * (x - 1.0) * (x - 3.0) / 2.0,
                x * (x - 1.0) * (x - 2.0) / 6.0,
            ];
            return ([i0, i0 + 1, i0 + 2, i0 + 3], w, 4);
        }
        ([h, h + 1, 0, 0], [1.0 - s, s, 0.0, 0.0], 2)
    }

    fn combine<'a>(&self, idx: &[usize; 4], w: &[f64; 4], len: usize, get: impl Fn(usize) -> &'a Mat) -> Mat {
        let mut out = get(idx[0]) * w[0];
        for k in 1..len {
            out += get(idx[k]) * w[k];
        }
        out
    }

    /// `Phi_j(t, a)` or its inverse, with `a` the anchor active at `t`.
    fn phi_like(&self, j: usize, t: f64, inverse: bool) -> Result<Anchored, TableError> {
        let t = self.check_range(t)?;
        let (h, s) = self.locate(t);
        let m = &self.modes[j];
        let at = if s >= 1.0 - 1e-9 { h + 1 } else { h };
        let anchor = self.anchor_of(j, at);
        let lo = m.anchors[anchor].start;
        let hi = m.anchors.get(anchor + 1).map_or(self.samples, |a| a.start);
        let (idx, w, len) = self.stencil(h, s, lo, hi);
        let field = if inverse { &m.phi_inv } else { &m.phi };
        let next = m.anchors.get(anchor + 1);
        let matrix = self.combine(&idx, &w, len, |i| match next {
            // the boundary sample of the next span, seen from this span
            Some(a) if i == a.start => {
                if inverse {
                    &a.to_prev_inv
                } else {
                    &a.to_prev
                }
            }
            _ => &field[i],
        });
        Ok(Anchored { matrix, anchor })
    }

    /// `Phi_j(t, a)` with `a` the anchor active at `t` (the table start when
    /// there are no interior anchors).
    pub fn phi(&self, j: usize, t: f64) -> Result<Anchored, TableError> {
        self.phi_like(j, t, false)
    }

    /// `Phi_j(t, a)^{-1}`.
    pub fn phi_inv(&self, j: usize, t: f64) -> Result<Anchored, TableError> {
        self.phi_like(j, t, true)
    }

    /// `Psi_j(t, TM)`.
    pub fn psi(&self, j: usize, t: f64) -> Result<Mat, TableError> {
        let t = self.check_range(t)?;
        let (h, s) = self.locate(t);
        let (idx, w, len) = self.stencil(h, s, 0, self.samples);
        let psi = &self.modes[j].psi;
        Ok(self.combine(&idx, &w, len, |i| &psi[i]))
    }

    /// `Phi_j(TM, a_K)' P1 Phi_j(TM, a_K)`, precomputed off-line.
    pub fn terminal_term(&self, j: usize) -> Anchored {
        let m = &self.modes[j];
        Anchored { matrix: m.terminal.clone(), anchor: m.anchors.len() - 1 }
    }

    /// `Phi_j(a_to, a_from)` for anchors `from <= to`; `None` when equal.
    pub fn anchor_chain(&self, j: usize, to: usize, from: usize) -> Option<Mat> {
        if to == from {
            return None;
        }
        let anchors = &self.modes[j].anchors;
        if to > from {
            let mut c = anchors[to].to_prev.clone();
            for k in (from + 1..to).rev() {
                c *= &anchors[k].to_prev;
            }
            Some(c)
        } else {
            let mut c = anchors[to + 1].to_prev_inv.clone();
            for k in to + 2..=from {
                c *= &anchors[k].to_prev_inv;
            }
            Some(c)
        }
    }

    /// `Phi_j(t, s) = Phi_j(t, T0) Phi_j(s, T0)^{-1}`.
    ///
    /// Off-grid, the inverse at `s` is taken of the interpolated `Phi(s)`
    /// rather than interpolated separately, so `Phi(t, t) = I` and the
    /// semigroup property hold to round-off.
    pub fn stm_between(&self, j: usize, t: f64, s: f64) -> Result<Mat, TableError> {
        let a = self.phi(j, t)?;
        let b = self.consistent_inverse(j, s)?;
        Ok(match self.anchor_chain(j, a.anchor, b.anchor) {
            Some(c) => a.matrix * c * b.matrix,
            None => a.matrix * b.matrix,
        })
    }

    fn consistent_inverse(&self, j: usize, s: f64) -> Result<Anchored, TableError> {
        let (_, frac) = self.locate(self.check_range(s)?);
        if frac <= 1e-9 || frac >= 1.0 - 1e-9 {
            return self.phi_inv(j, s);
        }
        let Anchored { matrix, anchor } = self.phi(j, s)?;
        let matrix = invert(&matrix, j, s)?;
        Ok(Anchored { matrix, anchor })
    }

    /// `Psi_j(t, s) = Psi_j(t, TM) - Phi_j(s, t)' Psi_j(s, TM) Phi_j(s, t)`
    /// for `t <= s`.
    pub fn atm_between(&self, j: usize, t: f64, s: f64) -> Result<Mat, TableError> {
        let f = self.stm_between(j, s, t)?;
        Ok(self.psi(j, t)? - f.transpose() * self.psi(j, s)? * f)
    }

    /// Largest `|Phi Phi^{-1} - I|_inf` over all stored samples.
    pub fn max_inverse_residual(&self) -> f64 {
        let eye = Mat::identity(self.n, self.n);
        self.modes
            .iter()
            .flat_map(|m| m.phi.iter().zip(&m.phi_inv))
            .map(|(p, q)| (p * q - &eye).amax())
            .fold(0.0, f64::max)
    }

    /// `Phi_j(t_a, t_b)` from raw samples `a >= b` (no interpolation).
    fn stm_samples(&self, j: usize, a: usize, b: usize) -> Mat {
        let m = &self.modes[j];
        let (ka, kb) = (self.anchor_of(j, a), self.anchor_of(j, b));
        match self.anchor_chain(j, ka, kb) {
            Some(c) => &m.phi[a] * c * &m.phi_inv[b],
            None => &m.phi[a] * &m.phi_inv[b],
        }
    }

    /// Tables for `[t0 + delta, t_m + delta]`.
    ///
    /// Existing samples are re-based with the window-shift splice
    /// `Phi(t, T0') = Phi(t, T0) Phi(T0', T0)^{-1}` and
    /// `Psi(t, TM') = Psi(t, TM) + Phi(TM, t)' Psi(TM, TM') Phi(TM, t)`;
    /// only `[TM, TM + delta]` is integrated.
    pub fn advance(&self, sys: &SwitchedLinearSystem, cost: &QuadraticCost, delta: f64) -> Result<Self, TableError> {
        if !(delta >= 0.0) || delta > self.t_m - self.t0 {
            return Err(TableError::Shift { delta });
        }
        let shift_f = delta / self.dt;
        let shift = shift_f.round() as usize;
        if (shift_f - shift as f64).abs() > 1e-6 {
            return Err(TableError::Misaligned { delta, dt: self.dt });
        }
        if shift == 0 {
            return Ok(self.clone());
        }
        let cost = cost.with_horizon(self.t0 + delta, self.t_m + delta)?;
        let n = self.n;
        let big_n = self.samples;
        let keep = big_n - shift;
        let mut next = TransitionTables {
            t0: self.t0 + delta,
            t_m: self.t_m + delta,
            modes: Vec::with_capacity(self.modes.len()),
            ..self.clone_header()
        };
        for (j, old) in self.modes.iter().enumerate() {
            // New ATM samples over [TM, TM'] and the spliced old part.
            let tail_psi = self.extension_atm(sys, &cost, j, shift)?;
            let psi_ext = &tail_psi[0];
            let mut psi = Vec::with_capacity(big_n + 1);
            for h in shift..big_n {
                let f = self.stm_samples(j, big_n, h);
                psi.push(symmetrize(&(&old.psi[h] + f.transpose() * psi_ext * &f)));
            }
            psi.extend(tail_psi.iter().cloned());

            // Re-base the span containing T0'.
            let k0 = self.anchor_of(j, shift);
            let r_inv = old.phi[shift].clone();
            let r = invert(&r_inv, j, self.time(shift))?;
            let span_end = old.anchors.get(k0 + 1).map_or(big_n + 1, |a| a.start);
            let mut phi = Vec::with_capacity(big_n + 1);
            let mut phi_inv = Vec::with_capacity(big_n + 1);
            for h in shift..=big_n {
                if h < span_end {
                    let m = &old.phi[h] * &r;
                    phi_inv.push(invert(&m, j, self.time(h))?);
                    phi.push(m);
                } else {
                    phi.push(old.phi[h].clone());
                    phi_inv.push(old.phi_inv[h].clone());
                }
            }
            let mut anchors = vec![Anchor { start: 0, to_prev: Mat::identity(n, n), to_prev_inv: Mat::identity(n, n) }];
            for (k, a) in old.anchors.iter().enumerate().skip(k0 + 1) {
                let (to_prev, to_prev_inv) = if k == k0 + 1 {
                    let m = &a.to_prev * &r;
                    let m_inv = invert(&m, j, self.time(a.start))?;
                    (m, m_inv)
                } else {
                    (a.to_prev.clone(), a.to_prev_inv.clone())
                };
                anchors.push(Anchor { start: a.start - shift, to_prev, to_prev_inv });
            }

            // Extend: integrate Phi(tau, TM) from the identity over
            // [TM, TM + delta] and map it onto the last anchor.
            let last = phi.pop().expect("at least one sample");
            phi_inv.pop();
            let (ext, ext_anchors) = next.integrate_stm(sys, j, keep, last, shift)?;
            for a in ext_anchors.into_iter().skip(1) {
                anchors.push(Anchor { start: a.start + keep, ..a });
            }
            for (h, m) in ext.into_iter().enumerate() {
                phi_inv.push(invert(&m, j, next.time(keep + h))?);
                phi.push(m);
            }
            let mut mode = ModeTable { phi, phi_inv, psi, anchors, terminal: Mat::zeros(n, n) };
            mode.terminal = terminal_term(&mode, cost.p1());
            next.modes.push(mode);
        }
        Ok(next)
    }

    /// `Psi(tau, TM + delta)` for the `shift + 1` samples covering
    /// `[TM, TM + delta]`, integrated backward from zero.
    fn extension_atm(
        &self,
        sys: &SwitchedLinearSystem,
        cost: &QuadraticCost,
        j: usize,
        shift: usize,
    ) -> Result<Vec<Mat>, TableError> {
        // Borrow the integration routine with indices relative to the
        // current window extended by `shift` samples.
        let wide = TransitionTables { samples: self.samples + shift, t_m: self.t_m + shift as f64 * self.dt, ..self.clone_header() };
        wide.integrate_atm(sys, cost, j, self.samples + shift, shift)
    }

    fn clone_header(&self) -> TransitionTables {
        TransitionTables {
            t0: self.t0,
            t_m: self.t_m,
            samples: self.samples,
            dt: self.dt,
            n: self.n,
            steps_per_sample: self.steps_per_sample,
            params: self.params,
            modes: Vec::new(),
        }
    }

    /// Largest entrywise difference between two table sets on the same grid.
    pub fn max_difference(&self, other: &TransitionTables) -> f64 {
        assert_eq!(self.samples, other.samples, "tables must share a grid");
        let mut worst = 0.0f64;
        for (a, b) in self.modes.iter().zip(&other.modes) {
            for h in 0..=self.samples {
                // compare Phi(t_h, T0) regardless of anchoring
                let pa = self.full_phi(a, h);
                let pb = other.full_phi(b, h);
                worst = worst.max((pa - pb).amax());
                worst = worst.max((&a.psi[h] - &b.psi[h]).amax());
            }
        }
        worst
    }

    fn full_phi(&self, m: &ModeTable, h: usize) -> Mat {
        let k = m.anchors.partition_point(|a| a.start <= h) - 1;
        let mut out = m.phi[h].clone();
        for a in m.anchors[1..=k].iter().rev() {
            out *= &a.to_prev;
        }
        out
    }

    pub(crate) fn from_raw(
        t0: f64,
        t_m: f64,
        n: usize,
        params: TableParams,
        modes: Vec<RawMode>,
    ) -> Result<Self, TableError> {
        let samples = params.samples;
        let dt = (t_m - t0) / samples as f64;
        let steps_per_sample = substeps(dt, params.max_step);
        let modes = modes
            .into_iter()
            .map(|r| ModeTable {
                phi: r.phi,
                phi_inv: r.phi_inv,
                psi: r.psi,
                anchors: r
                    .anchors
                    .into_iter()
                    .map(|(start, to_prev, to_prev_inv)| Anchor { start, to_prev, to_prev_inv })
                    .collect(),
                terminal: r.terminal,
            })
            .collect();
        Ok(TransitionTables { t0, t_m, samples, dt, n, steps_per_sample, params, modes })
    }

    pub(crate) fn raw_mode(&self, j: usize) -> RawModeRef<'_> {
        let m = &self.modes[j];
        RawModeRef {
            phi: &m.phi,
            phi_inv: &m.phi_inv,
            psi: &m.psi,
            anchors: m.anchors.iter().map(|a| (a.start, &a.to_prev, &a.to_prev_inv)).collect(),
            terminal: &m.terminal,
        }
    }
}

fn terminal_term(mode: &ModeTable, p1: &Mat) -> Mat {
    let f = mode.phi.last().expect("non-empty table");
    f.transpose() * p1 * f
}

pub(crate) struct RawMode {
    pub phi: Vec<Mat>,
    pub phi_inv: Vec<Mat>,
    pub psi: Vec<Mat>,
    pub anchors: Vec<(usize, Mat, Mat)>,
    pub terminal: Mat,
}

pub(crate) struct RawModeRef<'a> {
    pub phi: &'a [Mat],
    pub phi_inv: &'a [Mat],
    pub psi: &'a [Mat],
    pub anchors: Vec<(usize, &'a Mat, &'a Mat)>,
    pub terminal: &'a Mat,
}
